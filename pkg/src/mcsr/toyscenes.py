"""Procedural generator of desk-scale rendering bundles.

Scenes are shaded from multi-octave procedural albedo and bump-perturbed
normals under a directional light.  A glossy environment-reflection term adds
shading detail that the albedo/normal buffers do not explain, so guided
upsampling cannot trivially reconstruct everything from the aux planes.

Monte Carlo estimation error is modeled as zero-mean Gaussian shot noise with
per-pixel standard deviation ``k * sqrt(max(L, eps)) / sqrt(spp)`` where L is
the pixel luminance.  The noisy estimate is clamped at zero (radiance is
non-negative); albedo values are kept in [0.25, 0.9] and shading has an
ambient floor so the clamp bias stays far below the noise scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .data_io import FeatureMap, RenderingSample, save_sample

NOISE_GAIN = 0.25  # k
NOISE_FLOOR = 1e-4  # eps inside sqrt(max(L, eps))
AUX_NOISE_FACTOR = 0.1  # aux buffers converge much faster than radiance
GROUND_TRUTH_SPP = 4000  # sentinel: aux at >= this spp is noise-free

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])  # Rec. 709

ALBEDO_LO, ALBEDO_HI = 0.25, 0.9
AMBIENT = 0.3

VALID_DIVISORS = (1, 2, 4, 8)


@dataclass
class SceneSpec:
    """Parameters of one procedural scene."""

    seed: int
    resolution: Tuple[int, int] = (96, 96)
    texture_octaves: int = 5
    geometry_bumps: int = 3
    light_direction: Tuple[float, float, float] = (0.3, -0.5, 0.8)
    noise_model: str = "gaussian-shot"
    fireflies: bool = False  # inject 10x outliers in ~0.01% of pixels

    def validate(self):
        h, w = self.resolution
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ValueError(f"resolution must be divisible by 8, got {h}x{w}")
        if self.texture_octaves < 0 or self.geometry_bumps < 0:
            raise ValueError("texture_octaves and geometry_bumps must be >= 0")
        if abs(np.linalg.norm(self.light_direction)) < 1e-8:
            raise ValueError("light_direction must be a nonzero vector")
        if self.noise_model != "gaussian-shot":
            raise ValueError(f"unknown noise model '{self.noise_model}'")


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 709 luminance of a 3 x H x W array."""
    return np.tensordot(LUMA_WEIGHTS, rgb, axes=(0, 0))


def box_downsample(values: np.ndarray, divisor: int) -> np.ndarray:
    """Average non-overlapping divisor x divisor blocks of a C x H x W array."""
    if divisor == 1:
        return values.copy()
    c, h, w = values.shape
    if h % divisor or w % divisor:
        raise ValueError(f"dims {h}x{w} not divisible by {divisor}")
    return values.reshape(c, h // divisor, divisor, w // divisor, divisor).mean(axis=(2, 4))


def _value_noise(rng: np.random.Generator, shape: Tuple[int, int], octaves: int) -> np.ndarray:
    """Multi-octave bilinear value noise in [0, 1]; constant when octaves == 0."""
    h, w = shape
    if octaves == 0:
        return np.full((h, w), rng.random())
    field = np.zeros((h, w))
    total = 0.0
    for o in range(octaves):
        cells = 4 * 2**o
        amp = 0.5**o
        grid = rng.random((cells + 1, cells + 1))
        field += amp * _bilinear_grid(grid, h, w)
        total += amp
    return field / total


def _bilinear_grid(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gy, gx = grid.shape[0] - 1, grid.shape[1] - 1
    ys = (np.arange(h) + 0.5) / h * gy
    xs = (np.arange(w) + 0.5) / w * gx
    y0 = np.minimum(ys.astype(int), gy - 1)
    x0 = np.minimum(xs.astype(int), gx - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (
        g00 * (1 - ty) * (1 - tx)
        + g01 * (1 - ty) * tx
        + g10 * ty * (1 - tx)
        + g11 * ty * tx
    )


def render_clean(spec: SceneSpec) -> Tuple[FeatureMap, FeatureMap]:
    """Render the converged image and its albedo/normal buffers.

    Deterministic per spec.seed.  Albedo stays within [0.25, 0.9], normals are
    unit length per pixel, and the shaded image includes a glossy reflection
    of a procedural environment that the aux buffers do not contain.
    """
    spec.validate()
    h, w = spec.resolution
    rng = np.random.default_rng(spec.seed)

    # Two-material albedo: a sharpened noise field switches between two
    # well-separated colors (material edges survive at pixel scale), plus a
    # low-amplitude independent detail field per channel.
    base = _value_noise(rng, (h, w), spec.texture_octaves)
    boundary = 1.0 / (1.0 + np.exp(-14.0 * (base - 0.5)))
    color_a = rng.uniform(ALBEDO_LO, 0.5, size=3)
    color_b = rng.uniform(0.65, ALBEDO_HI, size=3)
    if rng.random() < 0.5:
        color_a, color_b = color_b, color_a
    albedo = color_a[:, None, None] * (1 - boundary) + color_b[:, None, None] * boundary
    detail = np.stack(
        [_value_noise(rng, (h, w), spec.texture_octaves) for _ in range(3)]
    )
    albedo = np.clip(albedo + 0.2 * (detail - 0.5), ALBEDO_LO, ALBEDO_HI)

    # Height field -> normals. Bump amplitude is resolution-independent.
    if spec.geometry_bumps > 0:
        height_field = _value_noise(rng, (h, w), spec.geometry_bumps)
        dy, dx = np.gradient(height_field)
        slope = 3.0
        normal = np.stack([-slope * dx * w / 64.0, -slope * dy * h / 64.0, np.ones((h, w))])
        normal /= np.linalg.norm(normal, axis=0, keepdims=True)
    else:
        normal = np.stack([np.zeros((h, w)), np.zeros((h, w)), np.ones((h, w))])

    light = np.asarray(spec.light_direction, dtype=float)
    light /= np.linalg.norm(light)
    n_dot_l = np.clip(np.tensordot(light, normal, axes=(0, 0)), 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * n_dot_l

    # Mirror-like reflection of a high-frequency environment, gated to glossy
    # patches; tiny normal changes move the reflected ray a lot, which is the
    # part of the shading that albedo/normal cannot explain.
    view = np.array([0.0, 0.0, 1.0])
    n_dot_v = np.tensordot(view, normal, axes=(0, 0))
    refl = 2.0 * n_dot_v[None] * normal - view[:, None, None]
    freqs = rng.uniform(18.0, 42.0, size=4)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    env = 0.5 + 0.5 * np.sin(freqs[0] * refl[0] + freqs[1] * refl[1] + phase[0]) * np.cos(
        freqs[2] * refl[0] - freqs[3] * refl[1] + phase[1]
    )
    gloss = np.clip((_value_noise(rng, (h, w), 2) - 0.55) / 0.3, 0.0, 1.0)
    half = light + view
    half /= np.linalg.norm(half)
    highlight = np.clip(np.tensordot(half, normal, axes=(0, 0)), 0.0, None) ** 32
    specular = gloss * (0.3 * env**3 + 0.2 * highlight)

    hr_rgb = albedo * shade[None] + specular[None]
    aux = np.concatenate([albedo, normal], axis=0)
    return FeatureMap(hr_rgb), FeatureMap(aux)


def _shot_noise_std(values: np.ndarray, spp: float, gain: float) -> np.ndarray:
    lum = luminance(values)
    return gain * np.sqrt(np.maximum(lum, NOISE_FLOOR)) / np.sqrt(spp)


def render_noisy(
    spec: SceneSpec, spp: int, resolution_divisor: int, sample_seed: int
) -> FeatureMap:
    """Simulate rendering at reduced resolution and finite spp.

    The clean image is box-averaged by ``resolution_divisor`` first (the low
    resolution render is an independent render, not a downsample of a noisy
    one), then zero-mean Gaussian shot noise is added and the result clamped
    at zero.
    """
    if spp < 1:
        raise ValueError(f"spp must be >= 1, got {spp}")
    if resolution_divisor not in VALID_DIVISORS:
        raise ValueError(f"divisor must be one of {VALID_DIVISORS}, got {resolution_divisor}")
    clean, _ = render_clean(spec)
    down = box_downsample(clean.values.astype(np.float64), resolution_divisor)
    rng = np.random.default_rng(sample_seed)
    std = _shot_noise_std(down, spp, NOISE_GAIN)
    noisy = down + std[None] * rng.standard_normal(down.shape)
    if spec.fireflies:
        hot = rng.random(noisy.shape[1:]) < 1e-4
        noisy[:, hot] *= 10.0
    return FeatureMap(np.maximum(noisy, 0.0))


def _noisy_aux(aux: np.ndarray, spp: int, rng: np.random.Generator) -> np.ndarray:
    """Shot noise for the aux buffers: same law at 0.1x gain, per plane group,
    using the group's mean absolute value as the brightness proxy; clamped
    back to the valid albedo/normal ranges."""
    if spp >= GROUND_TRUTH_SPP:
        return aux.copy()
    out = aux.astype(np.float64).copy()
    gain = AUX_NOISE_FACTOR * NOISE_GAIN
    for lo, hi, vmin, vmax in ((0, 3, 0.0, 1.0), (3, 6, -1.0, 1.0)):
        group = out[lo:hi]
        mag = np.abs(group).mean(axis=0)
        std = gain * np.sqrt(np.maximum(mag, NOISE_FLOOR)) / np.sqrt(spp)
        group += std[None] * rng.standard_normal(group.shape)
        out[lo:hi] = np.clip(group, vmin, vmax)
    return out


def make_dataset(
    n_scenes: int,
    spec_template: SceneSpec,
    out_dir,
    scale: int,
    spp_lr: int,
    spp_aux: int,
    seed: int,
) -> Path:
    """Render and save ``n_scenes`` bundles plus a manifest; returns the
    manifest path.

    Scene i uses seed ``seed ^ i``; the split is train/val/test = 80/10/10 by
    scene index.  ``spp_aux >= 4000`` disables aux noise (ground-truth
    buffers).
    """
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = int(0.8 * n_scenes)
    n_val = int(0.9 * n_scenes) - n_train
    entries = []
    for i in range(n_scenes):
        scene_seed = seed ^ i
        spec = replace(spec_template, seed=scene_seed)
        hr, aux_clean = render_clean(spec)
        lr = render_noisy(spec, spp_lr, scale, sample_seed=scene_seed)
        aux_rng = np.random.default_rng([scene_seed, 0xA0])
        aux = FeatureMap(_noisy_aux(aux_clean.values, spp_aux, aux_rng))
        sample = RenderingSample(
            lr_rgb=lr, aux=aux, hr_rgb=hr, spp_lr=spp_lr, spp_aux=spp_aux, scale=scale
        )
        name = f"scene_{i:04d}"
        save_sample(sample, out_dir / name)
        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"
        entries.append(
            {"path": name, "split": split, "scale": scale, "spp_lr": spp_lr, "spp_aux": spp_aux}
        )
    manifest = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(entries, indent=2) + "\n")
    os.replace(tmp, manifest)
    return manifest


def load_manifest(manifest_path) -> list:
    """Read a dataset manifest, resolving sample paths against its directory."""
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    for entry in entries:
        entry["path"] = str(manifest_path.parent / entry["path"])
    return entries
