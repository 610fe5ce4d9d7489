"""Sample bundles and their on-disk format.

A sample directory holds one raw little-endian float32 file per image plane
plus a ``meta.json`` sidecar:

    <sample>/meta.json
    <sample>/lr_rgb.f32     3 x H/s x W/s   scene-linear radiance, high spp
    <sample>/aux.f32        6 x H x W       albedo RGB then normal XYZ
    <sample>/hr_rgb.f32     3 x H x W       ground-truth radiance (optional)

Payloads are C-order (channel, row, column) and round-trip bit-exactly,
including subnormal values.  Normals are stored as rendered, in camera
space, without renormalization.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
VALID_SCALES = (1, 2, 4, 8)

RGB_CHANNELS = ("r", "g", "b")
AUX_CHANNELS = ("albedo_r", "albedo_g", "albedo_b", "normal_x", "normal_y", "normal_z")


@dataclass
class FeatureMap:
    """Dense C x H x W float32 grid; the unit of inter-module data flow."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be C x H x W, got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"feature map dimensions must be positive, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class RenderingSample:
    """One scene's bundle: noisy low-res radiance, high-res aux buffers,
    optional ground truth, and the sampling metadata that produced them."""

    lr_rgb: FeatureMap
    aux: FeatureMap
    spp_lr: int
    spp_aux: int
    scale: int
    hr_rgb: Optional[FeatureMap] = None

    def validate(self):
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.spp_lr < 1 or self.spp_aux < 1:
            raise ValueError(f"spp must be positive, got lr={self.spp_lr} aux={self.spp_aux}")
        if self.lr_rgb.channels != 3:
            raise ValueError(f"lr_rgb must have 3 channels, got {self.lr_rgb.channels}")
        if self.aux.channels != 6:
            raise ValueError(f"aux must have 6 channels, got {self.aux.channels}")
        if (self.aux.height, self.aux.width) != (
            self.scale * self.lr_rgb.height,
            self.scale * self.lr_rgb.width,
        ):
            raise ValueError(
                f"aux dims {self.aux.height}x{self.aux.width} must be "
                f"{self.scale}x the lr dims {self.lr_rgb.height}x{self.lr_rgb.width}"
            )
        if self.hr_rgb is not None:
            if self.hr_rgb.channels != 3:
                raise ValueError(f"hr_rgb must have 3 channels, got {self.hr_rgb.channels}")
            if (self.hr_rgb.height, self.hr_rgb.width) != (self.aux.height, self.aux.width):
                raise ValueError(
                    f"hr_rgb dims {self.hr_rgb.height}x{self.hr_rgb.width} must match "
                    f"aux dims {self.aux.height}x{self.aux.width}"
                )
        for name, plane in self._planes().items():
            if not np.isfinite(plane.values).all():
                raise ValueError(f"non-finite values in plane '{name}'")
        albedo = self.aux.values[:3]
        if albedo.min() < 0.0 or albedo.max() > 1.0:
            raise ValueError("albedo channels must lie in [0, 1]")
        normal = self.aux.values[3:]
        if normal.min() < -1.0 or normal.max() > 1.0:
            raise ValueError("normal channels must lie in [-1, 1]")

    def _planes(self) -> dict:
        planes = {"lr_rgb": self.lr_rgb, "aux": self.aux}
        if self.hr_rgb is not None:
            planes["hr_rgb"] = self.hr_rgb
        return planes


@dataclass
class PatchBatch:
    """Aligned training crops: hr/aux patches of size p, lr patches of size p/s.

    Crop origins are pixel-aligned: the hr/aux origin is ``scale`` times the
    lr origin, so patch (y, x) in aux equals source pixel (Y0+y, X0+x).
    """

    lr: np.ndarray  # (n, 3, p/s, p/s)
    aux: np.ndarray  # (n, 6, p, p)
    hr: np.ndarray  # (n, 3, p, p)
    patch_size: int
    scale: int
    lr_origins: np.ndarray  # (n, 2) as (y, x) on the lr grid

    def __len__(self) -> int:
        return self.lr.shape[0]


def _write_plane(path: Path, values: np.ndarray):
    data = np.ascontiguousarray(values, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read_plane(path: Path, name: str, shape: tuple) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing plane file '{name}': {path}")
    data = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise ValueError(
            f"plane '{name}': payload is {len(data)} bytes, expected {expected} for shape {shape}"
        )
    values = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    if not np.isfinite(values).all():
        raise ValueError(f"non-finite values in plane '{name}'")
    return values


def save_sample(sample: RenderingSample, path) -> None:
    """Write one sample directory (raw float32 planes + meta.json sidecar)."""
    sample.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "height": sample.aux.height,
        "width": sample.aux.width,
        "scale": sample.scale,
        "spp_lr": sample.spp_lr,
        "spp_aux": sample.spp_aux,
        "channels": {
            "lr_rgb": list(RGB_CHANNELS),
            "aux": list(AUX_CHANNELS),
        },
    }
    _write_plane(path / "lr_rgb.f32", sample.lr_rgb.values)
    _write_plane(path / "aux.f32", sample.aux.values)
    if sample.hr_rgb is not None:
        meta["channels"]["hr_rgb"] = list(RGB_CHANNELS)
        _write_plane(path / "hr_rgb.f32", sample.hr_rgb.values)
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / "meta.json")


def load_sample(path) -> RenderingSample:
    """Load and validate a sample directory written by :func:`save_sample`."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing sidecar: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported schema_version {meta.get('schema_version')} in {meta_path}"
        )
    scale = int(meta["scale"])
    if scale not in VALID_SCALES:
        raise ValueError(f"invalid scale {scale} in {meta_path}")
    height, width = int(meta["height"]), int(meta["width"])
    if height % scale or width % scale:
        raise ValueError(f"dims {height}x{width} not divisible by scale {scale}")
    lr = _read_plane(path / "lr_rgb.f32", "lr_rgb", (3, height // scale, width // scale))
    aux = _read_plane(path / "aux.f32", "aux", (6, height, width))
    hr = None
    if "hr_rgb" in meta["channels"]:
        hr = _read_plane(path / "hr_rgb.f32", "hr_rgb", (3, height, width))
    sample = RenderingSample(
        lr_rgb=FeatureMap(lr),
        aux=FeatureMap(aux),
        hr_rgb=None if hr is None else FeatureMap(hr),
        spp_lr=int(meta["spp_lr"]),
        spp_aux=int(meta["spp_aux"]),
        scale=scale,
    )
    sample.validate()
    return sample


def extract_patches(sample: RenderingSample, patch_size: int, count: int, seed: int) -> PatchBatch:
    """Draw ``count`` aligned random crops, uniform over valid origins.

    Deterministic for a given (sample, seed) regardless of thread count.
    """
    s = sample.scale
    if patch_size % s:
        raise ValueError(f"patch size {patch_size} not divisible by scale {s}")
    if sample.hr_rgb is None:
        raise ValueError("sample has no hr_rgb plane; ground truth required for patches")
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    lr_patch = patch_size // s
    lr_h, lr_w = sample.lr_rgb.height, sample.lr_rgb.width
    if lr_h < lr_patch or lr_w < lr_patch:
        raise ValueError(
            f"image ({s * lr_h}x{s * lr_w}) smaller than patch size {patch_size}"
        )
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, lr_h - lr_patch + 1, size=count)
    xs = rng.integers(0, lr_w - lr_patch + 1, size=count)

    lr = np.empty((count, 3, lr_patch, lr_patch), dtype=np.float32)
    aux = np.empty((count, 6, patch_size, patch_size), dtype=np.float32)
    hr = np.empty((count, 3, patch_size, patch_size), dtype=np.float32)
    for i, (y, x) in enumerate(zip(ys, xs)):
        lr[i] = sample.lr_rgb.values[:, y : y + lr_patch, x : x + lr_patch]
        hy, hx = s * y, s * x
        aux[i] = sample.aux.values[:, hy : hy + patch_size, hx : hx + patch_size]
        hr[i] = sample.hr_rgb.values[:, hy : hy + patch_size, hx : hx + patch_size]
    return PatchBatch(
        lr=lr,
        aux=aux,
        hr=hr,
        patch_size=patch_size,
        scale=s,
        lr_origins=np.stack([ys, xs], axis=1),
    )
