"""Training loss, evaluation metrics, color conversion, bicubic baseline.

PSNR is computed in sRGB after clamping to [0, 1] (peak 1.0, continuous
values, no 8-bit quantization); RelMSE is computed in the scene-linear
domain with an epsilon-regularized reference normalizer.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

SRGB_KNEE = 0.0031308
RELMSE_EPS = 0.01
CATMULL_ROM_A = -0.5


def robust_loss(sr: torch.Tensor, hr: torch.Tensor, beta: float = 0.1) -> torch.Tensor:
    """Bounded reconstruction loss: mean of |d| / (beta + |d|).

    Each entry contributes at most 1 no matter how large the error, so a few
    abnormally bright pixels (fireflies) cannot dominate training.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = (hr - sr).abs()
    return (d / (beta + d)).mean()


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    """Scene-linear [clamped to 0..1] to sRGB-encoded values."""
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= SRGB_KNEE, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`linear_to_srgb` on [0, 1]."""
    v = np.clip(v, 0.0, 1.0)
    return np.where(v <= 12.92 * SRGB_KNEE, v / 12.92, np.power((v + 0.055) / 1.055, 2.4))


def srgb_mse(sr: np.ndarray, hr: np.ndarray) -> float:
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    d = linear_to_srgb(np.asarray(sr, dtype=np.float64)) - linear_to_srgb(
        np.asarray(hr, dtype=np.float64)
    )
    return float(np.mean(d * d))


def psnr_srgb(sr: np.ndarray, hr: np.ndarray) -> float:
    """PSNR in dB over sRGB-encoded values, peak 1.0; +inf for identical images."""
    mse = srgb_mse(sr, hr)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def relmse(sr: np.ndarray, hr: np.ndarray, eps: float = RELMSE_EPS) -> float:
    """Relative MSE in scene-linear values: mean (sr-hr)^2 / (hr^2 + eps).

    The prediction is clamped at zero (non-negative radiance); the reference
    is used as-is.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    sr = np.maximum(np.asarray(sr, dtype=np.float64), 0.0)
    hr = np.asarray(hr, dtype=np.float64)
    return float(np.mean((sr - hr) ** 2 / (hr**2 + eps)))


def _cubic_kernel(d: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    d = np.abs(d)
    near = (a + 2) * d**3 - (a + 3) * d**2 + 1
    far = a * (d**3 - 5 * d**2 + 8 * d - 4)
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _resample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Dense (n_in*factor, n_in) matrix applying the Catmull-Rom kernel along
    one axis with an align-corners-false grid and edge replication."""
    n_out = n_in * factor
    out = np.zeros((n_out, n_in))
    x = (np.arange(n_out) + 0.5) / factor - 0.5
    j = np.floor(x).astype(int)
    t = x - j
    for tap in range(-1, 3):
        w = _cubic_kernel(t - tap)
        src = np.clip(j + tap, 0, n_in - 1)
        np.add.at(out, (np.arange(n_out), src), w)
    return out


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) upsampling of a C x H x W array."""
    if scale not in (2, 4, 8):
        raise ValueError(f"scale must be 2, 4 or 8, got {scale}")
    lr = np.asarray(lr, dtype=np.float64)
    c, h, w = lr.shape
    m_h = _resample_matrix(h, scale)
    m_w = _resample_matrix(w, scale)
    out = np.einsum("ij,cjk,lk->cil", m_h, lr, m_w)
    return out.astype(np.float32)


def spp_average(spp_lr: int, spp_aux: int, scale: int) -> float:
    """Overall sampling cost: spp_lr / scale^2 + spp_aux."""
    if spp_lr < 1 or spp_aux < 1 or scale < 1:
        raise ValueError("spp_lr, spp_aux and scale must be positive")
    return spp_lr / scale**2 + spp_aux


@dataclass
class ImageMetrics:
    name: str
    psnr_db: float
    relmse: float
    bicubic_psnr_db: Optional[float] = None
    bicubic_relmse: Optional[float] = None
    srgb_mse: Optional[float] = None
    bicubic_srgb_mse: Optional[float] = None


@dataclass
class MetricsReport:
    """Per-image and aggregate quality numbers plus provenance."""

    images: List[ImageMetrics]
    context: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        if not self.images:
            raise ValueError("empty report")
        for im in self.images:
            if math.isinf(im.psnr_db) or (
                im.bicubic_psnr_db is not None and math.isinf(im.bicubic_psnr_db)
            ):
                raise ValueError(
                    f"image '{im.name}' is identical to the reference; "
                    "infinite PSNR cannot be averaged"
                )
        agg = {
            "psnr_db": float(np.mean([im.psnr_db for im in self.images])),
            "relmse": float(np.mean([im.relmse for im in self.images])),
        }
        mses = [im.srgb_mse for im in self.images]
        if all(m is not None for m in mses):
            agg["psnr_db_pooled"] = 10.0 * math.log10(1.0 / float(np.mean(mses)))
        if all(im.bicubic_psnr_db is not None for im in self.images):
            agg["bicubic_psnr_db"] = float(np.mean([im.bicubic_psnr_db for im in self.images]))
            agg["bicubic_relmse"] = float(np.mean([im.bicubic_relmse for im in self.images]))
        return agg

    def to_dict(self) -> dict:
        try:
            agg = self.aggregate()
        except ValueError as e:
            agg = {"error": str(e)}
        return {
            "context": self.context,
            "images": [vars(im).copy() for im in self.images],
            "aggregate": agg,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json() + "\n")
        os.replace(tmp, path)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        images = []
        for entry in d["images"]:
            entry = {k: v for k, v in entry.items() if k in ImageMetrics.__dataclass_fields__}
            images.append(ImageMetrics(**entry))
        return cls(images=images, context=dict(d["context"]))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def to_table(self) -> str:
        header = f"{'image':<14}{'psnr(dB)':>10}{'relmse':>10}{'bicubic':>10}{'relmse':>10}"
        lines = [header, "-" * len(header)]
        for im in self.images:
            bic = "-" if im.bicubic_psnr_db is None else f"{im.bicubic_psnr_db:10.3f}"
            bicr = "-" if im.bicubic_relmse is None else f"{im.bicubic_relmse:10.5f}"
            lines.append(
                f"{im.name:<14}{im.psnr_db:10.3f}{im.relmse:10.5f}{bic:>10}{bicr:>10}"
            )
        lines.append("-" * len(header))
        try:
            agg = self.aggregate()
            bic = f"{agg['bicubic_psnr_db']:10.3f}" if "bicubic_psnr_db" in agg else "-"
            bicr = f"{agg['bicubic_relmse']:10.5f}" if "bicubic_relmse" in agg else "-"
            lines.append(
                f"{'mean':<14}{agg['psnr_db']:10.3f}{agg['relmse']:10.5f}{bic:>10}{bicr:>10}"
            )
        except ValueError as e:
            lines.append(f"mean: unavailable ({e})")
        ctx = {k: self.context[k] for k in sorted(self.context)}
        lines.append(f"context: {ctx}")
        return "\n".join(lines)
