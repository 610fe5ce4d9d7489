"""Full guided super-resolution network and its checkpoint format.

The network has a shallow conv head on the low-resolution radiance, a stack
of guided groups that fuse per-stage guidance maps from the auxiliary branch,
a long skip back to the shallow features, and a pixel-shuffle upscale head.

Checkpoints are ZIP containers (stored, fixed timestamps, so identical
parameters produce identical bytes) holding a JSON header with the config and
one little-endian float32 blob per parameter, named by module path.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .attention import Mlp, WindowCrossAttention, WindowSelfAttention
from .aux_branch import AuxiliaryBranch, pixel_shuffle
from .data_io import VALID_SCALES
from .rdst import DenseSwinBlock, GuidedGroup

CHECKPOINT_VERSION = 1

AUX_INPUT_MODES = ("both", "albedo", "normal", "none")


@dataclass
class ModelConfig:
    """Every architectural hyperparameter of the network."""

    scale: int = 4
    groups: int = 3  # guided groups consuming one guidance map each
    blocks_per_group: int = 5  # dense blocks per group
    layers_per_block: int = 4  # dense attention layers per block
    channels: int = 64  # low-resolution branch width
    aux_channels: int = 32  # auxiliary branch width
    guidance_channels: int = 64  # guidance map width after projection
    growth: int = 32  # channels contributed by each dense layer
    window: int = 8
    heads: int = 4
    mlp_ratio: float = 3.0
    aux_inputs: str = "both"  # which aux planes the model consumes

    def validate(self):
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        for name in (
            "groups",
            "blocks_per_group",
            "layers_per_block",
            "channels",
            "aux_channels",
            "guidance_channels",
            "growth",
            "window",
            "heads",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.channels % self.heads:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.aux_inputs not in AUX_INPUT_MODES:
            raise ValueError(
                f"aux_inputs must be one of {AUX_INPUT_MODES}, got '{self.aux_inputs}'"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def paper_profile(scale: int = 4, **overrides) -> ModelConfig:
    """Full-size configuration (the documented canonical profile)."""
    return replace(ModelConfig(scale=scale), **overrides)


def small_profile(scale: int = 4, **overrides) -> ModelConfig:
    """Desk-scale configuration for end-to-end experiments."""
    cfg = ModelConfig(
        scale=scale,
        groups=2,
        blocks_per_group=2,
        layers_per_block=2,
        channels=32,
        aux_channels=16,
        guidance_channels=32,
        growth=16,
        window=8,
        heads=4,
    )
    return replace(cfg, **overrides)


def micro_profile(scale: int = 2, **overrides) -> ModelConfig:
    """Smallest differentiable configuration, for gradient checks and smoke runs."""
    cfg = ModelConfig(
        scale=scale,
        groups=1,
        blocks_per_group=1,
        layers_per_block=1,
        channels=8,
        aux_channels=8,
        guidance_channels=8,
        growth=8,
        window=4,
        heads=2,
        mlp_ratio=2.0,
    )
    return replace(cfg, **overrides)


def mask_aux_planes(aux: torch.Tensor, mode: str) -> torch.Tensor:
    """Zero out aux planes the model is configured not to consume."""
    if mode == "both":
        return aux
    if mode == "none":
        return torch.zeros_like(aux)
    out = aux.clone()
    if mode == "albedo":
        out[:, 3:6] = 0.0
    elif mode == "normal":
        out[:, 0:3] = 0.0
    else:
        raise ValueError(f"unknown aux input mode '{mode}'")
    return out


class GuidedSRNet(nn.Module):
    """Super-resolves low-resolution radiance guided by albedo/normal buffers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        self.aux_branch = AuxiliaryBranch(
            in_channels=6,
            channels=config.aux_channels,
            stages=config.groups,
            scale=config.scale,
            guidance_channels=config.guidance_channels,
        )
        self.head = nn.Conv2d(3, c, 3, padding=1)
        self.groups = nn.ModuleList(
            GuidedGroup(
                dim=c,
                kv_dim=config.guidance_channels,
                blocks=config.blocks_per_group,
                layers=config.layers_per_block,
                growth=config.growth,
                window=config.window,
                heads=config.heads,
                mlp_ratio=config.mlp_ratio,
            )
            for _ in range(config.groups)
        )
        if config.scale > 1:
            self.pre_shuffle = nn.Conv2d(c, 3 * config.scale**2, 1)
            self.tail = nn.Conv2d(3, 3, 3, padding=1)
        else:
            self.tail = nn.Conv2d(c, 3, 3, padding=1)
        init_weights(self)

    def forward(self, lr_rgb: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        s = self.config.scale
        if lr_rgb.ndim != 4 or aux.ndim != 4:
            raise ValueError("inputs must be batched (B, C, H, W) tensors")
        expected = (s * lr_rgb.shape[-2], s * lr_rgb.shape[-1])
        if tuple(aux.shape[-2:]) != expected:
            raise ValueError(
                f"aux dims {tuple(aux.shape[-2:])} do not match scale x lr dims {expected}"
            )
        aux = mask_aux_planes(aux, self.config.aux_inputs)
        guidance = self.aux_branch(aux)
        f0 = self.head(lr_rgb)
        feat = f0
        for group, g in zip(self.groups, guidance):
            feat = group(feat, g)
        feat = feat + f0
        if s > 1:
            out = self.tail(pixel_shuffle(self.pre_shuffle(feat), s))
        else:
            out = self.tail(feat)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in network output")
        return out


def init_weights(model: nn.Module):
    """Truncated-normal attention/MLP weights, Kaiming convs, and zeroed
    residual-tail projections so the network starts near the identity."""
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Conv2d):
            nn.init.kaiming_uniform_(module.weight, a=math.sqrt(5))
            nn.init.zeros_(module.bias)
    for module in model.modules():
        if isinstance(module, (WindowSelfAttention, WindowCrossAttention)):
            nn.init.zeros_(module.proj.weight)
            nn.init.zeros_(module.proj.bias)
        elif isinstance(module, Mlp):
            nn.init.zeros_(module.fc2.weight)
            nn.init.zeros_(module.fc2.bias)
        elif isinstance(module, DenseSwinBlock):
            nn.init.zeros_(module.fuse.weight)
            nn.init.zeros_(module.fuse.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: GuidedSRNet, path) -> None:
    """Write a versioned checkpoint; identical parameters give identical bytes."""
    path = Path(path)
    state = model.state_dict()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: list(t.shape) for name, t in state.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_zipinfo("meta.json"), json.dumps(meta, indent=2, sort_keys=True))
        for name, tensor in state.items():
            blob = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes()
            zf.writestr(_zipinfo(f"params/{name}"), blob)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def _zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    return info


def load_checkpoint(path, expected_scale: int | None = None) -> GuidedSRNet:
    """Reconstruct a model from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint version {meta.get('format_version')} in {path}"
                )
            config = ModelConfig.from_dict(meta["config"])
            if expected_scale is not None and config.scale != expected_scale:
                raise ValueError(
                    f"checkpoint scale {config.scale} does not match requested "
                    f"scale {expected_scale}"
                )
            state = {}
            for name, shape in meta["params"].items():
                blob = zf.read(f"params/{name}")
                expected_bytes = int(np.prod(shape)) * 4 if shape else 4
                if len(blob) != expected_bytes:
                    raise ValueError(f"checkpoint blob '{name}' has wrong size")
                arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
                state[name] = torch.from_numpy(arr)
    except (zipfile.BadZipFile, KeyError) as e:
        raise ValueError(f"corrupt or incomplete checkpoint {path}: {e}") from e
    model = GuidedSRNet(config)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def load_weights_for_finetune(model: GuidedSRNet, path) -> tuple[list, list]:
    """Copy all shape-compatible parameters from a checkpoint into ``model``.

    Supports warm-starting a model at a different scale: parameters whose
    names or shapes do not match (the upscale head, the aux projections) are
    skipped.  Returns (loaded, skipped) name lists.
    """
    donor = load_checkpoint(path)
    donor_state = donor.state_dict()
    state = model.state_dict()
    loaded, skipped = [], []
    for name, tensor in state.items():
        if name in donor_state and donor_state[name].shape == tensor.shape:
            state[name] = donor_state[name]
            loaded.append(name)
        else:
            skipped.append(name)
    model.load_state_dict(state, strict=True)
    return loaded, skipped
