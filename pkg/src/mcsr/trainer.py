"""Optimization loop, validation, evaluation, and the ablation driver.

Training is fully deterministic for a given (seed, config, dataset) under
single-plan execution (one compute thread, fixed batch order); all random
streams derive from the config seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import metrics
from .data_io import RenderingSample, extract_patches, load_sample
from .model import (
    GuidedSRNet,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    load_weights_for_finetune,
    save_checkpoint,
)
from .toyscenes import load_manifest


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters and bookkeeping for one training run.

    Canonical full-scale values are lr=1e-4, batch 16, patch 256, 400 epochs;
    the defaults here are the desk-scale profile.
    """

    manifest: str = ""
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 8
    patch_size: int = 64
    crops_per_image: int = 8
    seed: int = 0
    val_interval_epochs: int = 1
    early_stop_patience: Optional[int] = None
    grad_clip: Optional[float] = None
    init_checkpoint: Optional[str] = None

    def validate(self):
        self.model.validate()
        if not self.manifest:
            raise ValueError("manifest path is required")
        for name in ("batch_size", "epochs", "patch_size", "crops_per_image", "val_interval_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.patch_size % (self.model.scale * self.model.window):
            raise ValueError(
                f"patch size {self.patch_size} must be divisible by "
                f"scale*window = {self.model.scale * self.model.window}"
            )

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items() if k != "model"}
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_psnr: float
    steps: int


def single_plan():
    """Pin the execution plan so reductions are bitwise reproducible."""
    torch.set_num_threads(1)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _load_split(manifest_path, split: str) -> Tuple[List[RenderingSample], List[str], dict]:
    entries = [e for e in load_manifest(manifest_path) if e["split"] == split]
    if not entries:
        raise ValueError(f"split '{split}' is empty in {manifest_path}")
    samples = [load_sample(e["path"]) for e in entries]
    names = [Path(e["path"]).name for e in entries]
    return samples, names, entries[0]


def _full_image_forward(model: GuidedSRNet, sample: RenderingSample) -> np.ndarray:
    """Full-frame inference; window padding happens inside the attention ops
    (reflect), so any scale-divisible image size is accepted."""
    lr = torch.from_numpy(sample.lr_rgb.values).unsqueeze(0)
    aux = torch.from_numpy(sample.aux.values).unsqueeze(0)
    with torch.no_grad():
        sr = model(lr, aux)
    return sr.squeeze(0).numpy()


def _mean_val_psnr(model: GuidedSRNet, samples: List[RenderingSample]) -> float:
    vals = []
    for s in samples:
        sr = _full_image_forward(model, s)
        vals.append(metrics.psnr_srgb(sr, s.hr_rgb.values))
    return float(np.mean(vals))


def train(cfg: TrainConfig) -> TrainResult:
    """Run the optimization loop; returns checkpoint and log paths.

    Saves the best-by-validation-PSNR checkpoint and the last checkpoint, and
    appends JSON-lines records {step, epoch, loss, lr} (plus val_psnr on
    validation steps) to ``train_log.jsonl``.
    """
    cfg.validate()
    single_plan()
    torch.manual_seed(cfg.seed)

    train_samples, _, first = _load_split(cfg.manifest, "train")
    val_samples, _, _ = _load_split(cfg.manifest, "val")
    if first["scale"] != cfg.model.scale:
        raise ValueError(
            f"dataset scale {first['scale']} does not match model scale {cfg.model.scale}"
        )

    model = GuidedSRNet(cfg.model)
    if cfg.init_checkpoint:
        load_weights_for_finetune(model, cfg.init_checkpoint)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "checkpoint_best.zip"
    last_path = out_dir / "checkpoint_last.zip"
    (out_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    best_val = -math.inf
    step = 0
    epochs_since_best = 0
    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            lrs, auxs, hrs, provenance = [], [], [], []
            for img_idx, sample in enumerate(train_samples):
                batch = extract_patches(
                    sample,
                    cfg.patch_size,
                    cfg.crops_per_image,
                    seed=_derive_seed(cfg.seed, epoch, img_idx),
                )
                lrs.append(batch.lr)
                auxs.append(batch.aux)
                hrs.append(batch.hr)
                provenance.extend((img_idx, int(y), int(x)) for y, x in batch.lr_origins)
            lr_all = np.concatenate(lrs)
            aux_all = np.concatenate(auxs)
            hr_all = np.concatenate(hrs)
            order = np.random.default_rng(_derive_seed(cfg.seed, epoch, 0xF00D)).permutation(
                len(lr_all)
            )
            for start in range(0, len(order), cfg.batch_size):
                sel = order[start : start + cfg.batch_size]
                lr_b = torch.from_numpy(lr_all[sel])
                aux_b = torch.from_numpy(aux_all[sel])
                hr_b = torch.from_numpy(hr_all[sel])
                sr = model(lr_b, aux_b)
                loss = metrics.robust_loss(sr, hr_b)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (epoch {epoch}, "
                        f"patches {[provenance[i] for i in sel]})"
                    )
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                log.write(
                    json.dumps(
                        {"step": step, "epoch": epoch, "loss": float(loss), "lr": cfg.lr}
                    )
                    + "\n"
                )
                step += 1
            if (epoch + 1) % cfg.val_interval_epochs == 0 or epoch == cfg.epochs - 1:
                model.eval()
                val_psnr = _mean_val_psnr(model, val_samples)
                model.train()
                log.write(
                    json.dumps(
                        {"step": step, "epoch": epoch, "val_psnr": val_psnr}
                    )
                    + "\n"
                )
                if val_psnr > best_val:
                    best_val = val_psnr
                    epochs_since_best = 0
                    save_checkpoint(model, best_path)
                else:
                    epochs_since_best += cfg.val_interval_epochs
                if (
                    cfg.early_stop_patience is not None
                    and epochs_since_best >= cfg.early_stop_patience
                ):
                    break
    save_checkpoint(model, last_path)
    if not best_path.exists():
        save_checkpoint(model, best_path)
    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_val_psnr=best_val,
        steps=step,
    )


def _checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate(checkpoint_path, manifest_path, split: str) -> metrics.MetricsReport:
    """Full-image evaluation of a checkpoint on one manifest split.

    The report carries one row per image (model and bicubic-baseline numbers)
    plus aggregate means and the spp accounting for the dataset.
    """
    single_plan()
    samples, names, first = _load_split(manifest_path, split)
    model = load_checkpoint(checkpoint_path, expected_scale=first["scale"])
    rows = []
    for name, sample in zip(names, samples):
        if sample.hr_rgb is None:
            raise ValueError(f"sample '{name}' has no ground truth; cannot evaluate")
        sr = _full_image_forward(model, sample)
        hr = sample.hr_rgb.values
        if sample.scale > 1:
            bic = metrics.bicubic_upsample(sample.lr_rgb.values, sample.scale)
        else:
            bic = sample.lr_rgb.values
        rows.append(
            metrics.ImageMetrics(
                name=name,
                psnr_db=metrics.psnr_srgb(sr, hr),
                relmse=metrics.relmse(sr, hr),
                bicubic_psnr_db=metrics.psnr_srgb(bic, hr),
                bicubic_relmse=metrics.relmse(bic, hr),
                srgb_mse=metrics.srgb_mse(sr, hr),
                bicubic_srgb_mse=metrics.srgb_mse(bic, hr),
            )
        )
    context = {
        "split": split,
        "scale": first["scale"],
        "spp_lr": first["spp_lr"],
        "spp_aux": first["spp_aux"],
        "spp_avg": metrics.spp_average(first["spp_lr"], first["spp_aux"], first["scale"]),
        "checkpoint": _checkpoint_id(checkpoint_path),
        "aux_inputs": model.config.aux_inputs,
    }
    return metrics.MetricsReport(images=rows, context=context)


def run_ablation(grid: List[Tuple[ModelConfig, TrainConfig]]) -> List[dict]:
    """Train and evaluate each variant with a shared seed; returns table rows.

    The seed of the first entry is applied to all entries so variants differ
    only in their configuration.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    shared_seed = grid[0][1].seed
    rows = []
    for i, (model_cfg, train_cfg) in enumerate(grid):
        cfg = replace(
            train_cfg,
            model=model_cfg,
            seed=shared_seed,
            out_dir=str(Path(train_cfg.out_dir) / f"variant_{i:02d}"),
        )
        result = train(cfg)
        report = evaluate(result.best_checkpoint, cfg.manifest, "test")
        agg = report.aggregate()
        rows.append(
            {
                "variant": i,
                "aux_inputs": model_cfg.aux_inputs,
                "groups": model_cfg.groups,
                "blocks_per_group": model_cfg.blocks_per_group,
                "params": count_parameters(GuidedSRNet(model_cfg)),
                "val_psnr_db": result.best_val_psnr,
                "test_psnr_db": agg["psnr_db"],
                "test_relmse": agg["relmse"],
                "bicubic_psnr_db": agg.get("bicubic_psnr_db"),
            }
        )
    return rows


def ablation_table(rows: List[dict]) -> str:
    cols = (
        ("variant", 8),
        ("aux_inputs", 11),
        ("groups", 7),
        ("blocks_per_group", 17),
        ("params", 10),
        ("test_psnr_db", 13),
        ("test_relmse", 12),
    )
    header = "".join(f"{name:>{w}}" for name, w in cols)
    lines = [header, "-" * len(header)]
    for row in rows:
        parts = []
        for name, w in cols:
            v = row[name]
            if isinstance(v, float):
                parts.append(f"{v:>{w}.4f}")
            else:
                parts.append(f"{str(v):>{w}}")
        lines.append("".join(parts))
    return "\n".join(lines)
