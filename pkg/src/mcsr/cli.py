"""Command-line entry point.

Subcommands: ``gen-data`` (procedural dataset), ``train``, ``eval``, and
``sr`` (one-shot super-resolution of explicit plane files).

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Outputs are written to a temp file and renamed, so failures never leave
partial files behind.

The train config file is a flat JSON object with dotted keys, e.g.::

    {"train.manifest": "data/manifest.json", "model.scale": 4, "train.lr": 1e-4}

``--override key=value`` wins over file values.  Unknown keys are rejected;
missing keys take the documented defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import metrics, toyscenes, trainer
from .data_io import FeatureMap
from .model import ModelConfig, load_checkpoint
from .trainer import TrainConfig


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def cmd_gen_data(args) -> int:
    spec = toyscenes.SceneSpec(
        seed=0,
        resolution=(args.resolution, args.resolution),
        texture_octaves=args.octaves,
        geometry_bumps=args.bumps,
    )
    manifest = toyscenes.make_dataset(
        n_scenes=args.n_scenes,
        spec_template=spec,
        out_dir=args.out,
        scale=args.scale,
        spp_lr=args.spp_lr,
        spp_aux=args.spp_aux,
        seed=args.seed,
    )
    print(manifest)
    return 0


def _parse_config_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build_train_config(config_path: str | None, overrides: list) -> TrainConfig:
    doc: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must be a flat JSON object with dotted keys")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key=value")
        key, _, raw = item.partition("=")
        doc[key.strip()] = _parse_config_value(raw.strip())

    model_fields = {f.name for f in dataclass_fields(ModelConfig)}
    train_fields = {f.name for f in dataclass_fields(TrainConfig)} - {"model"}
    model_kwargs, train_kwargs = {}, {}
    for key, value in doc.items():
        prefix, _, name = key.partition(".")
        if prefix == "model" and name in model_fields:
            model_kwargs[name] = value
        elif prefix == "train" and name in train_fields:
            train_kwargs[name] = value
        else:
            raise ValueError(f"unknown config key '{key}'")
    cfg = TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _build_train_config(args.config, args.override)
    result = trainer.train(cfg)
    print(result.best_checkpoint)
    return 0


def cmd_eval(args) -> int:
    report = trainer.evaluate(args.checkpoint, args.manifest, args.split)
    _atomic_write_bytes(Path(args.out), (report.to_json() + "\n").encode())
    print(report.to_table())
    return 0


def _load_plane(path: str, kind: str) -> np.ndarray:
    """Load one plane: PNG for LDR previews, or raw .f32 with a JSON sidecar.

    PNG decode rules: radiance is sRGB-decoded to linear, albedo is read as
    [0, 1] directly, normals map [0, 255] to [-1, 1].
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"plane file not found: {p}")
    if p.suffix.lower() == ".png":
        from PIL import Image

        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        arr = img.transpose(2, 0, 1)
        if kind == "radiance":
            arr = metrics.srgb_to_linear(arr)
        elif kind == "normal":
            arr = 2.0 * arr - 1.0
        return arr.astype(np.float32)
    sidecar = Path(str(p) + ".json")
    if not sidecar.is_file():
        raise FileNotFoundError(f"raw plane {p} needs a sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    shape = (int(meta["channels"]), int(meta["height"]), int(meta["width"]))
    data = p.read_bytes()
    if len(data) != int(np.prod(shape)) * 4:
        raise ValueError(f"plane {p}: payload size does not match sidecar dims {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def cmd_sr(args) -> int:
    import torch

    model = load_checkpoint(args.checkpoint)
    s = model.config.scale
    lr = _load_plane(args.lr, "radiance")
    albedo = _load_plane(args.albedo, "albedo")
    normal = _load_plane(args.normal, "normal")
    if lr.shape[0] != 3:
        raise ValueError(f"lr plane must have 3 channels, got {lr.shape[0]}")
    if normal.shape != albedo.shape:
        raise ValueError(f"normal shape {normal.shape} does not match albedo {albedo.shape}")
    expected = (3, s * lr.shape[1], s * lr.shape[2])
    if albedo.shape != expected:
        raise ValueError(
            f"aux dims {albedo.shape} do not match expected {expected} "
            f"for scale {s} and lr dims {lr.shape}"
        )
    aux = np.concatenate([np.clip(albedo, 0, 1), np.clip(normal, -1, 1)], axis=0)
    trainer.single_plan()
    with torch.no_grad():
        sr = model(torch.from_numpy(lr).unsqueeze(0), torch.from_numpy(aux).unsqueeze(0))
    sr = sr.squeeze(0).numpy()

    out = Path(args.out)
    _atomic_write_bytes(Path(str(out) + ".f32"), np.ascontiguousarray(sr, dtype="<f4").tobytes())
    _atomic_write_bytes(
        Path(str(out) + ".f32.json"),
        (
            json.dumps(
                {"channels": sr.shape[0], "height": sr.shape[1], "width": sr.shape[2]}
            )
            + "\n"
        ).encode(),
    )
    from PIL import Image
    import io

    preview = np.rint(255.0 * metrics.linear_to_srgb(sr)).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(preview).save(buf, format="PNG")
    _atomic_write_bytes(Path(str(out) + ".png"), buf.getvalue())
    print(f"{out}.f32")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcsr",
        description="Guided super-resolution of Monte Carlo renderings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural toy dataset")
    p.add_argument("--n-scenes", type=int, required=True, help="number of scenes (default: required)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, choices=(1, 2, 4, 8), required=True, help="upsampling scale")
    p.add_argument("--spp-lr", type=int, required=True, help="samples per pixel of the LR render")
    p.add_argument("--spp-aux", type=int, required=True, help="samples per pixel of the aux buffers (>=4000: noise-free)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    p.add_argument("--resolution", type=int, default=96, help="square scene resolution, divisible by 8 (default: 96)")
    p.add_argument("--octaves", type=int, default=5, help="albedo texture octaves (default: 5)")
    p.add_argument("--bumps", type=int, default=3, help="normal bump octaves (default: 3)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="JSON config with dotted keys (default: none)")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. train.lr=1e-4 (repeatable; default: none)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--split", default="test", help="split name (default: test)")
    p.add_argument("--out", required=True, help="JSON report output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sr", help="super-resolve one image from plane files")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--lr", required=True, help="low-resolution radiance plane (.f32 + sidecar, or .png)")
    p.add_argument("--albedo", required=True, help="high-resolution albedo plane")
    p.add_argument("--normal", required=True, help="high-resolution normal plane")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.f32, <out>.f32.json, <out>.png")
    p.set_defaults(func=cmd_sr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        return _fail(str(e), 2)
    except trainer.TrainingDiverged as e:
        return _fail(str(e), 1)
    except OSError as e:
        return _fail(str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
