"""Command-line interface: one binary, six subcommands.

    relight synth      build a synthetic low/high paired dataset
    relight train      train an enhancer on a paired dataset
    relight enhance    enhance one image or a directory of images
    relight eval       PSNR/SSIM report on a paired dataset
    relight erf        effective-receptive-field heatmap for a checkpoint
    relight gradcheck  finite-difference verification of all kernels

Exit codes: 0 success, 1 runtime/data error, 2 usage/config error. Train
and synth write a manifest.json into their run directory before any work
starts; config precedence is built-in defaults < config file < command
line, and the manifest records the resolved snapshot.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import DegradeParams, load_image, load_pairs, save_image, synth_degrade
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    TrainingDiverged,
)
from .gradcheck import gradcheck_passed, run_gradcheck
from .metrics import erf_map, evaluate
from .model import Enhancer, ModelConfig, init_model
from .train import TrainConfig, train

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
VALID_KEYS = sorted(_MODEL_KEYS | _TRAIN_KEYS)


def _parse_kv_line(line: str):
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"bad config line (expected 'key = value'): {line!r}")
    key, val = (part.strip() for part in line.split("=", 1))
    return key, val


def read_config_file(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for line in path.read_text().splitlines():
        kv = _parse_kv_line(line)
        if kv:
            out[kv[0]] = kv[1]
    return out


def _coerce(key: str, val: str):
    if key in ("depths", "gate_kernels"):
        return tuple(int(x) for x in str(val).replace(" ", "").split(","))
    if key in ("scan_prior_bias", "kernel_gate_enabled"):
        s = str(val).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {val!r}")
    if key in ("lr_init", "lr_min", "beta1", "beta2"):
        return float(val)
    if key == "prior_mode":
        return str(val)
    return int(val)


def resolve_configs(kv: dict) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs, train_kwargs = {}, {}
    for key, val in kv.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = _coerce(key, val)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(key, val)
        else:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}"
            )
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _write_manifest(out_dir: Path, command: str, snapshot: dict, seed, outputs: list,
                    end_time=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {k: str(v) for k, v in snapshot.items()},
        "start_time": _write_manifest.start_time,
        "end_time": end_time,
        "outputs": [str(p) for p in outputs],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _parse_range(text: str, name: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--{name} expects 'a,b', got {text!r}") from exc
    if hi < lo:
        raise ConfigError(f"--{name}: upper bound below lower bound")
    return lo, hi


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    src = Path(args.src)
    out = Path(args.out)
    sources = sorted(
        p for p in src.iterdir() if p.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg")
    ) if src.is_dir() else []
    if not sources:
        raise DataError(f"no source images found in {src}")
    gamma_r = _parse_range(args.gamma_range, "gamma-range")
    scale_r = _parse_range(args.scale_range, "scale-range")
    sigma_r = _parse_range(args.sigma_range, "sigma-range")
    snapshot = {
        "src": src, "count": args.count, "seed": args.seed,
        "gamma_range": gamma_r, "scale_range": scale_r, "sigma_range": sigma_r,
    }
    _write_manifest(out, "synth", snapshot, args.seed, [out / "low", out / "high"])
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        high = load_image(sources[i % len(sources)])
        params = DegradeParams(
            gamma=float(rng.uniform(*gamma_r)),
            scale=float(rng.uniform(*scale_r)),
            noise_sigma=float(rng.uniform(*sigma_r)),
            seed=int(rng.integers(2**31)),
        )
        low = synth_degrade(high, params)
        stem = f"{i:04d}"
        save_image(high, out / "high" / f"{stem}.png")
        save_image(low, out / "low" / f"{stem}.png")
    _write_manifest(out, "synth", snapshot, args.seed, [out / "low", out / "high"],
                    end_time=time.strftime("%Y-%m-%dT%H:%M:%S"))
    print(f"wrote {args.count} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    kv = read_config_file(Path(args.config)) if args.config else {}
    for item in args.set or []:
        parsed = _parse_kv_line(item)
        if not parsed:
            raise ConfigError(f"bad --set entry {item!r}")
        kv[parsed[0]] = parsed[1]
    if args.total_iters is not None:
        kv["total_iters"] = str(args.total_iters)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    model_cfg, train_cfg = resolve_configs(kv)

    out_dir = Path(args.out)
    dataset = load_pairs(Path(args.data))
    eval_dataset = load_pairs(Path(args.eval_data)) if args.eval_data else None

    resume_bundle = None
    if args.resume:
        resume_bundle = load_checkpoint(args.resume)
        model_cfg = resume_bundle.config
        model = Enhancer(model_cfg, init_model(model_cfg, seed=train_cfg.seed))
    else:
        model = Enhancer(model_cfg, init_model(model_cfg, seed=train_cfg.seed))

    snapshot = dict(model_cfg.to_dict())
    snapshot.update(train_cfg.to_dict())
    snapshot["data"] = args.data
    _write_manifest(out_dir, "train", snapshot, train_cfg.seed,
                    [out_dir / "metrics.csv", out_dir / "ckpt_final.gls"])
    final = train(
        model, dataset, train_cfg, out_dir,
        eval_dataset=eval_dataset, resume=resume_bundle,
        log_hook=(lambda it, loss, lr: print(f"iter {it}  loss {loss:.6f}  lr {lr:.2e}"))
        if args.verbose else None,
    )
    _write_manifest(out_dir, "train", snapshot, train_cfg.seed,
                    [out_dir / "metrics.csv", final],
                    end_time=time.strftime("%Y-%m-%dT%H:%M:%S"))
    print(f"final checkpoint: {final}")
    return 0


def _model_from_ckpt(path: str) -> Enhancer:
    return load_checkpoint(path).build_model()


def cmd_enhance(args) -> int:
    model = _model_from_ckpt(args.ckpt)
    src = Path(args.input)
    dst = Path(args.output)
    if src.is_dir():
        images = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".bmp"))
        if not images:
            raise DataError(f"no images found in {src}")
        for p in images:
            save_image(model.enhance_array(load_image(p)), dst / p.name)
        print(f"enhanced {len(images)} images -> {dst}")
    else:
        save_image(model.enhance_array(load_image(src)), dst)
        print(f"enhanced {src} -> {dst}")
    return 0


def cmd_eval(args) -> int:
    model = _model_from_ckpt(args.ckpt)
    dataset = load_pairs(Path(args.data))
    report = evaluate(model, dataset, out_csv=args.out)
    print(f"mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}  -> {args.out}")
    return 0


def cmd_erf(args) -> int:
    model = _model_from_ckpt(args.ckpt)
    image = load_image(args.image)
    source = None
    if args.source:
        try:
            y, x = (int(v) for v in args.source.split(","))
        except ValueError as exc:
            raise ConfigError(f"--source expects 'y,x', got {args.source!r}") from exc
        source = (y, x)
    emap = erf_map(model, image, source)
    save_image(emap.grid[None].astype(np.float32), args.out)
    print(f"erf heatmap (source {emap.source}) -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed)
    ok = gradcheck_passed(results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relight", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--src", required=True, help="directory of clean images")
    s.add_argument("--out", required=True, help="output dataset root")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma-range", default="2.0,3.5")
    s.add_argument("--scale-range", default="0.3,0.7")
    s.add_argument("--sigma-range", default="0.01,0.05")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train an enhancer")
    t.add_argument("--data", required=True, help="dataset root with low/ and high/")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--eval-data", help="held-out dataset root for periodic eval")
    t.add_argument("--total-iters", type=int, help="override total_iters")
    t.add_argument("--seed", type=int, help="override seed")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("enhance", help="enhance an image or directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", dest="output", required=True)
    e.set_defaults(fn=cmd_enhance)

    v = sub.add_parser("eval", help="PSNR/SSIM report")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="CSV output path")
    v.set_defaults(fn=cmd_eval)

    r = sub.add_parser("erf", help="effective-receptive-field heatmap")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True, help="PNG output path")
    r.add_argument("--source", help="y,x source pixel (default: center)")
    r.set_defaults(fn=cmd_erf)

    g = sub.add_parser("gradcheck", help="finite-difference kernel verification")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    _write_manifest.start_time = time.strftime("%Y-%m-%dT%H:%M:%S")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointFormatError, TrainingDiverged, DimensionError,
            ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
