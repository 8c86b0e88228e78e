"""Command-line entry point: gen, train, eval, gradcheck, flops, gates.

Exit codes: 0 success, 1 usage, 2 I/O or incompatible inputs,
3 numerical failure (gradient check or divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import flops as fl
from .decoder import FUSION_VARIANTS, head_forward
from .formats import FormatError, colormap, encode_ppm, load_vogd, save_vogd, sha256_file
from .geometry import CameraModel
from .objective import label_pyramid
from .synth import SceneSpec, Sample
from .train import (CheckpointMismatch, DivergenceError, RunConfig, config_json, evaluate,
                    load_checkpoint, majority_occupied_class, make_datasets, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vggtocc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def setup_logging() -> None:
    level = os.environ.get("VGGTOCC_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(message)s",
                        stream=sys.stderr)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return _merge_overrides(cfg, args)


# ---------------------------------------------------------------- datasets

MANIFEST = "manifest.json"


def write_dataset(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = make_datasets(cfg)
    files = []
    for split, samples in data.items():
        for i, s in enumerate(samples):
            stem = f"{split}_{i:04d}"
            scene = {"seed": s.seed, "spec": s.spec.to_dict(), "cameras": [c.to_dict() for c in s.cameras]}
            (out / f"{stem}.json").write_text(json.dumps(scene, indent=1, sort_keys=True))
            save_vogd(out / f"{stem}_labels.vogd", s.labels[-1].astype(np.uint8))
            names = [f"{stem}.json", f"{stem}_labels.vogd"]
            for lv, feats in enumerate(s.pyramid):
                save_vogd(out / f"{stem}_feat{lv}.vogd", feats.astype(np.float32))
                names.append(f"{stem}_feat{lv}.vogd")
            files += names
    manifest = {
        "config": cfg.to_dict(),
        "splits": {k: len(v) for k, v in data.items()},
        "files": [{"name": n, "sha256": sha256_file(out / n)} for n in files],
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_dataset(data_dir: Path, split: str, n_scales: int = 3) -> list[Sample]:
    manifest = json.loads((data_dir / MANIFEST).read_text())
    n = manifest["splits"].get(split, 0)
    n_levels = len(RunConfig.from_dict(manifest["config"]).rig.levels)
    out = []
    for i in range(n):
        stem = f"{split}_{i:04d}"
        scene = json.loads((data_dir / f"{stem}.json").read_text())
        labels = load_vogd(data_dir / f"{stem}_labels.vogd")
        pyr = [load_vogd(data_dir / f"{stem}_feat{lv}.vogd") for lv in range(n_levels)]
        cams = [CameraModel.from_dict(c) for c in scene["cameras"]]
        out.append(Sample(scene["seed"], SceneSpec(**scene["spec"]), label_pyramid(labels, n_scales), pyr, cams))
    return out


def dataset_config(data_dir: Path) -> RunConfig:
    return RunConfig.from_dict(json.loads((data_dir / MANIFEST).read_text())["config"])


def _checkpoint_config(args, ckpt: Path) -> RunConfig:
    if args.config:
        return resolve_config(args)
    side = ckpt.parent / "config.json"
    if not side.exists():
        raise FileNotFoundError(f"no config given and {side} does not exist")
    return _merge_overrides(RunConfig.load(side), args)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    if args.n_train is not None:
        cfg.n_train = args.n_train
    if args.n_val is not None:
        cfg.n_val = args.n_val
    m = write_dataset(cfg, Path(args.out))
    print(f"wrote {len(m['files'])} files + manifest to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    # without --config, the dataset's own config is the base for overrides
    cfg = resolve_config(args) if args.config else _merge_overrides(dataset_config(data_dir), args)
    train_set = read_dataset(data_dir, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config_json(cfg))
    res = train(cfg, train_set, log_path=out / "loss.jsonl")
    save_checkpoint(out / "checkpoint.vocp", res.params)
    if res.history:
        print(f"trained {len(res.history)} steps: loss {res.history[0]['total']:.4f} -> "
              f"{res.history[-1]['total']:.4f}")
    else:
        print("0 steps: checkpoint holds the initialization")
    return EXIT_OK


def _merge_overrides(base: RunConfig, args) -> RunConfig:
    cfg = base
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    stages = {k: getattr(args, k, None) for k in ("stage1", "stage2", "stage3")}
    if any(v is not None for v in stages.values()):
        cfg = cfg.with_stages(**stages)
    if getattr(args, "fusion", None):
        cfg = cfg.with_fusion(args.fusion)
    if getattr(args, "steps", None) is not None:
        cfg.optim.steps = args.steps
    return cfg


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    params = load_checkpoint(ckpt, cfg)
    data_dir = Path(args.data)
    samples = read_dataset(data_dir, args.split)
    train_labels = [s.labels[-1] for s in read_dataset(data_dir, "train")] or [s.labels[-1] for s in samples]
    maj = majority_occupied_class(train_labels, cfg.head.n_classes)
    rep = evaluate(params, cfg, samples, maj, corrupt_deg=args.corrupt_deg, corrupt_seed=cfg.seed,
                   threads=args.threads)
    text = rep.model.report(_class_names(cfg.head.n_classes))
    text += f"baseline_all_free_IoU\t{rep.all_free.iou:.6f}\n"
    text += f"baseline_majority_class\t{maj}\nbaseline_majority_IoU\t{rep.majority.iou:.6f}\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(text)
        (out / "metrics.json").write_text(json.dumps(rep.as_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def _class_names(n: int) -> list[str]:
    from .synth import CLASS_NAMES

    return list(CLASS_NAMES[:n]) + [f"class_{c}" for c in range(len(CLASS_NAMES), n)]


def cmd_gradcheck(args) -> int:
    from . import verify

    results = verify.run_all(args.seed or 0, head_entries=args.head_entries)
    if args.toy:
        results.append(verify.check_head_toy(args.seed or 0))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_flops(args) -> int:
    dims = fl.FusionDims(tuple(args.coarse), args.c_in, args.c_out, args.gate_hidden)
    table = fl.fusion_table(dims)
    if args.json:
        payload = json.loads(fl.dumps_reports(table))
        payload["ratio_unet_over_channel_gate_dw"] = fl.fusion_ratio(dims)
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for rep in table.values():
            print(rep.to_text())
        print(f"unet / channel_gate_dw = {fl.fusion_ratio(dims):.2f}x")
    return EXIT_OK


def cmd_gates(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    params = load_checkpoint(ckpt, cfg)
    samples = read_dataset(Path(args.data), args.split)
    if not 0 <= args.scene < len(samples):
        raise UsageError(f"scene index {args.scene} out of range (split has {len(samples)})")
    s = samples[args.scene]
    out = head_forward(params, cfg.head, s.pyramid, s.cameras)
    dst = Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(out.gates):
        write_gate_maps(g, dst / f"gate_{i}")
        print(f"fusion {i}: coarse grid {g.shape[:3]}, mean gate {float(g.mean()):.4f}")
    return EXIT_OK


def gate_topdown(gate: np.ndarray) -> np.ndarray:
    """(X, Y, Z, C) gates -> (X, Y) mean over height and channels."""
    return gate.mean(axis=(2, 3))


def write_gate_maps(gate: np.ndarray, stem: Path) -> None:
    top = gate_topdown(np.asarray(gate, dtype=np.float64))
    # rows are +y so the image reads as a map seen from above
    img = colormap(top.T[::-1])
    Path(f"{stem}.ppm").write_bytes(encode_ppm(img))
    save_vogd(f"{stem}.vogd", top.astype(np.float32))


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vggtocc", description="Toy occupancy head: data, training, checks, reports.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file whose keys mirror RunConfig")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--threads", type=int, default=1)
        for k in ("stage1", "stage2", "stage3"):
            sp.add_argument(f"--{k}", type=_on_off, metavar="on|off")
        sp.add_argument("--fusion", choices=FUSION_VARIANTS)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    common(g)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the head on a generated dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="fine-scale IoU/mIoU of a checkpoint")
    common(e, out_required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--corrupt-deg", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--threads", type=int, default=1)
    gc.add_argument("--head-entries", type=int, default=4)
    gc.add_argument("--toy", action="store_true", help="also check the head at full harness dims")
    gc.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="fusion-variant FLOP tables")
    f.add_argument("--coarse", type=int, nargs=3, default=list(fl.FusionDims().coarse), metavar=("X", "Y", "Z"))
    f.add_argument("--c-in", type=int, default=fl.FusionDims().c_in)
    f.add_argument("--c-out", type=int, default=fl.FusionDims().c_out)
    f.add_argument("--gate-hidden", type=int, default=fl.FusionDims().gate_hidden)
    f.add_argument("--json", action="store_true", help="machine-readable output")
    f.set_defaults(func=cmd_flops)

    gt = sub.add_parser("gates", help="export coarse-gate heatmaps")
    common(gt)
    gt.add_argument("--checkpoint", required=True)
    gt.add_argument("--data", required=True)
    gt.add_argument("--split", default="val", choices=("train", "val"))
    gt.add_argument("--scene", type=int, default=0)
    gt.set_defaults(func=cmd_gates)
    return p


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointMismatch, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
