"""Command-line entry point: dataset synthesis, staged training, enhancement,
evaluation, and the ablation matrix.

Exit codes: 0 success, 2 usage error, 3 data/checkpoint error, 4 numeric
divergence. Every run writes a manifest (argv, resolved config, and content
hashes of its file inputs) under <out>/manifests/.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import evaluation
from .autoencoder import TrainingDivergedError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .imaging import ImagingError, load_image, save_image
from .pipeline import ModelBundle, PipelineError, TrainConfig, enhance_pipeline
from .synth import load_paired_dataset, write_dataset
from .trainer import PrerequisiteError, run_stage, write_curves

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_ON_OFF = {"on": True, "off": False}

# Flags that toggle ablation rows, mapped to their TrainConfig field.
_ABLATION_FLAGS = {
    "no_ti": ("use_ti", False),
    "no_tl": ("use_tl", False),
    "no_prior": ("use_prior", False),
    "no_gen": ("use_generative", False),
    "no_pyramid": ("use_pyramid", False),
    "no_att": ("use_attention", False),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="luxlift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize a paired low-light dataset")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--count", type=int, default=2200, help="number of pairs")
    p_synth.add_argument("--seed", type=int, default=0, help="dataset seed")
    p_synth.add_argument("--size", type=int, default=64, help="image side length")

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--stage", type=int, required=True, choices=(0, 1, 2), help="stage id")
    p_train.add_argument("--data", required=True, help="dataset directory from `synth`")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--config", help="JSON config file with TrainConfig fields")
    p_train.add_argument("--prereq", help="prerequisite checkpoint (defaults to the previous stage in --out)")
    p_train.add_argument("--seed", type=int, help="override config seed")
    p_train.add_argument("--steps", type=int, help="override stage-2 step count")
    p_train.add_argument("--batch-size", type=int, help="override batch size")
    p_train.add_argument("--lr", type=float, help="override learning rate")
    p_train.add_argument("--lambda1", type=float, help="latent refinement loss weight")
    p_train.add_argument("--lambda2", type=float, help="pixel refinement loss weight")
    p_train.add_argument("--refinement", choices=("on", "off"), help="enable latent refinement")
    p_train.add_argument("--interaction", choices=("on", "off"), help="enable latent interaction")
    p_train.add_argument("--no-ti", action="store_true", help="ablation: drop the shuffled condition")
    p_train.add_argument("--no-tl", action="store_true", help="ablation: drop the visual-encoder condition")
    p_train.add_argument("--no-prior", action="store_true", help="ablation: drop the generative prior entirely")
    p_train.add_argument("--no-gen", action="store_true", help="ablation: regress the prior instead of diffusing")
    p_train.add_argument("--no-pyramid", action="store_true", help="ablation: single-scale prior target")
    p_train.add_argument("--no-att", action="store_true", help="ablation: ungated residual prediction")
    p_train.add_argument("--no-pl", action="store_true", help="ablation: drop pixel-level losses (lambda2 = 0)")
    p_train.add_argument("--condition-source", choices=("enhanced", "low"), help="which image feeds the base conditional latent")
    p_train.add_argument("--beta-time-embed", action="store_true", help="experimental: timestep embedding in the interaction module")
    p_train.add_argument("--block", choices=("conv", "attention"), help="trunk block kind for refinement modules")
    p_train.add_argument("--sampler", choices=("deterministic", "ddpm"), help="backbone sampling variant")

    p_enh = sub.add_parser("enhance", help="enhance one image with a trained checkpoint")
    p_enh.add_argument("--in", dest="input", required=True, help="input PNG")
    p_enh.add_argument("--out", required=True, help="output PNG")
    p_enh.add_argument("--checkpoint", required=True, help="stage-2 checkpoint file")
    p_enh.add_argument("--refinement", choices=("on", "off"), default="on")
    p_enh.add_argument("--interaction", choices=("on", "off"), default="on")
    p_enh.add_argument("--seed", type=int, default=0)
    p_enh.add_argument("--inference-steps", type=int, help="override denoising step count")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on held-out pairs")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory (held-out pairs)")
    p_eval.add_argument("--out", required=True, help="run output directory")
    p_eval.add_argument("--refinement", choices=("on", "off"), default="on")
    p_eval.add_argument("--interaction", choices=("on", "off"), default="on")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--limit", type=int, help="evaluate only the first N pairs")

    p_abl = sub.add_parser("ablate", help="train and compare ablation rows")
    p_abl.add_argument("--rows", required=True, help="comma-separated row names (e.g. full,no-interact)")
    p_abl.add_argument("--data", required=True, help="training dataset directory")
    p_abl.add_argument("--test-data", required=True, help="held-out dataset directory")
    p_abl.add_argument("--prereq", required=True, help="stage-1 checkpoint with frozen vae/backbone/restorer")
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--config", help="JSON config file with TrainConfig fields")
    p_abl.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p_abl.add_argument("--eval-limit", type=int, default=100)
    return parser


def iter_parser_flags() -> set[str]:
    """Every long option string consumed by any subcommand (for the registry test)."""
    parser = build_parser()
    flags: set[str] = set()
    stack = [parser]
    while stack:
        p = stack.pop()
        for action in p._actions:
            flags.update(o for o in action.option_strings if o.startswith("--"))
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
    return flags


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_inputs(paths: list[str | Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = _sha256_file(p)
        elif p.is_dir():
            manifest = p / "manifest.json"
            if manifest.exists():
                out[str(manifest)] = _sha256_file(manifest)
    return out


def _ensure_layout(out_dir: Path) -> dict[str, Path]:
    layout = {name: out_dir / name for name in ("checkpoints", "reports", "images", "manifests")}
    for p in layout.values():
        p.mkdir(parents=True, exist_ok=True)
    return layout


def _write_manifest(layout: dict[str, Path], name: str, payload: dict) -> None:
    path = layout["manifests"] / f"{name}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_config(args: argparse.Namespace) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise FileNotFoundError(f"no config file at {cfg_path}")
        base = json.loads(cfg_path.read_text())
    overrides = {
        "stage": getattr(args, "stage", None),
        "seed": getattr(args, "seed", None),
        "steps": getattr(args, "steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "lambda1": getattr(args, "lambda1", None),
        "lambda2": getattr(args, "lambda2", None),
        "condition_source": getattr(args, "condition_source", None),
        "block": getattr(args, "block", None),
        "sampler": getattr(args, "sampler", None),
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    if getattr(args, "refinement", None) is not None:
        base["refinement"] = _ON_OFF[args.refinement]
    if getattr(args, "interaction", None) is not None:
        base["interaction"] = _ON_OFF[args.interaction]
    for flag, (field_name, value) in _ABLATION_FLAGS.items():
        if getattr(args, flag, False):
            base[field_name] = value
    if getattr(args, "no_pl", False):
        base["lambda2"] = 0.0
    if getattr(args, "beta_time_embed", False):
        base["beta_time_embed"] = True
    return TrainConfig.from_dict(base)


def _cmd_synth(args: argparse.Namespace) -> int:
    t0 = time.time()
    out = Path(args.out)
    write_dataset(out, args.count, args.seed, args.size)
    layout = _ensure_layout(out.parent if out.name else out)
    _write_manifest(
        layout,
        f"synth-{out.name}",
        {
            "command": "synth",
            "argv": {"out": str(out), "count": args.count, "seed": args.seed, "size": args.size},
            "inputs": {},
            "outputs": [str(out)],
            "wall_time_s": round(time.time() - t0, 3),
        },
    )
    print(f"wrote {args.count} pairs to {out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    t0 = time.time()
    config = _load_config(args)
    out = Path(args.out)
    layout = _ensure_layout(out)
    dataset = load_paired_dataset(args.data)
    prereq = None
    prereq_path = args.prereq
    if args.stage > 0 and prereq_path is None:
        prereq_path = layout["checkpoints"] / f"stage{args.stage - 1}.ckpt"
    if prereq_path is not None and args.stage > 0:
        prereq = load_checkpoint(prereq_path)
    ckpt, rows = run_stage(args.stage, config, dataset, prereq)
    ckpt_path = layout["checkpoints"] / f"stage{args.stage}.ckpt"
    save_checkpoint(ckpt_path, ckpt)
    curves_path = layout["reports"] / f"curves-stage{args.stage}.csv"
    write_curves(curves_path, rows)
    _write_manifest(
        layout,
        f"train-stage{args.stage}",
        {
            "command": "train",
            "argv": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "command"},
            "config": config.to_dict(),
            "inputs": _hash_inputs([args.data] + ([prereq_path] if prereq_path else [])),
            "outputs": [str(ckpt_path), str(curves_path)],
            "wall_time_s": round(time.time() - t0, 3),
        },
    )
    print(f"stage {args.stage} complete: {ckpt_path}")
    return EXIT_OK


def _cmd_enhance(args: argparse.Namespace) -> int:
    t0 = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    bundle = ModelBundle.from_checkpoint(ckpt)
    low = load_image(args.input)
    result = enhance_pipeline(
        bundle,
        low,
        refinement=_ON_OFF[args.refinement],
        interaction=_ON_OFF[args.interaction],
        seed=args.seed,
        inference_steps=args.inference_steps,
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(result, out_path)
    layout = _ensure_layout(out_path.parent)
    _write_manifest(
        layout,
        f"enhance-{out_path.stem}",
        {
            "command": "enhance",
            "argv": {k: v for k, v in vars(args).items() if k != "command"},
            "inputs": _hash_inputs([args.input, args.checkpoint]),
            "outputs": [str(out_path)],
            "wall_time_s": round(time.time() - t0, 3),
        },
    )
    print(f"enhanced image written to {out_path}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    t0 = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    bundle = ModelBundle.from_checkpoint(ckpt)
    test_set = load_paired_dataset(args.data)
    report = evaluation.evaluate(
        bundle,
        test_set,
        refinement=_ON_OFF[args.refinement],
        interaction=_ON_OFF[args.interaction],
        seed=args.seed,
        limit=args.limit,
    )
    out = Path(args.out)
    layout = _ensure_layout(out)
    json_path = layout["reports"] / f"eval-seed{args.seed}.json"
    csv_path = layout["reports"] / f"eval-seed{args.seed}.csv"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    _write_manifest(
        layout,
        f"eval-seed{args.seed}",
        {
            "command": "eval",
            "argv": {k: v for k, v in vars(args).items() if k != "command"},
            "inputs": _hash_inputs([args.data, args.checkpoint]),
            "outputs": [str(json_path), str(csv_path)],
            "wall_time_s": round(time.time() - t0, 3),
        },
    )
    print(f"median PSNR {report.aggregates['median_psnr']:.3f} dB, "
          f"median SSIM {report.aggregates['median_ssim']:.4f}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    t0 = time.time()
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    seeds = tuple(int(s) for s in args.seeds.split(","))
    config = _load_config(args)
    train_set = load_paired_dataset(args.data)
    test_set = load_paired_dataset(args.test_data)
    prereq = load_checkpoint(args.prereq)
    results = evaluation.run_ablation(
        rows, config, train_set, test_set, prereq, seeds=seeds, eval_limit=args.eval_limit
    )
    out = Path(args.out)
    layout = _ensure_layout(out)
    table = evaluation.ablation_table(results)
    (layout["reports"] / "ablation.txt").write_text(table)
    (layout["reports"] / "ablation.json").write_text(evaluation.ablation_json(results))
    (layout["reports"] / "ablation.csv").write_text(evaluation.ablation_csv(results))
    _write_manifest(
        layout,
        "ablate",
        {
            "command": "ablate",
            "argv": {k: v for k, v in vars(args).items() if k != "command"},
            "config": config.to_dict(),
            "inputs": _hash_inputs([args.data, args.test_data, args.prereq]),
            "outputs": [str(layout["reports"] / "ablation.txt")],
            "wall_time_s": round(time.time() - t0, 3),
        },
    )
    print(table, end="")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, PrerequisiteError, PipelineError, ImagingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
