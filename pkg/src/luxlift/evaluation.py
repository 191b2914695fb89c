"""Held-out evaluation, latent-distance diagnostics, and the ablation
matrix runner."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .checkpoint import Checkpoint
from .imaging import from_tensor, psnr, ssim, to_batch
from .pipeline import ModelBundle, PipelineError, TrainConfig, enhance_batch
from .synth import PairedDataset
from .trainer import run_stage

logger = logging.getLogger(__name__)

EVAL_BATCH = 25

# One entry per ablation row, mapping to the config overrides that realize it.
ABLATION_ROWS: dict[str, dict] = {
    "full": {},
    "no-ti": {"use_ti": False},
    "no-tl": {"use_tl": False},
    "no-prior": {"use_prior": False},
    "no-gen": {"use_generative": False},
    "no-pyramid": {"use_pyramid": False},
    "no-interact": {"interaction": False},
    "no-pl": {"lambda2": 0.0},
    "no-att": {"use_attention": False},
}


@dataclass
class EvalRow:
    index: int
    psnr: float
    ssim: float
    latent_mse_raw: float
    latent_mse_refined: float | None


@dataclass
class EvalReport:
    config: dict
    seed: int
    refinement: bool
    interaction: bool
    rows: list[EvalRow]
    aggregates: dict[str, float] = field(default_factory=dict)

    def compute_aggregates(self) -> None:
        cols: dict[str, list[float]] = {
            "psnr": [r.psnr for r in self.rows],
            "ssim": [r.ssim for r in self.rows],
            "latent_mse_raw": [r.latent_mse_raw for r in self.rows],
        }
        refined = [r.latent_mse_refined for r in self.rows if r.latent_mse_refined is not None]
        if refined:
            cols["latent_mse_refined"] = refined
        agg = {}
        for name, vals in cols.items():
            agg[f"median_{name}"] = float(np.median(vals))
            agg[f"mean_{name}"] = float(np.mean(vals))
        self.aggregates = agg

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "seed": self.seed,
            "refinement": self.refinement,
            "interaction": self.interaction,
            "aggregates": self.aggregates,
            "rows": [asdict(r) for r in self.rows],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["index,psnr,ssim,latent_mse_raw,latent_mse_refined"]
        for r in self.rows:
            refined = "" if r.latent_mse_refined is None else f"{r.latent_mse_refined:.10g}"
            lines.append(f"{r.index},{r.psnr:.10g},{r.ssim:.10g},{r.latent_mse_raw:.10g},{refined}")
        return "\n".join(lines) + "\n"


def evaluate(
    bundle: ModelBundle,
    test_set: PairedDataset,
    *,
    refinement: bool = True,
    interaction: bool = True,
    seed: int = 0,
    limit: int | None = None,
) -> EvalReport:
    """Run the pipeline over the held-out pairs and score every image.

    Deterministic per (checkpoint, seed, test set): the report bytes are
    reproducible. Wall time is deliberately not part of the report; the CLI
    records it in the run manifest instead.
    """
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    if refinement and bundle.predictor is None:
        raise PipelineError("refinement evaluation requested but checkpoint has no predictor blob")
    if interaction and bundle.interaction is None:
        raise PipelineError("interaction evaluation requested but checkpoint has no interaction blob")
    n = len(test_set) if limit is None else min(limit, len(test_set))
    rows: list[EvalRow] = []
    for start in range(0, n, EVAL_BATCH):
        stop = min(start + EVAL_BATCH, n)
        low = to_batch(test_set.low[start:stop])
        clean = test_set.clean[start:stop]
        out, inter = enhance_batch(
            bundle, low, refinement=refinement, interaction=interaction, seed=seed + start
        )
        with torch.no_grad():
            l_m = bundle.codec.encode(to_batch(clean))
            mse_raw = torch.mean((inter["l_c"] - l_m) ** 2, dim=(1, 2, 3))
            mse_ref = (
                torch.mean((inter["l_refined"] - l_m) ** 2, dim=(1, 2, 3))
                if "l_refined" in inter
                else None
            )
        for i in range(stop - start):
            pred = from_tensor(out[i])
            rows.append(
                EvalRow(
                    index=start + i,
                    psnr=psnr(pred, clean[i]),
                    ssim=ssim(pred, clean[i]),
                    latent_mse_raw=float(mse_raw[i]),
                    latent_mse_refined=float(mse_ref[i]) if mse_ref is not None else None,
                )
            )
    report = EvalReport(
        config=bundle.config.to_dict(),
        seed=seed,
        refinement=refinement,
        interaction=interaction,
        rows=rows,
    )
    report.compute_aggregates()
    return report


@dataclass
class AblationResult:
    row: str
    seeds: list[int]
    psnr_by_seed: list[float]
    ssim_by_seed: list[float]

    @property
    def median_psnr(self) -> float:
        return float(np.median(self.psnr_by_seed))

    @property
    def median_ssim(self) -> float:
        return float(np.median(self.ssim_by_seed))


def config_for_row(base: TrainConfig, row: str) -> TrainConfig:
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; valid rows: {sorted(ABLATION_ROWS)}")
    d = base.to_dict()
    d.update(ABLATION_ROWS[row])
    return TrainConfig.from_dict(d)


def run_ablation(
    rows: list[str],
    base_config: TrainConfig,
    train_set: PairedDataset,
    test_set: PairedDataset,
    prereq: Checkpoint,
    *,
    seeds: tuple[int, ...] = (0, 1, 2),
    eval_limit: int | None = 100,
    checkpoint_hook=None,
) -> list[AblationResult]:
    """Train stage 2 from shared stage-0/1 checkpoints for every requested
    row and seed, evaluate each, and return per-row medians.

    ``checkpoint_hook(row, seed) -> Checkpoint | None`` lets callers reuse
    already-trained runs (e.g. the main full runs) instead of retraining.
    """
    results = []
    for row in rows:
        psnrs, ssims = [], []
        for seed in seeds:
            cfg = config_for_row(base_config, row)
            d = cfg.to_dict()
            d["seed"] = seed
            cfg = TrainConfig.from_dict(d)
            ckpt = checkpoint_hook(row, seed) if checkpoint_hook else None
            if ckpt is None:
                logger.info("ablation row %s seed %d: training stage 2", row, seed)
                ckpt, _ = run_stage(2, cfg, train_set, prereq)
            bundle = ModelBundle.from_checkpoint(ckpt)
            report = evaluate(
                bundle,
                test_set,
                refinement=bundle.config.refinement,
                interaction=bundle.config.interaction,
                seed=seed,
                limit=eval_limit,
            )
            psnrs.append(report.aggregates["median_psnr"])
            ssims.append(report.aggregates["median_ssim"])
        results.append(AblationResult(row=row, seeds=list(seeds), psnr_by_seed=psnrs, ssim_by_seed=ssims))
    return results


def ablation_table(results: list[AblationResult]) -> str:
    """Aligned plain-text comparison table."""
    header = f"{'row':<14}{'median PSNR':>14}{'median SSIM':>14}"
    lines = [header, "-" * len(header)]
    for r in results:
        lines.append(f"{r.row:<14}{r.median_psnr:>14.3f}{r.median_ssim:>14.4f}")
    return "\n".join(lines) + "\n"


def ablation_json(results: list[AblationResult]) -> str:
    payload = [
        {
            "row": r.row,
            "seeds": r.seeds,
            "psnr_by_seed": r.psnr_by_seed,
            "ssim_by_seed": r.ssim_by_seed,
            "median_psnr": r.median_psnr,
            "median_ssim": r.median_ssim,
        }
        for r in results
    ]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def ablation_csv(results: list[AblationResult]) -> str:
    lines = ["row,median_psnr,median_ssim," + ",".join(f"psnr_seed{i}" for i in range(len(results[0].seeds)))]
    for r in results:
        per_seed = ",".join(f"{p:.10g}" for p in r.psnr_by_seed)
        lines.append(f"{r.row},{r.median_psnr:.10g},{r.median_ssim:.10g},{per_seed}")
    return "\n".join(lines) + "\n"
