"""
Multi-run experiments: the adapter/loss ablation ladder and one-key sweeps.
Each run trains a fresh model in its own output directory; with workers > 1
runs execute in separate processes.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.model import parameter_budget
from app.core.trainer import train
from app.models.config import RunConfig
from app.models.models import AblationRow, Variant
from app.services import reports

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("index", "variant", "num_experts", "bottleneck_dim", "losses", "tunable_params",
                    "acc_all", "acc_old", "acc_new", "seeds")
SEED_COLUMNS = ("variant", "seed", "acc_all", "acc_old", "acc_new")
SWEEP_METRICS = ("acc_all", "acc_old", "acc_new", "tunable_params")

DEFAULT_VARIANTS = tuple(Variant)

LOSS_LABELS = {
    Variant.MEA_BA: "L_sgcd+L_ba",
    Variant.MEA_BA_CBA: "L_sgcd+L_ba+L_cba",
}


def variant_config(base: RunConfig, variant: Variant) -> RunConfig:
    """Derive one ablation variant from the base configuration."""
    off = {"constraint.alpha": 0.0, "constraint.beta": 0.0}
    if variant is Variant.SIMGCD_LAST_BLOCK:
        return base.updated({**off, "mea.enabled": False, "backbone.unfreeze_last_block": True})
    if variant is Variant.BASELINE_NO_ADAPTER:
        return base.updated({**off, "mea.enabled": False})
    if variant is Variant.SINGLE_ADAPTER:
        return base.updated({**off, "mea.enabled": True, "mea.num_experts": 1, "mea.num_old_experts": None})
    if variant is Variant.SINGLE_ADAPTER_WIDE:
        # one expert as wide as all experts together, capped below d
        wide = min(base.mea.num_experts * base.mea.bottleneck_dim, base.backbone.embed_dim - 1)
        return base.updated({**off, "mea.enabled": True, "mea.num_experts": 1, "mea.num_old_experts": None,
                             "mea.bottleneck_dim": wide})
    if variant is Variant.MEA:
        return base.updated({**off, "mea.enabled": True})
    if variant is Variant.MEA_BA:
        return base.updated({"mea.enabled": True, "constraint.alpha": 0.0})
    return base.updated({"mea.enabled": True})


def _seeded(config: RunConfig, seed: int) -> RunConfig:
    return config.updated({"run.seed": seed, "data.seed": config.data.seed + seed})


def _run_job(job: Tuple[str, str]) -> Dict[str, Optional[float]]:
    # Module-level so ProcessPoolExecutor can pickle it
    config_json, output_dir = job
    outcome = train(RunConfig.model_validate_json(config_json), output_dir=Path(output_dir))
    report = outcome.evaluation.report
    return {"acc_all": report.acc_all, "acc_old": report.acc_old, "acc_new": report.acc_new}


def run_jobs(jobs: List[Tuple[str, str]], workers: int = 1) -> List[Dict[str, Optional[float]]]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(job) for job in jobs]


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def ablate(config: RunConfig, variants: Sequence[Variant] = DEFAULT_VARIANTS, seeds: Sequence[int] = (0,),
           workers: int = 1, output_dir: Optional[Path] = None) -> List[AblationRow]:
    """Train every variant on every seed and average the accuracies per variant."""
    out = Path(output_dir or config.run.output_dir)
    configs = {variant: variant_config(config, variant) for variant in variants}

    jobs, keys = [], []
    for variant, variant_cfg in configs.items():
        for seed in seeds:
            run_dir = out / variant.value / f"seed_{seed}"
            jobs.append((_seeded(variant_cfg, seed).model_dump_json(), str(run_dir)))
            keys.append((variant, seed))
    logger.info("ablation: %d variants x %d seeds (%d runs, %d workers)",
                len(configs), len(seeds), len(jobs), workers)
    results = run_jobs(jobs, workers)

    per_seed = [{"variant": variant.value, "seed": seed, **result}
                for (variant, seed), result in zip(keys, results)]
    rows = []
    for index, (variant, variant_cfg) in enumerate(configs.items(), start=1):
        mine = [r for r in per_seed if r["variant"] == variant.value]
        budget = parameter_budget(variant_cfg)
        rows.append(AblationRow(
            index=index,
            variant=variant.value,
            num_experts=variant_cfg.mea.num_experts if variant_cfg.mea.enabled else None,
            bottleneck_dim=variant_cfg.mea.bottleneck_dim if variant_cfg.mea.enabled else None,
            losses=LOSS_LABELS.get(variant, "L_sgcd"),
            tunable_params=budget["mea"] + budget["backbone"],
            acc_all=_mean([r["acc_all"] for r in mine]),
            acc_old=_mean([r["acc_old"] for r in mine]),
            acc_new=_mean([r["acc_new"] for r in mine]),
            seeds=",".join(str(seed) for seed in seeds),
        ))

    reports.write_csv(out / "ablation.csv", ABLATION_COLUMNS, [vars(row) for row in rows])
    reports.write_csv(out / "ablation_seeds.csv", SEED_COLUMNS, per_seed)
    check_ablation_order(rows)
    return rows


def check_ablation_order(rows: Sequence[AblationRow]) -> bool:
    """Soft gate: the full method should lead acc_new, and adapters should beat no adapter."""
    by_variant = {row.variant: row.acc_new for row in rows}
    full = by_variant.get(Variant.MEA_BA_CBA.value)
    mea = by_variant.get(Variant.MEA.value)
    baseline = by_variant.get(Variant.BASELINE_NO_ADAPTER.value)
    if None in (full, mea, baseline):
        logger.info("ablation soft gate skipped: needs mea-ba-cba, mea and baseline-no-adapter rows")
        return False
    leader = max(by_variant, key=lambda v: -1.0 if by_variant[v] is None else by_variant[v])
    ok = full >= mea >= baseline and leader == Variant.MEA_BA_CBA.value
    log = logger.info if ok else logger.warning
    log("ablation soft gate %s: acc_new mea-ba-cba=%.3f mea=%.3f baseline=%.3f (leader %s)",
        "passed" if ok else "missed", full, mea, baseline, leader)
    return ok


def sweep(config: RunConfig, key: str, values: Sequence[Any], workers: int = 1,
          output_dir: Optional[Path] = None) -> List[Dict[str, Any]]:
    """Train once per value of one config key and tabulate accuracies."""
    out = Path(output_dir or config.run.output_dir)
    configs = [config.updated({key: value}) for value in values]
    jobs = [(cfg.model_dump_json(), str(out / f"{key}={value}")) for cfg, value in zip(configs, values)]
    results = run_jobs(jobs, workers)

    rows = []
    for value, cfg, result in zip(values, configs, results):
        budget = parameter_budget(cfg)
        rows.append({"key": key, "value": value, **result, "tunable_params": budget["mea"] + budget["backbone"]})
        logger.info("sweep %s=%s: acc_all=%s acc_new=%s", key, value, result["acc_all"], result["acc_new"])
    reports.write_csv(out / "sweep.csv", ("key", "value") + SWEEP_METRICS, rows)
    return rows
