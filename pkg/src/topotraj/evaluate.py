"""Dataset-level evaluation and the lateral-perturbation protocol."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .metrics import DEFAULT_DS, DEFAULT_KS, MetricsReport, combine_trials, const_vel_yaw, report
from .model import WaypointModel
from .train import InputSettings, PreparedSample, predict, train_loop

PERTURBATION_MAGNITUDES = (0.0, 1.0, 2.0, 3.0)


def trial_seeds(seed: int, trial: int, n: int) -> List[int]:
    """Per-sample perturbation seeds for one trial.

    They depend on the trial index but not on the magnitude, so the same
    noise pattern is scaled across magnitudes and the trend is not masked
    by sampling noise.
    """
    rng = np.random.default_rng([seed, trial, 7])
    return [int(s) for s in rng.integers(0, 2 ** 31, size=n)]


def evaluate(model: WaypointModel, prepared: Sequence[PreparedSample], settings: InputSettings,
             magnitude: float = 0.0, seeds: Optional[Sequence[int]] = None, aligned: bool = True,
             ks=DEFAULT_KS, ds=DEFAULT_DS, label: str = "", constant: bool = False) -> MetricsReport:
    preds = predict(model, prepared, settings, magnitude, seeds, constant=constant)
    return report(list(preds), [p.gt_ego for p in prepared], ks, ds, aligned, label, magnitude)


def evaluate_baseline(prepared: Sequence[PreparedSample], window: int = 5, aligned: bool = True,
                      ks=DEFAULT_KS, ds=DEFAULT_DS) -> MetricsReport:
    preds = [const_vel_yaw(p.scene.past_ego(), len(p.gt_ego), window) for p in prepared]
    return report(preds, [p.gt_ego for p in prepared], ks, ds, aligned, label="const_vel_yaw")


def perturbation_eval(model: WaypointModel, prepared: Sequence[PreparedSample], settings: InputSettings,
                      magnitudes: Sequence[float] = PERTURBATION_MAGNITUDES, trials: int = 3, seed: int = 0,
                      aligned: bool = True, constant: bool = False, label: str = "") -> List[MetricsReport]:
    """One report per magnitude: mean and standard deviation over ``trials``
    freshly seeded map perturbations (a single run at magnitude 0)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = []
    for m in magnitudes:
        if m < 0:
            raise ValueError(f"perturbation magnitude must be >= 0, got {m}")
        runs = 1 if m == 0 else trials
        reps = [evaluate(model, prepared, settings, m, trial_seeds(seed, t, len(prepared)), aligned,
                         label=label, constant=constant) for t in range(runs)]
        out.append(combine_trials(reps))
    return out


def run_ablation(train_prepared: Sequence[PreparedSample], test_prepared: Sequence[PreparedSample],
                 model_cfg, train_cfg, settings: InputSettings, variants: Sequence[str],
                 out_dir=None, aligned: bool = True, ks=DEFAULT_KS, ds=DEFAULT_DS) -> List[MetricsReport]:
    """Train and evaluate each variant through the same pipeline (same data,
    same seeds, same schedule); one report per variant, labelled by name."""
    reports = []
    for v in variants:
        cfg = replace(model_cfg, variant=v)
        sub = None if out_dir is None else Path(out_dir) / v
        res = train_loop([], cfg, train_cfg, settings, out_dir=sub, prepared=list(train_prepared))
        reports.append(evaluate(res.model, test_prepared, settings, aligned=aligned, ks=ks, ds=ds, label=v))
    return reports
