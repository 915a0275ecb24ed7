"""Trajectory metrics, the aligned distance and the constant-velocity baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np


class DegenerateTrajectoryError(ValueError):
    pass


def _traj(a, name="trajectory") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"{name} must be (T, 2), got {a.shape}")
    return a


def _arc(a: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(a, axis=0), axis=1))])


def align(source, target) -> np.ndarray:
    """Resample ``source`` at the cumulative arc-length fractions of ``target``.

    The result has the target's length; point ``t`` lies at the same fraction
    of the source path that target waypoint ``t`` occupies along the target.
    This removes speed differences between two trajectories that trace the
    same path.
    """
    src = _traj(source, "source")
    tgt = _traj(target, "target")
    if len(src) < 2 or len(tgt) < 2:
        raise ValueError("align needs at least 2 waypoints on both trajectories")
    s_src = _arc(src)
    if s_src[-1] <= 0:
        raise DegenerateTrajectoryError("source trajectory has zero length")
    s_tgt = _arc(tgt)
    if s_tgt[-1] > 0:
        u = s_tgt / s_tgt[-1]
    else:
        u = np.zeros(len(tgt))  # a stationary target sits at the start
    q = u * s_src[-1]
    return np.column_stack([np.interp(q, s_src, src[:, 0]), np.interp(q, s_src, src[:, 1])])


def _distances(pred, gt, aligned: bool) -> np.ndarray:
    p = _traj(pred, "pred")
    g = _traj(gt, "gt")
    if aligned:
        if len(p) >= 2 and _arc(p)[-1] <= 0:
            # a stationary prediction resamples to its single point everywhere
            p = np.repeat(p[:1], len(g), axis=0)
        else:
            p = align(p, g)
    elif p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} differ in length")
    return np.linalg.norm(p - g, axis=1)


def fde(pred, gt, squared: bool = False) -> float:
    """Distance between the final waypoints (raw, not aligned)."""
    p, g = _traj(pred, "pred"), _traj(gt, "gt")
    d2 = float(np.sum((p[-1] - g[-1]) ** 2))
    return d2 if squared else float(np.sqrt(d2))


def ade(pred, gt, aligned: bool = False, squared: bool = False) -> float:
    """Mean per-index displacement; ``aligned`` resamples ``pred`` onto ``gt`` first."""
    d = _distances(pred, gt, aligned)
    return float(np.mean(d ** 2)) if squared else float(np.mean(d))


def min_ade_k(preds: Sequence, gt, aligned: bool = False) -> float:
    if len(preds) == 0:
        raise ValueError("min_ade_k needs at least one candidate")
    return min(ade(p, gt, aligned) for p in preds)


def max_displacement(pred, gt, aligned: bool = False) -> float:
    return float(np.max(_distances(pred, gt, aligned)))


def hit_rate(preds_per_sample: Sequence, gts: Sequence, k: int, d: float, aligned: bool = False) -> float:
    """Fraction of samples whose best of the first ``k`` candidates stays
    within ``d`` meters of the ground truth at every waypoint.

    ``preds_per_sample[i]`` is a (K, T, 2) stack (or a single (T, 2)
    trajectory, treated as K = 1).
    """
    if len(preds_per_sample) != len(gts):
        raise ValueError("one candidate set per ground truth is required")
    if len(gts) == 0:
        raise ValueError("hit_rate of an empty set is undefined")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for cands, g in zip(preds_per_sample, gts):
        cands = np.asarray(cands, dtype=np.float64)
        if cands.ndim == 2:
            cands = cands[None]
        best = min(max_displacement(c, g, aligned) for c in cands[:k])
        hits += best < d
    return hits / len(gts)


def const_vel_yaw(past, T: int, window: Optional[int] = 5) -> np.ndarray:
    """Constant velocity and yaw extrapolation.

    Fits ``p(t) = a + v t`` by least squares over the last ``window`` past
    positions (one time step per position) and continues from the last
    observed position: ``p_last + v * k`` for ``k = 1..T``.
    """
    p = _traj(past, "past")
    if len(p) < 2:
        raise ValueError("const_vel_yaw needs at least 2 past positions")
    if window is not None:
        if window < 2:
            raise ValueError("window must be >= 2")
        p = p[-window:]
    t = np.arange(len(p), dtype=np.float64)
    tc = t - t.mean()
    v = (tc @ (p - p.mean(axis=0))) / (tc @ tc)
    steps = np.arange(1, T + 1, dtype=np.float64)[:, None]
    return p[-1] + steps * v


# ---------------------------------------------------------------- reports

DEFAULT_KS = (1,)
DEFAULT_DS = (1.0, 2.0, 3.0)


@dataclass
class MetricsReport:
    """Aggregated metrics over a dataset (and optionally over repeated trials).

    ``*_std`` fields are filled only for perturbation cells with more than
    one trial.
    """

    fde_m: float
    ade_m: float
    min_ade: Dict[str, float]
    hit_rate: Dict[str, float]
    sample_count: int
    trials: int = 1
    magnitude_m: Optional[float] = None
    label: str = ""
    fde_std: Optional[float] = None
    ade_std: Optional[float] = None
    min_ade_std: Optional[Dict[str, float]] = None
    hit_rate_std: Optional[Dict[str, float]] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def hit_key(k: int, d: float) -> str:
    return f"k{k}_d{d:g}"


def report(preds: Sequence, gts: Sequence, ks: Iterable[int] = DEFAULT_KS, ds: Iterable[float] = DEFAULT_DS,
           aligned: bool = True, label: str = "", magnitude: Optional[float] = None) -> MetricsReport:
    """Metrics for one set of predictions.

    ``preds[i]`` is (T, 2) or a (K, T, 2) candidate stack. FDE is computed on
    the raw final waypoint of the first candidate; ADE, minADE and HitRate use
    the aligned distance when ``aligned`` is set.
    """
    if len(preds) != len(gts) or len(gts) == 0:
        raise ValueError("need matching, non-empty prediction and ground-truth lists")
    stacks = []
    for p in preds:
        p = np.asarray(p, dtype=np.float64)
        stacks.append(p[None] if p.ndim == 2 else p)
    fdes = [fde(s[0], g) for s, g in zip(stacks, gts)]
    ades = [ade(s[0], g, aligned) for s, g in zip(stacks, gts)]
    min_ade = {str(k): float(np.mean([min_ade_k(s[:k], g, aligned) for s, g in zip(stacks, gts)]))
               for k in ks}
    hits = {hit_key(k, d): hit_rate(stacks, gts, k, d, aligned) for k in ks for d in ds}
    return MetricsReport(fde_m=float(np.mean(fdes)), ade_m=float(np.mean(ades)), min_ade=min_ade,
                         hit_rate=hits, sample_count=len(gts), magnitude_m=magnitude, label=label)


def combine_trials(reports: List[MetricsReport]) -> MetricsReport:
    """Mean and (population) standard deviation across repeated trials."""
    if not reports:
        raise ValueError("no trials to combine")
    first = reports[0]
    if len(reports) == 1:
        return first

    def stat(vals):
        a = np.asarray(vals, dtype=np.float64)
        return float(a.mean()), float(a.std())

    fm, fs = stat([r.fde_m for r in reports])
    am, as_ = stat([r.ade_m for r in reports])
    mm, ms, hm, hs = {}, {}, {}, {}
    for key in first.min_ade:
        mm[key], ms[key] = stat([r.min_ade[key] for r in reports])
    for key in first.hit_rate:
        hm[key], hs[key] = stat([r.hit_rate[key] for r in reports])
    return MetricsReport(fde_m=fm, ade_m=am, min_ade=mm, hit_rate=hm, sample_count=first.sample_count,
                         trials=len(reports), magnitude_m=first.magnitude_m, label=first.label,
                         fde_std=fs, ade_std=as_, min_ade_std=ms, hit_rate_std=hs)
