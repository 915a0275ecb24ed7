"""Multi-task losses, sample preparation and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .datagen import SceneSample
from .diffcore import (
    DiffArray,
    ShapeError,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    no_grad,
    ops,
    read_manifest,
    save_checkpoint,
    zero_grad,
)
from .metrics import ade
from .model import ModelConfig, ModelOutput, WaypointModel
from .raster import (
    GridSpec,
    HEATMAP_SIGMA_DEFAULT,
    ROUTE_WIDTH_DEFAULT,
    make_gt_heatmaps,
    rasterize_cloud,
    rasterize_route,
    road_target,
)
from .topomap import DEFAULT_BACKWARD, DEFAULT_FORWARD, extract_local_route, perturb_lateral

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.003
    batch_size: int = 8
    epochs: int = 120
    max_steps: Optional[int] = None
    train_perturbation_m: float = 0.25
    seed: int = 0
    w_road: float = 1.0
    w_heatmap: float = 1.0
    w_waypoint: float = 1.0
    grad_clip: Optional[float] = 10.0
    warmup_steps: int = 0  # linear learning-rate ramp over the first optimizer steps
    checkpoint_every: int = 10
    # stop as soon as the (aligned) train ADE drops below this, checked every eval_every steps
    stop_train_ade: Optional[float] = None
    eval_every: int = 50

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if min(self.w_road, self.w_heatmap, self.w_waypoint) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.train_perturbation_m < 0:
            raise ValueError("train_perturbation_m must be >= 0")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d or {}) - names
        if unknown:
            raise ValueError(f"unknown train parameters: {sorted(unknown)}")
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- losses


def road_loss(pred_mask: DiffArray, gt_mask, reduction: str = "mean") -> DiffArray:
    """Binary cross-entropy between the predicted road probability map and
    the binary ground-truth mask; ``sum`` is the plain double sum over pixels."""
    gt = np.asarray(gt_mask.data if isinstance(gt_mask, DiffArray) else gt_mask)
    if pred_mask.shape != gt.shape:
        raise ShapeError(f"road_loss: prediction {pred_mask.shape} vs target {gt.shape}")
    return ops.bce_loss(pred_mask, gt.astype(pred_mask.dtype), reduction=reduction)


def heatmap_loss(pred: DiffArray, gt, reduction: str = "map") -> DiffArray:
    """Squared error between heatmap stacks.

    ``sum``: summed over every cell, channel and sample. ``mean``: per-cell
    mean. ``map``: summed over the cells of each map, averaged over maps (the
    scale used in the optimized total; it does not shrink with grid size).
    """
    gt = np.asarray(gt.data if isinstance(gt, DiffArray) else gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"heatmap_loss: prediction {pred.shape} vs target {gt.shape}")
    if reduction == "map":
        maps = int(np.prod(pred.shape[:-2]))
        return ops.scale(ops.mse_loss(pred, gt.astype(pred.dtype), reduction="sum"), 1.0 / maps)
    return ops.mse_loss(pred, gt.astype(pred.dtype), reduction=reduction)


def waypoint_loss(pred: DiffArray, gt) -> DiffArray:
    """Sum over waypoints of squared Euclidean error, averaged over the batch.
    ``pred`` and ``gt`` are (B, T, 2) in whatever units the caller chose."""
    gt = np.asarray(gt.data if isinstance(gt, DiffArray) else gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"waypoint_loss: prediction {pred.shape} vs target {gt.shape}")
    batch = pred.shape[0] if pred.ndim == 3 else 1
    return ops.scale(ops.mse_loss(pred, gt.astype(pred.dtype), reduction="sum"), 1.0 / batch)


@dataclass
class Targets:
    trajectory: np.ndarray       # (B, T, 2) ego meters
    trajectory_norm: np.ndarray  # (B, T, 2) in grid-normalized units
    heatmaps: np.ndarray         # (B, T, H0/4, W0/4)
    road: np.ndarray             # (B, 1, H0/4, W0/4)


@dataclass
class LossBreakdown:
    total: DiffArray
    terms: Dict[str, float] = field(default_factory=dict)


def total_loss(out: ModelOutput, tgt: Targets, w_road: float = 1.0, w_heatmap: float = 1.0,
               w_waypoint: float = 1.0) -> LossBreakdown:
    """Weighted sum of the active heads' losses.

    Heads a variant does not have contribute nothing. The trajectory of the
    heatmap-only variant is a soft-argmax readout rather than a regression
    head, so it is not supervised by the waypoint term.
    """
    parts = []
    terms = {}
    if out.road_mask is not None:
        l = road_loss(out.road_mask, tgt.road)
        terms["l_road"] = float(l.data)
        terms["l_road_sum"] = float(ops.bce_loss(DiffArray(out.road_mask.data), tgt.road, "sum").data)
        if w_road:
            parts.append(ops.scale(l, w_road))
    if out.heatmaps is not None:
        l = heatmap_loss(out.heatmaps, tgt.heatmaps)
        terms["l_heatmap"] = float(l.data)
        terms["l_heatmap_sum"] = float(heatmap_loss(DiffArray(out.heatmaps.data), tgt.heatmaps, "sum").data)
        if w_heatmap:
            parts.append(ops.scale(l, w_heatmap))
    if out.trajectory_norm is not None:
        l = waypoint_loss(out.trajectory_norm, tgt.trajectory_norm)
        terms["l_waypoint"] = float(l.data)
        if w_waypoint:
            parts.append(ops.scale(l, w_waypoint))
    diff = out.trajectory.data.astype(np.float64) - tgt.trajectory
    terms["l_waypoint_m"] = float(np.sum(diff ** 2) / diff.shape[0])
    if not parts:
        total = DiffArray(np.zeros((), dtype=out.trajectory.dtype))
    else:
        total = parts[0]
        for p in parts[1:]:
            total = ops.add(total, p)
    terms["l_total"] = float(total.data)
    return LossBreakdown(total, terms)


# -------------------------------------------------------------- preparation


@dataclass
class PreparedSample:
    """Everything about a scene that does not change between epochs."""

    scene: SceneSample
    cloud_channels: np.ndarray  # (3, H0, W0)
    gt_ego: np.ndarray          # (T, 2)
    gt_norm: np.ndarray
    gt_heatmaps: np.ndarray     # (T, h, w)
    road_gt: np.ndarray         # (1, h, w)
    clean_route: np.ndarray = None


@dataclass
class InputSettings:
    grid: GridSpec = field(default_factory=GridSpec)
    route_width: float = ROUTE_WIDTH_DEFAULT
    forward_window: float = DEFAULT_FORWARD
    backward_window: float = DEFAULT_BACKWARD
    heatmap_sigma: float = HEATMAP_SIGMA_DEFAULT


def prepare(scenes: Sequence[SceneSample], settings: InputSettings) -> List[PreparedSample]:
    out = []
    g = settings.grid
    for s in scenes:
        gt = s.gt_ego()
        route = extract_local_route(s.map, s.pose, settings.forward_window, settings.backward_window)
        out.append(PreparedSample(
            scene=s,
            cloud_channels=rasterize_cloud(s.cloud, g).astype(np.float32),
            gt_ego=gt,
            gt_norm=g.normalize(gt),
            gt_heatmaps=make_gt_heatmaps(gt, g, settings.heatmap_sigma).astype(np.float32),
            road_gt=road_target(gt, g, width=settings.route_width)[None].astype(np.float32),
            clean_route=route,
        ))
    return out


def local_route(p: PreparedSample, settings: InputSettings, magnitude: float = 0.0, seed: int = 0,
                constant: bool = False) -> np.ndarray:
    if magnitude == 0:
        return p.clean_route
    m = perturb_lateral(p.scene.map, magnitude, seed, constant)
    return extract_local_route(m, p.scene.pose, settings.forward_window, settings.backward_window)


def model_input(p: PreparedSample, settings: InputSettings, magnitude: float = 0.0, seed: int = 0,
                constant: bool = False) -> np.ndarray:
    route = local_route(p, settings, magnitude, seed, constant)
    road = rasterize_route(route, settings.grid, settings.route_width).astype(np.float32)
    return np.concatenate([p.cloud_channels, road[None]], axis=0)


def collate(samples: Sequence[PreparedSample], inputs: Sequence[np.ndarray]):
    x = np.stack(inputs).astype(np.float32)
    tgt = Targets(
        trajectory=np.stack([s.gt_ego for s in samples]),
        trajectory_norm=np.stack([s.gt_norm for s in samples]),
        heatmaps=np.stack([s.gt_heatmaps for s in samples]),
        road=np.stack([s.road_gt for s in samples]),
    )
    return x, tgt


def predict(model: WaypointModel, prepared: Sequence[PreparedSample], settings: InputSettings,
            magnitude: float = 0.0, seeds: Optional[Sequence[int]] = None, batch_size: int = 8,
            constant: bool = False) -> np.ndarray:
    """Ego-frame predictions (n, N, 2), optionally with perturbed maps."""
    preds = []
    with no_grad():
        for i in range(0, len(prepared), batch_size):
            chunk = prepared[i:i + batch_size]
            xs = [model_input(p, settings, magnitude, 0 if seeds is None else seeds[i + j], constant)
                  for j, p in enumerate(chunk)]
            preds.append(model.predict(np.stack(xs).astype(np.float32)))
    return np.concatenate(preds, axis=0)


# -------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: WaypointModel
    log: List[dict]
    steps: int
    checkpoint: Optional[Path] = None


def _mean_terms(rows: List[Dict[str, float]]) -> Dict[str, float]:
    keys = sorted({k for r in rows for k in r})
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


def train_loop(scenes: Sequence[SceneSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
               settings: Optional[InputSettings] = None, out_dir=None,
               model: Optional[WaypointModel] = None,
               on_epoch: Optional[Callable[[dict], None]] = None,
               prepared: Optional[List[PreparedSample]] = None) -> TrainResult:
    """Adam on the multi-task loss with per-sample train-time map perturbation.

    Writes ``loss_log.jsonl`` (one JSON object per epoch) and checkpoints to
    ``out_dir`` when given.
    """
    if not scenes and not prepared:
        raise ValueError("training needs a non-empty dataset")
    train_cfg.validate()
    settings = settings or InputSettings(grid=GridSpec.for_size(model_cfg.height, model_cfg.width))
    prepared = prepared if prepared is not None else prepare(scenes, settings)
    model = model or WaypointModel(model_cfg, settings.grid)
    params = model.parameters()
    shuffle_rng = np.random.default_rng(train_cfg.seed)
    perturb_rng = np.random.default_rng([train_cfg.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.jsonl", "w")
    history: List[dict] = []
    step = 0
    ckpt = None
    stop = False
    n = len(prepared)
    bs = min(train_cfg.batch_size, n)
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(n)
            rows = []
            for b_idx, start in enumerate(range(0, n - bs + 1, bs)):
                batch = [prepared[i] for i in order[start:start + bs]]
                seeds = perturb_rng.integers(0, 2 ** 31, size=len(batch))
                xs = [model_input(p, settings, train_cfg.train_perturbation_m, int(s)) for p, s in zip(batch, seeds)]
                x, tgt = collate(batch, xs)
                outp = model(x)
                lb = total_loss(outp, tgt, train_cfg.w_road, train_cfg.w_heatmap, train_cfg.w_waypoint)
                if not np.isfinite(lb.terms["l_total"]):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b_idx}: "
                        + ", ".join(f"{k}={v}" for k, v in sorted(lb.terms.items())))
                zero_grad(params)
                lb.total.backward()
                for p in params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                clip_grad_norm(params, train_cfg.grad_clip)
                adam_step(params, lr=train_cfg.lr_at(step))
                step += 1
                rows.append(lb.terms)
                if train_cfg.stop_train_ade is not None and step % train_cfg.eval_every == 0:
                    cur = train_ade(model, prepared, settings)
                    log.info("step %d train ADE %.3f m", step, cur)
                    if cur < train_cfg.stop_train_ade:
                        stop = True
                if stop or (train_cfg.max_steps is not None and step >= train_cfg.max_steps):
                    stop = True
                    break
            entry = {"epoch": epoch, "step": step, **_mean_terms(rows),
                     "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            for k in ("l_road", "l_heatmap", "l_waypoint"):
                entry.setdefault(k, 0.0)
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(entry)
            log.info("epoch %d step %d total %.5f", epoch, step, entry.get("l_total", 0.0))
            if out is not None and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
                ckpt = save_model(out / "checkpoint", model, settings)
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        ckpt = save_model(out / "checkpoint", model, settings)
    return TrainResult(model=model, log=history, steps=step, checkpoint=ckpt)


def train_ade(model: WaypointModel, prepared: Sequence[PreparedSample], settings: InputSettings) -> float:
    preds = predict(model, prepared, settings)
    return float(np.mean([ade(pr, p.gt_ego, aligned=True) for pr, p in zip(preds, prepared)]))


# ---------------------------------------------------------------- checkpoints


def save_model(path, model: WaypointModel, settings: InputSettings) -> Path:
    extra = {
        "model_config": model.config.to_dict(),
        "grid": settings.grid.to_dict(),
        "input": {"route_width": settings.route_width, "forward_window": settings.forward_window,
                  "backward_window": settings.backward_window, "heatmap_sigma": settings.heatmap_sigma},
    }
    return save_checkpoint(path, model.state_dict(), extra=extra)


def load_model(path):
    """Rebuild a model and its input settings from a checkpoint."""
    manifest = read_manifest(path)
    extra = manifest["extra"]
    cfg = ModelConfig(**extra["model_config"])
    grid = GridSpec(**extra["grid"])
    settings = InputSettings(grid=grid, **extra.get("input", {}))
    model = WaypointModel(cfg, grid)
    load_checkpoint(path, model.state_dict())
    return model, settings
