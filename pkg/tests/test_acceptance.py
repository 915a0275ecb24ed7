"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 1-5 are fast property and oracle checks. Criteria 6-9 train real
models on synthetic data (``-m "not slow"`` skips them); together they take
about twenty minutes on one CPU core.
"""

import math
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from topotraj import cli
from topotraj.config import RunConfig
from topotraj.datagen import generate_scene, sample_seed
from topotraj.diffcore import DiffArray, ops
from topotraj.evaluate import perturbation_eval, run_ablation
from topotraj.metrics import ade, const_vel_yaw, fde, hit_rate, min_ade_k
from topotraj.model import VARIANTS
from topotraj.raster import GridSpec, make_gt_heatmaps
from topotraj.train import prepare, train_ade, train_loop

from gradcheck import check
from test_diffcore import CASES
from test_model import _param_gradcheck


@pytest.fixture
def verdict(capsys):
    def emit(num, title, ok, detail):
        line = f"ACCEPTANCE {num} [PRIMARY] {title}: {'PASS' if ok else 'FAIL'} -- {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


# ------------------------------------------------------------------ oracles


def _loop_align(src, tgt):
    """Scalar arc-length resampling of ``src`` at ``tgt``'s fractions."""
    def cum(a):
        out = [0.0]
        for i in range(1, len(a)):
            out.append(out[-1] + math.hypot(a[i][0] - a[i - 1][0], a[i][1] - a[i - 1][1]))
        return out
    cs, ct = cum(src), cum(tgt)
    if cs[-1] == 0.0:
        return [tuple(src[0])] * len(tgt)
    out = []
    for s_t in ct:
        s = (s_t / ct[-1] if ct[-1] > 0 else 0.0) * cs[-1]
        j = 0
        while j < len(src) - 2 and cs[j + 1] < s:
            j += 1
        seg = cs[j + 1] - cs[j]
        t = 0.0 if seg == 0 else min(max((s - cs[j]) / seg, 0.0), 1.0)
        out.append((src[j][0] + t * (src[j + 1][0] - src[j][0]), src[j][1] + t * (src[j + 1][1] - src[j][1])))
    return out


def _loop_dists(p, g, aligned):
    q = _loop_align(p, g) if aligned else p
    return [math.hypot(q[i][0] - g[i][0], q[i][1] - g[i][1]) for i in range(len(g))]


# -------------------------------------------------------------- criteria 1-5


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    per_op = Counter(name.split("-")[0].replace("depthwise", "depthwise_conv2d").replace("upsample", "upsample2x")
                     .replace("residual", "residual_block").replace("attention", "multi_head_attention")
                     .replace("mse", "mse_loss").replace("bce", "bce_loss") for name, _, _ in CASES)
    public = {n for n, f in vars(ops).items()
              if callable(f) and not n.startswith("_") and getattr(f, "__module__", "") == ops.__name__
              and n != "as_array"}
    missing = public - set(per_op)
    errs = {name: check(fn, arrays, h=1e-3, dtype=np.float32) for name, fn, arrays in CASES}
    worst_op = max(errs, key=errs.get)
    model_err = _param_gradcheck(np.float32)
    elapsed = time.perf_counter() - t0
    ok = (not missing and max(errs.values()) < 1e-3 and min(per_op.values()) >= 5 and model_err < 1e-2
          and elapsed < 60)
    verdict(1, "gradient suite", ok,
            f"{len(per_op)} ops (untested: {sorted(missing) or 'none'}), >= {min(per_op.values())} shapes each, "
            f"worst op error {errs[worst_op]:.2e} ({worst_op}); tiny model end-to-end {model_err:.2e}; "
            f"{elapsed:.1f} s")


def test_criterion_2_normalization(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        B, C = rng.integers(1, 3), rng.integers(1, 13)
        H, W = rng.integers(1, 41, size=2)
        logits = rng.normal(0, rng.uniform(0.1, 20), (B, C, H, W)).astype(np.float32)
        s = ops.spatial_softmax(DiffArray(logits)).data.astype(np.float64).sum(axis=(2, 3))
        h8, w8 = 8 * rng.integers(2, 21, size=2)
        spec = GridSpec(int(h8), int(w8), rng.uniform(0.25, 1.0), ego_row=4 * int(rng.integers(1, h8 // 4)),
                        ego_col=4 * int(rng.integers(1, w8 // 4)))
        x0, x1, y0, y1 = spec.extent
        traj = rng.uniform([x0 - 5, y0 - 5], [x1 + 5, y1 + 5], (12, 2))  # some fall off the grid
        g = make_gt_heatmaps(traj, spec, sigma=rng.uniform(0.5, 3.0)).sum(axis=(1, 2))
        worst = max(worst, np.abs(s - 1).max(), np.abs(g - 1).max())
    verdict(2, "heatmap normalization", worst <= 1e-5, f"100 cases, max |sum - 1| = {worst:.2e}")


def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    worst, mono_d, mono_k = 0.0, True, True
    for i in range(100):
        T = int(rng.integers(2, 16))
        g = np.cumsum(rng.normal(0, 2, (T, 2)), axis=0)
        cands = [g + np.cumsum(rng.normal(0, rng.uniform(0.05, 2), (T, 2)), axis=0) for _ in range(4)]
        p = cands[0]
        gl, pl = g.tolist(), p.tolist()
        for aligned in (False, True):
            d = _loop_dists(pl, gl, aligned)
            ref_fde = math.hypot(pl[-1][0] - gl[-1][0], pl[-1][1] - gl[-1][1])
            worst = max(worst, abs(fde(p, g) - ref_fde), abs(ade(p, g, aligned) - sum(d) / T))
            ref_min = [min(sum(_loop_dists(c.tolist(), gl, aligned)) / T for c in cands[:k]) for k in (1, 2, 3, 4)]
            got_min = [min_ade_k(cands[:k], g, aligned) for k in (1, 2, 3, 4)]
            worst = max(worst, max(abs(a - b) for a, b in zip(got_min, ref_min)))
            mono_k &= all(a >= b for a, b in zip(got_min, got_min[1:]))
            for k in (1, 4):
                best = min(max(_loop_dists(c.tolist(), gl, aligned)) for c in cands[:k])
                hr = [hit_rate([np.stack(cands)], [g], k, dd, aligned) for dd in (0.5, 1.0, 2.0, 4.0, 8.0)]
                worst = max(worst, max(abs(h - float(best < dd)) for h, dd in zip(hr, (0.5, 1.0, 2.0, 4.0, 8.0))))
                mono_d &= all(a <= b for a, b in zip(hr, hr[1:]))
    # dataset-level hit rate, monotone in d
    gts = [np.cumsum(rng.normal(0, 2, (8, 2)), axis=0) for _ in range(50)]
    preds = [g + rng.normal(0, 1.5, (8, 2)) for g in gts]
    curve = [hit_rate(preds, gts, 1, dd, True) for dd in np.linspace(0.1, 10, 40)]
    mono_d &= all(a <= b for a, b in zip(curve, curve[1:]))
    verdict(3, "metric oracles", worst <= 1e-9 and mono_d and mono_k,
            f"100 pairs, raw and aligned, max |metric - loop oracle| = {worst:.1e}; "
            f"hit rate monotone in d: {mono_d}; minADE monotone in k: {mono_k}")


def test_criterion_4_alignment(verdict):
    # one L-shaped path (corner at arc length 10 m, sampled by both), uniform
    # 2 m steps for the truth, an accelerating prediction
    def at(s):
        return (s, 0.0) if s <= 10 else (10.0, s - 10)
    gt = np.array([at(2.0 * i) for i in range(12)])
    pred = np.array([at(s) for s in (0, 0.3, 1.2, 2.7, 4.8, 7.5, 10, 13, 16, 18.5, 20.5, 22)])
    a, u = ade(pred, gt, aligned=True), ade(pred, gt, aligned=False)
    verdict(4, "alignment invariant", a < 1e-6 and u > 0.1, f"aligned ADE {a:.1e} m, unaligned ADE {u:.3f} m")


def test_criterion_5_physics_baseline(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        h, v = rng.uniform(-math.pi, math.pi), rng.uniform(0.2, 3.0)
        step = v * np.array([math.cos(h), math.sin(h)])
        start = rng.uniform(-50, 50, 2)
        past = start + np.arange(5)[:, None] * step
        fut = start + np.arange(5, 17)[:, None] * step
        pred = const_vel_yaw(past, 12)
        worst = max(worst, fde(pred, fut), ade(pred, fut), ade(pred, fut, aligned=True))
    # circle: least squares over 5 evenly spaced arc samples gives the tangent
    # at the middle sample with speed R (sin d + 2 sin 2d) / 5 per step
    R, dth, T = 30.0, 1.0 / 30.0, 10
    pos = lambda th: np.array([R * math.sin(th), R * (1 - math.cos(th))])  # noqa: E731
    past = np.array([pos(j * dth) for j in range(5)])
    fut = np.array([pos((4 + k) * dth) for k in range(1, T + 1)])
    speed = R * (math.sin(dth) + 2 * math.sin(2 * dth)) / 5
    tangent = np.array([math.cos(2 * dth), math.sin(2 * dth)])
    expected = pos(4 * dth) + np.arange(1, T + 1)[:, None] * speed * tangent
    pred = const_vel_yaw(past, T)
    circ = abs(fde(pred, fut) - float(np.linalg.norm(expected[-1] - fut[-1])))
    circ = max(circ, abs(ade(pred, fut) - float(np.linalg.norm(expected - fut, axis=1).mean())))
    verdict(5, "physics baseline exactness", worst <= 1e-9 and circ <= 1e-6,
            f"straight pasts max error {worst:.1e} m; circle vs closed form {circ:.1e} m")


# ----------------------------------------------------------- criteria 6-9


@pytest.mark.slow
def test_criterion_6_overfit(verdict):
    rc = RunConfig()
    settings = rc.input_settings()
    prepared = prepare([generate_scene(sample_seed("train", 0, i), rc.datagen, rc.grid) for i in range(32)],
                       settings)
    t0 = time.perf_counter()
    res = train_loop([], rc.model, replace(rc.train, max_steps=2000, epochs=10_000, stop_train_ade=1.0,
                                           eval_every=50), settings, prepared=prepared)
    wall = time.perf_counter() - t0
    final = train_ade(res.model, prepared, settings)
    verdict(6, "overfit 32 scenes", final < 1.0 and res.steps <= 2000 and wall < 1800,
            f"train ADE {final:.3f} m after {res.steps} steps, {wall / 60:.1f} min (desk config, 1 thread)")


# Criterion 7 runs criterion 6's regime (desk model, default schedule) on a
# larger train split, then perturbs the maps of a held-out test split.
C7_TRAIN, C7_TEST, C7_STEPS = 128, 32, 600


@pytest.mark.slow
def test_criterion_7_perturbation_trend(verdict):
    rc = RunConfig()
    settings = rc.input_settings()
    gen = lambda split, n: prepare(  # noqa: E731
        [generate_scene(sample_seed(split, rc.seed, i), rc.datagen, rc.grid) for i in range(n)], settings)
    train, test = gen("train", C7_TRAIN), gen("test", C7_TEST)
    res = train_loop([], rc.model, replace(rc.train, max_steps=C7_STEPS, epochs=10_000), settings, prepared=train)
    reps = perturbation_eval(res.model, test, settings, (0.0, 1.0, 2.0, 3.0), trials=3, seed=rc.seed)
    f = [r.fde_m for r in reps]
    mono = all(a <= b for a, b in zip(f, f[1:]))
    verdict(7, "perturbation trend", mono and f[3] - f[0] < 3.0,
            "FDE at 0/1/2/3 m: " + " / ".join(f"{x:.3f}" for x in f) + f" m; FDE(3) - FDE(0) = {f[3] - f[0]:.3f} m")


# The six-variant ablation is trained on a coarser grid (80 x 80 at 1 m) so
# all variants fit the wall-clock budget; every variant sees identical data,
# seeds and schedule.
C8_GRID = GridSpec(80, 80, 1.0, ego_row=60, ego_col=40)
C8_TRAIN, C8_TEST, C8_STEPS = 64, 32, 400


@pytest.mark.slow
def test_criterion_8_ablation(verdict):
    rc = RunConfig()
    settings = replace(rc.input_settings(), grid=C8_GRID)
    model_cfg = replace(rc.model, height=C8_GRID.height, width=C8_GRID.width)
    gen = lambda split, n: prepare(  # noqa: E731
        [generate_scene(sample_seed(split, rc.seed, i), rc.datagen, C8_GRID) for i in range(n)], settings)
    train, test = gen("train", C8_TRAIN), gen("test", C8_TEST)
    reps = run_ablation(train, test, model_cfg, replace(rc.train, max_steps=C8_STEPS, epochs=10_000), settings,
                        VARIANTS)
    by = {r.label: r for r in reps}
    comparable = [r.label for r in reps] == list(VARIANTS) and len({r.sample_count for r in reps}) == 1
    ok = comparable and by["heatmap_only"].ade_m > by["full"].ade_m
    verdict(8, "ablation harness", ok,
            ", ".join(f"{v} ADE {by[v].ade_m:.3f}" for v in VARIANTS) + " m")


TINY = """\
seed: 11
grid: {height: 64, width: 64, resolution: 1.0, ego_row: 48, ego_col: 32}
model: {heads: 4, encoder_layers: 1, decoder_layers: 1, ffn_hidden: 64}
train: {epochs: 3, batch_size: 4, warmup_steps: 4}
datagen: {cloud_points: 4000}
"""


@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY)
    c = ["--config", str(cfg), "--threads", "1"]
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli.main(["datagen", *c, "--out", str(d / "train"), "--count", "12"]) == 0
        assert cli.main(["datagen", *c, "--out", str(d / "test"), "--count", "6", "--split", "test"]) == 0
        assert cli.main(["train", *c, "--data", str(d / "train"), "--out", str(d / "run")]) == 0
        assert cli.main(["eval", *c, "--data", str(d / "test"), "--checkpoint", str(d / "run" / "checkpoint"),
                         "--report", str(d / "report.json")]) == 0
        outputs.append({name: (d / name).read_bytes() for name in
                        ("report.json", "run/checkpoint.bin", "run/checkpoint.json")})
    same = {k: outputs[0][k] == outputs[1][k] for k in outputs[0]}
    verdict(9, "determinism", all(same.values()),
            ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
