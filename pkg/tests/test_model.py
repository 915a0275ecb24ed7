import numpy as np
import pytest

from topotraj.diffcore import ConfigError, DiffArray, no_grad, ops, precision
from topotraj.model import VARIANTS, ModelConfig, WaypointModel
from topotraj.raster import GridSpec, soft_argmax
from topotraj.train import Targets, total_loss


def tiny_cfg(variant="full", **kw):
    base = dict(height=32, width=32, num_waypoints=4, heads=4, encoder_layers=1, decoder_layers=1, ffn_hidden=16,
                stem_channels=4, block_channels=(4, 4, 8, 8), fpn_channels=8, variant=variant)
    base.update(kw)
    return ModelConfig(**base)


def rand_input(rng, B, cfg):
    x = rng.uniform(0, 1, (B, 4, cfg.height, cfg.width))
    x[:, 3] = x[:, 3] > 0.7
    return x


def rand_targets(rng, B, model):
    cfg, grid = model.config, model.grid
    h, w = cfg.height // 4, cfg.width // 4
    norm = rng.uniform(0.2, 0.8, (B, cfg.num_waypoints, 2))
    hm = rng.uniform(0, 1, (B, cfg.num_waypoints, h, w))
    hm /= hm.sum(axis=(2, 3), keepdims=True)
    return Targets(trajectory=grid.denormalize(norm), trajectory_norm=norm, heatmaps=hm,
                   road=(rng.uniform(size=(B, 1, h, w)) > 0.5).astype(float))


# ------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(height=100)
    with pytest.raises(ConfigError):
        ModelConfig(num_waypoints=1)
    with pytest.raises(ConfigError):
        ModelConfig(heads=7)  # d = 400
    with pytest.raises(ConfigError):
        ModelConfig(variant="nope")
    assert ModelConfig().d == 400


def test_grid_mismatch_rejected():
    with pytest.raises(ConfigError):
        WaypointModel(tiny_cfg(), GridSpec())
    m = WaypointModel(tiny_cfg())
    with pytest.raises(ConfigError):
        m(np.zeros((1, 3, 32, 32)))


# ------------------------------------------------------------------- shapes


def test_default_shapes():
    cfg = ModelConfig(stem_channels=4, block_channels=(4, 4, 8, 8), fpn_channels=8, ffn_hidden=16,
                      encoder_layers=1, decoder_layers=1)
    m = WaypointModel(cfg)
    x = DiffArray(np.random.default_rng(0).uniform(size=(1, 4, 160, 160)).astype(np.float32))
    with no_grad():
        feat = m.backbone(x)
        emb, road = m.feature_encoder(feat)
        pos, hm = m.positional_encoder(feat)
        out = m(x)
    assert feat.shape == (1, 8, 40, 40)
    assert emb.shape == (1, 12, 400) and road.shape == (1, 1, 40, 40)
    assert pos.shape == (1, 12, 400) and hm.shape == (1, 12, 40, 40)
    assert out.trajectory.shape == (1, 12, 2)


def test_backbone_default_channels():
    m = WaypointModel(ModelConfig(height=32, width=32, encoder_layers=1, decoder_layers=1))
    with no_grad():
        feat = m.backbone(DiffArray(np.ones((1, 4, 32, 32), dtype=np.float32)))
    assert feat.shape == (1, 96, 8, 8)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("hw", [(32, 32), (48, 24)])
def test_variant_outputs(variant, hw):
    H, W = hw
    cfg = tiny_cfg(variant, height=H, width=W, num_waypoints=3, heads=2)
    m = WaypointModel(cfg)
    with no_grad():
        out = m(rand_input(np.random.default_rng(1), 2, cfg))
    assert out.trajectory.shape == (2, 3, 2)
    assert np.all(np.isfinite(out.trajectory.data))
    assert (out.road_mask is not None) == (variant in ("full", "transformer2", "transformer3"))
    assert (out.heatmaps is not None) == (variant in ("full", "transformer1", "transformer3", "heatmap_only"))
    if out.road_mask is not None:
        assert out.road_mask.shape == (2, 1, H // 4, W // 4)
        assert np.all((out.road_mask.data > 0) & (out.road_mask.data < 1))
    if out.heatmaps is not None:
        assert out.heatmaps.shape == (2, 3, H // 4, W // 4)
        np.testing.assert_allclose(out.heatmaps.data.sum(axis=(2, 3)), 1.0, atol=1e-5)
    # predictions stay inside the observed extent
    x0, x1, y0, y1 = m.grid.extent
    t = out.trajectory.data
    assert np.all((t[..., 0] >= x0 - 1e-3) & (t[..., 0] <= x1 + 1e-3))
    assert np.all((t[..., 1] >= y0 - 1e-3) & (t[..., 1] <= y1 + 1e-3))


def test_heatmap_only_is_soft_argmax():
    cfg = tiny_cfg("heatmap_only")
    m = WaypointModel(cfg)
    with precision(np.float64):
        m64 = WaypointModel(cfg)
        with no_grad():
            out = m64(rand_input(np.random.default_rng(2), 2, cfg))
    np.testing.assert_allclose(out.trajectory.data, soft_argmax(out.heatmaps.data, m64.grid), rtol=0, atol=1e-12)
    assert out.trajectory_norm is None
    assert not hasattr(m, "transformer")


def test_transformer0_has_no_road_or_positional():
    m = WaypointModel(tiny_cfg("transformer0"))
    assert not hasattr(m, "positional_encoder")
    assert not hasattr(m.feature_encoder, "road_head")


# ------------------------------------------------------------ architecture


def test_zero_input_zero_backbone():
    m = WaypointModel(tiny_cfg())
    with no_grad():
        feat = m.backbone(DiffArray(np.zeros((1, 4, 32, 32), dtype=np.float32)))
    assert not feat.data.any()


def test_zeroing_road_branch_gives_x1():
    m = WaypointModel(tiny_cfg())
    m.feature_encoder.road_embed.weight.data[:] = 0
    m.feature_encoder.road_embed.bias.data[:] = 0
    x = DiffArray(rand_input(np.random.default_rng(3), 2, m.config).astype(np.float32))
    with no_grad():
        feat = m.backbone(x)
        emb, _ = m.feature_encoder(feat)
        x1 = m.feature_encoder.branch1(feat)
    np.testing.assert_array_equal(emb.data, x1.data.reshape(2, 4, -1))


def test_heatmaps_logit_shift_invariant():
    m = WaypointModel(tiny_cfg())
    x = DiffArray(rand_input(np.random.default_rng(4), 1, m.config).astype(np.float32))
    with no_grad():
        feat = m.backbone(x)
        a = m.positional_encoder.heatmaps(feat).data
        m.positional_encoder.logits.bias.data += 3.0
        b = m.positional_encoder.heatmaps(feat).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_query_permutation_equivariance():
    with precision(np.float64):
        m = WaypointModel(tiny_cfg())
        rng = np.random.default_rng(5)
        x = DiffArray(rand_input(rng, 2, m.config))
        perm = np.array([2, 0, 3, 1])
        with no_grad():
            feat = m.backbone(x)
            emb, _ = m.feature_encoder(feat)
            pos, _ = m.positional_encoder(feat)
            q = m.transformer.queries
            a = m.transformer(emb, pos, queries=DiffArray(q.data)).data
            b = m.transformer(emb, pos, queries=DiffArray(q.data[perm])).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_zero_memory_depends_only_on_queries():
    m = WaypointModel(tiny_cfg())
    m.transformer.encode = lambda emb, pos: DiffArray(np.zeros(emb.shape, dtype=emb.dtype))
    rng = np.random.default_rng(6)
    with no_grad():
        a = m(rand_input(rng, 1, m.config)).trajectory.data
        b = m(rand_input(rng, 1, m.config) * 5).trajectory.data
    np.testing.assert_array_equal(a, b)


def test_construction_deterministic():
    a = WaypointModel(tiny_cfg(seed=3))
    b = WaypointModel(tiny_cfg(seed=3))
    c = WaypointModel(tiny_cfg(seed=4))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))
    x = rand_input(np.random.default_rng(0), 1, a.config)
    with no_grad():
        np.testing.assert_array_equal(a.predict(x), b.predict(x))


# ----------------------------------------------------------------- gradients

# The attention key bias adds the same amount to every score of a query row,
# which the softmax cancels; its gradient is zero by construction.
_ZERO_BY_DESIGN = (".k.bias",)


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradient_flow_audit(variant):
    m = WaypointModel(tiny_cfg(variant))
    rng = np.random.default_rng(7)
    out = m(rand_input(rng, 2, m.config))
    total_loss(out, rand_targets(rng, 2, m)).total.backward()
    dead = [n for n, p in m.named_parameters()
            if not n.endswith(_ZERO_BY_DESIGN) and (p.grad is None or not np.any(p.grad))]
    assert not dead, f"parameters without gradient in {variant}: {dead}"


def test_backbone_first_kernel_gradient_nonzero():
    m = WaypointModel(tiny_cfg())
    x = DiffArray(rand_input(np.random.default_rng(8), 1, m.config).astype(np.float32))
    ops.mean_all(m.backbone(x)).backward()
    assert np.abs(m.backbone.stem1.weight.grad).max() > 0


def _perturbed_model(dtype, seed):
    """Tiny model with small random biases, so no pre-activation sits exactly
    on a ReLU kink (all-zero biases put whole dead regions at 0)."""
    with precision(dtype):
        m = WaypointModel(tiny_cfg())
    rng = np.random.default_rng(seed)
    for name, p in m.named_parameters():
        if name.endswith("bias"):
            p.data[:] = rng.normal(0, 0.05, p.shape)
    return m


def _param_gradcheck(dtype, h=1e-6, seed=0, probes=3):
    """Analytic parameter gradient at ``dtype`` against central differences
    of the same loss evaluated in float64 on identical weights. Probes a few
    entries of every parameter; returns max abs error / max |reference|."""
    m = _perturbed_model(dtype, seed)
    ref = _perturbed_model(np.float64, seed)
    rng = np.random.default_rng(seed + 1)
    x = rand_input(rng, 2, m.config)
    tgt = rand_targets(rng, 2, m)
    with precision(dtype):
        total_loss(m(x), tgt).total.backward()
    analytic = dict(m.named_parameters())
    an, fd = [], []
    with precision(np.float64), no_grad():
        for name, p in ref.named_parameters():
            flat = p.data.reshape(-1)
            for k in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + h
                up = float(total_loss(ref(x), tgt).total.data)
                flat[k] = orig - h
                down = float(total_loss(ref(x), tgt).total.data)
                flat[k] = orig
                an.append(float(analytic[name].grad.reshape(-1)[k]))
                fd.append((up - down) / (2 * h))
    an, fd = np.array(an), np.array(fd)
    return float(np.max(np.abs(an - fd)) / (np.max(np.abs(fd)) + 1e-12))


def test_end_to_end_gradcheck_f32():
    assert _param_gradcheck(np.float32) < 1e-2


def test_end_to_end_gradcheck_f64():
    assert _param_gradcheck(np.float64) < 1e-4
