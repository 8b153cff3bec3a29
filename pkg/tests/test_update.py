import numpy as np
import pytest
from hypothesis import given, strategies as st

from pairflow import tensor as T
from pairflow.config import LookupConfig, ModelConfig, UpdateConfig
from pairflow.gradcheck import check_gradients
from pairflow.model import FlowModel
from pairflow.oracles import bilinear_point, gru_pixel_loop, nearest_fill
from pairflow.tensor import DimensionError, Tensor
from pairflow.update import (UpdateState, convex_weights, flow_head, gru_step, init_update,
                             iterate, motion_features, upsample_bilinear, upsample_convex,
                             warm_start)

LK = LookupConfig(radius=1, levels=2)


def small_cfg(**kw):
    base = dict(hidden_dim=8, corr_widths=(8, 6), flow_widths=(4, 3), head_dim=8, mask_dim=8)
    base.update(kw)
    return UpdateConfig(**base)


def make(cfg, ctx=5, seed=0):
    params = {}
    init_update(params, "u", cfg, LK, ctx, np.random.default_rng(seed))
    return params


# ---------------------------------------------------------------- motion features

def test_motion_channel_count(rng):
    cfg = small_cfg()
    params = make(cfg)
    out = motion_features(Tensor(rng.normal(size=(2, LK.channels, 4, 5))),
                          Tensor(rng.normal(size=(2, 2, 4, 5))), params, "u", cfg)
    assert out.shape == (2, 6 + 3 + 2, 4, 5) and cfg.motion_dim == 11


def test_motion_zero_inputs_zero_biases():
    cfg = small_cfg()
    params = make(cfg)
    for k in params:
        if k.endswith("bias"):
            params[k].data[...] = 0
    out = motion_features(Tensor(np.zeros((1, LK.channels, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))),
                          params, "u", cfg)
    np.testing.assert_array_equal(out.data, 0.0)


def test_motion_deterministic_and_mismatch(rng):
    cfg = small_cfg()
    params = make(cfg)
    c, f = Tensor(rng.normal(size=(1, LK.channels, 4, 4))), Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert motion_features(c, f, params, "u", cfg).data.tobytes() == \
        motion_features(c, f, params, "u", cfg).data.tobytes()
    with pytest.raises(DimensionError):
        motion_features(c, Tensor(np.zeros((1, 2, 4, 3))), params, "u", cfg)


# ---------------------------------------------------------------- GRU

def gru_inputs(rng, cfg, H=4, W=5):
    h = np.tanh(rng.normal(size=(1, cfg.hidden_dim, H, W)))
    x = rng.normal(size=(1, cfg.motion_dim + 5, H, W))
    return h, x


def test_gru_matches_pixel_loop(rng):
    cfg = small_cfg()
    params = make(cfg)
    for g in "zrq":
        params[f"u.gru.conv{g}.bias"].data[...] = rng.normal(size=cfg.hidden_dim) * 0.3
    h, x = gru_inputs(rng, cfg)
    out = gru_step(UpdateState(Tensor(h), None), Tensor(x), params, "u", cfg).hidden.data
    p = {g: (params[f"u.gru.conv{g}.weight"].data, params[f"u.gru.conv{g}.bias"].data) for g in "zrq"}
    ref = gru_pixel_loop(h[0], x[0], *p["z"], *p["r"], *p["q"])
    np.testing.assert_allclose(out[0], ref, atol=1e-10)


def test_gate_open_gives_candidate(rng):
    cfg = small_cfg()
    params = make(cfg)
    params["u.gru.convz.bias"].data[...] = 50.0
    h, x = gru_inputs(rng, cfg)
    out = gru_step(UpdateState(Tensor(h), None), Tensor(x), params, "u", cfg).hidden.data
    # candidate computed independently
    hx = np.concatenate([h, x], axis=1)
    r = T.sigmoid(T.conv2d(Tensor(hx), params["u.gru.convr.weight"], params["u.gru.convr.bias"], padding=1)).data
    q = np.tanh(T.conv2d(Tensor(np.concatenate([r * h, x], axis=1)), params["u.gru.convq.weight"],
                         params["u.gru.convq.bias"], padding=1).data)
    np.testing.assert_allclose(out, q, atol=1e-12)


def test_gate_closed_freezes_state(rng):
    cfg = small_cfg()
    params = make(cfg)
    params["u.gru.convz.bias"].data[...] = -50.0
    h, x = gru_inputs(rng, cfg)
    out = gru_step(UpdateState(Tensor(h), None), Tensor(x), params, "u", cfg).hidden.data
    np.testing.assert_allclose(out, h, atol=1e-15)


def test_reset_gate_zero_cuts_candidate_from_state(rng):
    cfg = small_cfg()
    params = make(cfg)
    params["u.gru.convr.bias"].data[...] = -50.0
    params["u.gru.convz.bias"].data[...] = 50.0     # output is then the candidate alone
    h, x = gru_inputs(rng, cfg)
    ht = Tensor(h, requires_grad=True)
    out = gru_step(UpdateState(ht, None), Tensor(x), params, "u", cfg).hidden
    T.sum(out * Tensor(rng.normal(size=out.shape))).backward()
    assert np.abs(ht.grad).max() < 1e-12


@pytest.mark.parametrize("kind", ["conv3x3", "separable_1x5_5x1", "plain_conv_stack"])
def test_gru_kinds_shapes(rng, kind):
    cfg = small_cfg(gru_kind=kind)
    params = make(cfg)
    h, x = gru_inputs(rng, cfg)
    out = gru_step(UpdateState(Tensor(h), None), Tensor(x), params, "u", cfg).hidden
    assert out.shape == h.shape


def test_separable_kernel_shapes():
    params = make(small_cfg(gru_kind="separable_1x5_5x1"))
    assert params["u.gru.convz1.weight"].shape[2:] == (1, 5)
    assert params["u.gru.convz2.weight"].shape[2:] == (5, 1)


@given(st.integers(0, 2 ** 16), st.floats(0.1, 30.0))
def test_hidden_stays_bounded(seed, amp):
    rng = np.random.default_rng(seed)
    for kind in ("conv3x3", "separable_1x5_5x1"):
        cfg = small_cfg(gru_kind=kind)
        params = make(cfg, seed=seed)
        h = Tensor(np.tanh(rng.normal(size=(1, 8, 3, 3)) * amp))
        for _ in range(3):
            x = Tensor(rng.normal(size=(1, cfg.motion_dim + 5, 3, 3)) * amp)
            h = gru_step(UpdateState(h, None), x, params, "u", cfg).hidden
            assert np.all(np.abs(h.data) <= 1.0)
            assert np.all(np.isfinite(h.data))


# ---------------------------------------------------------------- flow head

def test_flow_head_zero(rng):
    params = make(small_cfg())
    params["u.head.conv2.bias"].data[...] = 0.0
    params["u.head.conv1.bias"].data[...] = 0.0
    out = flow_head(Tensor(np.zeros((1, 8, 4, 6))), params, "u")
    assert out.shape == (1, 2, 4, 6)
    np.testing.assert_array_equal(out.data, 0.0)


def test_flow_head_gradient_to_hidden(rng):
    params = make(small_cfg())
    h = Tensor(rng.normal(size=(1, 8, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert check_gradients(lambda: T.sum(flow_head(h, params, "u") * w), [h]) < 1e-5


# ---------------------------------------------------------------- iterate

def fake_corr(rng, B, H, W):
    table = rng.normal(size=(B, LK.channels, H, W))
    return lambda flow: Tensor(table) * 1.0 + T.concat([flow] * (LK.channels // 2), axis=1)


def test_iterate_single_step_is_delta(rng):
    cfg = small_cfg()
    params = make(cfg)
    state = UpdateState(Tensor(np.tanh(rng.normal(size=(1, 8, 4, 4)))), Tensor(rng.normal(size=(1, 5, 4, 4))))
    steps = iterate(T.zeros((1, 2, 4, 4)), fake_corr(rng, 1, 4, 4), state, params, cfg, 1, "u")
    assert len(steps) == 1
    np.testing.assert_array_equal(steps[0].flow.data, steps[0].delta.data)


def test_iterate_detach_semantics(rng):
    """L_b adds <g2, f_2 - delta_2> = <g2, detach(f_1)>, which must carry no
    gradient: parameter gradients of L_a = <g1, f_1> and L_b agree."""
    cfg = small_cfg()
    params = make(cfg)
    state = UpdateState(Tensor(np.tanh(rng.normal(size=(1, 8, 4, 4)))), Tensor(rng.normal(size=(1, 5, 4, 4))))
    corr = fake_corr(rng, 1, 4, 4)
    g1, g2 = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 2, 4, 4)))

    def grads(extra):
        for p in params.values():
            p.grad = None
        s = iterate(T.zeros((1, 2, 4, 4)), corr, state, params, cfg, 2, "u")
        loss = T.sum(s[0].flow * g1)
        if extra:
            loss = loss + T.sum((s[1].flow - s[1].delta) * g2)
        loss.backward()
        return {k: p.grad.copy() for k, p in params.items() if p.grad is not None}

    a, b = grads(False), grads(True)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_allclose(b[k], a[k], atol=1e-12)


def test_iterate_untied_uses_step_params(rng):
    cfg = small_cfg(tied_weights=False, iterations_train=2)
    params = {}
    for k in range(2):
        init_update(params, f"u.{k}", cfg, LK, 5, np.random.default_rng(k))
    state = UpdateState(Tensor(np.zeros((1, 8, 3, 3))), Tensor(np.zeros((1, 5, 3, 3))))
    steps = iterate(T.zeros((1, 2, 3, 3)), fake_corr(rng, 1, 3, 3), state, params, cfg, 3, "u")
    T.sum(steps[1].flow).backward()
    assert params["u.1.head.conv2.weight"].grad is not None
    assert params["u.0.gru.convq.weight"].grad is not None    # via the hidden state
    assert params["u.0.head.conv2.weight"].grad is None       # its flow output is detached


def test_iterate_rejects_zero_steps(rng):
    cfg = small_cfg()
    with pytest.raises(ValueError):
        iterate(T.zeros((1, 2, 3, 3)), fake_corr(rng, 1, 3, 3),
                UpdateState(Tensor(np.zeros((1, 8, 3, 3))), None), make(cfg), cfg, 0, "u")


def test_tied_parameter_count():
    counts = []
    for n in (4, 12, 32):
        cfg = ModelConfig()
        cfg.update.iterations_train = n
        counts.append(FlowModel.init(cfg).count())
    assert counts[0] == counts[1] == counts[2]
    cfg = ModelConfig()
    cfg.update.tied_weights = False
    cfg.update.iterations_train = 3
    untied = FlowModel.init(cfg)
    tied_update = FlowModel.init(ModelConfig()).count("update")
    assert untied.count("update") == 3 * tied_update


# ---------------------------------------------------------------- convex upsampling

def test_convex_partition_of_unity(rng):
    w = convex_weights(Tensor(rng.normal(size=(2, 576, 3, 4)) * 5)).data
    np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-12)


def test_convex_logit_shift_invariance(rng):
    flow = Tensor(rng.normal(size=(1, 2, 3, 4)))
    logits = rng.normal(size=(1, 576, 3, 4))
    shift = np.repeat(rng.normal(size=(1, 1, 64, 3, 4)), 9, axis=1).reshape(1, 576, 3, 4)
    a = upsample_convex(flow, Tensor(logits)).data
    b = upsample_convex(flow, Tensor(logits + 7 * shift)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_convex_constant_field(rng):
    flow = Tensor(np.broadcast_to(np.array([1.5, -2.25])[None, :, None, None], (1, 2, 3, 5)).copy())
    up = upsample_convex(flow, Tensor(rng.normal(size=(1, 576, 3, 5)) * 4)).data
    assert up.shape == (1, 2, 24, 40)
    np.testing.assert_allclose(up[0, 0], 12.0, atol=1e-12)
    np.testing.assert_allclose(up[0, 1], -18.0, atol=1e-12)


def _neighbourhoods(f):
    """3x3 edge-replicated neighbourhoods of f[H,W] -> [H,W,9]."""
    H, W = f.shape
    p = np.pad(f, 1, mode="edge")
    return np.stack([p[a:a + H, b:b + W] for a in range(3) for b in range(3)], axis=-1)


def test_convex_uniform_logits_mean(rng):
    flow = rng.normal(size=(1, 2, 4, 5))
    up = upsample_convex(Tensor(flow), Tensor(np.zeros((1, 576, 4, 5)))).data
    for c in range(2):
        mean = 8 * _neighbourhoods(flow[0, c]).mean(axis=-1)
        np.testing.assert_allclose(up[0, c], np.kron(mean, np.ones((8, 8))), atol=1e-12)


@given(st.integers(0, 2 ** 16))
def test_convex_hull_bound(seed):
    rng = np.random.default_rng(seed)
    flow = rng.normal(size=(1, 2, 3, 4)) * 3
    up = upsample_convex(Tensor(flow), Tensor(rng.normal(size=(1, 576, 3, 4)) * 6)).data
    for c in range(2):
        nb = _neighbourhoods(flow[0, c])
        lo = np.kron(8 * nb.min(-1), np.ones((8, 8)))
        hi = np.kron(8 * nb.max(-1), np.ones((8, 8)))
        assert np.all(up[0, c] >= lo - 1e-12) and np.all(up[0, c] <= hi + 1e-12)


def test_convex_subpixel_layout(rng):
    """Mask channel group (9, a, b) weights subpixel (8i + a, 8j + b)."""
    flow = rng.normal(size=(1, 2, 2, 2))
    logits = np.full((1, 9, 8, 8, 2, 2), -60.0)
    logits[0, 8, 3, 5] = 60.0        # bottom-right neighbour for subpixel (3, 5)
    logits[0, 4] = 60.0              # centre for every other subpixel
    logits[0, 4, 3, 5] = -60.0
    up = upsample_convex(Tensor(flow), Tensor(logits.reshape(1, 576, 2, 2))).data
    nb = _neighbourhoods(flow[0, 0])
    assert up[0, 0, 3, 5] == pytest.approx(8 * nb[0, 0, 8], abs=1e-12)
    assert up[0, 0, 8 + 3, 8 + 5] == pytest.approx(8 * nb[1, 1, 8], abs=1e-12)
    assert up[0, 0, 0, 0] == pytest.approx(8 * flow[0, 0, 0, 0], abs=1e-12)


def test_convex_temperature(rng):
    flow = Tensor(rng.normal(size=(1, 2, 3, 3)))
    logits = rng.normal(size=(1, 576, 3, 3))
    a = upsample_convex(flow, Tensor(logits), temperature=2.0).data
    b = upsample_convex(flow, Tensor(logits / 2.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_convex_gradients(rng):
    flow = Tensor(rng.normal(size=(1, 2, 2, 3)), requires_grad=True)
    logits = Tensor(rng.normal(size=(1, 576, 2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 16, 24)))
    assert check_gradients(lambda: T.sum(upsample_convex(flow, logits) * w), [flow, logits]) < 1e-5


# ---------------------------------------------------------------- bilinear upsampling

def test_bilinear_constant_and_lattice(rng):
    const = Tensor(np.full((1, 2, 3, 4), -0.75))
    np.testing.assert_allclose(upsample_bilinear(const).data, -6.0, atol=1e-12)
    flow = rng.normal(size=(1, 2, 3, 4))
    up = upsample_bilinear(Tensor(flow)).data
    np.testing.assert_allclose(up[:, :, ::8, ::8], 8 * flow, atol=1e-12)


def test_bilinear_matches_point_oracle(rng):
    flow = rng.normal(size=(1, 2, 3, 4))
    up = upsample_bilinear(Tensor(flow)).data[0]
    for Y in range(24):
        for X in range(32):
            x, y = min(X / 8, 3), min(Y / 8, 2)
            np.testing.assert_allclose(up[:, Y, X], 8 * bilinear_point(flow[0], x, y), atol=1e-12)


def test_bilinear_gradients(rng):
    flow = Tensor(rng.normal(size=(1, 2, 2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 16, 24)))
    assert check_gradients(lambda: T.sum(upsample_bilinear(flow) * w), [flow]) < 1e-5


# ---------------------------------------------------------------- warm start

def test_warm_start_zero():
    np.testing.assert_array_equal(warm_start(np.zeros((2, 5, 7))), 0.0)


@pytest.mark.parametrize("a,b", [(1, 0), (2, -1), (-3, 2)])
def test_warm_start_rigid_translation(a, b):
    flow = np.stack([np.full((9, 11), float(a)), np.full((9, 11), float(b))])
    out = warm_start(flow)
    np.testing.assert_array_equal(out[0], a)
    np.testing.assert_array_equal(out[1], b)


def _votes(flow):
    """Explicit scatter: smallest magnitude wins, earlier row-major source on ties."""
    _, H, W = flow.shape
    out = np.zeros_like(flow)
    best = np.full((H, W), np.inf)
    for i in range(H):
        for j in range(W):
            u, v = flow[:, i, j]
            tx, ty = int(np.rint(j + u)), int(np.rint(i + v))
            if 0 <= tx < W and 0 <= ty < H:
                m = np.hypot(u, v)
                if m < best[ty, tx]:
                    best[ty, tx] = m
                    out[:, ty, tx] = (u, v)
    return out, np.isfinite(best)


@given(st.integers(0, 2 ** 16))
def test_warm_start_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    H, W = 7, 9
    flow = rng.uniform(-4, 4, size=(2, H, W))
    flow[:, rng.uniform(size=(H, W)) < 0.3] = 0.0
    out = warm_start(flow, chunk=5)
    votes, filled = _votes(flow)
    np.testing.assert_array_equal(out, nearest_fill(votes, filled))


def test_warm_start_collision_keeps_smallest():
    flow = np.zeros((2, 1, 4))
    flow[0, 0, 0] = 2.0          # pixel 0 lands on pixel 2, which also votes 0
    out = warm_start(flow)
    assert out[0, 0, 2] == 0.0
    assert out[0, 0, 0] == 0.0   # hole filled from nearest (pixel 1)


def test_warm_start_batched(rng):
    flow = rng.uniform(-2, 2, size=(3, 2, 5, 6))
    out = warm_start(flow)
    for b in range(3):
        np.testing.assert_array_equal(out[b], warm_start(flow[b]))
