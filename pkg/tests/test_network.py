import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w2vc import network as nw
from w2vc import quantizer as qz
from w2vc import tensor_core as tc
from w2vc.network import ModelConfig
from w2vc.tensor_core import Tensor


def toy_params(seed=0, **kw):
    cfg = ModelConfig.toy(**kw)
    return cfg, nw.init_params(cfg, np.random.default_rng(seed))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# --- config ----------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(nw.ConfigError):
        ModelConfig(D_e=63)
    with pytest.raises(nw.ConfigError):
        ModelConfig(heads=5)
    with pytest.raises(nw.ConfigError):
        ModelConfig(mask_fraction=0.0)
    with pytest.raises(nw.ConfigError):
        ModelConfig(gamma_consistency=2)


def test_paper_config_constants():
    p = ModelConfig.paper()
    assert (p.D_e, p.encoder_layers, p.context_layers, p.D_c, p.ff_dim, p.heads) == (768, 3, 5, 1024, 4096, 16)
    assert (p.G, p.V, p.K, p.mask_count, p.mask_fraction, p.n_negatives) == (2, 320, 384, 5, 0.16, 50)
    assert (p.alpha, p.beta, p.encoder_grad_scale) == (1.5, 0.25, 0.1)


# --- encoder ---------------------------------------------------------------

def test_encoder_zero_weights_zero_output():
    cfg, params = toy_params()
    for k, t in params.items():
        if k.startswith("encoder."):
            t.data[...] = 0.0
    Z = nw.encoder_forward(params, np.zeros((5, cfg.F)), cfg)
    assert np.all(Z.data == 0.0)


def test_encoder_single_frame_matches_cell_equations():
    cfg = ModelConfig.toy(encoder_layers=1, F=2, D_e=2, G=1, K=2)
    params = nw.init_params(cfg, np.random.default_rng(0))
    H = 2
    w_in = np.arange(8 * 2, dtype=float).reshape(2, 8) * 0.05 - 0.3
    w_rec = np.zeros((H, 4 * H))
    b = np.linspace(-0.5, 0.5, 8)
    params["encoder.0.w_in"].data[...] = w_in
    params["encoder.0.w_rec"].data[...] = w_rec
    params["encoder.0.bias"].data[...] = b
    x = np.array([[0.7, -1.2]])
    a = x[0] @ w_in + b
    i, f, o, g = sigmoid(a[:2]), sigmoid(a[2:4]), sigmoid(a[4:6]), np.tanh(a[6:])
    c = f * 0.0 + i * g
    h = o * np.tanh(c)
    Z = nw.encoder_forward(params, x, cfg)
    assert np.abs(Z.data[0] - h).max() <= 1e-15


def _encoder_grads(params, cfg, X, weight=1.0):
    params.zero_grad()
    with tc.Graph() as g:
        Z = nw.encoder_forward(params, X, cfg)
        loss = tc.sum_(tc.square(Z)) * weight
    tc.backprop(g, loss)
    return {k: t.grad.copy() for k, t in params.items() if k.startswith("encoder.")}


def test_encoder_gradient_scale_is_linear():
    cfg, params = toy_params()
    X = np.random.default_rng(1).standard_normal((6, cfg.F))
    g01 = _encoder_grads(params, cfg, X)
    g1 = _encoder_grads(params, cfg.replace(encoder_grad_scale=1.0), X)
    g2 = _encoder_grads(params, cfg, X, weight=2.0)
    g05 = _encoder_grads(params, cfg.replace(encoder_grad_scale=0.5), X)
    for k in g01:
        assert np.array_equal(g01[k] * 2.0, g2[k])
        # power-of-two scales commute with every rounding: exact
        assert np.array_equal(g05[k] * 2.0, g1[k])
        # 0.1 is not representable, so 10x holds to rounding only
        np.testing.assert_allclose(g1[k], 10.0 * g01[k], rtol=1e-12, atol=0)


def test_encoder_forward_is_unscaled():
    cfg, params = toy_params()
    X = np.random.default_rng(2).standard_normal((6, cfg.F))
    a = nw.encoder_forward(params, X, cfg).data
    b = nw.encoder_forward(params, X, cfg.replace(encoder_grad_scale=1.0)).data
    assert np.array_equal(a, b)


# --- masking ---------------------------------------------------------------

def test_masks_degenerate_length():
    spec = nw.sample_masks(1, ModelConfig.toy(), np.random.default_rng(0))
    assert spec.spans == [(0, 1)] * 5 and spec.masked.tolist() == [0]


def mask_fraction_oracle(T, count, fraction, draws, rng):
    """Vectorised re-implementation of the span scheme."""
    wmax = max(1, int(np.floor(fraction * T)))
    starts = rng.integers(0, T, size=(draws, count))
    widths = rng.integers(1, wmax + 1, size=(draws, count))
    t = np.arange(T)
    covered = ((t[None, None, :] >= starts[..., None]) & (t[None, None, :] < (starts + widths)[..., None])).any(1)
    return covered.mean()


def test_mask_statistics_match_oracle():
    cfg = ModelConfig()
    rng = np.random.default_rng(3)
    draws, T = 100_000, 100
    fracs = np.empty(draws)
    max_w = 0
    for i in range(draws):
        spec = nw.sample_masks(T, cfg, rng)
        fracs[i] = len(spec.masked) / T
        max_w = max(max_w, max(w for _, w in spec.spans))
        assert all(0 <= s and s + w <= T for s, w in spec.spans)
    oracle = mask_fraction_oracle(T, 5, 0.16, draws, np.random.default_rng(4))
    assert max_w <= 16
    assert abs(fracs.mean() - oracle) <= 0.005
    assert 0.30 <= oracle <= 0.40


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2 ** 32 - 1))
def test_mask_spec_invariants(T, seed):
    cfg = ModelConfig.toy()
    spec = nw.sample_masks(T, cfg, np.random.default_rng(seed))
    wmax = max(1, int(np.floor(0.16 * T)))
    union = set()
    for s, w in spec.spans:
        assert 0 <= s < T and 1 <= w <= wmax and s + w <= T
        union.update(range(s, s + w))
    assert spec.masked.tolist() == sorted(union)


def test_apply_masks_cases():
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((6, 4))
    emb = rng.standard_normal(4)
    empty = nw.MaskSpec([], np.array([], dtype=int), 6)
    assert nw.apply_masks(Z, empty, emb).data.tobytes() == Z.tobytes()
    full = nw.MaskSpec([(0, 6)], np.arange(6), 6)
    assert np.all(nw.apply_masks(Z, full, emb).data == emb)
    with pytest.raises(ValueError):
        nw.apply_masks(Z, nw.MaskSpec([(4, 5)], np.arange(4, 9), 6), emb)


def test_apply_masks_gradient_routing():
    rng = np.random.default_rng(6)
    Z = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    emb = Tensor(rng.standard_normal(4), requires_grad=True)
    spec = nw.MaskSpec([(1, 2)], np.array([1, 2]), 6)
    with tc.Graph() as g:
        out = nw.apply_masks(Z, spec, emb)
        loss = tc.sum_(out[np.array([1, 2])])
    tc.backprop(g, loss)
    assert np.all(emb.grad == 2.0)
    assert np.all(Z.grad == 0.0)


def test_zero_masks_leave_encodings_untouched():
    cfg = ModelConfig.toy(mask_count=0)
    spec = nw.sample_masks(10, cfg, np.random.default_rng(0))
    assert len(spec.masked) == 0
    Z = np.random.default_rng(1).standard_normal((10, cfg.D_e))
    assert nw.apply_masks(Z, spec, np.zeros(cfg.D_e)).data.tobytes() == Z.tobytes()


# --- context network -------------------------------------------------------

def test_context_permutation_equivariance_without_positions():
    cfg, params = toy_params(positional=False)
    rng = np.random.default_rng(7)
    Z = rng.standard_normal((9, cfg.D_e))
    perm = rng.permutation(9)
    a = nw.context_forward(params, Z, cfg).data
    b = nw.context_forward(params, Z[perm], cfg).data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)
    cfg_pe = cfg.replace(positional=True)
    a = nw.context_forward(params, Z, cfg_pe).data
    b = nw.context_forward(params, Z[perm], cfg_pe).data
    assert np.abs(b - a[perm]).max() > 1e-3


def test_attention_rows_are_distributions():
    cfg, params = toy_params()
    Z = np.random.default_rng(8).standard_normal((11, cfg.D_e))
    attn = []
    nw.context_forward(params, Z, cfg, attn_out=attn)
    assert len(attn) == cfg.context_layers
    for a in attn:
        assert np.abs(a.sum(-1) - 1.0).max() <= 1e-9


def test_attention_matches_direct_computation():
    cfg, params = toy_params(context_layers=1)
    x = np.random.default_rng(9).standard_normal((1, 7, cfg.D_c))
    attn = []
    nw.self_attention(params, "context.0", Tensor(x), cfg.heads, attn_out=attn)
    d = cfg.D_c // cfg.heads
    q = x[0] @ params["context.0.wq"].data + params["context.0.bq"].data
    k = x[0] @ params["context.0.wk"].data + params["context.0.bk"].data
    for h in range(cfg.heads):
        s = q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T / np.sqrt(d)
        e = np.exp(s - s.max(1, keepdims=True))
        np.testing.assert_allclose(attn[0][0, h], e / e.sum(1, keepdims=True), rtol=0, atol=1e-12)


def test_padded_batch_context_equals_per_utterance():
    cfg, params = toy_params()
    rng = np.random.default_rng(10)
    lengths = [9, 5, 7]
    zs = [rng.standard_normal((T, cfg.D_e)) for T in lengths]
    batch = np.zeros((3, 9, cfg.D_e))
    for i, z in enumerate(zs):
        batch[i, :len(z)] = z
    out = nw.context_forward(params, batch, cfg, lengths).data
    for i, z in enumerate(zs):
        np.testing.assert_allclose(out[i, :len(z)], nw.context_forward(params, z, cfg).data, rtol=0, atol=1e-12)


def test_sinusoidal_pe():
    pe = nw.sinusoidal_pe(50, 6)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
    assert np.array_equal(pe[:, 1], np.cos(np.arange(50.0)))
    assert np.abs(pe).max() <= 1.0
    with pytest.raises(nw.ConfigError):
        nw.sinusoidal_pe(3, 5)


# --- projections / consistency ---------------------------------------------

def test_compare_project_zero_and_fd():
    cfg, params = toy_params()
    C = np.random.default_rng(11).standard_normal((5, cfg.D_c))
    w, b = params["compare.w"], params["compare.b"]
    saved = w.data.copy()
    w.data[...] = 0.0
    assert np.all(nw.compare_project(params, C).data == 0.0)
    w.data[...] = saved
    b.data[...] = np.random.default_rng(12).standard_normal(b.shape)
    target = np.random.default_rng(13).standard_normal((5, cfg.G * cfg.K))
    rep = tc.finite_diff_check(lambda _: tc.sum_(tc.tanh(nw.compare_project(params, C)) * target),
                               {"w": w, "b": b}, tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_consistency_zero_weights_give_bias_rows():
    cfg, params = toy_params()
    for k, t in params.items():
        if k.startswith("consistency.") and k != "consistency.out_b":
            t.data[...] = 0.0
    params["consistency.out_b"].data[...] = np.arange(cfg.F)
    for T in (1, 4, 13):
        S = nw.consistency_forward(params, np.random.default_rng(T).standard_normal((T, cfg.G * cfg.K)), cfg)
        assert S.shape == (T, cfg.F)
        assert np.all(S.data == np.arange(cfg.F))


def test_consistency_gradient_reachability():
    cfg, params = toy_params()
    rng = np.random.default_rng(14)
    Z = Tensor(rng.standard_normal((8, cfg.D_e)), requires_grad=True)
    cb = params.codebook()
    with tc.Graph() as g:
        q = qz.quantize(Z, cb, tau=1.0, rng=rng)
        S = nw.consistency_forward(params, q.z_hat, cfg)
        loss = tc.sum_(tc.square(S))
    tc.backprop(g, loss)
    assert np.abs(cb.codes.grad).sum() > 0
    assert np.abs(cb.logit_w.grad).sum() > 0
    assert np.abs(Z.grad).sum() > 0
    # cutting the path at z_hat leaves everything upstream untouched
    params.zero_grad()
    Z.grad = None
    with tc.Graph() as g:
        q = qz.quantize(Z, cb, tau=1.0, rng=rng)
        S = nw.consistency_forward(params, tc.stop_gradient(q.z_hat), cfg)
        loss = tc.sum_(tc.square(S))
    tc.backprop(g, loss)
    assert cb.codes.grad is None and cb.logit_w.grad is None and Z.grad is None
    assert params["consistency.0.w_in"].grad is not None


def test_paper_dims_forward_is_finite():
    cfg = ModelConfig.paper()
    params = nw.init_params(cfg, np.random.default_rng(0))
    X = np.random.default_rng(1).standard_normal((100, cfg.F))
    with tc.no_grad():
        Z = nw.encoder_forward(params, X, cfg)
        q = qz.quantize(Z, params.codebook(), tau=2.0, rng=np.random.default_rng(2))
        spec = nw.sample_masks(100, cfg, np.random.default_rng(3))
        C = nw.context_forward(params, nw.apply_masks(Z, spec, params["mask_embedding"]), cfg)
        S = nw.consistency_forward(params, q.z_hat, cfg)
    shapes = [Z.shape, q.z_hat.shape, C.shape, S.shape]
    assert shapes == [(100, 768), (100, 768), (100, 1024), (100, 64)]
    assert nw.compare_project(params, C).shape == (100, 768)
    assert all(np.isfinite(t.data).all() for t in (Z, q.z_hat, C, S))
