import math

import numpy as np
import pytest

from moe_erc import tensor as T
from moe_erc.fusion_net import FusionConfig, FusionNet, fusion_forward, fusion_representations
from moe_erc.losses import contrastive_loss
from moe_erc.tensor import ParameterSet, Value


def _net(d_s=5, d_t=5, seed=0, **kw):
    cfg = FusionConfig(**{"model_dim": 8, "heads": 2, "layers": 2, "dropout": 0.5, "class_count": 3, **kw})
    ps = ParameterSet()
    return ps, FusionNet(ps, "fusion", d_s, d_t, cfg, np.random.default_rng(seed))


def test_config_divisibility():
    with pytest.raises(ValueError):
        FusionConfig(model_dim=10, heads=4)


def test_shapes_and_accessor(rng):
    _, net = _net(d_t=7)
    st = fusion_forward(net, Value(rng.normal(size=(4, 5))), Value(rng.normal(size=(4, 7))))
    assert st.logits.shape == (4, 3)
    for m in (st.m_ts, st.m_st, st.m_s, st.m_t):
        assert m.shape == (4, 8)
    m_s, m_t = fusion_representations(st)
    assert m_s is st.m_s and m_t is st.m_t


def test_single_utterance(rng):
    _, net = _net()
    assert net(Value(rng.normal(size=(1, 5))), Value(rng.normal(size=(1, 5)))).logits.shape == (1, 3)


def test_length_mismatch(rng):
    _, net = _net()
    with pytest.raises(ValueError):
        net(Value(rng.normal(size=(3, 5))), Value(rng.normal(size=(4, 5))))


def test_severed_cross_path(rng):
    ps, net = _net()
    ps["fusion.cross_ts.o.w"].data[...] = 0.0
    ps["fusion.cross_ts.o.b"].data[...] = 0.0
    E_s, E_t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    st = net(Value(E_s), Value(E_t))
    expected = T.layer_norm(Value(E_s) @ ps["fusion.in_s.w"] + ps["fusion.in_s.b"],
                            ps["fusion.ln_ts.gain"], ps["fusion.ln_ts.bias"]).data
    assert np.array_equal(st.m_ts.data, expected)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _mha_1head(P, pre, q_in, kv_in):
    Q = q_in @ P[pre + ".q.w"] + P[pre + ".q.b"]
    K = kv_in @ P[pre + ".k.w"] + P[pre + ".k.b"]
    V = kv_in @ P[pre + ".v.w"] + P[pre + ".v.b"]
    out = np.zeros_like(Q)
    d = Q.shape[1]
    for i in range(len(Q)):
        s = np.array([sum(Q[i, c] * K[j, c] for c in range(d)) / math.sqrt(d) for j in range(len(K))])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(w[j] * V[j] for j in range(len(K)))
    return out @ P[pre + ".o.w"] + P[pre + ".o.b"]


def _block(P, pre, x):
    h = _ln(x, P[pre + ".ln1.gain"], P[pre + ".ln1.bias"])
    x = x + _mha_1head(P, pre + ".attn", h, h)
    h = _ln(x, P[pre + ".ln2.gain"], P[pre + ".ln2.bias"])
    return x + np.maximum(h @ P[pre + ".ff1.w"] + P[pre + ".ff1.b"], 0) @ P[pre + ".ff2.w"] + P[pre + ".ff2.b"]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_brute_force_forward(n):
    ps, net = _net(d_s=4, d_t=6, seed=n, model_dim=8, heads=1, layers=1)
    r = np.random.default_rng(10 + n)
    for v in ps.values():  # move LN gains/biases and zero biases off their defaults
        v.data[...] = v.data + 0.1 * r.normal(size=v.shape)
    P = {k: ps[k].data for k in ps}
    E_s, E_t = r.normal(size=(n, 4)), r.normal(size=(n, 6))
    p_s = E_s @ P["fusion.in_s.w"] + P["fusion.in_s.b"]
    p_t = E_t @ P["fusion.in_t.w"] + P["fusion.in_t.b"]
    m_ts = _ln(p_s + _mha_1head(P, "fusion.cross_ts", p_s, p_t), P["fusion.ln_ts.gain"], P["fusion.ln_ts.bias"])
    m_st = _ln(p_t + _mha_1head(P, "fusion.cross_st", p_t, p_s), P["fusion.ln_st.gain"], P["fusion.ln_st.bias"])
    m_s, m_t = _block(P, "fusion.self_s.0", m_ts), _block(P, "fusion.self_t.0", m_st)
    logits = np.hstack([m_s, m_t]) @ P["fusion.head.w"] + P["fusion.head.b"]
    st = net(Value(E_s), Value(E_t))
    np.testing.assert_allclose(st.m_ts.data, m_ts, atol=1e-9, rtol=0)
    np.testing.assert_allclose(st.m_st.data, m_st, atol=1e-9, rtol=0)
    np.testing.assert_allclose(st.logits.data, logits, atol=1e-9, rtol=0)


def test_modality_swap_symmetry(rng):
    ps, net = _net(layers=1)
    swapped = ParameterSet()
    for name, v in ps.items():
        other = (name.replace("in_s", "@").replace("in_t", "in_s").replace("@", "in_t")
                     .replace("cross_ts", "@").replace("cross_st", "cross_ts").replace("@", "cross_st")
                     .replace("ln_ts", "@").replace("ln_st", "ln_ts").replace("@", "ln_st")
                     .replace("self_s", "@").replace("self_t", "self_s").replace("@", "self_t"))
        swapped.add(other, v.data.copy())
    ps2 = ParameterSet()
    net2 = FusionNet(ps2, "fusion", 5, 5, net.cfg, rng)
    ps2.load_state(swapped.state())
    E_s, E_t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a = net(Value(E_s), Value(E_t))
    b = net2(Value(E_t), Value(E_s))
    np.testing.assert_allclose(b.m_s.data, a.m_t.data, atol=1e-13)
    np.testing.assert_allclose(b.m_t.data, a.m_s.data, atol=1e-13)
    concat_a = np.hstack([a.m_s.data, a.m_t.data])
    concat_b = np.hstack([b.m_s.data, b.m_t.data])
    np.testing.assert_allclose(concat_b, np.hstack([concat_a[:, 8:], concat_a[:, :8]]), atol=1e-13)


def test_masked_batch_matches_unbatched(rng):
    _, net = _net()
    lengths = [3, 1, 4]
    E_s, E_t = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    mask = np.arange(4)[None] < np.array(lengths)[:, None]
    E_s[~mask] = 99.0
    batched = net(Value(E_s), Value(E_t), mask).logits.data
    for i, n in enumerate(lengths):
        alone = net(Value(E_s[i, :n]), Value(E_t[i, :n])).logits.data
        np.testing.assert_allclose(batched[i, :n], alone, atol=1e-6, rtol=0)


def test_contrastive_gradient_reaches_fusion(rng):
    ps, net = _net()
    st = net(Value(rng.normal(size=(4, 5))), Value(rng.normal(size=(4, 5))))
    m_s, m_t = fusion_representations(st)
    contrastive_loss(m_s, m_t, np.array([0, 1, 0, 2]), tau=1.0).backward()
    for name in ("fusion.in_s.w", "fusion.cross_ts.q.w", "fusion.self_t.1.ff2.w"):
        assert np.abs(ps[name].grad).max() > 0
    assert np.all(ps["fusion.head.w"].grad == 0)


def test_dropout_only_in_training(rng):
    _, net = _net()
    E = Value(rng.normal(size=(3, 5)))
    a = net(E, E).logits.data
    assert np.array_equal(a, net(E, E, rng=T.make_rng(0), training=False).logits.data)
    assert not np.allclose(a, net(E, E, rng=T.make_rng(0), training=True).logits.data)
