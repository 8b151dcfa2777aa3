import numpy as np
import pytest

from moe_erc import tensor as T
from moe_erc.gate import (ExpertLogits, Gate, GateRecord, fuse, fused_features, gate_forward, mix, read_gate_csv,
                          write_gate_csv)
from moe_erc.metrics import gate_stats
from moe_erc.tensor import ParameterSet, Value


def _logits(*rows):
    return ExpertLogits(*(Value(np.asarray(r, dtype=float)) for r in rows))


def _gate(k=3, seed=0, randomize=True):
    ps = ParameterSet()
    g = Gate(ps, "gate", 3 * k, np.random.default_rng(seed))
    if randomize:
        r = np.random.default_rng(seed + 1)
        for v in ps.values():
            v.data[...] = r.normal(size=v.shape)
    return ps, g


def test_zero_gate_is_uniform(rng):
    _, g = _gate(randomize=False)  # the output layer starts at zero
    lg = _logits(*(rng.normal(size=(5, 3)) for _ in range(3)))
    np.testing.assert_allclose(gate_forward(g, lg).data, np.full((5, 3), 1 / 3), atol=1e-15)


def test_gate_softmax_hand_value():
    ps, g = _gate(k=1, randomize=False)
    ps["gate.fc.b"].data[...] = [1.0, 0.0, 0.0]
    beta = gate_forward(g, _logits([[0.3]], [[-1.0]], [[2.0]])).data[0]
    np.testing.assert_allclose(beta, [0.576117, 0.211942, 0.211942], atol=1e-6)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        _logits(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


def test_fuse_hand_arithmetic():
    out = fuse(_logits([2.0, 0.0], [0.0, 2.0], [1.0, 1.0]), np.array([0.5, 0.25, 0.25]))
    np.testing.assert_allclose(out.data, [1.25, 0.75], atol=1e-15)


@pytest.mark.parametrize("j", [0, 1, 2])
def test_one_hot_selects_expert_bitwise(j, rng):
    ys = [rng.normal(size=(20, 4)) * 10 for _ in range(3)]
    beta = np.zeros((20, 3))
    beta[:, j] = 1.0
    out = fuse(_logits(*ys), beta).data
    assert out.tobytes() == ys[j].tobytes()


def test_equal_experts_fixed_point(rng):
    L = rng.normal(size=(50, 4)) * 7
    beta = rng.dirichlet(np.ones(3), size=50)
    assert fuse(_logits(L, L, L), beta).data.tobytes() == L.tobytes()


def test_convexity_and_close_to_weighted_sum(rng):
    ys = [rng.normal(size=(200, 5)) * 3 for _ in range(3)]
    beta = rng.dirichlet(np.ones(3) * 0.5, size=200)
    out = fuse(_logits(*ys), beta).data
    stack = np.stack(ys)
    assert np.all(out >= stack.min(0)) and np.all(out <= stack.max(0))
    plain = sum(beta[:, j:j + 1] * ys[j] for j in range(3))
    np.testing.assert_allclose(out, plain, atol=1e-12)


def test_fuse_gradient(rng):
    ys = [Value(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
    beta = Value(rng.dirichlet(np.ones(3), size=3), requires_grad=True)
    w = rng.normal(size=(3, 4))
    T.sum_(fuse(ExpertLogits(*ys), beta) * Value(w)).backward()
    for j in range(3):
        np.testing.assert_allclose(ys[j].grad, w * beta.data[:, j:j + 1], atol=1e-15)
        np.testing.assert_allclose(beta.grad[:, j], (w * ys[j].data).sum(-1), atol=1e-12)


def test_gate_is_per_utterance(rng):
    _, g = _gate()
    rows = [rng.normal(size=(6, 3)) for _ in range(3)]
    perm = rng.permutation(6)
    a = gate_forward(g, _logits(*rows)).data
    b = gate_forward(g, _logits(*(r[perm] for r in rows))).data
    np.testing.assert_array_equal(a[perm], b)


def test_fused_argmax_differs_from_every_expert():
    ys, yt, ym = [3.0, 2.9, 0.0], [0.0, 2.9, 3.0], [1.6, 1.5, 1.4]
    out = fuse(_logits(ys, yt, ym), np.full(3, 1 / 3)).data
    np.testing.assert_allclose(out, [4.6 / 3, 7.3 / 3, 4.4 / 3], atol=1e-12)
    assert [int(np.argmax(y)) for y in (ys, yt, ym)] == [0, 2, 0]
    assert int(np.argmax(out)) == 1


def test_mix_handles_zero_speech_text_mass():
    ys, yt, ym = np.ones((1, 2)), 2 * np.ones((1, 2)), 5 * np.ones((1, 2))
    assert np.array_equal(mix(ys, yt, ym, np.array([[0.0, 0.0, 1.0]])), ym)


def test_fused_features_weighting(rng):
    fs = [Value(rng.normal(size=(4, 3))) for _ in range(3)]
    beta = rng.dirichlet(np.ones(3), size=4)
    out = fused_features(fs, beta).data
    np.testing.assert_allclose(out, sum(beta[:, j:j + 1] * fs[j].data for j in range(3)), atol=1e-15)


def test_gate_csv_round_trip_and_stats(tmp_path, rng):
    betas = rng.dirichlet(np.ones(3), size=12)
    labels = rng.integers(0, 3, size=12)
    recs = [GateRecord("c0" if i < 6 else "c1", i % 6, tuple(b), int(y), int(y)) for i, (b, y) in
            enumerate(zip(betas, labels))]
    path = tmp_path / "gates.csv"
    write_gate_csv(recs, path)
    assert path.read_text().splitlines()[0] == "conversation_id,utterance_index,beta_s,beta_t,beta_m,label,prediction"
    back = read_gate_csv(path)
    assert back == recs
    stats = gate_stats([r.beta for r in back], [r.label for r in back], 3)
    np.testing.assert_allclose(stats.means, betas.mean(0), atol=1e-15)
