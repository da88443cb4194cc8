import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from premig.numerics import (
    ContractViolation,
    DenseLayerParams,
    OptimizerState,
    Tensor,
    beta_entropy,
    beta_log_density,
    beta_log_prob,
    bounded_sample,
    categorical_entropy,
    categorical_log_prob,
    categorical_sample,
    check_gradients,
    dense_forward,
    init_dense,
    init_lstm,
    load_params,
    log_softmax,
    lstm_cell,
    mlp_forward,
    optimizer_step,
    save_params,
    zero_lstm,
)
from premig.numerics.checkpoint import CheckpointError, assign, flatten


def param(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


# -- dense -------------------------------------------------------------------

def test_dense_identity():
    p = DenseLayerParams(param(np.eye(3)), param(np.zeros(3)))
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(dense_forward(p, x).data, x)


def test_dense_hand_product():
    p = DenseLayerParams(param([[1, 2], [3, 4]]), param([0, 0]))
    np.testing.assert_array_equal(dense_forward(p, np.array([1.0, 1.0])).data, [3.0, 7.0])


def test_dense_shape_mismatch():
    p = DenseLayerParams(param([[1, 2], [3, 4]]), param([0, 0]))
    with pytest.raises(ContractViolation):
        dense_forward(p, np.ones(3))


def test_dense_batched_matches_rows():
    rng = np.random.default_rng(0)
    p = init_dense(rng, 4, 3)
    x = rng.normal(size=(5, 4))
    batched = dense_forward(p, x).data
    rows = np.stack([dense_forward(p, r).data for r in x])
    np.testing.assert_allclose(batched, rows, rtol=0, atol=1e-14)


# -- lstm --------------------------------------------------------------------

def test_lstm_zero_cell():
    p = zero_lstm(2, 3)
    h, c = lstm_cell(p, np.ones(2), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_lstm_scalar_hand_evaluation():
    # 1 hidden unit, 1 input: every W is [w_h, w_x]
    w = {"W_f": [[0.5, -1.0]], "W_i": [[0.2, 0.3]], "W_C": [[-0.7, 1.1]], "W_o": [[0.9, 0.4]]}
    b = {"b_f": [0.1], "b_i": [-0.2], "b_C": [0.05], "b_o": [0.3]}
    from premig.numerics import LstmCellParams
    p = LstmCellParams(**{k: param(v) for k, v in w.items()}, **{k: param(v) for k, v in b.items()})
    x, h0, c0 = 0.8, -0.4, 0.6
    f = _sig(0.5 * h0 - 1.0 * x + 0.1)
    i = _sig(0.2 * h0 + 0.3 * x - 0.2)
    ct = math.tanh(-0.7 * h0 + 1.1 * x + 0.05)
    o = _sig(0.9 * h0 + 0.4 * x + 0.3)
    c1 = f * c0 + i * ct
    h1 = o * math.tanh(c1)
    h, c = lstm_cell(p, [x], [h0], [c0])
    assert h.data[0] == pytest.approx(h1, abs=1e-15)
    assert c.data[0] == pytest.approx(c1, abs=1e-15)


def test_lstm_gate_ranges_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = init_lstm(rng, 2, 5)
        for W in (p.W_f, p.W_i, p.W_C, p.W_o):
            W.data *= rng.uniform(0.5, 5.0)
        hx = np.concatenate([rng.normal(size=5), rng.normal(size=2)])
        for W, bias, fn in ((p.W_f, p.b_f, "sig"), (p.W_i, p.b_i, "sig"), (p.W_o, p.b_o, "sig")):
            z = 1 / (1 + np.exp(-(W.data @ hx + bias.data)))
            assert np.all((z > 0) & (z < 1))
        assert np.all(np.abs(np.tanh(p.W_C.data @ hx + p.b_C.data)) < 1)


def test_lstm_long_rollout_finite():
    rng = np.random.default_rng(2)
    p = init_lstm(rng, 2, 8)
    h, c = np.zeros(8), np.zeros(8)
    for _ in range(100):
        h, c = lstm_cell(p, rng.normal(size=2), h, c)
        assert np.all(np.isfinite(c.data))
        h, c = h.data, c.data


def test_lstm_shape_mismatch():
    p = zero_lstm(2, 3)
    with pytest.raises(ContractViolation):
        lstm_cell(p, np.ones(3), np.zeros(3), np.zeros(3))


# -- backward ----------------------------------------------------------------

def test_square_gradient():
    x = param(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_nonscalar_loss_rejected():
    x = param([1.0, 2.0])
    with pytest.raises(ContractViolation):
        (x * 2.0).backward()


@pytest.mark.parametrize("seed", range(20))
def test_dense_net_gradcheck(seed):
    rng = np.random.default_rng(seed)
    layers = [init_dense(rng, 3, 4), init_dense(rng, 4, 2)]
    x = rng.normal(size=(5, 3))
    params = [t for l in layers for t in l.tensors().values()]

    def loss():
        return (mlp_forward(layers, x) ** 2).mean()

    assert check_gradients(loss, params) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_lstm_gradcheck_three_steps(seed):
    rng = np.random.default_rng(100 + seed)
    p = init_lstm(rng, 2, 3)
    xs = rng.normal(size=(3, 2))
    target = rng.normal(size=3)
    params = list(p.tensors().values())

    def loss():
        h, c = np.zeros(3), np.zeros(3)
        for x in xs:
            h, c = lstm_cell(p, x, h, c)
        return ((h - target) ** 2).sum()

    assert check_gradients(loss, params) < 1e-4


@pytest.mark.parametrize("op", ["exp", "log", "tanh", "sigmoid", "softplus", "lgamma", "digamma"])
def test_elementwise_gradcheck(op):
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = param(rng.uniform(0.3, 3.0, size=4))
        assert check_gradients(lambda: getattr(x, op)().sum(), [x]) < 1e-4


def test_log_softmax_and_entropy_gradcheck():
    rng = np.random.default_rng(8)
    for _ in range(20):
        z = param(rng.normal(size=(3, 4)))
        idx = rng.integers(0, 4, size=3)
        assert check_gradients(lambda: categorical_log_prob(z, idx).sum(), [z]) < 1e-4
        assert check_gradients(lambda: categorical_entropy(z).sum(), [z]) < 1e-4


def test_beta_logprob_and_entropy_gradcheck():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = param(rng.uniform(0.5, 5, size=3))
        b = param(rng.uniform(0.5, 5, size=3))
        x = rng.uniform(0.05, 0.95, size=3)
        assert check_gradients(lambda: beta_log_prob(a, b, x).sum(), [a, b]) < 1e-4
        assert check_gradients(lambda: beta_entropy(a, b).sum(), [a, b]) < 1e-4


def test_getitem_and_reuse_accumulate():
    x = param([1.0, 2.0, 3.0])
    y = x[0] * x[2] + x[0]
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0, 0.0, 1.0])


# -- categorical ---------------------------------------------------------------

def test_categorical_dominance():
    rng = np.random.default_rng(0)
    idx, lp = categorical_sample(np.array([1000.0, 0.0]), rng)
    assert idx == 0 and lp == pytest.approx(0.0, abs=1e-12)


def test_categorical_uniform_chi_square():
    rng = np.random.default_rng(11)
    k, n = 4, 100_000
    counts = np.bincount([categorical_sample(np.zeros(k), rng)[0] for _ in range(n)], minlength=k)
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) < 3 * sigma)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_categorical_logprob_consistency():
    rng = np.random.default_rng(12)
    for _ in range(50):
        logits = rng.normal(size=5) * 3
        idx, lp = categorical_sample(logits, rng)
        soft = np.exp(logits - logits.max())
        soft /= soft.sum()
        assert abs(math.exp(lp) - soft[idx]) < 1e-12


# -- beta ----------------------------------------------------------------------

def test_beta_uniform_mean():
    rng = np.random.default_rng(13)
    xs = np.array([bounded_sample(1.0, 1.0, rng)[0] for _ in range(100_000)])
    assert abs(xs.mean() - 0.5) < 0.01


def test_beta_moment_oracle():
    rng = np.random.default_rng(14)
    xs = np.array([bounded_sample(5.0, 1.0, rng)[0] for _ in range(20_000)])
    assert xs.min() >= 0 and xs.max() <= 1
    sd = math.sqrt(5 / (36 * 7)) / math.sqrt(len(xs))
    assert abs(xs.mean() - 5 / 6) < 4 * sd


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.0, 5.0), (5.0, 1.0), (1.5, 1.5)])
def test_beta_density_integrates_to_one(a, b):
    grid = (np.arange(10_000) + 0.5) / 10_000
    total = np.exp(beta_log_density(a, b, grid)).sum() / 10_000
    assert abs(total - 1.0) < 1e-3


def test_beta_sample_logdensity_matches_scipy():
    rng = np.random.default_rng(15)
    for _ in range(20):
        a, b = rng.uniform(0.5, 6, size=2)
        x, ld = bounded_sample(a, b, rng)
        assert ld == pytest.approx(stats.beta(a, b).logpdf(x), rel=1e-10)


# -- optimizer -----------------------------------------------------------------

def test_optimizer_zero_gradient_no_move():
    p = param([1.0, -2.0])
    st_ = OptimizerState.for_params([p])
    optimizer_step(st_, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [2.5, -0.3])
def test_optimizer_moves_against_gradient_sign(g):
    p = param([0.0])
    st_ = OptimizerState.for_params([p])
    for _ in range(50):
        optimizer_step(st_, [p], [np.array([g])])
    assert np.sign(p.data[0]) == -np.sign(g)


def test_optimizer_quadratic_bowl_decreases():
    p = param([3.0, -4.0])
    st_ = OptimizerState.for_params([p], step_size=0.05)
    losses = []
    for _ in range(100):
        p.zero_grad()
        loss = (p * p).sum()
        losses.append(loss.item())
        loss.backward()
        optimizer_step(st_, [p])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_optimizer_skips_nonfinite():
    p = param([1.0])
    st_ = OptimizerState.for_params([p])
    assert optimizer_step(st_, [p], [np.array([np.nan])]) is False
    assert st_.skipped == 1 and p.data[0] == 1.0


# -- checkpoints ---------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_checkpoint_roundtrip_bit_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    tree = {"dense": init_dense(rng, 3, 2), "lstm": init_lstm(rng, 2, 4)}
    view = flatten("", tree)
    path = tmp_path_factory.mktemp("ck") / "p.npz"
    save_params(path, view, meta={"seed": seed})
    arrays, meta = load_params(path)
    assert meta == {"seed": seed}
    for k, t in view.items():
        assert arrays[k].tobytes() == t.data.tobytes()
    fresh = flatten("", {"dense": init_dense(np.random.default_rng(seed + 1), 3, 2),
                         "lstm": init_lstm(np.random.default_rng(seed + 1), 2, 4)})
    assign(fresh, arrays)
    for k in view:
        assert fresh[k].data.tobytes() == view[k].data.tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "p.npz"
    save_params(path, flatten("d", init_dense(rng, 3, 2)))
    arrays, _ = load_params(path)
    with pytest.raises(CheckpointError):
        assign(flatten("d", init_dense(rng, 4, 2)), arrays)


def test_log_softmax_rows_normalize():
    z = np.random.default_rng(3).normal(size=(4, 6))
    np.testing.assert_allclose(np.exp(log_softmax(z)).sum(axis=1), 1.0, atol=1e-14)
