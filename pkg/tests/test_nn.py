import numpy as np
import pytest

from open_tta.errors import (
    BatchTooSmallError,
    CheckpointFormatError,
    InvalidDistributionError,
    NonFiniteError,
    ShapeMismatchError,
    TraceMismatchError,
)
from open_tta.nn.backprop import backward, forward, per_sample_gradients
from open_tta.nn.checkpoint import FORMAT_VERSION, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from open_tta.nn.functional import argmax_rows, entropy, entropy_grad_logits, softmax
from open_tta.nn.model import Activation, BatchNormState, LayerBlock, ParamScope, SmallClassifier, StatsMode


def _identity_model() -> SmallClassifier:
    bn = BatchNormState.fresh(2)
    return SmallClassifier([LayerBlock(np.eye(2), np.zeros(2), bn, Activation.IDENTITY)])


def _random_model(seed: int, dims=(4, 6, 3), mode=StatsMode.TEST_BATCH) -> SmallClassifier:
    rng = np.random.default_rng(seed)
    m = SmallClassifier.init(dims[0], list(dims[1:-1]), dims[-1], seed=seed)
    for blk in m.layers:
        blk.bias[...] = rng.normal(0, 0.3, blk.bias.shape)
        blk.bn.gamma[...] = rng.uniform(0.5, 1.5, blk.bn.gamma.shape)
        blk.bn.beta[...] = rng.normal(0, 0.3, blk.bn.beta.shape)
        blk.bn.running_mean[...] = rng.normal(0, 0.5, blk.bn.running_mean.shape)
        blk.bn.running_var[...] = rng.uniform(0.5, 2.0, blk.bn.running_var.shape)
    m.set_stats_mode(mode)
    return m


def _mean_entropy(model: SmallClassifier, x: np.ndarray) -> float:
    logits, _ = forward(model, x)
    p = softmax(logits)
    return float(np.mean(-np.sum(p * np.log(p), axis=1)))


def _fd_grad(model: SmallClassifier, x: np.ndarray, scope: ParamScope, h: float = 1e-4) -> np.ndarray:
    flat = model.flat_parameters(scope)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        model.load_flat_parameters(scope, plus)
        fp = _mean_entropy(model, x)
        model.load_flat_parameters(scope, minus)
        fm = _mean_entropy(model, x)
        out[i] = (fp - fm) / (2 * h)
    model.load_flat_parameters(scope, flat)
    return out


def _analytic(model: SmallClassifier, x: np.ndarray, scope: ParamScope) -> np.ndarray:
    logits, trace = forward(model, x)
    p = softmax(logits)
    return backward(model, trace, entropy_grad_logits(p) / len(x), scope).flatten()


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    big = softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(softmax(np.array([[1.0, 2.0, 3.0]])), [[0.09003, 0.24473, 0.66524]], atol=1e-5)
    rows = softmax(np.random.default_rng(0).normal(0, 5, (20, 7)))
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        softmax(np.array([[np.nan, 0.0]]))


def test_entropy_examples():
    assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10), abs=1e-6)
    assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    assert entropy(np.array([0.9, 0.1])) == pytest.approx(0.325083, abs=1e-6)


def test_entropy_rejects_non_distribution():
    with pytest.raises(InvalidDistributionError):
        entropy(np.array([0.5, 0.6]))
    with pytest.raises(InvalidDistributionError):
        entropy(np.array([1.2, -0.2]))


def test_argmax_ties_go_to_lowest_index():
    assert argmax_rows(np.array([[0.5, 0.5]]))[0] == 0


def test_forward_identity_model():
    logits, _ = forward(_identity_model(), np.array([[1.0, 0.0]]))
    # eps keeps the scale a hair under one
    np.testing.assert_allclose(logits, [[1.0, 0.0]], atol=1e-5)


def test_forward_identical_rows_give_identical_logits():
    m = _random_model(1)
    x = np.tile(np.random.default_rng(2).normal(size=(1, 4)), (2, 1))
    x = np.vstack([x, np.random.default_rng(3).normal(size=(3, 4))])
    logits, _ = forward(m, x)
    np.testing.assert_array_equal(logits[0], logits[1])


def test_forward_matches_straight_line_arithmetic():
    m = SmallClassifier.init(5, [8], 3, seed=7)
    m.set_stats_mode(StatsMode.TEST_BATCH)
    x = np.random.default_rng(7).normal(size=(6, 5))
    h = x
    for blk in m.layers:
        z = h @ blk.weight.T + blk.bias
        zn = (z - z.mean(0)) / np.sqrt(z.var(0) + blk.bn.eps)
        y = blk.bn.gamma * zn + blk.bn.beta
        h = np.maximum(y, 0) if blk.activation == Activation.RELU else y
    logits, _ = forward(m, x)
    np.testing.assert_allclose(logits, h, atol=1e-10)


def test_forward_is_deterministic():
    m = _random_model(4)
    x = np.random.default_rng(4).normal(size=(5, 4))
    a, _ = forward(m, x)
    b, _ = forward(m, x)
    np.testing.assert_array_equal(a, b)


def test_forward_errors():
    m = _random_model(5)
    with pytest.raises(ShapeMismatchError):
        forward(m, np.zeros((3, 5)))
    with pytest.raises(BatchTooSmallError):
        forward(m, np.zeros((1, 4)))
    m.set_stats_mode(StatsMode.SOURCE)
    logits, _ = forward(m, np.zeros((1, 4)))
    assert logits.shape == (1, 3)


def test_test_batch_forward_ignores_input_shift():
    m = _random_model(6)
    x = np.random.default_rng(6).normal(size=(8, 4))
    shift = np.array([3.0, -1.0, 0.5, 10.0])
    a, _ = forward(m, x)
    b, _ = forward(m, x + shift)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_zero_upstream_gives_zero_gradients():
    m = _random_model(8)
    logits, trace = forward(m, np.random.default_rng(8).normal(size=(4, 4)))
    g = backward(m, trace, np.zeros_like(logits), ParamScope.ALL_PARAMS)
    assert g.norm() == 0.0


@pytest.mark.parametrize("scope", [ParamScope.AFFINE_ONLY, ParamScope.ALL_PARAMS])
@pytest.mark.parametrize("mode", [StatsMode.TEST_BATCH, StatsMode.SOURCE])
def test_gradients_match_finite_differences(scope, mode):
    for seed in range(5):
        m = _random_model(seed, mode=mode)
        x = np.random.default_rng(100 + seed).normal(size=(5, 4))
        np.testing.assert_allclose(_analytic(m, x, scope), _fd_grad(m, x, scope), rtol=1e-4, atol=1e-8)


def test_single_sample_affine_gradient_matches_finite_differences():
    m = _random_model(11, mode=StatsMode.SOURCE)
    x = np.random.default_rng(11).normal(size=(1, 4))
    scope = ParamScope.AFFINE_ONLY
    np.testing.assert_allclose(_analytic(m, x, scope), _fd_grad(m, x, scope), rtol=1e-4, atol=1e-8)


def test_backward_rejects_foreign_trace():
    m = _random_model(9)
    logits, trace = forward(m, np.random.default_rng(9).normal(size=(4, 4)))
    other = _random_model(9, dims=(4, 5, 3))
    with pytest.raises(TraceMismatchError):
        backward(other, trace, np.zeros_like(logits), ParamScope.AFFINE_ONLY)
    m.set_stats_mode(StatsMode.SOURCE)
    with pytest.raises(TraceMismatchError):
        backward(m, trace, np.zeros_like(logits), ParamScope.AFFINE_ONLY)


def test_per_sample_gradients_sum_to_batch_gradient():
    m = _random_model(12)
    x = np.random.default_rng(12).normal(size=(6, 4))
    for scope in ParamScope:
        rows = per_sample_gradients(m, x, scope)
        assert rows.shape == (6, m.num_parameters(scope))
        np.testing.assert_allclose(rows.sum(axis=0), 6 * _analytic(m, x, scope), atol=1e-8)


def test_per_sample_gradients_duplicate_rows():
    m = _random_model(13)
    x = np.random.default_rng(13).normal(size=(4, 4))
    x[1] = x[0]
    rows = per_sample_gradients(m, x, ParamScope.ALL_PARAMS)
    np.testing.assert_allclose(rows[0], rows[1], atol=1e-12)


def test_per_sample_gradient_vanishes_at_confident_prediction():
    m = _identity_model()
    m.layers[0].bn.gamma[...] = 30.0
    rows = per_sample_gradients(m, np.array([[1.0, 0.0]]), ParamScope.AFFINE_ONLY)
    probs = softmax(forward(m, np.array([[1.0, 0.0]]))[0])
    assert probs.max() >= 0.9999
    assert np.linalg.norm(rows[0]) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    m = _random_model(14, mode=StatsMode.SOURCE)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.content_hash() == m.content_hash()
    assert loaded.stats_modes == m.stats_modes
    assert to_bytes(loaded) == to_bytes(m)


def test_checkpoint_rejects_version_and_magic():
    data = bytearray(to_bytes(_random_model(15)))
    data[8] = FORMAT_VERSION + 1
    with pytest.raises(CheckpointFormatError):
        from_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(CheckpointFormatError):
        from_bytes(to_bytes(_random_model(15))[:-3])


def test_frozen_model_rejects_writes():
    m = _random_model(16)
    m.freeze()
    with pytest.raises(ValueError):
        m.layers[0].bn.gamma[0] = 2.0
    clone = m.copy()
    clone.layers[0].bn.gamma[0] = 2.0
    assert m.layers[0].bn.gamma[0] != 2.0
