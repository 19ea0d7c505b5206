import numpy as np
import pytest

from open_tta.adapt.engine import AdaptationConfig, Gce, ModelPair, SgdSpec, make_adaptation_state, predict_pair, run_scenario, tta_step
from open_tta.adapt.losses import gce_loss, gce_loss_grad, tta_loss, tta_loss_grad
from open_tta.adapt.runlog import read_runlog, read_samples_csv, write_runlog, write_samples_csv
from open_tta.adapt.selection import (
    ConfidenceDifference,
    ConfidenceThreshold,
    EntropyThreshold,
    SelectAll,
    SelectionScores,
    apply_strategy,
    select,
)
from open_tta.data.corruptions import CorruptionOp
from open_tta.data.streams import LabeledBatch, ScenarioSpec, make_stream
from open_tta.data.synthetic import SyntheticSourceSpec, generate_source
from open_tta.errors import NonFiniteError
from open_tta.nn.functional import softmax
from open_tta.nn.model import ParamScope, SmallClassifier
from open_tta.pretrain import pretrain_source


def _scores(conf_tilde, conf_hat, max_hat=None, num_classes=2) -> SelectionScores:
    ct = np.asarray(conf_tilde, dtype=float)
    ch = np.asarray(conf_hat, dtype=float)
    return SelectionScores(
        conf_tilde=ct,
        conf_hat=ch,
        logit_tilde=np.zeros_like(ct),
        logit_hat=np.zeros_like(ct),
        max_hat=ch if max_hat is None else np.asarray(max_hat, dtype=float),
        entropy_hat=np.zeros_like(ct),
        num_classes=num_classes,
    )


def _source():
    return SyntheticSourceSpec(num_classes=3, dim=4, samples_per_class=80, mean_scale=3.0, seed=0)


def _scenario(rounds=2, **kw) -> ScenarioSpec:
    defaults = dict(
        source=_source(),
        corruption_sequence=[CorruptionOp(kind="gaussian_noise", severity=2), CorruptionOp(kind="mean_shift", severity=3)],
        rounds=rounds,
        batch_size=20,
        pool_per_domain=40,
        seed=0,
    )
    defaults.update(kw)
    return ScenarioSpec(**defaults)


def _pretrained() -> SmallClassifier:
    train, _ = generate_source(_source())
    return pretrain_source(SmallClassifier.init(4, [8], 3, seed=0), train, epochs=3, lr=1e-2, batch_size=32)


def _batch(n=6, seed=0, dim=4) -> LabeledBatch:
    rng = np.random.default_rng(seed)
    return LabeledBatch(
        features=rng.normal(size=(n, dim)),
        labels=rng.integers(0, 3, n),
        open_flags=np.zeros(n, dtype=bool),
        domain_id=0,
        round_id=0,
    )


def test_confidence_difference_examples():
    mask = apply_strategy(ConfidenceDifference(), _scores([0.5, 0.5, 0.5], [0.8, 0.5, 0.49]))
    assert mask.tolist() == [True, True, False]


def test_confidence_threshold_examples():
    s = _scores([0.5, 0.5], [0.5, 0.5], max_hat=[0.91, 0.89])
    assert apply_strategy(ConfidenceThreshold(p=0.9), s).tolist() == [True, False]


def test_entropy_threshold_rejects_uniform():
    y = np.full((2, 4), 0.25)
    z = np.zeros((2, 4))
    mask = select(EntropyThreshold(), y, y, z, z, np.zeros(2, dtype=np.int64))
    assert not mask.any()
    assert EntropyThreshold().threshold(4) == pytest.approx(0.4 * np.log(4))


def test_logit_and_softmax_spaces_differ():
    lt = np.array([[2.0, 0.0, 0.0]])
    lh = np.array([[3.0, 3.0, 0.0]])
    c_o = np.array([0])
    soft = select(ConfidenceDifference(), softmax(lt), softmax(lh), lt, lh, c_o)
    logit = select(ConfidenceDifference(score_space="logit"), softmax(lt), softmax(lh), lt, lh, c_o)
    assert soft.tolist() == [False]
    assert logit.tolist() == [True]


def test_tta_loss_examples():
    assert tta_loss(np.array([[0.9, 0.1]]), np.array([True]), 0.0) == pytest.approx(0.325083, abs=1e-6)
    onehot = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert tta_loss(onehot, np.array([True, True]), 0.5) == pytest.approx(0.0, abs=1e-9)
    two = np.array([[0.9, 0.1], [0.1, 0.9]])
    assert tta_loss(two, np.array([True, True]), 0.5) == pytest.approx(-0.021490, abs=1e-6)


def test_gce_loss_examples():
    c_o = np.array([0])
    assert gce_loss(np.array([[1.0, 0.0]]), c_o, np.array([True]), 0.8) == pytest.approx(0.0)
    assert gce_loss(np.array([[0.3, 0.7]]), c_o, np.array([True]), 1.0) == pytest.approx(0.7)
    assert gce_loss(np.array([[0.5, 0.5]]), c_o, np.array([True]), 0.8) == pytest.approx(0.532064, abs=1e-6)


def _fd_logits(fn, logits, h=1e-6):
    out = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        p, m = logits.copy(), logits.copy()
        p[idx] += h
        m[idx] -= h
        out[idx] = (fn(p) - fn(m)) / (2 * h)
    return out


@pytest.mark.parametrize("mask", [[True, False, True, True], [False, False, False, False], [True, True, True, True]])
def test_tta_loss_grad_matches_finite_differences(mask):
    logits = np.random.default_rng(1).normal(size=(4, 3))
    mask = np.array(mask)
    analytic = tta_loss_grad(softmax(logits), mask, 0.5)
    fd = _fd_logits(lambda z: tta_loss(softmax(z), mask, 0.5), logits)
    np.testing.assert_allclose(analytic, fd, atol=1e-7)


def test_unselected_rows_only_carry_the_mean_entropy_gradient():
    logits = np.random.default_rng(2).normal(size=(4, 3))
    mask = np.array([True, False, True, False])
    g = tta_loss_grad(softmax(logits), mask, 0.0)
    assert np.all(g[~mask] == 0.0)


def test_gce_grad_matches_finite_differences():
    logits = np.random.default_rng(3).normal(size=(5, 3))
    c_o = np.argmax(logits, axis=1)
    mask = np.array([True, True, False, True, False])
    analytic = gce_loss_grad(softmax(logits), c_o, mask, 0.8)
    fd = _fd_logits(lambda z: gce_loss(softmax(z), c_o, mask, 0.8), logits)
    np.testing.assert_allclose(analytic, fd, atol=1e-7)


def test_predict_pair_identical_models():
    pair = ModelPair.from_pretrained(_pretrained())
    pred = predict_pair(pair, _batch().features)
    np.testing.assert_array_equal(pred.y_tilde, pred.y_hat)
    np.testing.assert_array_equal(pred.c_o, pred.c_a)
    np.testing.assert_allclose(pred.y_hat.sum(axis=1), 1.0, atol=1e-9)


def test_model_pair_rejects_shared_model():
    m = _pretrained()
    with pytest.raises(Exception):
        ModelPair(m, m)


def test_tta_step_updates_theta_a_only():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(strategy=SelectAll(), batch_size=6)
    before_o = pair.theta_o.content_hash()
    before_a = pair.theta_a.flat_parameters(ParamScope.AFFINE_ONLY)
    batch = _batch()
    rec = tta_step(pair, make_adaptation_state(cfg), cfg, batch)
    assert rec.updated
    assert rec.update_norm > 0
    assert pair.theta_o.content_hash() == before_o
    assert not np.array_equal(before_a, pair.theta_a.flat_parameters(ParamScope.AFFINE_ONLY))
    pred = predict_pair(pair, batch.features)
    assert not np.array_equal(pred.y_tilde, pred.y_hat)


def test_tta_step_skips_update_on_empty_selection():
    model = _pretrained()
    model.layers[-1].bn.gamma[...] = 1e-3
    model.layers[-1].bn.beta[...] = 0.0
    pair = ModelPair.from_pretrained(model)
    cfg = AdaptationConfig(strategy=ConfidenceThreshold(p=0.99), batch_size=6)
    before = pair.theta_a.content_hash()
    rec = tta_step(pair, make_adaptation_state(cfg), cfg, _batch())
    assert rec.num_selected == 0
    assert not rec.updated
    assert pair.theta_a.content_hash() == before


def test_tta_step_zero_learning_rate_records_loss():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(learning_rate=0.0, optimizer=SgdSpec(), batch_size=6)
    before = pair.theta_a.content_hash()
    rec = tta_step(pair, make_adaptation_state(cfg), cfg, _batch())
    assert np.isfinite(rec.loss)
    assert pair.theta_a.content_hash() == before


def test_update_every_accumulates():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(update_every=2, batch_size=6)
    state = make_adaptation_state(cfg)
    flags = [tta_step(pair, state, cfg, _batch(seed=s), step=s).updated for s in range(4)]
    assert flags == [False, True, False, True]


def test_gce_loss_kind_runs():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(loss=Gce(q=0.8), batch_size=6)
    rec = tta_step(pair, make_adaptation_state(cfg), cfg, _batch())
    assert rec.updated


@pytest.mark.parametrize("method", ["source", "bn_adapt"])
def test_non_adaptive_methods_never_update(method):
    pair = ModelPair.from_pretrained(_pretrained(), method)
    cfg = AdaptationConfig(method=method, batch_size=20)
    before = pair.theta_a.content_hash()
    log = run_scenario(pair, cfg, make_stream(_scenario(rounds=1)))
    assert len(log) > 0
    assert pair.theta_a.content_hash() == before
    assert not any(r.updated for r in log.records)


def test_run_scenario_empty_stream():
    pair = ModelPair.from_pretrained(_pretrained())
    log = run_scenario(pair, AdaptationConfig(), iter([]))
    assert len(log) == 0
    assert log.status == "completed"


def test_run_scenario_is_deterministic_and_keeps_theta_o():
    model = _pretrained()
    cfg = AdaptationConfig(strategy=ConfidenceDifference(), batch_size=20)
    pair1 = ModelPair.from_pretrained(model)
    h = pair1.theta_o.content_hash()
    log1 = run_scenario(pair1, cfg, make_stream(_scenario()))
    log2 = run_scenario(ModelPair.from_pretrained(model), cfg, make_stream(_scenario()))
    assert pair1.theta_o.content_hash() == h
    assert len(log1) == len(log2) == 16
    for a, b in zip(log1.records, log2.records):
        assert a.to_dict() == b.to_dict()


def test_recorded_masks_reproduce_from_recorded_scores():
    pair = ModelPair.from_pretrained(_pretrained())
    for strategy in (ConfidenceDifference(), ConfidenceThreshold(p=0.6), EntropyThreshold()):
        cfg = AdaptationConfig(strategy=strategy, batch_size=20)
        log = run_scenario(ModelPair.from_pretrained(pair.theta_o), cfg, make_stream(_scenario(rounds=1)))
        for rec in log.records:
            scores = SelectionScores(
                rec.conf_tilde, rec.conf_hat, rec.logit_tilde, rec.logit_hat, rec.max_hat, rec.entropy_hat, rec.num_classes
            )
            np.testing.assert_array_equal(apply_strategy(strategy, scores), rec.selected)


def test_all_and_confidence_difference_masks_differ():
    model = _pretrained()
    masks = []
    for strategy in (SelectAll(), ConfidenceDifference()):
        cfg = AdaptationConfig(strategy=strategy, batch_size=20, learning_rate=1e-2)
        log = run_scenario(ModelPair.from_pretrained(model), cfg, make_stream(_scenario()))
        masks.append(np.concatenate([r.selected for r in log.records]))
    assert not np.array_equal(masks[0], masks[1])


def test_records_hold_pre_update_predictions():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(batch_size=20, learning_rate=1e-2)
    state = make_adaptation_state(cfg)
    for step, batch in enumerate(make_stream(_scenario(rounds=1))):
        snapshot = pair.theta_a.copy()
        rec = tta_step(pair, state, cfg, batch, step)
        np.testing.assert_array_equal(predict_pair(ModelPair(pair.theta_o.copy(), snapshot), batch.features).c_a, rec.c_a)


def test_run_scenario_aborts_on_bad_batch_and_skips_tiny_batches():
    pair = ModelPair.from_pretrained(_pretrained())
    good = _batch(seed=1)
    tiny = _batch(n=1, seed=2)
    bad = _batch(seed=3)
    bad.features[0, 0] = np.nan
    log = run_scenario(pair, AdaptationConfig(batch_size=6), iter([good, tiny, bad, _batch(seed=4)]))
    assert log.status == "aborted"
    assert log.skipped_batches == 1
    assert len(log) == 1
    assert "non_finite" in log.error


def test_tta_step_raises_on_non_finite_features():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(batch_size=6)
    bad = _batch()
    bad.features[1, 1] = np.inf
    with pytest.raises(NonFiniteError):
        tta_step(pair, make_adaptation_state(cfg), cfg, bad)


def test_diverging_update_rolls_back_parameters_and_moments():
    pair = ModelPair.from_pretrained(_pretrained())
    cfg = AdaptationConfig(batch_size=6)
    state = make_adaptation_state(cfg)
    assert tta_step(pair, state, cfg, _batch(seed=1), step=0).updated
    params = pair.theta_a.flat_parameters(ParamScope.AFFINE_ONLY)
    t, m, v = state.optimizer.t, {k: a.copy() for k, a in state.optimizer.m.items()}, {k: a.copy() for k, a in state.optimizer.v.items()}

    state.optimizer.lr = 1e308
    with pytest.raises(NonFiniteError):
        tta_step(pair, state, cfg, _batch(seed=2), step=1)
    np.testing.assert_array_equal(pair.theta_a.flat_parameters(ParamScope.AFFINE_ONLY), params)
    assert state.optimizer.t == t
    for name in m:
        np.testing.assert_array_equal(state.optimizer.m[name], m[name])
        np.testing.assert_array_equal(state.optimizer.v[name], v[name])


def test_runlog_and_samples_round_trip(tmp_path):
    pair = ModelPair.from_pretrained(_pretrained())
    log = run_scenario(pair, AdaptationConfig(batch_size=20), make_stream(_scenario(rounds=1)))
    path = str(tmp_path / "runlog.jsonl")
    write_runlog(log, path)
    back = read_runlog(path)
    assert back.status == "completed"
    assert [r.to_dict() for r in back.records] == [r.to_dict() for r in log.records]
    csv = str(tmp_path / "samples.csv")
    write_samples_csv(log.records, csv)
    df = read_samples_csv(csv)
    assert len(df) == sum(r.batch_size for r in log.records)
    np.testing.assert_array_equal(df["c_a"].to_numpy(), np.concatenate([r.c_a for r in log.records]))
