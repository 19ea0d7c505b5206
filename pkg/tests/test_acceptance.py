"""Long-running behavioural checks on the default 50-round open-set scenario.

Run with `pytest -m slow`.
"""
import os

import numpy as np
import pytest

from open_tta.adapt.losses import tta_loss, tta_loss_grad
from open_tta.config import Settings, load_experiment_config
from open_tta.experiment import run_adaptation, run_sweep
from open_tta.nn.backprop import backward, forward
from open_tta.nn.functional import softmax
from open_tta.nn.model import ParamScope, SmallClassifier, StatsMode

pytestmark = pytest.mark.slow

LONG_TERM = os.path.join(os.path.dirname(__file__), "..", "configs", "long_term.yaml")
SEEDS = [0, 1, 2]
# multiples of the default learning rate: 5x, 1x, 1/2x, 1/10x
LR_GRID = [5.0, 1.0, 0.5, 0.1]
STRATEGIES = {
    "all": "adaptation.strategy={kind: all}",
    "conf_diff": "adaptation.strategy={kind: confidence_difference}",
    "conf_threshold": "adaptation.strategy={kind: confidence_threshold, p: 0.9}",
    "entropy_threshold": "adaptation.strategy={kind: entropy_threshold}",
}


def _loss_at(model, x, mask, scope, flat):
    model.load_flat_parameters(scope, flat)
    return tta_loss(softmax(forward(model, x)[0]), mask, 0.5)


@pytest.mark.parametrize("scope", list(ParamScope))
def test_adaptation_loss_gradient_matches_finite_differences(scope):
    h = 1e-4
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = SmallClassifier.init(4, [6], 3, seed=seed)
        for blk in model.layers:
            blk.bn.gamma[...] = rng.uniform(0.5, 1.5, blk.bn.gamma.shape)
            blk.bn.beta[...] = rng.normal(0, 0.3, blk.bn.beta.shape)
        model.set_stats_mode(StatsMode.TEST_BATCH)
        x = rng.normal(size=(6, 4))
        mask = rng.random(6) < 0.6

        logits, trace = forward(model, x)
        analytic = backward(model, trace, tta_loss_grad(softmax(logits), mask, 0.5), scope).flatten()
        flat = model.flat_parameters(scope)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fd[i] = (_loss_at(model, x, mask, scope, plus) - _loss_at(model, x, mask, scope, minus)) / (2 * h)
        model.load_flat_parameters(scope, flat)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)


@pytest.fixture(scope="module")
def settings(tmp_path_factory) -> Settings:
    root = tmp_path_factory.mktemp("acceptance")
    return Settings(export_dir=str(root / "runs"), checkpoint_dir=str(root / "ckpt"), show_progress=False)


@pytest.fixture(scope="module")
def long_term(settings):
    """metrics[seed][strategy] for every long-term run."""
    out = {}
    for seed in SEEDS:
        out[seed] = {}
        for name, override in STRATEGIES.items():
            loaded = load_experiment_config(LONG_TERM, overrides=[override], seed=seed)
            bundle = run_adaptation(loaded, settings, out_dir=f"{settings.export_dir}/seed{seed}-{name}", auto_pretrain=True)
            out[seed][name] = bundle.metrics
    return out


@pytest.mark.parametrize("seed", SEEDS)
def test_unfiltered_run_degrades_and_confidence_difference_holds(long_term, seed):
    unfiltered = long_term[seed]["all"]["error"]
    filtered = long_term[seed]["conf_diff"]["error"]
    assert unfiltered["final_round"] - unfiltered["round_1"] >= 0.10
    assert filtered["final_round"] < unfiltered["final_round"]
    assert filtered["final_round"] - filtered["round_1"] <= 0.05


@pytest.mark.parametrize("seed", SEEDS)
def test_confidence_difference_separates_better_than_msp(long_term, seed):
    ood = long_term[seed]["all"]["ood"]
    conf_diff = ood["conf_diff"]["include_closed_wrong"]["final_round"]["auroc"]
    msp = ood["msp"]["include_closed_wrong"]["final_round"]["auroc"]
    assert conf_diff > msp


@pytest.mark.parametrize("seed", SEEDS)
def test_confidence_difference_selects_with_higher_precision(long_term, seed):
    runs = long_term[seed]
    ours = runs["conf_diff"]["selection"]
    assert ours["mean_round_precision"] > runs["conf_threshold"]["selection"]["mean_round_precision"]
    assert ours["mean_round_precision"] > runs["entropy_threshold"]["selection"]["mean_round_precision"]
    assert ours["pooled"]["recall"] > 0.5


@pytest.mark.parametrize("seed", SEEDS)
def test_wrong_gradients_misalign_with_correct_ones(long_term, seed):
    gradsim = long_term[seed]["all"]["gradsim"]
    assert gradsim["mean_diagonal"] > gradsim["mean_off_diagonal"]


@pytest.mark.parametrize("seed", SEEDS)
def test_confidence_drops_grow_over_rounds(long_term, seed):
    assert long_term[seed]["all"]["confidence_drop"]["count_trend_spearman"] > 0


def test_confidence_difference_is_less_sensitive_to_learning_rate(settings):
    loaded = load_experiment_config(LONG_TERM, seed=0)
    base = loaded.config.adaptation.effective_learning_rate
    result = run_sweep(
        loaded,
        "lr",
        [base * k for k in LR_GRID],
        methods=["all", "confidence_difference"],
        settings=settings,
        out_dir=f"{settings.export_dir}/lr-sweep",
        workers=1,
        progress=False,
    )
    std = result.summary.set_index("method")["std_final_error"]
    assert (result.summary["completed"] == 4).all()
    assert std.loc["tent+confdiff>=0"] < std.loc["tent+all"]
