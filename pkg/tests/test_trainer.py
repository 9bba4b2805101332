import numpy as np
import pytest

import trainer
from errors import DivergenceDetected, EmptyMask, InvalidConfig
from grid import LabelMask, ProbMap, ScalarField, one_hot, softmax
from losses import LossConfig, osc_loss
from synth import SynthSpec, synth_generate
from trainer import (
    EXPERIMENT_HEADER,
    TRACE_HEADER,
    ExperimentSpec,
    FitConfig,
    disc_labels,
    experiment_rows_from_csv,
    experiment_spec_from_json,
    fit_config_from_json,
    fit_logits,
    grad_check,
    random_grad_check_case,
    run_experiment,
    trace_records_from_csv,
)

SOFT = LossConfig(phi_mode="soft")


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_soft_gradient_matches_finite_differences(seed):
    P, T = random_grad_check_case(16, seed)
    assert grad_check(P, T, SOFT, h=1e-5) < 1e-4


@pytest.mark.parametrize("weights", [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)])
def test_each_term_gradient_matches_finite_differences(weights):
    alpha, beta, eta = weights
    cfg = LossConfig(phi_mode="soft", alpha=alpha, beta=beta, eta=eta)
    P, T = random_grad_check_case(16, 42)
    assert grad_check(P, T, cfg, h=1e-5) < 1e-4


def test_uniform_prediction_gradient_check():
    T = disc_labels(8)
    P = ProbMap(np.full((2, 8, 8), 0.5))
    assert grad_check(P, T, SOFT, h=1e-5) < 1e-6


def test_grad_check_preconditions():
    P, T = random_grad_check_case(8, 0)
    with pytest.raises(InvalidConfig):
        grad_check(P, T, LossConfig(phi_mode="detached"))
    with pytest.raises(InvalidConfig):
        grad_check(P, T, SOFT, h=1e-2)
    with pytest.raises(InvalidConfig):
        grad_check(P, T, SOFT, h=1e-9)


def test_grad_check_sample_is_deterministic():
    P, T = random_grad_check_case(16, 3)
    assert grad_check(P, T, SOFT) == grad_check(P, T, SOFT)


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------

def test_fit_config_validation():
    with pytest.raises(InvalidConfig):
        fit_config_from_json('{"steps": 0}')
    with pytest.raises(InvalidConfig):
        fit_config_from_json('{"learning_rate": -1}')
    with pytest.raises(InvalidConfig):
        fit_config_from_json('{"loss_kind": "hinge"}')
    assert fit_config_from_json('{"steps": 3}').steps == 3


def test_zero_learning_rate_is_a_no_op():
    T = disc_labels(16)
    cfg = FitConfig(steps=1, learning_rate=0.0)
    trace = fit_logits(None, T, cfg)
    initial = softmax(np.zeros((2, 16, 16)))
    np.testing.assert_array_equal(trace.final.probs, initial.probs)
    assert len(trace.records) == 1
    assert trace.records[0].loss_total == pytest.approx(osc_loss(initial, T, cfg.loss_config).total, abs=1e-12)


@pytest.mark.slow
def test_disc_fit_reaches_target_with_defaults():
    sample = synth_generate(SynthSpec())
    trace = fit_logits(None, sample.truth, FitConfig())
    assert len(trace.records) == 500
    assert trace.final_dsc >= 0.99
    losses = [r.loss_total for r in trace.records[:50]]
    assert all(later <= earlier + 1e-6 for earlier, later in zip(losses, losses[1:]))


@pytest.mark.parametrize("kind", ["bce", "dice", "focal", "osc"])
def test_small_steps_decrease_loss(kind):
    T = disc_labels(32, 4.0)
    trace = fit_logits(None, T, FitConfig(steps=50, learning_rate=1e-2, loss_kind=kind))
    losses = [r.loss_total for r in trace.records]
    assert all(later <= earlier + 1e-6 for earlier, later in zip(losses, losses[1:]))


def test_bce_fit_converges():
    T = disc_labels(32, 4.0)
    trace = fit_logits(None, T, FitConfig(steps=100, loss_kind="bce"))
    assert trace.final_dsc >= 0.99


def test_osc_trace_carries_term_breakdown():
    T = disc_labels(16)
    osc = fit_logits(None, T, FitConfig(steps=3))
    assert all(r.l1 is not None and r.l2 is not None and r.l3 is not None for r in osc.records)
    bce = fit_logits(None, T, FitConfig(steps=3, loss_kind="bce"))
    assert all(r.l1 is None for r in bce.records)


def test_fit_is_deterministic():
    T = disc_labels(16)
    cfg = FitConfig(steps=10, init="logits-gaussian", seed=5)
    first = fit_logits(None, T, cfg)
    second = fit_logits(None, T, cfg)
    assert first.to_csv() == second.to_csv()
    np.testing.assert_array_equal(first.final.probs, second.final.probs)


def test_record_every_keeps_final_step():
    T = disc_labels(16)
    trace = fit_logits(None, T, FitConfig(steps=25, record_every=10, loss_kind="bce"))
    assert [r.step for r in trace.records] == [10, 20, 25]


def test_trace_csv_round_trip():
    T = disc_labels(16)
    trace = fit_logits(None, T, FitConfig(steps=4))
    text = trace.to_csv()
    assert text.splitlines()[0] == ",".join(TRACE_HEADER)
    assert tuple(trace_records_from_csv(text)) == trace.records


def test_fit_rejects_empty_target_class():
    empty = LabelMask(np.zeros((8, 8), dtype=np.int64), 2)
    with pytest.raises(EmptyMask):
        fit_logits(None, empty, FitConfig(steps=1))


def test_image_initialisation_needs_an_image():
    T = disc_labels(8)
    with pytest.raises(InvalidConfig):
        fit_logits(None, T, FitConfig(steps=1, init="logits-image"))
    image = ScalarField(T.labels.astype(float))
    trace = fit_logits(image, T, FitConfig(steps=1, init="logits-image", learning_rate=0.0, loss_kind="bce"))
    assert trace.final_dsc == 1.0


def test_non_finite_loss_reports_step(monkeypatch):
    real = trainer._objective
    calls = {"n": 0}

    def failing(probs, labels, cfg):
        calls["n"] += 1
        total, terms, grad = real(probs, labels, cfg)
        # evaluation 0 is the initial state, evaluation k follows update k
        return (float("nan") if calls["n"] == 4 else total), terms, grad

    monkeypatch.setattr(trainer, "_objective", failing)
    with pytest.raises(DivergenceDetected) as info:
        fit_logits(None, disc_labels(8), FitConfig(steps=10, loss_kind="bce"))
    assert info.value.step == 3
    assert info.value.exit_code == 2


def test_fit_against_noisy_labels_scores_clean_truth():
    truth = disc_labels(16)
    noisy_labels = truth.labels.copy()
    noisy_labels[0, 0] = 1
    trace = fit_logits(None, LabelMask(noisy_labels, 2), FitConfig(steps=50, loss_kind="bce"), truth=truth)
    assert trace.final_dsc < 1.0
    assert np.array_equal(trace.prediction().labels, noisy_labels)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def small_spec(**overrides) -> ExperimentSpec:
    base = {
        "losses": ["bce", "osc"],
        "seeds": [0, 1],
        "synth": SynthSpec(width=32, height=32, fg_fraction=0.05, noise=0.1),
        "fit": FitConfig(steps=15),
    }
    base.update(overrides)
    return ExperimentSpec(**base)


def test_experiment_rows_in_loss_seed_order():
    text = run_experiment(small_spec())
    assert text.splitlines()[0] == ",".join(EXPERIMENT_HEADER)
    rows = experiment_rows_from_csv(text)
    assert [(r.loss, r.seed) for r in rows] == [("bce", 0), ("bce", 1), ("osc", 0), ("osc", 1)]
    assert all(r.steps == 15 for r in rows)
    assert all(0.0 <= r.dsc <= 1.0 for r in rows)


def test_experiment_without_seeds_is_header_only():
    assert run_experiment(small_spec(seeds=[])) == ",".join(EXPERIMENT_HEADER) + "\n"


def test_experiment_is_byte_identical_across_runs():
    spec = small_spec()
    assert run_experiment(spec) == run_experiment(spec)


@pytest.mark.slow
def test_parallel_experiment_matches_serial():
    spec = small_spec()
    assert run_experiment(spec.model_copy(update={"workers": 2})) == run_experiment(spec)


def test_default_experiment_fits_osc_in_soft_mode():
    spec = ExperimentSpec()
    assert spec.losses == ["bce", "dice", "focal", "osc"]
    assert spec.seeds == list(range(20))
    assert spec.fit.steps == 200
    assert spec.fit.loss_config.phi_mode == "soft"
    assert FitConfig().loss_config.phi_mode == "detached"


@pytest.mark.slow
def test_default_experiment_writes_full_report():
    spec = ExperimentSpec(workers=4)
    text = run_experiment(spec)
    rows = experiment_rows_from_csv(text)
    assert len(rows) == 80
    assert [(r.loss, r.seed) for r in rows] == [
        (loss, seed) for loss in ("bce", "dice", "focal", "osc") for seed in range(20)
    ]
    assert all(r.steps == 200 for r in rows)
    assert run_experiment(spec) == text


def test_experiment_spec_json():
    spec = experiment_spec_from_json('{"losses": ["dice"], "seeds": [3], "workers": 1}')
    assert spec.losses == ["dice"]
    assert spec.synth.noise == 0.1
    with pytest.raises(InvalidConfig):
        experiment_spec_from_json('{"losses": ["hinge"]}')
    with pytest.raises(InvalidConfig):
        experiment_spec_from_json('{"workers": 0}')


def test_dice_fit_returns_final_probabilities():
    T = disc_labels(12)
    trace = fit_logits(None, T, FitConfig(steps=2, loss_kind="dice"))
    assert trace.steps == 2
    assert isinstance(trace.final, ProbMap)
    assert one_hot(T).probs.shape == trace.final.probs.shape
