"""
OsC toolkit - trainer
Per-pixel free logits fitted by plain gradient descent, a finite-difference
gradient checker for the OsC loss, and the batch experiment runner that
compares losses under boundary label noise.
"""

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import DivergenceDetected, EmptyMask, InvalidConfig, IoFailure
from grid import BinaryMask, LabelMask, ProbMap, ScalarField, argmax, binary_from_labels, require_same_shape, softmax
from losses import (
    LOSS_KINDS,
    LossConfig,
    _multiclass_baseline_arrays,
    evaluate_osc,
)
from metrics import confusion_metrics, evaluate
from synth import SynthSpec, synth_generate

logger = logging.getLogger(__name__)

LossKind = Literal["bce", "dice", "focal", "osc"]
InitKind = Literal["logits-zero", "logits-gaussian", "logits-image"]

TRACE_HEADER = ["step", "loss_total", "l1", "l2", "l3", "dsc"]
EXPERIMENT_HEADER = ["loss", "seed", "dsc", "jac", "pre", "rec", "hau95", "steps", "final_loss"]

GRAD_CHECK_TOLERANCE = 1e-4
GRAD_CHECK_SAMPLES = 256
MIN_STEP, MAX_STEP = 1e-7, 1e-3
IMAGE_LOGIT_SCALE = 4.0


class FitConfig(BaseModel):
    """Gradient descent settings for fit_logits"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = 500
    # per-pixel step size; updates are lr * N * dL/dz for N pixels
    learning_rate: float = 1.0
    loss_kind: LossKind = "osc"
    loss_config: LossConfig = Field(default_factory=LossConfig)
    seed: int = 0
    init: InitKind = "logits-zero"
    init_sigma: float = 0.1
    record_every: int = 1
    dice_smooth: float = 1.0

    @field_validator("steps", "record_every")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("learning_rate", "dice_smooth")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if not (value >= 0 and math.isfinite(value)):
            raise ValueError("must be finite and >= 0")
        return value

    @field_validator("init_sigma")
    @classmethod
    def _sigma(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be > 0")
        return value


def fit_config_from_json(text: str) -> FitConfig:
    try:
        return FitConfig.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfig(f"invalid fit config: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e


# ---------------------------------------------------------------------------
# Fit trace
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text else None


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss_total: float
    l1: Optional[float]
    l2: Optional[float]
    l3: Optional[float]
    dsc: float

    def to_row(self) -> List[str]:
        return [str(self.step), _fmt(self.loss_total), _fmt(self.l1), _fmt(self.l2), _fmt(self.l3),
                _fmt(self.dsc)]

    @classmethod
    def from_row(cls, row: List[str]) -> "TraceRecord":
        step, total, l1, l2, l3, dsc = row
        return cls(int(step), float(total), _opt_float(l1), _opt_float(l2), _opt_float(l3), float(dsc))


@dataclass(frozen=True, eq=False)
class FitTrace:
    """Recorded post-update states, step 1 onwards; the final step is always present"""

    records: Tuple[TraceRecord, ...]
    final: ProbMap
    steps: int

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss_total

    @property
    def final_dsc(self) -> float:
        return self.records[-1].dsc

    def prediction(self) -> LabelMask:
        return argmax(self.final)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for record in self.records:
            writer.writerow(record.to_row())
        return buffer.getvalue()


def trace_records_from_csv(text: str) -> List[TraceRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != TRACE_HEADER:
        raise InvalidConfig(f"trace CSV must start with header {','.join(TRACE_HEADER)}")
    return [TraceRecord.from_row(row) for row in rows[1:] if row]


# ---------------------------------------------------------------------------
# Gradient descent on free logits
# ---------------------------------------------------------------------------

def _softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


def _objective(probs: np.ndarray, labels: np.ndarray,
               cfg: FitConfig) -> Tuple[float, Optional[Tuple[float, float, float]], np.ndarray]:
    """(total, (l1, l2, l3) for OsC, dL/dP)"""
    if cfg.loss_kind == "osc":
        result = evaluate_osc(probs, labels, cfg.loss_config)
        return result.total, (result.l1, result.l2, result.l3), result.gradient
    value, grad = _multiclass_baseline_arrays(cfg.loss_kind, probs, labels, cfg.loss_config, cfg.dice_smooth)
    return value, None, grad


def _logit_gradient(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    # softmax chain rule: dL/dz_k = P_k (g_k - sum_c P_c g_c)
    return probs * (grad_p - (probs * grad_p).sum(axis=0, keepdims=True))


def _mean_dice(probs: np.ndarray, truth: LabelMask) -> float:
    pred = np.argmax(probs, axis=0)
    scores = []
    for c in range(1, probs.shape[0]):
        dsc, _, _, _, _ = confusion_metrics(BinaryMask(pred == c), binary_from_labels(truth, c))
        scores.append(dsc)
    return float(np.mean(scores))


def _initial_logits(image: Optional[ScalarField], T: LabelMask, cfg: FitConfig) -> np.ndarray:
    shape = (T.num_classes,) + tuple(T.shape)
    if cfg.init == "logits-zero":
        return np.zeros(shape)
    if cfg.init == "logits-gaussian":
        return np.random.default_rng(cfg.seed).normal(0.0, cfg.init_sigma, size=shape)
    if image is None or T.num_classes != 2:
        raise InvalidConfig("logits-image initialisation needs an image and a two-class target")
    require_same_shape(T.shape, image.shape, "image")
    logits = np.zeros(shape)
    logits[1] = IMAGE_LOGIT_SCALE * (image.values - 0.5)
    return logits


def _check_finite(step: int, total: float, grad: np.ndarray) -> None:
    if not math.isfinite(total):
        raise DivergenceDetected(step, total)
    if not np.isfinite(grad).all():
        raise DivergenceDetected(step, float("nan"))


def fit_logits(image: Optional[ScalarField], T: LabelMask, cfg: FitConfig,
               truth: Optional[LabelMask] = None) -> FitTrace:
    """Fit per-pixel logits to T with plain gradient descent.

    The Dice column of the trace is measured against `truth` when given
    (e.g. clean labels while fitting noisy ones), otherwise against T.
    Step 0 is the initial state and is not recorded.
    """
    truth = T if truth is None else truth
    require_same_shape(T.shape, truth.shape, "truth")
    for c in range(1, T.num_classes):
        if not (T.labels == c).any():
            raise EmptyMask(f"target class {c} has no pixels")

    labels = T.labels
    n_pixels = labels.size
    logits = _initial_logits(image, T, cfg)
    probs = _softmax_array(logits)
    total, _, grad_p = _objective(probs, labels, cfg)
    _check_finite(0, total, grad_p)
    logger.debug("fit %s: initial loss %.6f", cfg.loss_kind, total)

    records: List[TraceRecord] = []
    for step in range(1, cfg.steps + 1):
        logits = logits - cfg.learning_rate * n_pixels * _logit_gradient(probs, grad_p)
        probs = _softmax_array(logits)
        total, terms, grad_p = _objective(probs, labels, cfg)
        _check_finite(step, total, grad_p)

        if step % cfg.record_every == 0 or step == cfg.steps:
            l1, l2, l3 = terms if terms is not None else (None, None, None)
            records.append(TraceRecord(step, total, l1, l2, l3, _mean_dice(probs, truth)))

    logger.info("fit %s: %d steps, final loss %.6f, dice %.4f",
                cfg.loss_kind, cfg.steps, records[-1].loss_total, records[-1].dsc)
    return FitTrace(tuple(records), softmax(logits), cfg.steps)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def _sample_entries(shape: Tuple[int, ...], samples: int) -> np.ndarray:
    size = int(np.prod(shape))
    if size <= samples:
        return np.arange(size)
    return np.sort(np.random.default_rng(0).choice(size, size=samples, replace=False))


def grad_check(P: ProbMap, T: LabelMask, cfg: LossConfig, h: float = 1e-5,
               samples: int = GRAD_CHECK_SAMPLES) -> float:
    """Max relative error between the analytic OsC gradient and central differences.

    The SDF, band and descriptors are held at their values for P, which is
    what the analytic gradient treats as constant.
    """
    if cfg.phi_mode != "soft":
        raise InvalidConfig("gradient check needs phi_mode 'soft'; detached terms have no gradient")
    if not MIN_STEP <= h <= MAX_STEP:
        raise InvalidConfig(f"finite-difference step must lie in [{MIN_STEP}, {MAX_STEP}], got {h}")
    require_same_shape(T.shape, P.shape, "prediction")

    base = evaluate_osc(P.probs, T.labels, cfg)
    probs = np.array(P.probs, dtype=np.float64)
    flat = probs.reshape(-1)
    analytic = base.gradient.reshape(-1)

    worst = 0.0
    for index in _sample_entries(probs.shape, samples):
        original = flat[index]
        flat[index] = original + h
        upper = evaluate_osc(probs, T.labels, cfg, geometry=base.geometry).total
        flat[index] = original - h
        lower = evaluate_osc(probs, T.labels, cfg, geometry=base.geometry).total
        flat[index] = original
        numeric = (upper - lower) / (2.0 * h)
        a = float(analytic[index])
        error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, error)
    logger.debug("gradient check over %d entries: max relative error %.3e",
                 min(samples, flat.size), worst)
    return float(worst)


def disc_labels(size: int, radius: Optional[float] = None) -> LabelMask:
    """Centred disc on a size x size grid, radius size/4 by default"""
    radius = size / 4.0 if radius is None else radius
    y, x = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    return LabelMask(((x - centre) ** 2 + (y - centre) ** 2 <= radius * radius).astype(np.int64), 2)


def random_grad_check_case(size: int, seed: int) -> Tuple[ProbMap, LabelMask]:
    """Softmax of unit Gaussian logits against a centred disc"""
    logits = np.random.default_rng(seed).normal(0.0, 1.0, size=(2, size, size))
    return softmax(logits), disc_labels(size)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _default_seeds() -> List[int]:
    return list(range(20))


def _default_synth() -> SynthSpec:
    return SynthSpec(noise=0.1)


def _default_fit() -> FitConfig:
    # phi = 2P - 1, so L2 and L3 act on P itself
    return FitConfig(steps=200, loss_config=LossConfig(phi_mode="soft"))


class ExperimentSpec(BaseModel):
    """Losses x seeds on synthetic data with boundary label noise"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    losses: List[LossKind] = Field(default_factory=lambda: list(LOSS_KINDS))
    seeds: List[int] = Field(default_factory=_default_seeds)
    synth: SynthSpec = Field(default_factory=_default_synth)
    fit: FitConfig = Field(default_factory=_default_fit)
    workers: int = 1

    @field_validator("workers")
    @classmethod
    def _workers(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value


def experiment_spec_from_json(text: str) -> ExperimentSpec:
    try:
        return ExperimentSpec.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfig(f"invalid experiment spec: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e


def load_experiment_spec(path: Union[str, Path]) -> ExperimentSpec:
    try:
        return experiment_spec_from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot read experiment spec {path}: {e}") from e


@dataclass(frozen=True)
class ExperimentRow:
    loss: str
    seed: int
    dsc: float
    jac: float
    pre: float
    rec: float
    hau95: Optional[float]
    steps: int
    final_loss: float

    def to_row(self) -> List[str]:
        return [
            self.loss,
            str(self.seed),
            f"{self.dsc:.6f}",
            f"{self.jac:.6f}",
            f"{self.pre:.6f}",
            f"{self.rec:.6f}",
            "" if self.hau95 is None else f"{self.hau95:.6f}",
            str(self.steps),
            f"{self.final_loss:.6f}",
        ]

    @classmethod
    def from_row(cls, row: List[str]) -> "ExperimentRow":
        loss, seed, dsc, jac, pre, rec, hau95, steps, final_loss = row
        return cls(loss, int(seed), float(dsc), float(jac), float(pre), float(rec),
                   _opt_float(hau95), int(steps), float(final_loss))


def run_single(loss: str, seed: int, spec: ExperimentSpec) -> ExperimentRow:
    """Fit noisy labels from one synthetic sample and score against the clean truth"""
    sample = synth_generate(spec.synth.model_copy(update={"seed": seed}))
    fit_cfg = spec.fit.model_copy(update={"loss_kind": loss, "seed": seed})
    trace = fit_logits(sample.image, sample.noisy, fit_cfg, truth=sample.truth)
    report = evaluate(binary_from_labels(trace.prediction(), 1), binary_from_labels(sample.truth, 1))
    return ExperimentRow(loss, seed, report.dsc, report.jac, report.pre, report.rec,
                         report.hau95, trace.steps, trace.final_loss)


def _run_job(job: Tuple[str, int, str]) -> ExperimentRow:
    loss, seed, spec_json = job
    return run_single(loss, seed, ExperimentSpec.model_validate_json(spec_json))


def experiment_csv(rows: Iterable[ExperimentRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(EXPERIMENT_HEADER)
    for row in rows:
        writer.writerow(row.to_row())
    return buffer.getvalue()


def experiment_rows_from_csv(text: str) -> List[ExperimentRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != EXPERIMENT_HEADER:
        raise InvalidConfig(f"experiment CSV must start with header {','.join(EXPERIMENT_HEADER)}")
    return [ExperimentRow.from_row(row) for row in rows[1:] if row]


def run_experiment(spec: ExperimentSpec) -> str:
    """CSV report with one row per (loss, seed), in that order"""
    jobs = [(loss, seed) for loss in spec.losses for seed in spec.seeds]
    logger.info("experiment: %d losses x %d seeds, %d worker(s)",
                len(spec.losses), len(spec.seeds), spec.workers)

    if spec.workers > 1 and len(jobs) > 1:
        spec_json = spec.model_dump_json()
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            # map preserves submission order
            rows = list(pool.map(_run_job, [(loss, seed, spec_json) for loss, seed in jobs]))
    else:
        rows = [run_single(loss, seed, spec) for loss, seed in jobs]
    return experiment_csv(rows)


# ---------------------------------------------------------------------------
# CLI fit job
# ---------------------------------------------------------------------------

class FitJob(BaseModel):
    """Document for the `fit` subcommand: a target from files or from synth"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    fit: FitConfig = Field(default_factory=FitConfig)
    truth: Optional[str] = None
    image: Optional[str] = None
    synth: Optional[SynthSpec] = None


def load_fit_job(path: Union[str, Path]) -> FitJob:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read fit spec {path}: {e}") from e
    try:
        job = FitJob.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfig(f"invalid fit spec: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e
    if (job.truth is None) == (job.synth is None):
        raise InvalidConfig("fit spec needs exactly one of 'truth' or 'synth'")
    return job


def fit_summary(trace: FitTrace, truth: LabelMask) -> dict:
    """Final metrics of a fit, for JSON output"""
    pred = trace.prediction()
    per_class = {}
    for c in range(1, truth.num_classes):
        report = evaluate(binary_from_labels(pred, c), binary_from_labels(truth, c))
        per_class[str(c)] = {"dsc": report.dsc, "jac": report.jac, "pre": report.pre,
                             "rec": report.rec, "hau95": report.hau95}
    return {"steps": trace.steps, "final_loss": trace.final_loss, "final_dsc": trace.final_dsc,
            "classes": per_class}
