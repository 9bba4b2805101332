"""
OsC toolkit - loss functions
Pixel-wise baselines (BCE, multi-class CE, Dice, Focal) and the three-term
Offset Curves loss with analytic gradients with respect to the predicted
probabilities.

Normalisation: the region term and the length term are means over all
pixels, the band term is a mean over band pixels.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from errors import DegenerateMask, InvalidConfig, InvalidMask, IoFailure, NotNormalized
from geometry import BandMask, SignedDistanceField, band_mask, dirac, heaviside, signed_distance
from grid import (
    NORMALIZATION_TOLERANCE,
    BinaryMask,
    LabelMask,
    ProbMap,
    ScalarField,
    require_same_shape,
)

logger = logging.getLogger(__name__)

PhiMode = Literal["detached", "soft"]
BASELINE_KINDS = ("bce", "dice", "focal")
LOSS_KINDS = BASELINE_KINDS + ("osc",)

FLAG_DEGENERATE = "degenerate_mask"
FLAG_EMPTY_BAND = "empty_band"
FLAG_EMPTY_INNER = "empty_inner_band"
FLAG_EMPTY_OUTER = "empty_outer_band"


class LossConfig(BaseModel):
    """Weights and numerical constants for every loss in this module"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = 0.5
    beta: float = 0.3
    eta: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    band_half_width: float = 5.0
    eps: float = 1.0
    phi_mode: PhiMode = "detached"
    tv_delta: float = 1e-8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    clamp: float = 1e-7

    @field_validator("alpha", "beta", "eta", "lambda1", "lambda2", "focal_gamma", "focal_alpha")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if not value >= 0:
            raise ValueError("must be >= 0")
        return value

    @field_validator("band_half_width", "eps", "tv_delta")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("clamp")
    @classmethod
    def _clamp_range(cls, value: float) -> float:
        if not 0 < value < 0.5:
            raise ValueError("must lie in (0, 0.5)")
        return value

    @model_validator(mode="after")
    def _some_weight(self) -> "LossConfig":
        if self.alpha + self.beta + self.eta <= 0:
            raise ValueError("alpha + beta + eta must be > 0")
        return self

    def scaled(self, factor: float) -> "LossConfig":
        """Same config with alpha, beta, eta multiplied by factor"""
        return self.model_copy(update={
            "alpha": self.alpha * factor,
            "beta": self.beta * factor,
            "eta": self.eta * factor,
        })


def loss_config_from_json(text: str) -> LossConfig:
    try:
        return LossConfig.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfig(f"invalid loss config: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e


def load_loss_config(path: Union[str, Path]) -> LossConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read loss config {path}: {e}") from e
    return loss_config_from_json(text)


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------

def _probabilities(P: ScalarField) -> np.ndarray:
    values = P.values
    if values.min() < 0.0 or values.max() > 1.0:
        raise InvalidMask("probabilities must lie in [0, 1]")
    return values


def _pair(P: ScalarField, T: Union[BinaryMask, ScalarField]) -> Tuple[np.ndarray, np.ndarray]:
    require_same_shape(T.shape, P.shape, "prediction")
    target = T.bits.astype(np.float64) if isinstance(T, BinaryMask) else T.values
    return _probabilities(P), target


def _interior(p: np.ndarray, clamp: float) -> np.ndarray:
    """Where clipping to [clamp, 1 - clamp] is inactive (non-zero derivative)"""
    return (p > clamp) & (p < 1.0 - clamp)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _bce_value(p: np.ndarray, t: np.ndarray, clamp: float) -> float:
    pc = np.clip(p, clamp, 1.0 - clamp)
    return float(-np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)))


def _bce_grad(p: np.ndarray, t: np.ndarray, clamp: float) -> np.ndarray:
    pc = np.clip(p, clamp, 1.0 - clamp)
    grad = -(t / pc - (1.0 - t) / (1.0 - pc)) / p.size
    return np.where(_interior(p, clamp), grad, 0.0)


def bce(P: ScalarField, T: BinaryMask, clamp: float = 1e-7) -> float:
    p, t = _pair(P, T)
    return _bce_value(p, t, clamp)


def bce_grad(P: ScalarField, T: BinaryMask, clamp: float = 1e-7) -> ScalarField:
    p, t = _pair(P, T)
    return ScalarField(_bce_grad(p, t, clamp))


def _check_normalized(P: ProbMap) -> None:
    if P.normalized:
        return
    deviation = float(np.abs(P.probs.sum(axis=0) - 1.0).max())
    if deviation > NORMALIZATION_TOLERANCE:
        raise NotNormalized(deviation)


def _ce_terms(probs: np.ndarray, target: np.ndarray, clamp: float) -> Tuple[float, np.ndarray]:
    n = probs.shape[1] * probs.shape[2]
    pc = np.clip(probs, clamp, 1.0 - clamp)
    value = float(-(target * np.log(pc)).sum() / n)
    grad = np.where(_interior(probs, clamp), -target / pc / n, 0.0)
    return value, grad


def ce_multiclass(P: ProbMap, T: ProbMap, clamp: float = 1e-7) -> float:
    """Mean over pixels of -sum_c T^c ln P^c"""
    require_same_shape(T.probs.shape, P.probs.shape, "prediction")
    _check_normalized(P)
    if not np.isin(T.probs, (0.0, 1.0)).all() or not np.allclose(T.probs.sum(axis=0), 1.0):
        raise InvalidMask("target must be one-hot")
    value, _ = _ce_terms(P.probs, T.probs, clamp)
    return value


def _dice_value(p: np.ndarray, t: np.ndarray, smooth: float) -> float:
    numerator = 2.0 * float((t * p).sum()) + smooth
    denominator = float(t.sum() + p.sum()) + smooth
    if denominator == 0.0:
        return 0.0
    return 1.0 - numerator / denominator


def _dice_grad(p: np.ndarray, t: np.ndarray, smooth: float) -> np.ndarray:
    numerator = 2.0 * float((t * p).sum()) + smooth
    denominator = float(t.sum() + p.sum()) + smooth
    if denominator == 0.0:
        return np.zeros_like(p)
    return -(2.0 * t * denominator - numerator) / (denominator * denominator)


def dice_loss(P: ScalarField, T: BinaryMask, smooth: float = 1.0) -> float:
    if smooth < 0:
        raise InvalidConfig(f"dice smoothing must be >= 0, got {smooth}")
    p, t = _pair(P, T)
    return _dice_value(p, t, smooth)


def dice_grad(P: ScalarField, T: BinaryMask, smooth: float = 1.0) -> ScalarField:
    p, t = _pair(P, T)
    return ScalarField(_dice_grad(p, t, smooth))


def _focal_value(p: np.ndarray, t: np.ndarray, gamma: float, alpha: float, clamp: float) -> float:
    pc = np.clip(p, clamp, 1.0 - clamp)
    terms = (1.0 - pc) ** gamma * t * np.log(pc) + pc ** gamma * (1.0 - t) * np.log(1.0 - pc)
    # leading minus keeps the loss non-negative and equal to BCE at gamma=0, alpha=1
    return float(-alpha * terms.sum() / p.size)


def _focal_grad(p: np.ndarray, t: np.ndarray, gamma: float, alpha: float, clamp: float) -> np.ndarray:
    pc = np.clip(p, clamp, 1.0 - clamp)
    q = 1.0 - pc
    d_pos = (q ** gamma) / pc
    d_neg = -(pc ** gamma) / q
    if gamma != 0:
        d_pos = d_pos - gamma * q ** (gamma - 1.0) * np.log(pc)
        d_neg = d_neg + gamma * pc ** (gamma - 1.0) * np.log(q)
    grad = -alpha * (t * d_pos + (1.0 - t) * d_neg) / p.size
    return np.where(_interior(p, clamp), grad, 0.0)


def focal_loss(P: ScalarField, T: BinaryMask, gamma: float = 2.0, alpha: float = 0.25,
               clamp: float = 1e-7) -> float:
    if gamma < 0:
        raise InvalidConfig(f"focal gamma must be >= 0, got {gamma}")
    p, t = _pair(P, T)
    return _focal_value(p, t, gamma, alpha, clamp)


def focal_grad(P: ScalarField, T: BinaryMask, gamma: float = 2.0, alpha: float = 0.25,
               clamp: float = 1e-7) -> ScalarField:
    p, t = _pair(P, T)
    return ScalarField(_focal_grad(p, t, gamma, alpha, clamp))


def _baseline(kind: str, p: np.ndarray, t: np.ndarray, cfg: LossConfig,
              smooth: float) -> Tuple[float, np.ndarray]:
    if kind == "bce":
        return _bce_value(p, t, cfg.clamp), _bce_grad(p, t, cfg.clamp)
    if kind == "dice":
        return _dice_value(p, t, smooth), _dice_grad(p, t, smooth)
    if kind == "focal":
        return (_focal_value(p, t, cfg.focal_gamma, cfg.focal_alpha, cfg.clamp),
                _focal_grad(p, t, cfg.focal_gamma, cfg.focal_alpha, cfg.clamp))
    raise InvalidConfig(f"unknown baseline loss {kind!r}; expected one of {BASELINE_KINDS}")


def multiclass_baseline(kind: str, P: ProbMap, T: LabelMask, cfg: Optional[LossConfig] = None,
                        smooth: float = 1.0) -> Tuple[float, np.ndarray]:
    """One-vs-rest mean of a baseline loss over the foreground classes.

    Returns the value and dL/dP as a (K, H, W) array; the background channel
    gets zero gradient.
    """
    cfg = cfg or LossConfig()
    require_same_shape(T.shape, P.shape, "prediction")
    return _multiclass_baseline_arrays(kind, P.probs, T.labels, cfg, smooth)


def _multiclass_baseline_arrays(kind: str, probs: np.ndarray, labels: np.ndarray,
                                cfg: LossConfig, smooth: float) -> Tuple[float, np.ndarray]:
    num_classes = probs.shape[0]
    grad = np.zeros_like(probs)
    total = 0.0
    for c in range(1, num_classes):
        t = (labels == c).astype(np.float64)
        value, g = _baseline(kind, probs[c], t, cfg, smooth)
        total += value
        grad[c] = g
    n_fg = num_classes - 1
    return total / n_fg, grad / n_fg


# ---------------------------------------------------------------------------
# Offset Curves loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandDescriptors:
    b_minus: float
    b_plus: float
    flags: Tuple[str, ...] = ()


def _descriptors(t: np.ndarray, phi: np.ndarray, band: BandMask, eps: float) -> BandDescriptors:
    inside = band.combined.bits
    h = heaviside(phi[inside], eps)
    target = t[inside]
    flags = []
    fallback = float(t.mean())

    if band.inner.is_empty() or band.empty:
        b_minus = fallback
        flags.append(FLAG_EMPTY_INNER)
    else:
        b_minus = float((target * h).sum() / h.sum())

    if band.outer.is_empty() or band.empty:
        b_plus = fallback
        flags.append(FLAG_EMPTY_OUTER)
    else:
        b_plus = float((target * (1.0 - h)).sum() / (1.0 - h).sum())

    if flags:
        logger.warning("band side empty (%s); descriptor falls back to the mean target %.4f",
                       ", ".join(flags), fallback)
    return BandDescriptors(b_minus, b_plus, tuple(flags))


def band_descriptors(T: ScalarField, phi: SignedDistanceField, band: BandMask,
                     eps: float) -> BandDescriptors:
    """Heaviside-weighted mean of the target on each side of the band"""
    require_same_shape(phi.shape, T.shape, "target")
    return _descriptors(T.values, phi.values, band, eps)


def _band_energy(p: np.ndarray, h: np.ndarray, dh_dp: Optional[np.ndarray], band_bits: np.ndarray,
                 b_minus: float, b_plus: float, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    count = int(band_bits.sum())
    if count == 0:
        return 0.0, np.zeros_like(p)
    r_in = p - b_minus
    r_out = p - b_plus
    energy = cfg.lambda1 * r_in * r_in * h + cfg.lambda2 * r_out * r_out * (1.0 - h)
    value = float(energy[band_bits].sum() / count)
    grad = 2.0 * (cfg.lambda1 * r_in * h + cfg.lambda2 * r_out * (1.0 - h))
    if dh_dp is not None:
        grad = grad + (cfg.lambda1 * r_in * r_in - cfg.lambda2 * r_out * r_out) * dh_dp
    return value, np.where(band_bits, grad, 0.0) / count


@dataclass(frozen=True)
class BandEnergy:
    """Value of the band term and the conventions that produced it"""

    value: float
    flags: Tuple[str, ...] = ()


def osc_l2(P: ScalarField, T: ScalarField, phi: SignedDistanceField, band: BandMask,
           cfg: LossConfig) -> BandEnergy:
    """Band energy around the contour, averaged over band pixels"""
    require_same_shape(phi.shape, P.shape, "prediction")
    require_same_shape(phi.shape, T.shape, "target")
    if band.empty:
        logger.warning("band term is zero: the offset band is empty")
        return BandEnergy(0.0, (FLAG_EMPTY_BAND,))
    desc = _descriptors(T.values, phi.values, band, cfg.eps)
    h = heaviside(phi.values, cfg.eps)
    value, _ = _band_energy(_probabilities(P), h, None, band.combined.bits,
                            desc.b_minus, desc.b_plus, cfg)
    return BandEnergy(value, desc.flags)


def chan_vese_l2(P: ScalarField, phi: SignedDistanceField, band: BandMask, cfg: LossConfig) -> BandEnergy:
    """The same band energy with descriptors taken from P instead of the target"""
    require_same_shape(phi.shape, P.shape, "prediction")
    if band.empty:
        return BandEnergy(0.0, (FLAG_EMPTY_BAND,))
    p = _probabilities(P)
    desc = _descriptors(p, phi.values, band, cfg.eps)
    h = heaviside(phi.values, cfg.eps)
    value, _ = _band_energy(p, h, None, band.combined.bits, desc.b_minus, desc.b_plus, cfg)
    return BandEnergy(value, desc.flags)


def _forward_differences(phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # replicate boundary: the last column/row has zero forward difference
    dx = np.zeros_like(phi)
    dy = np.zeros_like(phi)
    dx[:, :-1] = phi[:, 1:] - phi[:, :-1]
    dy[:-1, :] = phi[1:, :] - phi[:-1, :]
    return dx, dy


def _tv_value(phi: np.ndarray, delta: float) -> float:
    dx, dy = _forward_differences(phi)
    return float((np.sqrt(dx * dx + dy * dy + delta * delta) - delta).sum() / phi.size)


def _tv_grad(phi: np.ndarray, delta: float) -> np.ndarray:
    dx, dy = _forward_differences(phi)
    magnitude = np.sqrt(dx * dx + dy * dy + delta * delta)
    gx = dx / magnitude
    gy = dy / magnitude
    grad = -gx - gy
    grad[:, 1:] += gx[:, :-1]
    grad[1:, :] += gy[:-1, :]
    return grad / phi.size


def osc_l3(phi_field: ScalarField, tv_delta: float = 1e-8) -> float:
    """Smoothed total variation of phi, a discrete contour-length proxy"""
    if not tv_delta > 0:
        raise InvalidConfig(f"tv_delta must be > 0, got {tv_delta}")
    return _tv_value(phi_field.values, tv_delta)


@dataclass
class ClassGeometry:
    """Per-class quantities that are constant with respect to P"""

    class_index: int
    sdf: Optional[SignedDistanceField]
    band: Optional[BandMask]
    b_minus: float = 0.0
    b_plus: float = 0.0
    flags: List[str] = field(default_factory=list)

    @property
    def active(self) -> bool:
        return self.sdf is not None


def class_geometry(p: np.ndarray, t: np.ndarray, class_index: int, cfg: LossConfig) -> ClassGeometry:
    """Binarize P_c at 0.5, take its SDF, band and target descriptors"""
    try:
        sdf = signed_distance(BinaryMask(p >= 0.5))
    except DegenerateMask:
        logger.debug("class %d prediction is degenerate; band and length terms are zero", class_index)
        return ClassGeometry(class_index, None, None, flags=[FLAG_DEGENERATE])
    band = band_mask(sdf, cfg.band_half_width)
    flags = []
    if band.empty:
        flags.append(FLAG_EMPTY_BAND)
    desc = _descriptors(t, sdf.values, band, cfg.eps)
    flags.extend(desc.flags)
    return ClassGeometry(class_index, sdf, band, desc.b_minus, desc.b_plus, flags)


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float
    gradient: Optional[Tuple[ScalarField, ...]]
    band_pixels: int
    descriptors: Dict[int, Tuple[float, float]]
    flags: Dict[int, List[str]]

    def gradient_array(self) -> np.ndarray:
        return np.stack([g.values for g in self.gradient])

    def to_dict(self) -> dict:
        return {
            "kind": "osc",
            "l1": self.l1,
            "l2": self.l2,
            "l3": self.l3,
            "total": self.total,
            "band_pixels": self.band_pixels,
            "descriptors": {str(c): [bm, bp] for c, (bm, bp) in self.descriptors.items()},
            "flags": {str(c): list(f) for c, f in self.flags.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "LossBreakdown":
        return cls(
            l1=float(data["l1"]),
            l2=float(data["l2"]),
            l3=float(data["l3"]),
            total=float(data["total"]),
            gradient=None,
            band_pixels=int(data["band_pixels"]),
            descriptors={int(c): (float(v[0]), float(v[1])) for c, v in data["descriptors"].items()},
            flags={int(c): list(f) for c, f in data["flags"].items()},
        )


@dataclass
class _Evaluation:
    l1: float
    l2: float
    l3: float
    total: float
    gradient: np.ndarray
    geometry: List[ClassGeometry]


def evaluate_osc(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig,
                 geometry: Optional[Sequence[ClassGeometry]] = None) -> _Evaluation:
    """OsC value and dL/dP on raw arrays, without container validation.

    Passing `geometry` freezes the binarization-derived quantities, which is
    how finite differences see the same constants as the analytic gradient.
    """
    num_classes = probs.shape[0]
    target = (labels[np.newaxis, :, :] == np.arange(num_classes).reshape(-1, 1, 1)).astype(np.float64)
    l1, g1 = _ce_terms(probs, target, cfg.clamp)

    if geometry is None:
        geometry = [class_geometry(probs[c], target[c], c, cfg) for c in range(1, num_classes)]

    g2 = np.zeros_like(probs)
    g3 = np.zeros_like(probs)
    l2_sum = 0.0
    l3_sum = 0.0
    for geo in geometry:
        if not geo.active:
            continue
        c = geo.class_index
        p = probs[c]
        band_bits = geo.band.combined.bits
        if cfg.phi_mode == "detached":
            phi = geo.sdf.values
            value, grad = _band_energy(p, heaviside(phi, cfg.eps), None, band_bits,
                                       geo.b_minus, geo.b_plus, cfg)
            l2_sum += value
            g2[c] = grad
            l3_sum += _tv_value(phi, cfg.tv_delta)
        else:
            phi = 2.0 * p - 1.0
            value, grad = _band_energy(p, heaviside(phi, cfg.eps), 2.0 * dirac(phi, cfg.eps),
                                       band_bits, geo.b_minus, geo.b_plus, cfg)
            l2_sum += value
            g2[c] = grad
            l3_sum += _tv_value(phi, cfg.tv_delta)
            g3[c] = 2.0 * _tv_grad(phi, cfg.tv_delta)

    n_fg = num_classes - 1
    l2 = l2_sum / n_fg
    l3 = l3_sum / n_fg
    total = cfg.alpha * l1 + cfg.beta * l2 + cfg.eta * l3
    gradient = cfg.alpha * g1 + (cfg.beta / n_fg) * g2 + (cfg.eta / n_fg) * g3
    return _Evaluation(l1, l2, l3, total, gradient, list(geometry))


def osc_loss(P: ProbMap, T: LabelMask, cfg: Optional[LossConfig] = None) -> LossBreakdown:
    """L = alpha L1 + beta L2 + eta L3, with per-class band and length terms"""
    cfg = cfg or LossConfig()
    require_same_shape(T.shape, P.shape, "prediction")
    if T.num_classes != P.num_classes:
        raise InvalidMask(f"label mask has {T.num_classes} classes, prediction has {P.num_classes}")
    _check_normalized(P)

    result = evaluate_osc(P.probs, T.labels, cfg)
    band_pixels = sum(geo.band.pixel_count() for geo in result.geometry if geo.active)
    return LossBreakdown(
        l1=result.l1,
        l2=result.l2,
        l3=result.l3,
        total=result.total,
        gradient=tuple(ScalarField(g) for g in result.gradient),
        band_pixels=band_pixels,
        descriptors={geo.class_index: (geo.b_minus, geo.b_plus) for geo in result.geometry if geo.active},
        flags={geo.class_index: list(geo.flags) for geo in result.geometry if geo.flags},
    )


def osc_grad(P: ProbMap, T: LabelMask, cfg: Optional[LossConfig] = None) -> Tuple[ScalarField, ...]:
    """dL/dP per class; see LossConfig.phi_mode for what is held constant"""
    return osc_loss(P, T, cfg).gradient


def target_field(T: LabelMask, c: int) -> ScalarField:
    return ScalarField((T.labels == c).astype(np.float64))


def probmap_from_foreground(P: ScalarField) -> ProbMap:
    """Two-class stack [1 - p, p] from a foreground probability image"""
    p = _probabilities(P)
    return ProbMap(np.stack([1.0 - p, p]), normalized=True)
