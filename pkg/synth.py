"""
OsC toolkit - synthetic segmentation data
Small foreground objects (disc, annulus, vessel-like curve) at a chosen
foreground ratio, a noisy intensity image, and labels with flips inside
the boundary band.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator
from scipy import ndimage

from errors import InfeasibleSpec, InvalidConfig, IoFailure
from geometry import band_mask, signed_distance
from grid import BinaryMask, LabelMask, ScalarField

logger = logging.getLogger(__name__)

ShapeKind = Literal["disc", "annulus", "vessel-curve"]

FRACTION_TOLERANCE = 0.10
ANNULUS_INNER_RATIO = 0.5
BISECTION_STEPS = 60


class SynthSpec(BaseModel):
    """Parameters of one synthetic sample"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ShapeKind = "disc"
    width: int = 64
    height: int = 64
    # a 2.4% foreground mirrors a small tumour in a brain slice
    fg_fraction: float = 0.024
    noise: float = 0.0
    seed: int = 0
    band_half_width: float = 5.0
    image_sigma: float = 0.1

    @field_validator("width", "height")
    @classmethod
    def _size(cls, value: int) -> int:
        if value < 4:
            raise ValueError("must be >= 4")
        return value

    @field_validator("fg_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if not 0 < value <= 0.5:
            raise ValueError("must lie in (0, 0.5]")
        return value

    @field_validator("noise")
    @classmethod
    def _noise(cls, value: float) -> float:
        if not 0 <= value <= 1:
            raise ValueError("must lie in [0, 1]")
        return value

    @field_validator("band_half_width", "image_sigma")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be > 0")
        return value


def synth_spec_from_json(text: str) -> SynthSpec:
    try:
        return SynthSpec.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfig(f"invalid synth spec: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e


def load_synth_spec(path: Union[str, Path]) -> SynthSpec:
    try:
        return synth_spec_from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot read synth spec {path}: {e}") from e


def validate_spec(spec: SynthSpec) -> Tuple[bool, str]:
    """Check that the requested foreground can be drawn at this resolution"""
    pixels = spec.width * spec.height
    target = spec.fg_fraction * pixels
    if target * (1.0 - FRACTION_TOLERANCE) < 1.0:
        return False, f"fg_fraction {spec.fg_fraction} is below one pixel on a {spec.width}x{spec.height} grid"

    side = min(spec.width, spec.height)
    if spec.kind == "disc":
        radius = math.sqrt(target / math.pi)
        if 2.0 * radius > side - 2:
            return False, f"disc of radius {radius:.1f} does not fit in {spec.width}x{spec.height}"
    elif spec.kind == "annulus":
        outer = math.sqrt(target / (math.pi * (1.0 - ANNULUS_INNER_RATIO ** 2)))
        if 2.0 * outer > side - 2:
            return False, f"annulus of radius {outer:.1f} does not fit in {spec.width}x{spec.height}"
        if outer * (1.0 - ANNULUS_INNER_RATIO) < 1.0:
            return False, "annulus ring would be thinner than one pixel"
    else:
        thickness = target / spec.width
        if thickness > spec.height / 3:
            return False, f"vessel thickness {thickness:.1f} is too large for height {spec.height}"
    return True, "Valid"


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: ScalarField
    truth: LabelMask
    noisy: LabelMask
    achieved_fraction: float


def _fit_parameter(render: Callable[[float], np.ndarray], target: float, upper: float) -> np.ndarray:
    """Bisect a size parameter so the rendered foreground count is closest to target"""
    lo, hi = 0.0, upper
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if render(mid).sum() < target:
            lo = mid
        else:
            hi = mid
    below, above = render(lo), render(hi)
    return below if abs(below.sum() - target) < abs(above.sum() - target) else above


def _render_truth(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    height, width = spec.height, spec.width
    target = spec.fg_fraction * width * height
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    side = min(width, height)

    if spec.kind in ("disc", "annulus"):
        if spec.kind == "disc":
            estimate = math.sqrt(target / math.pi)
        else:
            estimate = math.sqrt(target / (math.pi * (1.0 - ANNULUS_INNER_RATIO ** 2)))
        slack = max(0.0, min(side / 8.0, side / 2.0 - estimate - 2.0))
        cx = (width - 1) / 2.0 + rng.uniform(-slack, slack)
        cy = (height - 1) / 2.0 + rng.uniform(-slack, slack)
        r2 = (x - cx) ** 2 + (y - cy) ** 2

        if spec.kind == "disc":
            def render(radius: float) -> np.ndarray:
                return r2 <= radius * radius
        else:
            def render(radius: float) -> np.ndarray:
                inner = ANNULUS_INNER_RATIO * radius
                return (r2 <= radius * radius) & (r2 > inner * inner)
        return _fit_parameter(render, target, side / 2.0)

    amplitude = height / 6.0
    phase = rng.uniform(0.0, 2.0 * math.pi)
    centre = (height - 1) / 2.0 + amplitude * np.sin(2.0 * math.pi * 1.5 * x / width + phase)

    def render(thickness: float) -> np.ndarray:
        return np.abs(y - centre) <= thickness / 2.0
    return _fit_parameter(render, target, height / 2.0)


def _flip_boundary(truth: np.ndarray, rate: float, half_width: float,
                   rng: np.random.Generator) -> np.ndarray:
    noisy = truth.copy()
    if rate == 0:
        return noisy
    band = band_mask(signed_distance(BinaryMask(truth)), half_width).combined.bits
    candidates = np.flatnonzero(band)
    count = int(round(rate * len(candidates)))
    if count == 0:
        return noisy
    chosen = rng.choice(candidates, size=count, replace=False)
    flat = noisy.reshape(-1)
    flat[chosen] = 1 - flat[chosen]
    return noisy


def synth_generate(spec: SynthSpec) -> SynthSample:
    """(image, truth, noisy) for one spec; identical output for identical specs"""
    is_valid, msg = validate_spec(spec)
    if not is_valid:
        raise InfeasibleSpec(msg)

    rng = np.random.default_rng(spec.seed)
    truth = _render_truth(spec, rng).astype(np.int64)

    achieved = float(truth.mean())
    relative = abs(achieved - spec.fg_fraction) / spec.fg_fraction
    if relative > FRACTION_TOLERANCE:
        raise InfeasibleSpec(
            f"{spec.kind} reaches foreground {achieved:.4f}, target {spec.fg_fraction} "
            f"(off by {relative:.0%}) at {spec.width}x{spec.height}"
        )

    blurred = ndimage.uniform_filter(truth.astype(np.float64), size=3, mode="nearest")
    image = np.clip(blurred + rng.normal(0.0, spec.image_sigma, size=blurred.shape), 0.0, 1.0)
    noisy = _flip_boundary(truth, spec.noise, spec.band_half_width, rng)

    logger.debug("synth %s seed=%d: foreground %.4f, %d labels flipped",
                 spec.kind, spec.seed, achieved, int((noisy != truth).sum()))
    return SynthSample(
        image=ScalarField(image),
        truth=LabelMask(truth, 2),
        noisy=LabelMask(noisy, 2),
        achieved_fraction=achieved,
    )
