"""
OsC toolkit - geometry
Exact distance transforms, signed distance fields, the smooth Heaviside/Dirac
pair, offset bands and parallel-curve offsetting of closed polylines.

Distances are in pixel units with pixel centers at integer coordinates.
Signed distance is positive inside the object.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

from errors import (
    DegenerateCurve,
    DegenerateMask,
    EmptyMask,
    InvalidBandWidth,
    InvalidEpsilon,
)
from grid import BinaryMask, ScalarField, complement

logger = logging.getLogger(__name__)

MIN_POINT_SEPARATION = 1e-9
COLLINEAR_TOLERANCE = 1e-12
SDF_CACHE_SIZE = 64

INWARD = "inward"
OUTWARD = "outward"


# ---------------------------------------------------------------------------
# Distance transforms
# ---------------------------------------------------------------------------

def _lower_envelope_1d(f: List[float]) -> List[float]:
    """Squared distance transform of one line: d[q] = min_p (q - p)^2 + f[p].

    Lower envelope of the parabolas rooted at the finite samples of f.
    """
    n = len(f)
    sites = [q for q in range(n) if f[q] != math.inf]
    if not sites:
        return [math.inf] * n

    v = [0] * len(sites)
    z = [0.0] * (len(sites) + 1)
    k = 0
    v[0] = sites[0]
    z[0] = -math.inf
    z[1] = math.inf
    for q in sites[1:]:
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf

    d = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def _squared_edt(bits: np.ndarray) -> np.ndarray:
    height, width = bits.shape
    column_pass = np.empty((height, width), dtype=np.float64)
    seeds = np.where(bits, 0.0, np.inf)
    for x in range(width):
        column_pass[:, x] = _lower_envelope_1d(seeds[:, x].tolist())
    result = np.empty((height, width), dtype=np.float64)
    for y in range(height):
        result[y, :] = _lower_envelope_1d(column_pass[y, :].tolist())
    return result


def exact_edt(mask: BinaryMask) -> ScalarField:
    """Euclidean distance from every pixel to the nearest foreground pixel center"""
    if mask.is_empty():
        raise EmptyMask("distance transform needs at least one foreground pixel")
    return ScalarField(np.sqrt(_squared_edt(mask.bits)))


@dataclass(frozen=True, eq=False)
class SignedDistanceField:
    """phi > 0 on foreground pixels, phi < 0 on background pixels"""

    field: ScalarField
    source: BinaryMask

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def shape(self) -> Tuple[int, int]:
        return self.field.shape


@lru_cache(maxsize=SDF_CACHE_SIZE)
def _signed_distance_cached(packed: bytes, shape: Tuple[int, int]) -> np.ndarray:
    logger.debug("signed distance cache miss for %dx%d mask", shape[1], shape[0])
    bits = np.frombuffer(packed, dtype=np.bool_).reshape(shape)
    mask = BinaryMask(bits)
    inside = exact_edt(complement(mask)).values
    outside = exact_edt(mask).values
    phi = np.where(bits, inside, -outside)
    phi.setflags(write=False)
    return phi


def signed_distance(mask: BinaryMask) -> SignedDistanceField:
    """+distance to background on foreground, -distance to foreground on background"""
    count = mask.count()
    if count == 0 or count == mask.bits.size:
        kind = "all-background" if count == 0 else "all-foreground"
        raise DegenerateMask(f"signed distance undefined for an {kind} mask")
    phi = _signed_distance_cached(mask.bits.tobytes(), mask.shape)
    return SignedDistanceField(ScalarField(phi), mask)


# ---------------------------------------------------------------------------
# Smooth Heaviside / Dirac
# ---------------------------------------------------------------------------

def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise InvalidEpsilon(eps)


def heaviside(x, eps: float):
    """H_eps(x) = 1/2 (1 + 2/pi arctan(x / eps)); scalars in, floats out"""
    _check_eps(eps)
    if np.ndim(x) == 0:
        return 0.5 * (1.0 + (2.0 / math.pi) * math.atan(float(x) / eps))
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(x / eps))


def dirac(x, eps: float):
    """Derivative of heaviside: eps / (pi (eps^2 + x^2))"""
    _check_eps(eps)
    if np.ndim(x) == 0:
        x = float(x)
        return (eps / math.pi) / (eps * eps + x * x)
    x = np.asarray(x, dtype=np.float64)
    return (eps / np.pi) / (eps * eps + x * x)


# ---------------------------------------------------------------------------
# Offset band
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BandMask:
    """Pixels with |phi| <= half_width, split by the sign of phi"""

    half_width: float
    inner: BinaryMask
    outer: BinaryMask
    combined: BinaryMask
    empty: bool = False

    def pixel_count(self) -> int:
        return self.combined.count()


def band_mask(sdf: SignedDistanceField, half_width: float) -> BandMask:
    if not half_width > 0:
        raise InvalidBandWidth(half_width)
    phi = sdf.values
    # closed band: |phi| == half_width is inside
    combined = np.abs(phi) <= half_width
    inner = combined & (phi > 0)
    outer = combined & (phi <= 0)
    empty = not combined.any()
    if empty:
        logger.warning("offset band of half width %g is empty", half_width)
    return BandMask(
        half_width=float(half_width),
        inner=BinaryMask(inner),
        outer=BinaryMask(outer),
        combined=BinaryMask(combined),
        empty=empty,
    )


# ---------------------------------------------------------------------------
# Polylines and parallel curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Polyline2D:
    """Ordered (x, y) vertices; the last vertex connects back to the first when closed"""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DegenerateCurve(f"points must be an (n, 2) array, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise DegenerateCurve("curve points must be finite")
        if self.closed and len(pts) < 3:
            raise DegenerateCurve(f"closed curve needs at least 3 points, got {len(pts)}")
        if len(pts) < 2:
            raise DegenerateCurve("curve needs at least 2 points")
        following = np.roll(pts, -1, axis=0) if self.closed else pts[1:]
        current = pts if self.closed else pts[:-1]
        gaps = np.hypot(*(following - current).T)
        if (gaps <= MIN_POINT_SEPARATION).any():
            index = int(np.flatnonzero(gaps <= MIN_POINT_SEPARATION)[0])
            raise DegenerateCurve(f"repeated point at vertex {index}")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class OffsetResult:
    curve: Polyline2D
    translation: float
    direction: str
    regular: bool
    singular_indices: List[int] = field(default_factory=list)
    curvature: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "translation": self.translation,
            "direction": self.direction,
            "regular": self.regular,
            "singular_indices": list(self.singular_indices),
            "closed": self.curve.closed,
            "points": self.curve.points.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OffsetResult":
        return cls(
            curve=Polyline2D(np.asarray(data["points"], dtype=np.float64), bool(data.get("closed", True))),
            translation=float(data["translation"]),
            direction=str(data["direction"]),
            regular=bool(data["regular"]),
            singular_indices=[int(i) for i in data["singular_indices"]],
        )


def _require_closed(poly: Polyline2D) -> None:
    if not poly.closed:
        raise DegenerateCurve("operation needs a closed polyline")


def signed_area(poly: Polyline2D) -> float:
    """Shoelace area; positive for counter-clockwise vertex order"""
    x, y = poly.points[:, 0], poly.points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polyline_length(poly: Polyline2D) -> float:
    pts = poly.points
    following = np.roll(pts, -1, axis=0) if poly.closed else pts[1:]
    current = pts if poly.closed else pts[:-1]
    return float(np.hypot(*(following - current).T).sum())


def _orientation(poly: Polyline2D) -> float:
    area = signed_area(poly)
    if area == 0.0:
        raise DegenerateCurve("closed curve encloses zero area; inside is undefined")
    return 1.0 if area > 0 else -1.0


def vertex_normals(poly: Polyline2D) -> np.ndarray:
    """Inward unit normals from the perpendicular of the central-difference tangent"""
    _require_closed(poly)
    pts = poly.points
    tangent = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    norms = np.hypot(tangent[:, 0], tangent[:, 1])
    if (norms <= MIN_POINT_SEPARATION).any():
        index = int(np.flatnonzero(norms <= MIN_POINT_SEPARATION)[0])
        raise DegenerateCurve(f"cannot estimate a normal at vertex {index}")
    tangent = tangent / norms[:, np.newaxis]
    left = np.column_stack((-tangent[:, 1], tangent[:, 0]))
    # counter-clockwise curves have their interior on the left
    return left * _orientation(poly)


def curvature(poly: Polyline2D) -> List[float]:
    """Signed curvature per vertex from the circle through each vertex triple.

    Positive where the curve bends toward its inward normal (convex parts),
    zero for collinear triples.
    """
    _require_closed(poly)
    orientation = _orientation(poly)
    pts = poly.points
    prev_pts = np.roll(pts, 1, axis=0)
    next_pts = np.roll(pts, -1, axis=0)
    ab = pts - prev_pts
    bc = next_pts - pts
    ac = next_pts - prev_pts
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    len_ab = np.hypot(ab[:, 0], ab[:, 1])
    len_bc = np.hypot(bc[:, 0], bc[:, 1])
    len_ac = np.hypot(ac[:, 0], ac[:, 1])

    kappa = np.zeros(len(pts))
    bent = (np.abs(cross) > COLLINEAR_TOLERANCE * len_ab * len_bc) & (len_ac > 0)
    kappa[bent] = 2.0 * cross[bent] / (len_ab[bent] * len_bc[bent] * len_ac[bent])
    return (kappa * orientation).tolist()


def offset_polyline(poly: Polyline2D, translation: float, direction: str = INWARD) -> OffsetResult:
    """Displace every vertex by `translation` along its normal.

    The result is regular only while the translation stays below the radius
    of curvature everywhere (|kappa| < 1 / translation).
    """
    _require_closed(poly)
    if not translation > 0:
        raise InvalidBandWidth(translation)
    if direction not in (INWARD, OUTWARD):
        raise DegenerateCurve(f"direction must be '{INWARD}' or '{OUTWARD}', got {direction!r}")

    normals = vertex_normals(poly)
    sign = 1.0 if direction == INWARD else -1.0
    moved = poly.points + sign * translation * normals

    kappa = curvature(poly)
    bound = 1.0 / translation
    singular = [i for i, k in enumerate(kappa) if abs(k) >= bound]
    if singular:
        logger.info("offset by %g is singular at %d of %d vertices", translation, len(singular), len(poly))

    try:
        curve = Polyline2D(moved, closed=True)
    except DegenerateCurve:
        # vertices collapsed onto each other; keep the raw points for inspection
        curve = _unchecked_polyline(moved)
    return OffsetResult(
        curve=curve,
        translation=float(translation),
        direction=direction,
        regular=not singular,
        singular_indices=singular,
        curvature=kappa,
    )


def _unchecked_polyline(points: np.ndarray) -> Polyline2D:
    poly = object.__new__(Polyline2D)
    pts = np.array(points, dtype=np.float64)
    pts.setflags(write=False)
    object.__setattr__(poly, "points", pts)
    object.__setattr__(poly, "closed", True)
    return poly


def length_ratio(result: OffsetResult, original: Polyline2D) -> float:
    return polyline_length(result.curve) / polyline_length(original)


def circle_polyline(radius: float, n: int = 360, center: Tuple[float, float] = (0.0, 0.0)) -> Polyline2D:
    """Regular n-gon inscribed in a circle, counter-clockwise"""
    angles = 2.0 * np.pi * np.arange(n) / n
    cx, cy = center
    return Polyline2D(np.column_stack((cx + radius * np.cos(angles), cy + radius * np.sin(angles))))


def rounded_rectangle_polyline(width: float, height: float, corner_radius: float,
                               samples_per_corner: int = 16, samples_per_side: int = 8,
                               center: Tuple[float, float] = (0.0, 0.0)) -> Polyline2D:
    """Counter-clockwise rectangle with circular-arc corners"""
    if not 0 < corner_radius < min(width, height) / 2:
        raise DegenerateCurve("corner radius must be positive and fit inside the rectangle")
    cx, cy = center
    hx, hy = width / 2 - corner_radius, height / 2 - corner_radius
    corners = [(hx, hy, 0.0), (-hx, hy, 0.5 * np.pi), (-hx, -hy, np.pi), (hx, -hy, 1.5 * np.pi)]
    points: List[Tuple[float, float]] = []
    for i, (ox, oy, start) in enumerate(corners):
        angles = start + np.linspace(0.0, 0.5 * np.pi, samples_per_corner + 1)
        points.extend((cx + ox + corner_radius * np.cos(a), cy + oy + corner_radius * np.sin(a)) for a in angles)
        end = np.array(points[-1])
        nx, ny, nstart = corners[(i + 1) % 4]
        target = np.array((cx + nx + corner_radius * np.cos(nstart), cy + ny + corner_radius * np.sin(nstart)))
        for t in np.linspace(0.0, 1.0, samples_per_side + 2)[1:-1]:
            points.append(tuple(end + t * (target - end)))
    return Polyline2D(np.asarray(points, dtype=np.float64))


def polyline_from_rows(rows: Sequence[Sequence[float]], closed: bool = True) -> Polyline2D:
    return Polyline2D(np.asarray(rows, dtype=np.float64), closed=closed)
