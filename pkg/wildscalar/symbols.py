"""Fourier-multiplier symbols, admissibility gate, regular patches and span check."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.stats import norm, qmc

from wildscalar.errors import (
    NoRegularPoints,
    SingularFrequency,
    UnknownSymbol,
    ZeroFrequency,
)

logger = logging.getLogger("wildscalar")

SAMPLE_SEED = 1729
HOMOGENEITY_SCALES = (3.7, 0.31)
DEFAULT_TOL = 1e-12
IMMERSION_STEP = 1e-4  # radians
SVD_FLOOR = 1e-3
MAX_PATCH_RADIUS = math.pi / 4
MAX_SPHERE_SAMPLES = 20000


@dataclass(frozen=True, eq=False)
class MultiplierSymbol:
    """A 0-homogeneous multiplier m: ℝⁿ\\{0} → ℝⁿ (ℂⁿ for odd symbols).

    `formula` is vectorized over a trailing axis of length `dim`. Singular
    sets are declared analytically through `singular_distance`, the
    normalized distance of a direction to the set; samples used by the
    gates keep at least `clearance` from it.
    """

    name: str
    dim: int
    formula: Callable[[np.ndarray], np.ndarray]
    singular_set_description: str = "none"
    singular_distance: Optional[Callable[[np.ndarray], np.ndarray]] = None
    clearance: float = 0.0
    declared_even: bool = True
    complex_valued: bool = False

    def __call__(self, xi):
        return evaluate(self, xi)

    def values(self, xi):
        """Raw vectorized evaluation; singular points come back non-finite."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.formula(np.asarray(xi, dtype=float))

    def clear_of_singular(self, xi, clearance=None):
        xi = np.asarray(xi, dtype=float)
        nonzero = np.any(xi != 0, axis=-1)
        if self.singular_distance is None:
            return nonzero
        floor = self.clearance if clearance is None else clearance
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = self.singular_distance(xi)
        dist = np.where(nonzero, dist, 0.0)
        if floor > 0:
            return nonzero & (dist >= floor)
        return nonzero & (dist > 0)


@dataclass(frozen=True)
class RegularPatch:
    center: tuple
    angular_radius: float
    jacobian_min_singular_value: float = 0.0

    @property
    def center_array(self):
        return np.asarray(self.center, dtype=float)

    def contains(self, directions, tol=1e-12):
        """True where a unit direction lies inside the patch (not its negation)."""
        return angular_distance(self.center_array, directions) <= self.angular_radius + tol

    def narrowed(self, radius):
        return RegularPatch(self.center, min(radius, self.angular_radius), self.jacobian_min_singular_value)


@dataclass
class AdmissibilityReport:
    symbol: str
    sample_count: int
    tol: float
    worst_even: float
    worst_homogeneity: float
    worst_tangent: float
    even: bool = field(init=False)
    zero_homogeneous: bool = field(init=False)
    tangent: bool = field(init=False)

    def __post_init__(self):
        self.even = bool(self.worst_even <= self.tol)
        self.zero_homogeneous = bool(self.worst_homogeneity <= self.tol)
        self.tangent = bool(self.worst_tangent <= self.tol)

    @property
    def admissible(self):
        return self.even and self.zero_homogeneous and self.tangent

    def as_dict(self):
        return {
            "symbol": self.symbol,
            "even": self.even,
            "zero_homogeneous": self.zero_homogeneous,
            "tangent": self.tangent,
            "worst_even": self.worst_even,
            "worst_homogeneity": self.worst_homogeneity,
            "worst_tangent": self.worst_tangent,
            "sample_count": self.sample_count,
        }


@dataclass
class SpanReport:
    spans: bool
    rank: int
    witness: tuple = ()


# ═══ Built-in symbols ═══

def _pm2d(xi):
    x1, x2 = xi[..., 0], xi[..., 1]
    r2 = x1 * x1 + x2 * x2
    return np.stack([x1 * x2 / r2, -(x1 * x1) / r2], axis=-1)


def _pm3d(xi):
    x1, x2, x3 = xi[..., 0], xi[..., 1], xi[..., 2]
    r2 = x1 * x1 + x2 * x2 + x3 * x3
    return np.stack([x1 * x3 / r2, x2 * x3 / r2, -(x1 * x1 + x2 * x2) / r2], axis=-1)


def _mg(xi):
    x1, x2, x3 = xi[..., 0], xi[..., 1], xi[..., 2]
    r2 = x1 * x1 + x2 * x2 + x3 * x3
    d = x3 * x3 * r2 + x2 * x2 * x2 * x2
    m1 = (x2 * x3 * r2 + x1 * x2 * x2 * x3) / d
    m2 = (-(x1 * x3) * r2 + x2 * x2 * x2 * x3) / d
    m3 = -(x2 * x2) * (x1 * x1 + x2 * x2) / d
    return np.stack([m1, m2, m3], axis=-1)


def _mg_distance(xi):
    return np.sqrt(xi[..., 1] ** 2 + xi[..., 2] ** 2) / np.linalg.norm(xi, axis=-1)


def _sqg(xi):
    x1, x2 = xi[..., 0], xi[..., 1]
    r = np.sqrt(x1 * x1 + x2 * x2)
    return np.stack([-1j * x2 / r, 1j * x1 / r], axis=-1)


BUILTIN_SYMBOLS = {
    "pm2d": MultiplierSymbol("pm2d", 2, _pm2d),
    "pm3d": MultiplierSymbol("pm3d", 3, _pm3d),
    "mg": MultiplierSymbol(
        "mg", 3, _mg,
        singular_set_description="xi_2 = xi_3 = 0 (the xi_1-axis)",
        singular_distance=_mg_distance,
        clearance=0.5,
    ),
    "sqg": MultiplierSymbol("sqg", 2, _sqg, declared_even=False, complex_valued=True),
}


def builtin(name):
    """Return the built-in symbol registered under `name`."""
    try:
        return BUILTIN_SYMBOLS[name]
    except KeyError:
        raise UnknownSymbol(f"Unknown symbol: {name!r} (known: {', '.join(BUILTIN_SYMBOLS)})") from None


def evaluate(symbol, xi):
    """m(ξ) for a single nonzero frequency outside the singular set."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (symbol.dim,):
        raise ValueError(f"{symbol.name} expects a frequency of shape ({symbol.dim},), got {xi.shape}")
    if not np.any(xi):
        raise ZeroFrequency(f"{symbol.name}: m(0) is undefined")
    if symbol.singular_distance is not None and not symbol.clear_of_singular(xi, clearance=0.0):
        raise SingularFrequency(f"{symbol.name}: {xi.tolist()} lies on {symbol.singular_set_description}")
    value = symbol.values(xi)
    if not np.all(np.isfinite(value)):
        raise SingularFrequency(f"{symbol.name}: non-finite value at {xi.tolist()}")
    return value


# ═══ Sphere sampling ═══

def sphere_samples(n, count, seed=SAMPLE_SEED):
    """Quasi-random unit vectors (scrambled Sobol mapped through the normal quantile)."""
    if count < 1:
        raise ValueError(f"sample count must be positive, got {count}")
    sampler = qmc.Sobol(d=n, scramble=True, seed=seed)
    u = sampler.random_base2(max(1, math.ceil(math.log2(max(count, 2)))))[:count]
    z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def admissible_samples(symbol, count, seed=SAMPLE_SEED):
    """Sphere samples keeping the symbol's clearance from its singular set."""
    draw = count
    while True:
        points = sphere_samples(symbol.dim, 4 * draw + 64, seed=seed)
        points = points[symbol.clear_of_singular(points)]
        if len(points) >= count:
            return points[:count]
        draw *= 4


def sphere_grid(n, resolution):
    """Deterministic grid of unit vectors with angular spacing ~ resolution."""
    if n == 2:
        k = math.ceil(2 * math.pi / resolution)
        a = 2 * math.pi * np.arange(k) / k
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if n == 3:
        rings = 2 * math.ceil(math.pi / (2 * resolution))
        points = []
        for j in range(rings + 1):
            alpha = j * math.pi / rings
            count = 1 if j in (0, rings) else 2 * math.ceil(math.pi * math.sin(alpha) / resolution)
            beta = 2 * math.pi * np.arange(count) / count
            points.append(np.stack([
                math.sin(alpha) * np.cos(beta),
                math.sin(alpha) * np.sin(beta),
                np.full(count, math.cos(alpha)),
            ], axis=1))
        return np.concatenate(points)
    count = min(MAX_SPHERE_SAMPLES, math.ceil((math.pi / resolution) ** (n - 1)))
    return sphere_samples(n, count)


def angular_distance(a, b):
    """Angle between unit vector `a` and unit vectors `b` (last axis)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = b @ a
    perp = np.linalg.norm(b - dot[..., None] * a, axis=-1)
    return np.arctan2(perp, dot)


def tangent_basis(xi):
    return linalg.null_space(np.asarray(xi, dtype=float)[None, :])


def exp_map(center, tangent):
    """Point on the sphere reached from `center` along tangent vector(s)."""
    center = np.asarray(center, dtype=float)
    tangent = np.atleast_2d(tangent)
    r = np.linalg.norm(tangent, axis=-1, keepdims=True)
    safe = np.where(r > 0, r, 1.0)
    out = np.cos(r) * center + np.sin(r) * tangent / safe
    return out


def tangential_jacobian(symbol, xi, step=IMMERSION_STEP):
    """Central-difference Jacobian of m restricted to the sphere at unit ξ."""
    xi = np.asarray(xi, dtype=float)
    basis = tangent_basis(xi)
    plus = math.cos(step) * xi + math.sin(step) * basis.T
    minus = math.cos(step) * xi - math.sin(step) * basis.T
    cols = (symbol.values(plus) - symbol.values(minus)) / (2 * step)
    jac = cols.T
    if np.iscomplexobj(jac):
        jac = np.concatenate([jac.real, jac.imag])
    return jac


def patch_samples(patch, count, seed=SAMPLE_SEED):
    """Center plus `count` deterministic points spread over the patch."""
    center = patch.center_array
    n = len(center)
    basis = tangent_basis(center)
    directions = sphere_samples(n - 1, count, seed=seed)
    fractions = np.array([0.25, 0.5, 0.75, 1.0])[np.arange(count) % 4]
    tangents = (directions @ basis.T) * (fractions * patch.angular_radius)[:, None]
    return np.concatenate([center[None, :], exp_map(center, tangents)])


# ═══ Gates ═══

def check_admissibility(symbol, sample_count=1000, tol=DEFAULT_TOL, seed=SAMPLE_SEED):
    """Sample evenness, 0-homogeneity and tangency of `symbol` on the sphere."""
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    xi = admissible_samples(symbol, sample_count, seed=seed)
    m = symbol.values(xi)
    worst_even = float(np.max(np.abs(m - symbol.values(-xi))))
    worst_homog = max(float(np.max(np.abs(m - symbol.values(c * xi)))) for c in HOMOGENEITY_SCALES)
    worst_tangent = float(np.max(np.abs(np.sum(m * xi, axis=-1))))
    report = AdmissibilityReport(symbol.name, sample_count, tol, worst_even, worst_homog, worst_tangent)
    logger.info(f"Admissibility of {symbol.name}: even={report.even} "
                f"homogeneous={report.zero_homogeneous} tangent={report.tangent}")
    return report


def find_regular_patches(symbol, resolution=0.05, svd_floor=SVD_FLOOR, step=IMMERSION_STEP,
                         max_radius=MAX_PATCH_RADIUS):
    """Greedy spherical caps on which m|_{S^{n-1}} is an immersion.

    A grid point is irregular when it is closer than the symbol's clearance
    to the singular set or its tangential Jacobian has a singular value
    below `svd_floor`. Caps stop at 0.9 of the distance to the nearest
    irregular grid point.
    """
    points = sphere_grid(symbol.dim, resolution)
    regular = np.zeros(len(points), dtype=bool)
    min_sv = np.zeros(len(points))
    clear = symbol.clear_of_singular(points)
    for idx in np.flatnonzero(clear):
        sv = linalg.svdvals(tangential_jacobian(symbol, points[idx], step))
        if np.all(np.isfinite(sv)) and len(sv) == symbol.dim - 1:
            min_sv[idx] = sv.min()
            regular[idx] = sv.min() >= svd_floor
    if not regular.any():
        raise NoRegularPoints(f"{symbol.name}: no regular point on a grid of step {resolution}")

    bad = points[~regular]
    covered = np.zeros(len(points), dtype=bool)
    patches = []
    for idx in np.flatnonzero(regular):
        if covered[idx]:
            continue
        center = points[idx]
        radius = max_radius
        if len(bad):
            radius = min(radius, 0.9 * float(angular_distance(center, bad).min()))
        inside = regular & (angular_distance(center, points) <= radius)
        covered |= inside
        covered[idx] = True
        if radius < resolution:
            continue
        patches.append(RegularPatch(tuple(float(c) for c in center), float(radius),
                                    float(min_sv[inside].min())))
    if not patches:
        raise NoRegularPoints(f"{symbol.name}: regular points too isolated for step {resolution}")
    logger.debug(f"{symbol.name}: {int(regular.sum())}/{len(points)} regular grid points, "
                 f"{len(patches)} patches")
    return patches


def check_span_condition(symbol, patches, samples_per_patch=32, tol=1e-9):
    """Greedy rank build-up of m over patch samples; spans iff rank reaches n."""
    if not patches:
        raise ValueError("check_span_condition needs at least one patch")
    basis = np.zeros((0, symbol.dim))
    witness = []
    for patch in patches:
        for xi in patch_samples(patch, samples_per_patch):
            value = np.real_if_close(symbol.values(xi))
            if np.iscomplexobj(value) or not np.all(np.isfinite(value)):
                continue
            residual = value - basis.T @ (basis @ value)
            size = np.linalg.norm(residual)
            if size > tol * max(1.0, np.linalg.norm(value)):
                basis = np.vstack([basis, residual / size])
                witness.append(tuple(float(c) for c in xi))
            if len(witness) == symbol.dim:
                return SpanReport(True, symbol.dim, tuple(witness))
    return SpanReport(False, len(witness), ())
