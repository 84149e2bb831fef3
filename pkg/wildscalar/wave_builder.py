"""Localized oscillatory solutions of the relaxed system along a wave-cone direction.

A wave is assembled from two potentials on the grid,

    ψ = δ² F(s) h̃,   φ = δ F′(s) h̃,   s = (d₁t + x·ξ)/δ,

projected spectrally onto the frequency cone. θ = θ₀′Δψ, q = −θ₀′∇D_tψ plus
the divergence-free φ terms, u = T[θ], with θ₀′ = θ₀/|ξ|² and the same D_t
the divergence check uses, so the discrete relaxed system holds to rounding.
"""
import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import fft, linalg, ndimage

from wildscalar.errors import (
    DegenerateDirection,
    GridOverflow,
    PropertyFailure,
    TruncationSearchExhausted,
)
from wildscalar.geometry import StateMatrix, lambda_w_direction
from wildscalar.symbols import RegularPatch, angular_distance
from wildscalar.torus_field import (
    FFT_WORKERS,
    SpectralField,
    StateField,
    apply_multiplier,
    cone_mask,
    divergence_residual,
    retained_mask,
    support_cone_check,
    time_derivative,
    wavenumbers,
)

logger = logging.getLogger("wildscalar")

PROFILE_ORDER_CAP = 256
PROFILE_RESOLUTION = 2 ** 17
TOL_DIV = 1e-8
DWELL_SLACK = 0.02
CONE_FLOOR = 1 - 1e-6
MEAN_FLOOR = 1e-12
CURVATURE_STEP = 1e-5


# ═══ Profile ═══

@dataclass(frozen=True, eq=False)
class WaveProfile:
    """σ-smoothed truncated sawtooth f̃ = λ on [0,1−λ), −(1−λ) on [1−λ,1), and its antiderivatives.

    `coefficients[m-1]` is the smoothed Fourier coefficient of e^{2πims},
    m = 1..order; negative harmonics are the conjugates.
    """

    lam: float
    order: int
    coefficients: np.ndarray
    epsilon1: Optional[float] = None
    plus_measure: Optional[float] = None
    minus_measure: Optional[float] = None

    @property
    def harmonics(self):
        return np.arange(1, self.order + 1)

    @property
    def derivative_coefficients(self):
        return self.coefficients / (2j * np.pi * self.harmonics)

    @property
    def potential_coefficients(self):
        return -self.coefficients / (4 * np.pi ** 2 * self.harmonics ** 2)

    def _series(self, s, coefficients):
        s = np.asarray(s, dtype=float)
        base = np.exp(2j * np.pi * s)
        power = np.ones_like(base)
        out = np.zeros(s.shape)
        for c in coefficients:
            power = power * base
            out += 2 * (c * power).real
        return out

    def f(self, s):
        return self._series(s, self.coefficients)

    def dF(self, s):
        """F′ with F″ = f̃; 1-periodic since f̃ has zero mean."""
        return self._series(s, self.derivative_coefficients)

    def F(self, s):
        return self._series(s, self.potential_coefficients)

    def samples(self, resolution=PROFILE_RESOLUTION):
        """f̃ at the cell centres (j+½)/resolution."""
        if resolution <= 2 * self.order:
            raise ValueError(f"resolution {resolution} cannot carry order {self.order}")
        table = np.zeros(resolution, dtype=complex)
        m = self.harmonics
        shift = np.exp(1j * np.pi * m / resolution)
        table[m] = self.coefficients * shift
        table[-m] = np.conj(self.coefficients * shift)
        return fft.ifft(table, norm="forward").real

    def measures(self, epsilon1, resolution=PROFILE_RESOLUTION):
        values = self.samples(resolution)
        plus = float(np.mean(np.abs(values - self.lam) < epsilon1))
        minus = float(np.mean(np.abs(values + 1 - self.lam) < epsilon1))
        return plus, minus

    def bounds(self, epsilon1):
        return (1 - self.lam) * (1 - epsilon1), self.lam * (1 - epsilon1)


def sawtooth_coefficients(lam, order):
    """Fourier coefficients (1 − e^{−2πim(1−λ)})/(2πim), m = 1..order (the mean is exactly 0)."""
    m = np.arange(1, order + 1)
    return (1 - np.exp(-2j * np.pi * m * (1 - lam))) / (2j * np.pi * m)


def profile_at_order(lam, order, epsilon1=None, resolution=PROFILE_RESOLUTION, smoothing=True):
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    if order < 1:
        raise ValueError(f"profile order must be >= 1, got {order}")
    coefficients = sawtooth_coefficients(lam, order)
    if smoothing:
        coefficients = coefficients * np.sinc(np.arange(1, order + 1) / (order + 1))
    profile = WaveProfile(lam, order, coefficients)
    if epsilon1 is None:
        return profile
    plus, minus = profile.measures(epsilon1, resolution)
    return WaveProfile(lam, order, coefficients, epsilon1, plus, minus)


def build_profile(lam, epsilon1, sample_resolution=PROFILE_RESOLUTION, max_order=PROFILE_ORDER_CAP):
    """Smallest order whose truncated sawtooth meets both dwell-measure conditions."""
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    if not 0 < epsilon1 < min(lam, 1 - lam):
        raise ValueError(f"epsilon1 must lie in (0, {min(lam, 1 - lam)}), got {epsilon1}")
    plus_bound, minus_bound = (1 - lam) * (1 - epsilon1), lam * (1 - epsilon1)
    for order in range(1, max_order + 1):
        profile = profile_at_order(lam, order, epsilon1, sample_resolution)
        if profile.plus_measure > plus_bound and profile.minus_measure > minus_bound:
            logger.debug(f"Profile lambda={lam} eps1={epsilon1}: order {order}, "
                         f"measures {profile.plus_measure:.4f}/{profile.minus_measure:.4f}")
            return profile
    raise TruncationSearchExhausted(f"no profile order <= {max_order} meets eps1={epsilon1} at lambda={lam}")


# ═══ Localizer ═══

def _flat(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)


def smooth_step(z):
    """C^∞ step: 0 for z ≤ 0, 1 for z ≥ 1."""
    a, b = _flat(z), _flat(1 - np.asarray(z, dtype=float))
    return a / (a + b)


def smooth_step_derivative(z):
    z = np.asarray(z, dtype=float)
    a, b = _flat(z), _flat(1 - z)
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.where(z > 0, a / np.where(z > 0, z, 1.0) ** 2, 0.0)
        db = np.where(z < 1, b / np.where(z < 1, 1 - z, 1.0) ** 2, 0.0)
    return (da * b + a * db) / (a + b) ** 2


def _periodic_offset(x, c):
    return np.mod(x - c + np.pi, 2 * np.pi) - np.pi


@dataclass(frozen=True)
class Region:
    """Ω ⊂ (0,T)×𝕋ⁿ: a time window times a box (None half-widths span the axis) or a ball."""

    t0: float
    t1: float
    center: Optional[tuple] = None
    half_widths: Optional[tuple] = None
    radius: Optional[float] = None

    @classmethod
    def full_torus(cls, t0, t1):
        return cls(float(t0), float(t1))

    @classmethod
    def box(cls, t0, t1, center, half_widths):
        return cls(float(t0), float(t1), tuple(float(c) for c in center),
                   tuple(None if w is None else float(w) for w in half_widths))

    @classmethod
    def ball(cls, t0, t1, center, radius):
        return cls(float(t0), float(t1), tuple(float(c) for c in center), None, float(radius))

    @property
    def kind(self):
        return "ball" if self.radius is not None else "box"

    @property
    def bounded_axes(self):
        if self.kind == "ball":
            return None
        if self.half_widths is None:
            return ()
        return tuple(i for i, w in enumerate(self.half_widths) if w is not None)

    def validate(self, grid):
        margin_t = 2 * grid.dt
        if not (margin_t <= self.t0 < self.t1 <= grid.T - margin_t):
            raise ValueError(f"time window [{self.t0}, {self.t1}] needs a 2-cell margin inside (0, {grid.T})")
        limit = np.pi - 2 * grid.dx
        if self.kind == "ball":
            if len(self.center) != grid.n or not 0 < self.radius <= limit:
                raise ValueError(f"ball radius {self.radius} must lie in (0, {limit:.4g}] around a {grid.n}-point")
        elif self.half_widths is not None:
            if len(self.half_widths) != grid.n or len(self.center) != grid.n:
                raise ValueError(f"box needs {grid.n} centers and half-widths")
            for w in self.half_widths:
                if w is not None and not 0 < w <= limit:
                    raise ValueError(f"box half-width {w} must lie in (0, {limit:.4g}]")

    def time_mask(self, grid):
        t = grid.t_axis()
        return (t >= self.t0) & (t <= self.t1)

    def spatial_mask(self, grid):
        x = grid.coordinates()
        if self.kind == "ball":
            r2 = sum(_periodic_offset(xi, c) ** 2 for xi, c in zip(x, self.center))
            return r2 <= self.radius ** 2
        inside = np.ones(grid.spatial_shape, dtype=bool)
        for i in self.bounded_axes:
            inside &= np.abs(_periodic_offset(x[i], self.center[i])) <= self.half_widths[i]
        return inside

    def mask(self, grid):
        return self.time_mask(grid).reshape((-1,) + (1,) * grid.n) & self.spatial_mask(grid)[None]

    def time_profile(self, grid, epsilon2):
        """b(t), b′(t), b″(t) at the samples; ramps of width ε₂(t₁−t₀)/4 inside the window."""
        width = epsilon2 * (self.t1 - self.t0) / 4
        t = grid.t_axis()

        def b(t):
            return smooth_step((t - self.t0) / width) * smooth_step((self.t1 - t) / width)

        def db(t):
            return (smooth_step_derivative((t - self.t0) / width) * smooth_step((self.t1 - t) / width)
                    - smooth_step((t - self.t0) / width) * smooth_step_derivative((self.t1 - t) / width)) / width

        step = CURVATURE_STEP * width
        return b(t), db(t), (db(t + step) - db(t - step)) / (2 * step)

    def spatial_bump(self, grid, epsilon2):
        x = grid.coordinates()
        if self.kind == "ball":
            r = np.sqrt(sum(_periodic_offset(xi, c) ** 2 for xi, c in zip(x, self.center)))
            width = self.radius * (1 - (1 - epsilon2) ** (1 / grid.n))
            return smooth_step((self.radius - r) / width)
        axes = self.bounded_axes
        bump = np.ones(grid.spatial_shape)
        if not axes:
            return bump
        plateau = (1 - epsilon2) ** (1 / len(axes))
        for i in axes:
            w = self.half_widths[i]
            bump = bump * smooth_step((w - np.abs(_periodic_offset(x[i], self.center[i]))) / (w * (1 - plateau)))
        return bump


@dataclass(eq=False)
class Localizer:
    """h̃ sampled on the grid with its inside mask and achieved bounds."""

    grid: object
    epsilon2: float
    values: np.ndarray
    inside: np.ndarray
    order: int
    region: Optional[Region] = None
    value_range: tuple = (0.0, 1.0)
    plateau_fraction: float = 1.0
    exterior_sup: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_mask(cls, grid, values, inside, epsilon2, order=None):
        """Localizer from arbitrary samples (used for nested dwell-set waves)."""
        values = np.asarray(values, dtype=float)
        inside = np.asarray(inside, dtype=bool)
        if order is None:
            coefficients = fft.fftn(values, axes=grid.spatial_axes, norm="forward")
            live = np.any(np.abs(coefficients) > 1e-12 * max(np.abs(coefficients).max(), 1e-300), axis=0)
            order = int(np.max(np.abs(wavenumbers(grid))[:, live])) if live.any() else 0
        plateau = np.abs(values - 1) < epsilon2
        fraction = float(np.sum(plateau & inside) / max(1, inside.sum()))
        outside = np.abs(values[~inside]).max() if (~inside).any() else 0.0
        return cls(grid, epsilon2, values, inside, order, None,
                   (float(values.min()), float(values.max())), fraction, (float(outside), np.nan, np.nan))

    def field(self):
        coefficients = fft.fftn(self.values, axes=self.grid.spatial_axes, norm="forward", workers=FFT_WORKERS)
        return SpectralField(self.grid, coefficients[:, None])

    def plateau_mask(self):
        return self.inside & (np.abs(self.values - 1) < self.epsilon2)


def build_localizer(region, epsilon2, grid, max_order=None):
    """Smooth bump for Ω with its spatial Fourier series truncated at the smallest adequate order.

    Truncation is by max|k_i| ≤ K per time slice; the temporal profile is
    analytic and untouched, so the temporal support stays inside (t₀, t₁).
    """
    if not 0 < epsilon2 < 0.5:
        raise ValueError(f"epsilon2 must lie in (0, 1/2), got {epsilon2}")
    region.validate(grid)
    b, db, d2b = region.time_profile(grid, epsilon2)
    bump = region.spatial_bump(grid, epsilon2)
    coefficients = fft.fftn(bump, norm="forward", workers=FFT_WORKERS)
    k = wavenumbers(grid)
    reach = np.max(np.abs(k), axis=0)
    inside = region.mask(grid)
    exterior = ~region.spatial_mask(grid)
    in_window = region.time_mask(grid)
    b_sup = [float(np.max(np.abs(v[in_window]))) if in_window.any() else 0.0 for v in (b, db, d2b)]
    cap = grid.N_x // 2 - 1 if max_order is None else max_order
    n_inside = int(inside.sum())

    for order in range(cap + 1):
        truncated = coefficients * (reach <= order)
        g = fft.ifftn(truncated, norm="forward").real
        values = b.reshape((-1,) + (1,) * grid.n) * g[None]
        low, high = float(values.min()), float(values.max())
        plateau = int(np.sum(inside & (np.abs(values - 1) < epsilon2)))
        if exterior.any():
            grad = [fft.ifftn(1j * k[i] * truncated, norm="forward").real for i in range(grid.n)]
            hess2 = np.zeros(grid.spatial_shape)
            for i in range(grid.n):
                for j in range(grid.n):
                    hess2 += fft.ifftn(-k[i] * k[j] * truncated, norm="forward").real ** 2
            g0 = float(np.abs(g[exterior]).max())
            g1 = float(np.sqrt(sum(gi ** 2 for gi in grad)[exterior].max()))
            g2 = float(np.sqrt(hess2[exterior].max()))
        else:
            g0 = g1 = g2 = 0.0
        sup_h = b_sup[0] * g0
        sup_dh = math.hypot(b_sup[1] * g0, b_sup[0] * g1)
        sup_d2h = math.sqrt((b_sup[2] * g0) ** 2 + 2 * (b_sup[1] * g1) ** 2 + (b_sup[0] * g2) ** 2)
        ok = (low >= -epsilon2 and high <= 1 + epsilon2
              and max(sup_h, sup_dh, sup_d2h) < epsilon2
              and plateau > (1 - epsilon2) * n_inside)
        logger.debug(f"Localizer order {order}: range [{low:.3g}, {high:.3g}], "
                     f"exterior {sup_h:.2e}/{sup_dh:.2e}/{sup_d2h:.2e}, plateau {plateau}/{n_inside}")
        if ok:
            return Localizer(grid, epsilon2, values, inside, order, region, (low, high),
                             plateau / max(1, n_inside), (sup_h, sup_dh, sup_d2h))
    raise TruncationSearchExhausted(f"localizer for {region} at eps2={epsilon2} not found up to order {cap}")


def mask_localizer(mask, window, epsilon2, grid, reach=None, sigma=1.0):
    """Localizer for an arbitrary set of grid cells inside a time window.

    The mask is mollified by a Gaussian of `sigma` cells (periodic in x),
    truncated at max|k_i| ≤ reach and multiplied by the window's time profile,
    so its temporal support stays inside the window.
    """
    mask = np.asarray(mask, dtype=bool)
    reach = grid.N_x // 8 if reach is None else reach
    smooth = ndimage.gaussian_filter(mask.astype(float), sigma=sigma, mode=("nearest",) + ("wrap",) * grid.n)
    coefficients = fft.fftn(smooth, axes=grid.spatial_axes, norm="forward", workers=FFT_WORKERS)
    coefficients *= np.max(np.abs(wavenumbers(grid)), axis=0) <= reach
    g = fft.ifftn(coefficients, axes=grid.spatial_axes, norm="forward", workers=FFT_WORKERS).real
    b, _, _ = window.time_profile(grid, epsilon2)
    values = b.reshape((-1,) + (1,) * grid.n) * g
    return Localizer.from_mask(grid, values, mask, epsilon2, order=reach)


# ═══ Directions and coefficients ═══

class WaveDirection(BaseModel):
    """L = (θ₀, q₀, θ₀m(ξ₀)) ∈ Λ with ξ₀ inside its regular patch."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta0: float
    xi0: tuple[float, ...]
    q0: tuple[float, ...]
    patch: RegularPatch

    @field_validator("theta0")
    @classmethod
    def _nonzero(cls, v):
        if v == 0:
            raise ValueError("theta0 must be nonzero for a wave-cone direction")
        return v

    @field_validator("xi0")
    @classmethod
    def _unit(cls, v):
        size = math.sqrt(sum(c * c for c in v))
        if size == 0:
            raise ValueError("xi0 must be nonzero")
        return tuple(c / size for c in v)

    @model_validator(mode="after")
    def _in_patch(self):
        if len(self.q0) != len(self.xi0) or len(self.patch.center) != len(self.xi0):
            raise ValueError("theta0/xi0/q0/patch dimensions disagree")
        if not self.patch.contains(np.asarray(self.xi0), tol=1e-9):
            raise ValueError(f"xi0={self.xi0} lies outside the patch around {self.patch.center}")
        return self

    @property
    def n(self):
        return len(self.xi0)

    def state(self, symbol):
        m = np.real(symbol(np.asarray(self.xi0)))
        return StateMatrix(self.theta0, np.asarray(self.q0, dtype=float), self.theta0 * m)


def direction_from_state(L, symbol, patches):
    """WaveDirection for a difference L whose u-row is θ·m(ξ) with ξ in one of the patches."""
    xi, patch, residual = lambda_w_direction(L, symbol, patches)
    return WaveDirection(theta0=L.theta, xi0=tuple(xi), q0=tuple(L.q), patch=patch)


@dataclass(frozen=True)
class FrequencyChoice:
    k: tuple
    xi: np.ndarray
    error: float
    bound: float


def _nearest_in_patch(k, target, patch):
    """Closest lattice neighbour of k (offsets in {−1,0,1}ⁿ) whose direction lies in the patch."""
    best = None
    for offset in itertools.product((-1, 0, 1), repeat=len(k)):
        candidate = k + np.array(offset)
        if not candidate.any() or not patch.contains(candidate / np.linalg.norm(candidate)):
            continue
        miss = float(np.linalg.norm(candidate - target))
        if best is None or miss < best[0]:
            best = (miss, candidate)
    return None if best is None else best[1]


def select_frequency(xi0, delta, grid=None, harmonics=1, reach=0, patch=None):
    """Lattice frequency ξ = δk/(2π) with k = round(2πξ₀/δ); |ξ − ξ₀| ≤ δ√n/(4π).

    With a grid, the highest carried mode harmonics·|k|∞ + reach must stay
    below N_x/2. With a patch, a rounded mode whose direction leaves the patch
    is replaced by the nearest neighbouring mode inside it.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    xi0 = np.asarray(xi0, dtype=float)
    target = 2 * np.pi * xi0 / delta
    k = np.rint(target).astype(int)
    if not k.any():
        raise DegenerateDirection(f"delta={delta} rounds xi0={xi0.tolist()} to the zero mode")
    if patch is not None and not patch.contains(k / np.linalg.norm(k)):
        moved = _nearest_in_patch(k, target, patch)
        if moved is None:
            raise DegenerateDirection(f"no lattice mode near {k.tolist()} points into the patch "
                                      f"around {patch.center}")
        logger.debug(f"Mode {k.tolist()} leaves the patch; using {moved.tolist()}")
        k = moved
    if grid is not None and harmonics * int(np.abs(k).max()) + reach >= grid.N_x // 2:
        raise GridOverflow(f"mode {k.tolist()} x {harmonics} harmonics + reach {reach} "
                           f"exceeds N_x/2 = {grid.N_x // 2}")
    xi = delta * k / (2 * np.pi)
    return FrequencyChoice(tuple(int(c) for c in k), xi, float(np.linalg.norm(xi - xi0)),
                           delta * math.sqrt(len(xi0)) / (4 * math.pi))


@dataclass(frozen=True)
class WaveCoefficients:
    """d in permuted coordinates: d[0] is the time speed, d[i] pairs axis permutation[i] with permutation[0]."""

    d: np.ndarray
    permutation: tuple
    determinant: float
    closed_form: float
    residual: float


def coefficient_matrix(theta0, kappa):
    """Columns −θ₀κ and −κ_i e₁ + κ₁ e_i, in coordinates with the pivot axis first."""
    n = len(kappa)
    matrix = np.zeros((n, n))
    matrix[:, 0] = -theta0 * kappa
    for i in range(1, n):
        matrix[0, i] = -kappa[i]
        matrix[i, i] = kappa[0]
    return matrix


def solve_coefficients(theta0, xi, q0):
    if theta0 == 0:
        raise ValueError("theta0 must be nonzero")
    xi = np.asarray(xi, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    pivot = int(np.argmax(np.abs(xi)))
    permutation = (pivot,) + tuple(i for i in range(len(xi)) if i != pivot)
    kappa = xi[list(permutation)]
    if kappa[0] == 0:
        raise DegenerateDirection("frequency vector is zero")
    matrix = coefficient_matrix(theta0, kappa)
    rhs = q0[list(permutation)]
    d = linalg.solve(matrix, rhs)
    return WaveCoefficients(
        d=d,
        permutation=permutation,
        determinant=float(linalg.det(matrix)),
        closed_form=float(-theta0 * kappa[0] ** (len(xi) - 2) * np.dot(xi, xi)),
        residual=float(np.max(np.abs(matrix @ d - rhs))),
    )


# ═══ Assembly ═══

@dataclass(eq=False)
class Wave:
    state: StateField
    direction: WaveDirection
    profile: WaveProfile
    localizer: Localizer
    delta: float
    frequency: FrequencyChoice
    coefficients: WaveCoefficients

    @property
    def phase_offset(self):
        """Half the lattice step of k·x/2π, so no sample sits on the jump at s = 0."""
        step = math.gcd(self.localizer.grid.N_x, *(abs(int(k)) for k in self.frequency.k))
        return step / (2 * self.localizer.grid.N_x)

    def phase(self):
        grid = self.localizer.grid
        x = grid.coordinates()
        spatial = sum(k * xi for k, xi in zip(self.frequency.k, x)) / (2 * np.pi)
        t = grid.t_axis().reshape((-1,) + (1,) * grid.n)
        return self.coefficients.d[0] * t / self.delta + spatial[None] + self.phase_offset


def assemble_wave(direction, localizer, profile, delta, symbol, patches=None, band=None,
                  scheme="fd4", frequency=None, confine=True):
    """Exact discrete wave for direction L, localizer h̃ and profile f̃ at scale δ."""
    grid = localizer.grid
    if frequency is None:
        frequency = select_frequency(direction.xi0, delta, grid, profile.order, localizer.order)
    xi = frequency.xi
    theta_scaled = direction.theta0 / float(np.dot(xi, xi))
    coefficients = solve_coefficients(theta_scaled, xi, direction.q0)

    wave = Wave(None, direction, profile, localizer, delta, frequency, coefficients)
    s = wave.phase()
    h = localizer.values
    axes = grid.spatial_axes
    psi = fft.fftn(delta ** 2 * profile.F(s) * h, axes=axes, norm="forward", workers=FFT_WORKERS)
    phi = fft.fftn(delta * profile.dF(s) * h, axes=axes, norm="forward", workers=FFT_WORKERS)
    keep = cone_mask(grid, patches or [direction.patch], band) if confine else retained_mask(grid)
    psi *= keep
    phi *= keep

    k = wavenumbers(grid)
    theta_hat = -theta_scaled * np.sum(k ** 2, axis=0) * psi
    dpsi = time_derivative(psi, grid.dt, scheme)
    q_hat = -theta_scaled * 1j * k[None] * dpsi[:, None]
    p = coefficients.permutation[0]
    for i in range(1, grid.n):
        a = coefficients.permutation[i]
        q_hat[:, p] += coefficients.d[i] * (-1j * k[a] * phi)
        q_hat[:, a] += coefficients.d[i] * (1j * k[p] * phi)

    theta = SpectralField(grid, theta_hat[:, None], zero_mean=True)
    wave.state = StateField(theta, SpectralField(grid, q_hat, zero_mean=True),
                            apply_multiplier(theta, symbol), symbol)
    return wave


# ═══ Measurement ═══

CSV_FIELDS = ("delta", "k", "plus_dwell", "minus_dwell", "div_residual", "outside_sup",
              "segment_distance", "cone_fraction", "frozen_symbol_error")


@dataclass
class WaveReport:
    delta: float
    k: tuple
    lam: float
    epsilon: float
    plus_dwell: float
    minus_dwell: float
    div_residual: float
    outside_sup: float
    segment_distance: float
    segment_distance_all: float
    cone_fraction: float
    mean_defect: float
    frozen_symbol_error: float
    tol_div: float = TOL_DIV
    slack: float = DWELL_SLACK
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        lam, eps = self.lam, self.epsilon
        self.checks = {
            "divergence": (self.div_residual, self.tol_div, self.div_residual <= self.tol_div),
            "outside_sup": (self.outside_sup, eps, self.outside_sup <= eps),
            "segment": (self.segment_distance, eps, self.segment_distance <= eps),
            "plus_dwell": (self.plus_dwell, (1 - lam) * (1 - eps) * (1 - self.slack),
                           self.plus_dwell >= (1 - lam) * (1 - eps) * (1 - self.slack)),
            "minus_dwell": (self.minus_dwell, lam * (1 - eps) * (1 - self.slack),
                            self.minus_dwell >= lam * (1 - eps) * (1 - self.slack)),
            "cone": (self.cone_fraction, CONE_FLOOR, self.cone_fraction >= CONE_FLOOR),
            "mean_zero": (self.mean_defect, MEAN_FLOOR, self.mean_defect <= MEAN_FLOOR),
        }

    @property
    def passed(self):
        return all(ok for _, _, ok in self.checks.values())

    def failures(self):
        return [PropertyFailure(name, value, bound) for name, (value, bound, ok) in self.checks.items() if not ok]

    def csv_row(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow([f"{self.delta:.10g}", "x".join(str(c) for c in self.k), f"{self.plus_dwell:.6f}",
                         f"{self.minus_dwell:.6f}", f"{self.div_residual:.3e}", f"{self.outside_sup:.3e}",
                         f"{self.segment_distance:.3e}", f"{self.cone_fraction:.9f}",
                         f"{self.frozen_symbol_error:.6e}"])
        return buffer.getvalue()


def segment_distance(values, L, lam):
    """Pointwise distance of state vectors (channel axis 1) to the segment [−(1−λ)L, λL]."""
    shape = (1, -1) + (1,) * (values.ndim - 2)
    Lv = L.vector().reshape(shape)
    tau = np.clip(np.sum(values * Lv, axis=1, keepdims=True) / float(np.dot(L.vector(), L.vector())),
                  -(1 - lam), lam)
    return np.linalg.norm(values - tau * Lv, axis=1)


def dwell_fractions(values, inside, L, lam, epsilon):
    """Fractions of Ω where values sit ε-near λL and −(1−λ)L (grid-cell counts)."""
    shape = (1, -1) + (1,) * (values.ndim - 2)
    Lv = L.vector().reshape(shape)
    count = max(1, int(inside.sum()))
    plus = np.linalg.norm(values - lam * Lv, axis=1) < epsilon
    minus = np.linalg.norm(values + (1 - lam) * Lv, axis=1) < epsilon
    return float(np.sum(plus & inside) / count), float(np.sum(minus & inside) / count)


def frozen_symbol_error(wave):
    """‖u − θ₀m(ξ₀)f̃(s)h̃‖_∞."""
    direction = wave.direction
    m0 = np.real(wave.state.symbol(np.asarray(direction.xi0)))
    carrier = direction.theta0 * wave.profile.f(wave.phase()) * wave.localizer.values
    frozen = m0.reshape((1, -1) + (1,) * wave.state.grid.n) * carrier[:, None]
    return float(np.max(np.abs(wave.state.u.physical() - frozen)))


def measure_wave(wave, lam, epsilon, tol_div=TOL_DIV, slack=DWELL_SLACK, scheme="fd4"):
    state = wave.state
    grid = state.grid
    L = wave.direction.state(state.symbol)
    values = state.stacked()
    inside = wave.localizer.inside
    outside = ~inside
    size = np.linalg.norm(values, axis=1)
    distance = segment_distance(values, L, lam)
    plateau = wave.localizer.plateau_mask()
    plus, minus = dwell_fractions(values, inside, L, lam, epsilon)
    k0 = (slice(None), slice(None)) + (0,) * grid.n
    mean_defect = max(float(np.abs(f.coefficients[k0]).max()) for f in (state.theta, state.q, state.u))
    return WaveReport(
        delta=wave.delta,
        k=wave.frequency.k,
        lam=lam,
        epsilon=epsilon,
        plus_dwell=plus,
        minus_dwell=minus,
        div_residual=divergence_residual(state, scheme),
        outside_sup=float(size[outside].max()) if outside.any() else 0.0,
        segment_distance=float(distance[plateau].max()) if plateau.any() else 0.0,
        segment_distance_all=float(distance[inside].max()) if inside.any() else 0.0,
        cone_fraction=support_cone_check([state.theta, state.u], [wave.direction.patch]),
        mean_defect=mean_defect,
        frozen_symbol_error=frozen_symbol_error(wave),
        tol_div=tol_div,
        slack=slack,
    )


def max_profile_order(frequency_k, reach, grid, cap=PROFILE_ORDER_CAP):
    top = int(np.abs(np.asarray(frequency_k)).max())
    return min(cap, (grid.N_x // 2 - 1 - reach) // top)


def carrier_and_profile(direction, lam, delta, localizer, profile=None, patch=None):
    """(profile, lattice frequency); the profile defaults to the highest order the grid carries."""
    grid = localizer.grid
    if profile is None:
        carrier = select_frequency(direction.xi0, delta, grid, 1, localizer.order, patch)
        order = max_profile_order(carrier.k, localizer.order, grid)
        if order < 1:
            raise GridOverflow(f"no room for a profile next to mode {carrier.k} and reach {localizer.order}")
        profile = profile_at_order(lam, order)
    return profile, select_frequency(direction.xi0, delta, grid, profile.order, localizer.order, patch)


def build_wave(direction, region, lam, epsilon, delta, grid, symbol, *, patches=None, localizer=None,
               profile=None, epsilon2=None, tol_div=TOL_DIV, slack=DWELL_SLACK, scheme="fd4", check=False):
    """One member Z of the wave sequence at scale δ, with its measured report.

    The profile defaults to the highest order the grid carries next to the
    carrier mode and the localizer; ε₂ defaults to ε/2. With check=True the
    first failed property raises PropertyFailure.
    """
    if not 0 < lam < 1 or not 0 < epsilon < 1:
        raise ValueError(f"lambda and epsilon must lie in (0,1), got {lam}, {epsilon}")
    if localizer is None:
        localizer = build_localizer(region, epsilon2 or epsilon / 2, grid)
    profile, frequency = carrier_and_profile(direction, lam, delta, localizer, profile)
    angle = float(angular_distance(direction.patch.center_array, frequency.xi / np.linalg.norm(frequency.xi)))
    if angle > direction.patch.angular_radius:
        logger.warning(f"Lattice mode {frequency.k} sits {angle:.3f} rad from the patch center "
                       f"(radius {direction.patch.angular_radius:.3f})")
    wave = assemble_wave(direction, localizer, profile, delta, symbol, patches=patches, scheme=scheme,
                         frequency=frequency)
    report = measure_wave(wave, lam, epsilon, tol_div, slack, scheme)
    logger.info(f"Wave delta={delta:.4g} k={frequency.k}: dwell {report.plus_dwell:.3f}/{report.minus_dwell:.3f}, "
                f"div {report.div_residual:.2e}, cone {report.cone_fraction:.6f}")
    if check and not report.passed:
        raise report.failures()[0]
    return wave, report


def build_wave_refined(direction, region, lam, epsilon, delta, grid, symbol, max_retries=3, **kwargs):
    """build_wave with δ-halving on PropertyFailure."""
    last_error = None
    for attempt in range(max_retries + 1):
        try:
            return build_wave(direction, region, lam, epsilon, delta, grid, symbol, check=True, **kwargs)
        except PropertyFailure as e:
            last_error = e
            delta = delta / 2
            logger.warning(f"{e.which} (attempt {attempt+1}/{max_retries+1}), retrying with delta={delta:.4g}")
    raise last_error


def build_shifted_wave(a1, a2, lam, region, epsilon, delta, grid, symbol, patches, **kwargs):
    """Z with λA₁+(1−λ)A₂+Z dwelling near A₂ and A₁; A₂ − A₁ must lie in Λ_W."""
    direction = direction_from_state(a2 - a1, symbol, patches)
    return build_wave(direction, region, lam, epsilon, delta, grid, symbol, **kwargs)


def weak_pairings(state, basket):
    """max over channels of |∫ Z_c φ| for each test function in the basket."""
    values = state.stacked()
    axes = (0,) + tuple(range(2, values.ndim))
    out = []
    for phi in basket:
        pairing = np.sum(values * phi.values[:, None], axis=axes) * state.grid.cell_volume
        out.append(float(np.max(np.abs(pairing))))
    return np.array(out)
