"""Spectral/physical space-time fields on (0,T)×𝕋ⁿ and the relaxed-system operators.

Coefficients are stored per time sample with norm="forward" spatial FFTs, so
the k = 0 coefficient is the spatial mean. Time stays sampled.
"""
import logging
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft

from wildscalar.errors import ShapeMismatch, SingularSupport

logger = logging.getLogger("wildscalar")

FFT_WORKERS = int(os.environ.get("WILDSCALAR_FFT_WORKERS", "1"))
ENERGY_FLOOR = 1e-12
TIME_SCHEMES = ("fd4", "spectral")


class SpectralField:
    """c-channel field with coefficients of shape (N_t, c, N_x, …, N_x)."""

    def __init__(self, grid, coefficients, zero_mean=False):
        coefficients = np.asarray(coefficients, dtype=complex)
        expected = (grid.N_t,) + grid.spatial_shape
        if coefficients.ndim != grid.n + 2 or coefficients.shape[:1] + coefficients.shape[2:] != expected:
            raise ShapeMismatch(f"coefficients of shape {coefficients.shape} do not fit grid {expected}")
        self.grid = grid
        self.coefficients = coefficients
        self.zero_mean = zero_mean
        self._physical = None

    @property
    def channels(self):
        return self.coefficients.shape[1]

    def physical(self):
        if self._physical is None:
            self._physical = fft.ifftn(self.coefficients, axes=self.grid.spatial_axes,
                                       norm="forward", workers=FFT_WORKERS).real
        return self._physical

    def channel(self, index):
        return SpectralField(self.grid, self.coefficients[:, index:index + 1], self.zero_mean)

    def with_coefficients(self, coefficients, zero_mean=None):
        return SpectralField(self.grid, coefficients, self.zero_mean if zero_mean is None else zero_mean)

    def __add__(self, other):
        _check_same_grid(self, other)
        return self.with_coefficients(self.coefficients + other.coefficients,
                                      self.zero_mean and other.zero_mean)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return self.with_coefficients(self.coefficients - other.coefficients,
                                      self.zero_mean and other.zero_mean)

    def __mul__(self, scalar):
        return self.with_coefficients(self.coefficients * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_coefficients(-self.coefficients)

    def energy(self):
        """∫|f|² over Ω_T by Parseval (sum over time samples times dt·(2π)ⁿ)."""
        return float(np.sum(np.abs(self.coefficients) ** 2) * self.grid.dt * (2 * np.pi) ** self.grid.n)

    def sup(self):
        return float(np.max(np.abs(self.physical()))) if self.coefficients.size else 0.0


def _check_same_grid(a, b):
    if a.grid != b.grid or a.coefficients.shape != b.coefficients.shape:
        raise ShapeMismatch(f"fields on different grids/shapes: {a.coefficients.shape} vs {b.coefficients.shape}")


def to_spectral(grid, values, zero_mean=False):
    """Physical samples (N_t, [c,] N_x…) → SpectralField (lossless)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == grid.n + 1:
        values = values[:, None]
    expected = (grid.N_t,) + grid.spatial_shape
    if values.ndim != grid.n + 2 or values.shape[:1] + values.shape[2:] != expected:
        raise ShapeMismatch(f"values of shape {values.shape} do not fit grid {expected}")
    coefficients = fft.fftn(values, axes=grid.spatial_axes, norm="forward", workers=FFT_WORKERS)
    field = SpectralField(grid, coefficients, zero_mean)
    field._physical = values
    return field


def to_physical(field):
    return field.physical()


def zeros(grid, channels=1):
    return SpectralField(grid, np.zeros((grid.N_t, channels) + grid.spatial_shape, dtype=complex), True)


def constant(grid, values):
    """Spatially constant field whose k = 0 coefficient is `values` at every time."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    coefficients = np.zeros((grid.N_t, len(values)) + grid.spatial_shape, dtype=complex)
    coefficients[(slice(None), slice(None)) + (0,) * grid.n] = values
    return SpectralField(grid, coefficients, not np.any(values))


# ═══ Wavenumbers ═══

@lru_cache(maxsize=16)
def wavenumbers(grid):
    """Integer modes k, shape (n, N_x, …, N_x); Nyquist appears as -N_x/2."""
    k1 = np.rint(fft.fftfreq(grid.N_x, d=1.0 / grid.N_x)).astype(int)
    return np.stack(np.meshgrid(*([k1] * grid.n), indexing="ij"))


@lru_cache(maxsize=16)
def nyquist_mask(grid):
    return np.any(np.abs(wavenumbers(grid)) == grid.N_x // 2, axis=0)


@lru_cache(maxsize=16)
def retained_mask(grid):
    """Modes kept by operators: Nyquist dropped, plus the 2/3 rule when dealiasing."""
    k = wavenumbers(grid)
    keep = ~nyquist_mask(grid)
    if grid.dealias:
        keep &= np.all(np.abs(k) < grid.N_x // 3, axis=0)
    return keep


@lru_cache(maxsize=16)
def multiplier_table(symbol, grid):
    """m(k) on the retained lattice, zero at k = 0, singular and dropped modes.

    Returns (table of shape (n, N_x…), singular-mode mask).
    """
    k = np.moveaxis(wavenumbers(grid), 0, -1).astype(float)
    nonzero = np.any(k != 0, axis=-1)
    regular = symbol.clear_of_singular(k, clearance=0.0) & nonzero
    values = symbol.values(np.where(regular[..., None], k, 1.0))
    values = np.where((regular & retained_mask(grid))[..., None], values, 0.0)
    singular = nonzero & ~regular
    return np.moveaxis(values, -1, 0), singular


# ═══ Operators ═══

def apply_multiplier(theta, symbol, energy_floor=ENERGY_FLOOR):
    """u = T[θ]: û(t,k) = m(k)θ̂(t,k) for k ≠ 0, û(t,0) = 0."""
    if theta.channels != 1:
        raise ShapeMismatch(f"apply_multiplier needs a scalar field, got {theta.channels} channels")
    table, singular = multiplier_table(symbol, theta.grid)
    if singular.any():
        power = np.abs(theta.coefficients[:, 0]) ** 2
        total = power.sum()
        on_singular = power[:, singular].sum()
        if total > 0 and on_singular > energy_floor * total:
            raise SingularSupport(f"{symbol.name}: {on_singular / total:.3e} of the energy sits on singular modes")
    coefficients = theta.coefficients * table[None]
    return SpectralField(theta.grid, coefficients, zero_mean=True)


def gradient(field):
    """Spatial gradient of a scalar field, (N_t, n, N_x…)."""
    k = wavenumbers(field.grid)
    keep = retained_mask(field.grid)
    coefficients = 1j * k[None] * field.coefficients * keep
    return field.with_coefficients(coefficients, zero_mean=True)


def divergence(field):
    """Spatial divergence of an n-channel field."""
    k = wavenumbers(field.grid)
    keep = retained_mask(field.grid)
    coefficients = np.sum(1j * k[None] * field.coefficients * keep, axis=1, keepdims=True)
    return field.with_coefficients(coefficients, zero_mean=True)


def laplacian_coefficients(grid, coefficients):
    k2 = np.sum(wavenumbers(grid) ** 2, axis=0)
    return -k2 * coefficients * retained_mask(grid)


def time_derivative(values, dt, scheme="fd4"):
    """d/dt along axis 0 of sampled values.

    fd4: fourth-order central differences with one-sided fourth-order closures
    (second order when fewer than five samples). spectral: treats the samples
    as one period of length N_t·dt.
    """
    values = np.asarray(values)
    n_t = values.shape[0]
    if scheme == "spectral":
        omega = 2 * np.pi * fft.fftfreq(n_t, d=dt)
        if n_t % 2 == 0:
            omega[n_t // 2] = 0.0
        shape = (n_t,) + (1,) * (values.ndim - 1)
        out = fft.ifft(1j * omega.reshape(shape) * fft.fft(values, axis=0), axis=0)
        return out if np.iscomplexobj(values) else out.real
    if scheme != "fd4":
        raise ValueError(f"unknown time scheme {scheme!r}; choose from {TIME_SCHEMES}")
    if n_t < 2:
        raise ValueError("time derivative needs at least two samples")
    if n_t < 5:
        return np.gradient(values, dt, axis=0, edge_order=2 if n_t > 2 else 1)
    f = values
    out = np.empty_like(f)
    out[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * dt)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * dt)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * dt)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * dt)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * dt)
    return out


def enforce_zero_mean(field):
    coefficients = field.coefficients.copy()
    coefficients[(slice(None), slice(None)) + (0,) * field.grid.n] = 0
    return field.with_coefficients(coefficients, zero_mean=True)


# ═══ Cones ═══

def mode_directions(grid):
    """Unit directions of the integer modes (zero at k = 0), shape (N_x…, n)."""
    k = np.moveaxis(wavenumbers(grid), 0, -1).astype(float)
    size = np.linalg.norm(k, axis=-1, keepdims=True)
    return k / np.where(size > 0, size, 1.0)


def cone_mask(grid, patches, band=None):
    """Modes whose direction lies in ∪(W_j ∪ −W_j), optionally with |k| inside `band`."""
    directions = mode_directions(grid)
    inside = np.zeros(grid.spatial_shape, dtype=bool)
    for patch in patches:
        inside |= patch.contains(directions) | patch.contains(-directions)
    k = wavenumbers(grid)
    inside &= np.any(k != 0, axis=0)
    if band is not None:
        size = np.linalg.norm(k, axis=0)
        inside &= (size > band[0]) & (size <= band[1])
    return inside & retained_mask(grid)


def support_cone_check(field, patches, energy_floor=ENERGY_FLOOR):
    """Fraction of spectral energy above the floor whose direction lies in the cones."""
    if not patches:
        raise ValueError("support_cone_check needs at least one patch")
    fields = field if isinstance(field, (list, tuple)) else [field]
    grid = fields[0].grid
    inside = cone_mask(grid, patches)
    k0 = (0,) * grid.n
    total = inside_energy = 0.0
    for f in fields:
        power = np.abs(f.coefficients) ** 2
        power[(slice(None), slice(None)) + k0] = 0.0
        threshold = energy_floor * power.sum()
        power = np.where(power > threshold, power, 0.0)
        total += power.sum()
        inside_energy += power[:, :, inside].sum()
    return 1.0 if total == 0 else float(inside_energy / total)


# ═══ State fields ═══

@dataclass
class StateField:
    """The relaxed state U = (θ, q, u) on the grid."""

    theta: SpectralField
    q: SpectralField
    u: SpectralField
    symbol: object

    @property
    def grid(self):
        return self.theta.grid

    def __add__(self, other):
        return StateField(self.theta + other.theta, self.q + other.q, self.u + other.u, self.symbol)

    def __sub__(self, other):
        return StateField(self.theta - other.theta, self.q - other.q, self.u - other.u, self.symbol)

    def scaled(self, factor):
        return StateField(self.theta * factor, self.q * factor, self.u * factor, self.symbol)

    def stacked(self):
        """Physical state vectors (θ, q₁…q_n, u₁…u_n), shape (N_t, 2n+1, N_x…)."""
        return np.concatenate([self.theta.physical(), self.q.physical(), self.u.physical()], axis=1)

    def energy(self):
        return self.theta.energy() + self.q.energy() + self.u.energy()

    def multiplier_defect(self):
        """max |û − m(k)θ̂| over the stored coefficients."""
        table, _ = multiplier_table(self.symbol, self.grid)
        expected = self.theta.coefficients * table[None]
        return float(np.max(np.abs(self.u.coefficients - expected))) if expected.size else 0.0


def state_from_constant(grid, state, symbol):
    """U ≡ A on the grid; `state` is the (2n+1)-vector (θ, q, u)."""
    state = np.asarray(state, dtype=float)
    n = grid.n
    return StateField(constant(grid, state[:1]), constant(grid, state[1:n + 1]),
                      constant(grid, state[n + 1:]), symbol)


def spacetime_divergence(state, scheme="fd4"):
    """Rows [D_tθ + div q, div u] as a 2-channel SpectralField."""
    grid = state.grid
    row1 = time_derivative(state.theta.coefficients, grid.dt, scheme) + divergence(state.q).coefficients
    row2 = divergence(state.u).coefficients
    return SpectralField(grid, np.concatenate([row1, row2], axis=1))


def _partial_sup(field):
    """max_j sup|∂_j f_j|, the size of the individual divergence terms."""
    k = wavenumbers(field.grid)
    terms = 1j * k[None] * field.coefficients * retained_mask(field.grid)
    return float(np.abs(fft.ifftn(terms, axes=field.grid.spatial_axes, norm="forward")).max())


def divergence_residual(state, scheme="fd4"):
    """Relative sup of the space-time divergence (0 when every term vanishes)."""
    grid = state.grid
    residual = spacetime_divergence(state, scheme).physical()
    dtheta = np.abs(fft.ifftn(time_derivative(state.theta.coefficients, grid.dt, scheme),
                              axes=grid.spatial_axes, norm="forward")).max()
    scale = max(dtheta, _partial_sup(state.q), _partial_sup(state.u))
    peak = float(np.abs(residual).max())
    if scale == 0:
        return peak
    return peak / scale
