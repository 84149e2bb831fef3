"""Seeded basket of smooth test functions and the weak residuals tested against it."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft

from wildscalar.config import DEFAULT_WORKERS
from wildscalar.errors import GridMismatch
from wildscalar.torus_field import wavenumbers
from wildscalar.wave_builder import smooth_step, smooth_step_derivative

logger = logging.getLogger("wildscalar")

BASKET_SIZE = 20
MODES_PER_FUNCTION = 3


@dataclass(eq=False)
class TestFunction:
    """φ = b(t)g(x) on the grid with analytic ∂_tφ and spectral ∇φ."""

    __test__ = False

    values: np.ndarray
    dt: np.ndarray
    grad: np.ndarray

    @property
    def seminorm(self):
        return float(np.abs(self.dt).max() + np.sqrt(np.sum(self.grad ** 2, axis=0)).max())

    def shifted(self, constant):
        return TestFunction(self.values + constant, self.dt, self.grad)


def bump_test_function(grid, window, modes, amplitudes, phases):
    """b(t) a smooth window bump on [t_a, t_b]; g a sum of cosines."""
    t_a, t_b = window
    width = (t_b - t_a) / 4
    t = grid.t_axis()
    rise, fall = (t - t_a) / width, (t_b - t) / width
    b = smooth_step(rise) * smooth_step(fall)
    db = (smooth_step_derivative(rise) * smooth_step(fall) - smooth_step(rise) * smooth_step_derivative(fall)) / width

    x = grid.coordinates()
    g = np.zeros(grid.spatial_shape)
    for k, a, p in zip(modes, amplitudes, phases):
        g += a * np.cos(sum(ki * xi for ki, xi in zip(k, x)) + p)
    g_hat = fft.fftn(g, norm="forward")
    k = wavenumbers(grid)
    grad = np.stack([fft.ifftn(1j * k[i] * g_hat, norm="forward").real for i in range(grid.n)])

    shape = (-1,) + (1,) * grid.n
    return TestFunction(b.reshape(shape) * g[None], db.reshape(shape) * g[None],
                        b.reshape((1,) + shape) * grad[:, None])


def build_basket(grid, size=BASKET_SIZE, seed=0, bandwidth=None):
    """`size` random band-limited test functions (|k_i| ≤ N_x/4) in windows around (0,T)."""
    rng = np.random.default_rng(seed)
    bandwidth = grid.N_x // 4 if bandwidth is None else bandwidth
    basket = []
    for _ in range(size):
        start = rng.uniform(-0.1, 0.4) * grid.T
        stop = rng.uniform(0.6, 1.1) * grid.T
        modes = []
        while len(modes) < MODES_PER_FUNCTION:
            k = rng.integers(-bandwidth, bandwidth + 1, size=grid.n)
            if k.any():
                modes.append(tuple(int(c) for c in k))
        amplitudes = rng.uniform(0.5, 1.0, MODES_PER_FUNCTION)
        phases = rng.uniform(0, 2 * np.pi, MODES_PER_FUNCTION)
        basket.append(bump_test_function(grid, (start, stop), modes, amplitudes, phases))
    return basket


def _check_grids(*fields):
    grids = {f.grid for f in fields}
    if len(grids) != 1:
        raise GridMismatch(f"fields live on {len(grids)} different grids")
    return grids.pop()


def map_ordered(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def weak_form_residual(theta, u, basket_size=BASKET_SIZE, seed=0, basket=None, workers=DEFAULT_WORKERS):
    """max_φ |∫θ(∂_tφ + u·∇φ)| / (‖θ‖₂ (sup|∂_tφ| + sup|∇φ|))."""
    grid = _check_grids(theta, u)
    basket = build_basket(grid, basket_size, seed) if basket is None else basket
    th = theta.physical()[:, 0]
    vel = np.moveaxis(u.physical(), 1, 0)
    norm = float(np.sqrt(np.sum(th ** 2) * grid.cell_volume))
    if norm == 0:
        return 0.0

    def pairing(phi):
        integrand = th * (phi.dt + np.sum(vel * phi.grad, axis=0))
        return abs(float(np.sum(integrand) * grid.cell_volume)) / (norm * phi.seminorm)

    values = map_ordered(pairing, basket, workers)
    logger.debug(f"Weak-form residual over {len(basket)} test functions: max {max(values):.3e}")
    return max(values)


def relaxed_residual(theta, q, basket_size=BASKET_SIZE, seed=0, basket=None, workers=DEFAULT_WORKERS):
    """max_φ |∫θ∂_tφ + q·∇φ| / ((‖θ‖₂ + ‖q‖₂)(sup|∂_tφ| + sup|∇φ|))."""
    grid = _check_grids(theta, q)
    basket = build_basket(grid, basket_size, seed) if basket is None else basket
    th = theta.physical()[:, 0]
    flux = np.moveaxis(q.physical(), 1, 0)
    norm = float(np.sqrt(np.sum(th ** 2) * grid.cell_volume) + np.sqrt(np.sum(flux ** 2) * grid.cell_volume))
    if norm == 0:
        return 0.0

    def pairing(phi):
        integrand = th * phi.dt + np.sum(flux * phi.grad, axis=0)
        return abs(float(np.sum(integrand) * grid.cell_volume)) / (norm * phi.seminorm)

    return max(map_ordered(pairing, basket, workers))
