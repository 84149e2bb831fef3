"""WSF1 field container, screens persistence and tabulated symbols.

WSF1 layout (little-endian): b"WSF1", header {n u32, N_x u32, N_t u32, T f64,
channels u32}, then float64 samples in row-major (t, x₁..x_n, channel) order.
"""
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from wildscalar.config import GridSpec
from wildscalar.errors import FieldFormatError
from wildscalar.symbols import MultiplierSymbol, RegularPatch

logger = logging.getLogger("wildscalar")

MAGIC = b"WSF1"
HEADER = np.dtype([("n", "<u4"), ("N_x", "<u4"), ("N_t", "<u4"), ("T", "<f8"), ("channels", "<u4")])
TABLE_MAGIC = b"WST1"
INTERPOLATION = {1: "linear", 3: "cubic"}


# ═══ WSF1 container ═══

def write_container(path, values, n, N_x, N_t, T):
    """Write channel-first samples (N_t, c, *spatial) as a WSF1 file."""
    values = np.asarray(values, dtype="<f8")
    header = np.array([(n, N_x, N_t, T, values.shape[1])], dtype=HEADER)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(np.moveaxis(values, 1, -1)).tobytes())
    return path


def read_container(path):
    """Return (header dict, channel-first samples)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FieldFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + HEADER.itemsize:
        raise FieldFormatError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype=HEADER, count=1, offset=4)[0]
    info = {name: header[name].item() for name in HEADER.names}
    shape = (info["N_t"],) + (info["N_x"],) * info["n"] + (info["channels"],)
    body = raw[4 + HEADER.itemsize:]
    if len(body) != 8 * math.prod(shape):
        raise FieldFormatError(f"{path}: expected {math.prod(shape)} samples for header {info}, "
                               f"found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").reshape(shape)
    return info, np.moveaxis(values, -1, 1).copy()


def write_field(path, field):
    """Write a SpectralField or StateField in physical space."""
    values = field.stacked() if hasattr(field, "stacked") else field.physical()
    grid = field.grid
    logger.info(f"Writing {values.shape[1]}-channel field to {path}")
    return write_container(path, values, grid.n, grid.N_x, grid.N_t, grid.T)


def read_field(path):
    """Return (GridSpec, physical samples of shape (N_t, c, *spatial))."""
    info, values = read_container(path)
    try:
        grid = GridSpec(n=info["n"], N_x=info["N_x"], N_t=info["N_t"], T=info["T"])
    except ValueError as e:
        raise FieldFormatError(f"{path}: header does not describe a valid grid ({e})")
    return grid, values


def read_state(path, symbol):
    """Rebuild a StateField from a (2n+1)-channel WSF1 file."""
    from wildscalar.torus_field import StateField, to_spectral

    grid, values = read_field(path)
    n = grid.n
    if values.shape[1] != 2 * n + 1:
        raise FieldFormatError(f"{path}: {values.shape[1]} channels is not a state on n={n}")
    return StateField(to_spectral(grid, values[:, :1]), to_spectral(grid, values[:, 1:n + 1]),
                      to_spectral(grid, values[:, n + 1:]), symbol)


# ═══ Screens ═══

def save_screens(path, screens):
    """Screens → WSF1 point table plus a JSON sidecar with the scalars."""
    path = Path(path)
    table = np.concatenate([screens.frequencies, screens.points, screens.labels[:, None]], axis=1)
    # n = 1 container: one "time" sample, rows along x, columns as channels
    write_container(path, table.T[None], 1, table.shape[0], 1, screens.delta0)
    sidecar = {
        "symbol": screens.symbol.name,
        "patches": [{"center": list(p.center), "angular_radius": p.angular_radius,
                     "jacobian_min_singular_value": p.jacobian_min_singular_value}
                    for p in screens.patches],
        "anchor": screens.anchor.tolist(),
        "q0": screens.q0.tolist(),
        "delta0": screens.delta0,
        "delta": screens.delta,
        "angle_floor": screens.angle_floor,
        "transversality_angle": screens.transversality_angle,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_screens(path, symbol):
    from wildscalar.geometry import Screens

    path = Path(path)
    info, values = read_container(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if sidecar["symbol"] != symbol.name:
        raise FieldFormatError(f"{path}: screens were built for {sidecar['symbol']}, not {symbol.name}")
    n = symbol.dim
    table = values[0].T
    if table.shape[1] != 2 * n + 1:
        raise FieldFormatError(f"{path}: screen table has {table.shape[1]} columns, expected {2 * n + 1}")
    patches = tuple(RegularPatch(tuple(p["center"]), p["angular_radius"], p["jacobian_min_singular_value"])
                    for p in sidecar["patches"])
    return Screens(
        symbol=symbol,
        patches=patches,
        frequencies=table[:, :n],
        points=table[:, n:2 * n],
        labels=table[:, 2 * n].astype(int),
        anchor=np.asarray(sidecar["anchor"]),
        q0=np.asarray(sidecar["q0"]),
        delta0=sidecar["delta0"],
        delta=sidecar["delta"],
        angle_floor=sidecar["angle_floor"],
        transversality_angle=sidecar["transversality_angle"],
    )


# ═══ Tabulated symbols ═══

def angle_axes(n, counts):
    """Sample angles: azimuth on [0, 2π) for n = 2; polar [0, π] × azimuth for n = 3."""
    if n == 2:
        return [2 * np.pi * np.arange(counts[0]) / counts[0]]
    if n == 3:
        return [np.linspace(0.0, np.pi, counts[0]), 2 * np.pi * np.arange(counts[1]) / counts[1]]
    raise FieldFormatError(f"tabulated symbols support n in (2, 3), got {n}")


def _angles(xi):
    xi = np.asarray(xi, dtype=float)
    azimuth = np.mod(np.arctan2(xi[..., 1], xi[..., 0]), 2 * np.pi)
    if xi.shape[-1] == 2:
        return azimuth[..., None]
    polar = np.arccos(np.clip(xi[..., 2] / np.linalg.norm(xi, axis=-1), -1.0, 1.0))
    return np.stack([polar, azimuth], axis=-1)


def _directions(n, axes):
    if n == 2:
        return np.stack([np.cos(axes[0]), np.sin(axes[0])], axis=-1)
    polar, azimuth = np.meshgrid(*axes, indexing="ij")
    return np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=-1)


def write_tabulated_symbol(path, symbol, counts, order=3):
    if order not in INTERPOLATION:
        raise ValueError(f"interpolation order must be one of {sorted(INTERPOLATION)}, got {order}")
    n = symbol.dim
    counts = [int(c) for c in counts]
    if len(counts) != n - 1:
        raise ValueError(f"need {n - 1} grid counts for n={n}, got {counts}")
    values = np.real(symbol.values(_directions(n, angle_axes(n, counts))))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(np.array([n, order] + counts, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path


def read_tabulated_symbol(path, name=None):
    """Load a tabulated symbol as a MultiplierSymbol interpolating on the angle grid."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TABLE_MAGIC:
        raise FieldFormatError(f"{path}: bad magic {raw[:4]!r}")
    n, order = np.frombuffer(raw, dtype="<u4", count=2, offset=4).tolist()
    if n not in (2, 3) or order not in INTERPOLATION:
        raise FieldFormatError(f"{path}: unsupported header n={n}, order={order}")
    counts = np.frombuffer(raw, dtype="<u4", count=n - 1, offset=12).tolist()
    offset = 12 + 4 * (n - 1)
    expected = math.prod(counts) * n
    if len(raw) - offset != 8 * expected:
        raise FieldFormatError(f"{path}: expected {expected} values for counts {counts}")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(tuple(counts) + (n,))

    axes = angle_axes(n, counts)
    # azimuth is periodic: pad two samples on each side
    azimuth = np.concatenate([axes[-1][-2:] - 2 * np.pi, axes[-1], axes[-1][:2] + 2 * np.pi])
    padded = np.concatenate([values[..., -2:, :], values, values[..., :2, :]], axis=-2)
    interpolator = RegularGridInterpolator(axes[:-1] + [azimuth], padded, method=INTERPOLATION[order])
    logger.debug(f"Loaded tabulated symbol {path.name}: n={n}, counts={counts}")

    def formula(xi):
        xi = np.asarray(xi, dtype=float)
        flat = _angles(xi.reshape(-1, n))
        return interpolator(flat).reshape(xi.shape)

    return MultiplierSymbol(name=name or path.stem, dim=n, formula=formula,
                            singular_set_description="tabulated")
