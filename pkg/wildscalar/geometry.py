"""Pointwise state space: constraint set K, wave cones, screens, T4 splits and openness.

States are A = (θ, q, u) ∈ ℝ^(2n+1). K holds the states (±1, ±u, u); the
screens S_j = m(W_j) turn a state near A₀ = (0, q₀, 0) into four K-corners.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from wildscalar.errors import (
    DegenerateTheta,
    EtaTooLarge,
    NoIntersection,
    NotInCone,
    OutsideBall,
    SpanFailure,
    TransversalityFailure,
    WeightOutOfRange,
)
from wildscalar.symbols import angular_distance, exp_map, patch_samples, sphere_samples, tangent_basis

logger = logging.getLogger("wildscalar")

THETA_LIMIT = 1 - 1e-9
ANGLE_FLOOR = 0.2
SCREEN_SAMPLES = 256
BALL_TRIALS = 200
ROOT_TOL = 1e-10
CONE_TOL = 1e-8
FD_STEP = 1e-6
MAX_HALVINGS = 20
WITNESS_RESTARTS = 3


@dataclass(frozen=True, eq=False)
class StateMatrix:
    """A = (θ, q, u)."""

    theta: float
    q: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).copy())
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).copy())

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        n = (len(v) - 1) // 2
        return cls(v[0], v[1:n + 1], v[n + 1:])

    @property
    def n(self):
        return len(self.q)

    def vector(self):
        return np.concatenate([[self.theta], self.q, self.u])

    def norm(self):
        return float(np.linalg.norm(self.vector()))

    def __add__(self, other):
        return StateMatrix.from_vector(self.vector() + other.vector())

    def __sub__(self, other):
        return StateMatrix.from_vector(self.vector() - other.vector())

    def __mul__(self, scalar):
        return StateMatrix.from_vector(self.vector() * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        return f"StateMatrix(theta={self.theta:.6g}, q={self.q.tolist()}, u={self.u.tolist()})"


# ═══ Constraint set ═══

def distance_to_K(vectors, n, axis=-1):
    """Distance of state vectors to K: min over σ = ±1 of √((θ−σ)² + |q−σu|²/2)."""
    v = np.moveaxis(np.asarray(vectors, dtype=float), axis, -1)
    theta, q, u = v[..., 0], v[..., 1:n + 1], v[..., n + 1:]
    squared = [(theta - sign) ** 2 + np.sum((q - sign * u) ** 2, axis=-1) / 2 for sign in (1.0, -1.0)]
    return np.sqrt(np.minimum(*squared))


def dist_to_K(A):
    return float(distance_to_K(A.vector(), A.n))


def nearest_K_point(A):
    best = None
    for sign in (1.0, -1.0):
        w = (sign * A.q + A.u) / 2
        point = StateMatrix(sign, sign * w, w)
        d = (A - point).norm()
        if best is None or d < best[0]:
            best = (d, point)
    return best[1]


def in_K(A, tol=1e-10):
    return abs(abs(A.theta) - 1) <= tol and float(np.max(np.abs(A.q - A.theta * A.u))) <= tol


# ═══ Wave cone ═══

def log_map(center, xi):
    center = np.asarray(center, dtype=float)
    xi = np.asarray(xi, dtype=float)
    dot = float(np.clip(xi @ center, -1.0, 1.0))
    perp = xi - dot * center
    r = float(np.linalg.norm(perp))
    if r == 0:
        return np.zeros_like(center)
    return perp * math.atan2(r, dot) / r


def _chart(symbol, patch):
    """τ ∈ ℝ^(n−1) ↦ (ξ(τ), m(ξ(τ))) on the patch, through the exponential map."""
    center = patch.center_array
    basis = tangent_basis(center)

    def xi_of(tau):
        return exp_map(center, basis @ np.asarray(tau, dtype=float))[0]

    def m_of(tau):
        return np.real(symbol.values(xi_of(tau)))

    def tau_of(xi):
        return basis.T @ log_map(center, xi)

    return xi_of, m_of, tau_of


def lambda_w_direction(L, symbol, patches, samples=64, tol=CONE_TOL):
    """(ξ, patch, residual) with u/θ = m(ξ), ξ inside a patch; NotInCone otherwise."""
    if abs(L.theta) < 1e-14:
        raise NotInCone("wave-cone directions need theta != 0")
    target = L.u / L.theta
    best = None
    for patch in patches:
        xi_of, m_of, tau_of = _chart(symbol, patch)
        candidates = patch_samples(patch, samples)
        values = np.real(symbol.values(candidates))
        start = candidates[int(np.argmin(np.linalg.norm(values - target, axis=1)))]
        fit = optimize.least_squares(lambda tau: m_of(tau) - target, tau_of(start),
                                     xtol=1e-15, ftol=1e-15, gtol=1e-15)
        xi = xi_of(fit.x)
        if angular_distance(patch.center_array, xi) > patch.angular_radius + 1e-9:
            continue
        residual = float(np.linalg.norm(m_of(fit.x) - target))
        if best is None or residual < best[2]:
            best = (xi, patch, residual)
    if best is None or best[2] > tol:
        found = "none" if best is None else f"{best[2]:.3e}"
        raise NotInCone(f"u/theta={target.tolist()} is not an image point of the patches (best residual {found})")
    return best


def lambda_w_residual(L, symbol, patches):
    try:
        return lambda_w_direction(L, symbol, patches, tol=np.inf)[2]
    except NotInCone:
        return math.inf


def in_lambda_w(L, symbol, patches, tol=CONE_TOL):
    return lambda_w_residual(L, symbol, patches) <= tol


# ═══ Screens ═══

@dataclass(eq=False)
class Screens:
    symbol: object
    patches: tuple
    frequencies: np.ndarray
    points: np.ndarray
    labels: np.ndarray
    anchor: np.ndarray
    q0: np.ndarray
    delta0: float
    delta: float = 0.0
    angle_floor: float = ANGLE_FLOOR
    transversality_angle: float = 0.0

    @property
    def n(self):
        return len(self.q0)

    @property
    def A0(self):
        return StateMatrix(0.0, self.q0, np.zeros(self.n))

    def in_ball(self, A):
        return (A - self.A0).norm() < self.delta


@dataclass(frozen=True)
class ScreenHit:
    point: np.ndarray
    xi: np.ndarray
    tau: float
    angle: float


def _crossing_angle(m_of, tau, direction):
    k = len(tau)
    cols = []
    for i in range(k):
        e = np.zeros(k)
        e[i] = FD_STEP
        cols.append((m_of(tau + e) - m_of(tau - e)) / (2 * FD_STEP))
    normal = linalg.null_space(np.array(cols))
    if normal.shape[1] != 1:
        return 0.0
    return float(math.asin(min(1.0, abs(float(direction @ normal[:, 0])))))


def _line_hits(z, screens):
    """Intersections of the line through the anchor and z with S₁ and S₂ (normalized coordinates)."""
    a = screens.anchor
    v = z - a
    length = float(np.linalg.norm(v))
    if length < 1e-14:
        raise NoIntersection("point coincides with the anchor")
    v = v / length
    hits = []
    for label, patch in enumerate(screens.patches[:2]):
        xi_of, m_of, tau_of = _chart(screens.symbol, patch)
        chosen = screens.labels == label
        rel = screens.points[chosen] - a
        along = rel @ v
        off = np.linalg.norm(rel - along[:, None] * v, axis=1)
        i = int(np.argmin(off))
        start = np.concatenate([tau_of(screens.frequencies[chosen][i]), [along[i]]])

        def equations(x):
            return m_of(x[:-1]) - (a + x[-1] * v)

        sol = optimize.root(equations, start, method="hybr", options={"xtol": 1e-14})
        residual = float(np.linalg.norm(equations(sol.x)))
        xi = xi_of(sol.x[:-1])
        if residual > ROOT_TOL or angular_distance(patch.center_array, xi) > patch.angular_radius + 1e-9:
            raise NoIntersection(f"line through z={z.tolist()} misses screen {label + 1} "
                                 f"(residual {residual:.2e})")
        logger.debug(f"screen {label + 1}: tau={sol.x[-1]:.6g}, {sol.nfev} evaluations")
        hits.append(ScreenHit(m_of(sol.x[:-1]), xi, float(sol.x[-1]), _crossing_angle(m_of, sol.x[:-1], v)))
    return hits[0], hits[1], length


def screen_project(x, screens, shift=None, scale=1.0):
    """(x₁, x₂) on shift + scale·S_j along the line through shift + scale·a and x."""
    x = np.asarray(x, dtype=float)
    shift = np.zeros(screens.n) if shift is None else np.asarray(shift, dtype=float)
    z = (x - shift) / scale
    if np.linalg.norm(z - screens.q0) > screens.delta0:
        raise OutsideBall(f"normalized point is {np.linalg.norm(z - screens.q0):.4g} from q0 "
                          f"(radius {screens.delta0:.4g})")
    hit1, hit2, _ = _line_hits(z, screens)
    for hit in (hit1, hit2):
        if hit.angle < screens.angle_floor:
            raise TransversalityFailure(f"crossing angle {hit.angle:.3f} below floor {screens.angle_floor}")
    return shift + scale * hit1.point, shift + scale * hit2.point


def _ball_sample_splits(screens, z):
    try:
        hit1, hit2, length = _line_hits(z, screens)
    except NoIntersection:
        return False
    return (min(hit1.angle, hit2.angle) >= screens.angle_floor and hit1.tau < length < hit2.tau)


def build_screens(symbol, patches, angle_floor=ANGLE_FLOOR, samples=SCREEN_SAMPLES, trials=BALL_TRIALS,
                  seed=0):
    """Screens from the first two patches; a and q₀ at 1/3 and 2/3 of [m(ξ₁), m(ξ₂)]."""
    if len(patches) < 2:
        raise SpanFailure(f"screens need two patches, got {len(patches)}")
    patches = tuple(patches[:2])
    m1, m2 = (np.real(symbol(p.center_array)) for p in patches)
    chord = m2 - m1
    if np.linalg.norm(chord) < 1e-12:
        raise TransversalityFailure("patch images coincide; the segment has zero length")
    v = chord / np.linalg.norm(chord)
    angles = []
    for patch in patches:
        _, m_of, _ = _chart(symbol, patch)
        angles.append(_crossing_angle(m_of, np.zeros(symbol.dim - 1), v))
    if min(angles) < angle_floor:
        raise TransversalityFailure(f"segment meets the screens at {min(angles):.3f} rad < {angle_floor}")

    frequencies = np.concatenate([patch_samples(p, samples) for p in patches])
    labels = np.repeat([0, 1], samples + 1)
    screens = Screens(symbol, patches, frequencies, np.real(symbol.values(frequencies)), labels,
                      m1 + chord / 3, m1 + 2 * chord / 3, 0.0, 0.0, angle_floor, min(angles))

    directions = np.concatenate([np.eye(symbol.dim), -np.eye(symbol.dim), sphere_samples(symbol.dim, 8, seed=seed)])

    def feasible(r):
        return all(_ball_sample_splits(screens, screens.q0 + r * d) for d in directions)

    low, high = 0.0, 0.99 * float(np.linalg.norm(screens.q0 - screens.anchor))
    if feasible(high):
        low = high
    else:
        for _ in range(30):
            mid = (low + high) / 2
            if feasible(mid):
                low = mid
            else:
                high = mid
    if low <= 0:
        raise TransversalityFailure("no ball around q0 admits unique screen projections")
    screens.delta0 = low
    screens.delta = certify_radius(screens, trials, seed)
    logger.info(f"Screens for {symbol.name}: delta0={screens.delta0:.4g}, delta={screens.delta:.4g}, "
                f"transversality {screens.transversality_angle:.3f} rad")
    return screens


def ball_samples(center, radius, count, rng):
    """Uniform samples of the Euclidean ball."""
    dim = len(center)
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return center + g * r[:, None]


def certify_radius(screens, trials=BALL_TRIALS, seed=0):
    """Largest δ = δ₀/4·2^(−j) for which `trials` random states in B_δ(A₀) all split."""
    rng = np.random.default_rng(seed)
    delta = screens.delta0 / 4
    for _ in range(MAX_HALVINGS):
        ok = True
        for v in ball_samples(screens.A0.vector(), delta, trials, rng):
            try:
                t4_of(StateMatrix.from_vector(v), screens, strict=False)
            except (NoIntersection, OutsideBall, WeightOutOfRange, DegenerateTheta, TransversalityFailure):
                ok = False
                break
        if ok:
            return delta
        delta /= 2
    raise TransversalityFailure(f"could not certify a T4 radius below {screens.delta0 / 4:.3g}")


# ═══ T4 splits ═══

@dataclass
class Decomposition:
    X: StateMatrix
    Y: StateMatrix
    weight: float

    def reconstruct(self):
        return self.X * self.weight + self.Y * (1 - self.weight)


def decompose(A):
    """A = ((1+θ)/2)·(1, x, x) + ((1−θ)/2)·(−1, −y, y)."""
    if abs(A.theta) >= THETA_LIMIT:
        raise DegenerateTheta(f"|theta|={abs(A.theta):.12g} is too close to 1")
    x = (A.u + A.q) / (1 + A.theta)
    y = (A.u - A.q) / (1 - A.theta)
    return Decomposition(StateMatrix(1.0, x, x), StateMatrix(-1.0, -y, y), (1 + A.theta) / 2)


@dataclass
class T4Configuration:
    base: StateMatrix
    corners: tuple
    weights: np.ndarray
    mu: float
    frequencies: tuple
    patches: tuple
    residual: float
    lstsq_weights: np.ndarray
    s: Optional[float] = None
    eta: Optional[float] = None
    shrunk: tuple = ()
    arms: tuple = ()
    bars: tuple = ()
    separation: float = math.nan
    separated: bool = True

    def reconstruct(self):
        return StateMatrix.from_vector(sum(w * T.vector() for w, T in zip(self.weights, self.corners)))


def t4_of(A, screens, strict=True):
    """Four K-corners with weights reconstructing A (Σλ_jT_j = A)."""
    if strict and not screens.in_ball(A):
        raise OutsideBall(f"|A - A0| = {(A - screens.A0).norm():.4g} >= delta = {screens.delta:.4g}")
    decompose(A)
    theta, q, u = A.theta, A.q, A.u
    z = (q - theta * u) / (1 - theta ** 2)
    if np.linalg.norm(z - screens.q0) > screens.delta0:
        raise OutsideBall(f"normalized point is {np.linalg.norm(z - screens.q0):.4g} from q0")
    hit1, hit2, length = _line_hits(z, screens)
    mu = (hit2.tau - length) / (hit2.tau - hit1.tau)
    x1, x2 = u + (1 - theta) * hit1.point, u + (1 - theta) * hit2.point
    y1, y2 = u - (1 + theta) * hit1.point, u - (1 + theta) * hit2.point
    corners = (StateMatrix(1.0, x1, x1), StateMatrix(1.0, x2, x2),
               StateMatrix(-1.0, -y1, y1), StateMatrix(-1.0, -y2, y2))
    weights = np.array([(1 + theta) * mu, (1 + theta) * (1 - mu), (1 - theta) * mu, (1 - theta) * (1 - mu)]) / 2
    system = np.vstack([np.stack([T.vector() for T in corners], axis=1), np.ones((1, 4))])
    lstsq_weights = linalg.lstsq(system, np.concatenate([A.vector(), [1.0]]))[0]
    if np.any(weights <= 0) or np.any(weights >= 1):
        raise WeightOutOfRange(f"weights {weights.tolist()} leave (0,1)")
    cfg = T4Configuration(
        base=A,
        corners=corners,
        weights=weights,
        mu=float(mu),
        frequencies=(hit1.xi, hit2.xi, hit1.xi, hit2.xi),
        patches=(screens.patches[0], screens.patches[1], screens.patches[0], screens.patches[1]),
        residual=0.0,
        lstsq_weights=lstsq_weights,
    )
    cfg.residual = (cfg.reconstruct() - A).norm()
    return cfg


def eta_admissible(eta):
    return 0 < eta < 1 and (1 - eta) ** 3 > 0.5


def minimal_steps(eta):
    """Smallest N divisible by 4 with (1−η)^(N−4) < 1/2."""
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0,1), got {eta}")
    steps = 4
    while (1 - eta) ** (steps - 4) >= 0.5:
        steps += 4
    return steps


def perturbed_arms(cfg, s, eta):
    """Shrunk corners T_j^s, arms A_i = A + ηΣ_{j≤i}λ_j(T_j^s − A) and T̄_i = T_i^s + A_{i−1} − A."""
    if not 0 < s <= 0.25:
        raise ValueError(f"s must lie in (0, 1/4], got {s}")
    if not eta_admissible(eta):
        raise EtaTooLarge(f"eta={eta}: (1-eta)^3 = {(1 - eta) ** 3:.4f} <= 1/2")
    A = cfg.base
    shrunk = tuple(T * (1 - s) + A * s for T in cfg.corners)
    arms = [A]
    for lam, Ts in zip(cfg.weights, shrunk):
        arms.append(arms[-1] + (Ts - A) * (eta * lam))
    bars = tuple(Ts + arms[i] - A for i, Ts in enumerate(shrunk))
    separation = min((bar - A).norm() for bar in bars)
    separated = separation >= 0.5 * dist_to_K(A)
    if not separated:
        logger.warning(f"Perturbed corners come within {separation:.4g} of A "
                       f"(half the distance to K is {0.5 * dist_to_K(A):.4g})")
    return replace(cfg, s=s, eta=eta, shrunk=shrunk, arms=tuple(arms), bars=bars,
                   separation=separation, separated=separated)


# ═══ The set U ═══

@dataclass
class Witness:
    t: float
    A2: StateMatrix
    corner: int
    residual: float


def find_witness(A, screens, restarts=WITNESS_RESTARTS, seed=0, tol=1e-9):
    """(t, A″, j) with A = tA″ + (1−t)T_j(A″), A″ ∈ B_δ(A₀); None when the search fails."""
    rng = np.random.default_rng(seed)
    A0 = screens.A0
    base = t4_of(A0, screens, strict=False)
    for j in range(4):
        T0 = base.corners[j].vector()
        span = A0.vector() - T0
        t_start = float(np.clip((A.vector() - T0) @ span / (span @ span), 0.05, 0.95))
        starts = [A0.vector()] + list(ball_samples(A0.vector(), screens.delta / 2, restarts - 1, rng))

        def residuals(x):
            A2 = StateMatrix.from_vector(x[1:])
            try:
                T = t4_of(A2, screens, strict=False).corners[j]
            except (NoIntersection, OutsideBall, WeightOutOfRange, DegenerateTheta):
                return np.full(len(x) - 1, 1e3)
            return (A2 * x[0] + T * (1 - x[0]) - A).vector()

        for start in starts:
            fit = optimize.least_squares(residuals, np.concatenate([[t_start], start]),
                                         bounds=([1e-9] + [-np.inf] * len(start), [1 - 1e-9] + [np.inf] * len(start)),
                                         xtol=1e-15, ftol=1e-15, gtol=1e-15)
            residual = float(np.linalg.norm(residuals(fit.x)))
            A2 = StateMatrix.from_vector(fit.x[1:])
            if residual <= tol and screens.in_ball(A2) and 0 < fit.x[0] < 1:
                return Witness(float(fit.x[0]), A2, j, residual)
    return None


def membership_U(A, screens, restarts=WITNESS_RESTARTS, seed=0):
    if screens.in_ball(A):
        return True
    if dist_to_K(A) < 1e-9:
        return False
    return find_witness(A, screens, restarts, seed) is not None


def openness_jacobian(theta, t, n, sign=1.0):
    """(θ−σ)σⁿ(1−t)ⁿtⁿ; σ = 1 gives (θ−1)(1−t)ⁿtⁿ."""
    return (theta - sign) * sign ** n * (1 - t) ** n * t ** n


def openness_fd_check(A_prime, corner, t, step=FD_STEP):
    """Finite-difference determinant of (δt, δx, δv) ↦ δA for A + δA = (t+δt)(A′+δA′) + (1−t−δt)(T+δT).

    δT = (0, σδx, δx) moves the corner along its K-branch and δA′ = (0, 0, δv)
    moves the base point's u-row. Returns (numeric, closed form).
    """
    n = A_prime.n
    sign = corner.theta
    A = A_prime * t + corner * (1 - t)

    def perturbed(p):
        dt, dx, dv = p[0], p[1:n + 1], p[n + 1:]
        moved_corner = corner + StateMatrix(0.0, sign * dx, dx)
        moved_base = A_prime + StateMatrix(0.0, np.zeros(n), dv)
        return (moved_base * (t + dt) + moved_corner * (1 - t - dt) - A).vector()

    jac = np.zeros((2 * n + 1, 2 * n + 1))
    for i in range(2 * n + 1):
        e = np.zeros(2 * n + 1)
        e[i] = step
        jac[:, i] = (perturbed(e) - perturbed(-e)) / (2 * step)
    return float(linalg.det(jac)), openness_jacobian(A_prime.theta, t, n, sign)


def corner_separation(screens, trials=50, seed=0):
    """min |A′ − T_j(A″)| over random A′, A″ ∈ B_δ(A₀) against the bound 1 − δ."""
    rng = np.random.default_rng(seed)
    center = screens.A0.vector()
    firsts = ball_samples(center, screens.delta, trials, rng)
    seconds = ball_samples(center, screens.delta, trials, rng)
    smallest = math.inf
    for v1, v2 in zip(firsts, seconds):
        cfg = t4_of(StateMatrix.from_vector(v2), screens, strict=False)
        smallest = min(smallest, min(float(np.linalg.norm(v1 - T.vector())) for T in cfg.corners))
    return smallest, 1 - screens.delta
