"""Zonotope algebra and data-driven reachable sets.

States are (x, y, vx, vy). A cluster's transition pairs are stacked
into data matrices; the set of linear models consistent with them under
a bounded-noise assumption is a matrix zonotope, which is then iterated
from the current state estimate to produce reachable sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ContractError, DataExcluded, DimensionError


@dataclass(frozen=True)
class Zonotope:
    """Set {center + generators @ b : |b|_inf <= 1}."""

    center: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        g = np.asarray(self.generators, dtype=np.float64)
        if g.ndim != 2:
            g = g.reshape(c.shape[0], -1)
        if g.shape[0] != c.shape[0]:
            raise DimensionError(f"zonotope center {c.shape} vs generators {g.shape}")
        if not (np.isfinite(c).all() and np.isfinite(g).all()):
            raise ContractError("zonotope entries must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def order(self) -> float:
        return self.generators.shape[1] / self.dim

    def interval_hull(self):
        radius = np.abs(self.generators).sum(axis=1)
        return self.center - radius, self.center + radius

    def sample(self, rng, n: int) -> np.ndarray:
        """Random member points (rows)."""
        b = rng.uniform(-1.0, 1.0, size=(n, self.generators.shape[1]))
        return self.center + b @ self.generators.T

    @classmethod
    def point(cls, p) -> "Zonotope":
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        return cls(p, np.zeros((p.shape[0], 0)))


@dataclass(frozen=True)
class MatrixZonotope:
    """Set of matrices {center + sum_i b_i * generators[i] : |b|_inf <= 1}."""

    center: np.ndarray            # (n, p)
    generators: np.ndarray        # (g, n, p)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        g = np.asarray(self.generators, dtype=np.float64)
        if g.size == 0:
            g = g.reshape(0, *c.shape)
        if g.shape[1:] != c.shape:
            raise DimensionError(f"matrix zonotope center {c.shape} vs generators {g.shape}")
        if not (np.isfinite(c).all() and np.isfinite(g).all()):
            raise ContractError("matrix zonotope entries must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    def interval_hull(self):
        radius = np.abs(self.generators).sum(axis=0) if len(self.generators) else np.zeros_like(self.center)
        return self.center - radius, self.center + radius

    def contains_matrix(self, a, tol: float = 1e-12) -> bool:
        """Entrywise interval-hull check (necessary condition)."""
        lo, hi = self.interval_hull()
        a = np.asarray(a, dtype=np.float64)
        return bool((a >= lo - tol).all() and (a <= hi + tol).all())


def minkowski_sum(z1: Zonotope, z2: Zonotope) -> Zonotope:
    if z1.dim != z2.dim:
        raise DimensionError(f"minkowski_sum dims {z1.dim} vs {z2.dim}")
    return Zonotope(z1.center + z2.center,
                    np.concatenate([z1.generators, z2.generators], axis=1))


def linear_map(a, z: Zonotope) -> Zonotope:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[1] != z.dim:
        raise DimensionError(f"linear_map matrix {a.shape} vs zonotope dim {z.dim}")
    return Zonotope(a @ z.center, a @ z.generators)


def matzono_times_zono(m: MatrixZonotope, z: Zonotope) -> Zonotope:
    """Enclosure of {M x : M in m, x in z}.

    Columns: the center matrix applied to z's generators, then every
    matrix generator applied to z's center and to each of z's
    generators.
    """
    if m.center.shape[1] != z.dim:
        raise DimensionError(f"matrix zonotope {m.center.shape} vs zonotope dim {z.dim}")
    center = m.center @ z.center
    parts = [m.center @ z.generators]
    if len(m.generators):
        stacked = np.concatenate([z.center[:, None], z.generators], axis=1)  # (p, 1+mz)
        tail = np.einsum("gnp,pm->ngm", m.generators, stacked)
        parts.append(tail.reshape(center.shape[0], -1))
    return Zonotope(center, np.concatenate(parts, axis=1))


def reduce_order(z: Zonotope, max_order: int) -> Zonotope:
    """Girard folding: the smallest generators (by l1 minus linf norm)
    collapse into an axis-aligned box; the result encloses the input."""
    if max_order < 1:
        raise ContractError(f"max_order must be >= 1, got {max_order}")
    n, m = z.generators.shape
    if m <= n * max_order:
        return z
    g = z.generators
    scores = np.abs(g).sum(axis=0) - np.abs(g).max(axis=0)
    order = np.argsort(scores, kind="stable")
    n_keep = n * max_order - n
    fold = order[: m - n_keep]
    keep = order[m - n_keep:]
    box = np.diag(np.abs(g[:, fold]).sum(axis=1))
    return Zonotope(z.center, np.concatenate([g[:, keep], box], axis=1))


def area_2d(z: Zonotope, dims=(0, 1)) -> float:
    """Exact area of the 2-D projection onto ``dims``."""
    g = z.generators[list(dims), :]
    if g.shape[1] < 2:
        return 0.0
    cross = np.outer(g[0], g[1]) - np.outer(g[1], g[0])
    return float(4.0 * np.abs(np.triu(cross, k=1)).sum())


def _polygon_vertices(center, g):
    """Vertices of a 2-D zonotope, counter-clockwise."""
    norms = np.abs(g).sum(axis=0)
    g = g[:, norms > 0]
    m = g.shape[1]
    if m == 0:
        return center[None, :]
    flip = (g[1] < 0) | ((g[1] == 0) & (g[0] < 0))
    g = np.where(flip, -g, g)
    order = np.argsort(np.arctan2(g[1], g[0]), kind="stable")
    g = g[:, order]
    first = np.empty((m + 1, 2))
    first[0] = center - g.sum(axis=1)
    np.cumsum(2.0 * g.T, axis=0, out=first[1:])
    first[1:] += first[0]
    second = 2.0 * center - first[1:m]
    return np.concatenate([first, second], axis=0)


def _contains_polygon(z: Zonotope, p, tol):
    verts = _polygon_vertices(z.center, z.generators)
    if len(verts) == 1:
        return bool(np.linalg.norm(p - verts[0]) <= tol * max(1.0, np.abs(verts[0]).max()))
    scale = max(1.0, float(np.abs(verts - z.center).max()))
    a = verts
    b = np.roll(verts, -1, axis=0)
    edge = b - a
    rel = p - a
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    lengths = np.linalg.norm(edge, axis=1)
    ok = lengths > 0
    return bool((cross[ok] >= -tol * scale * lengths[ok]).all())


def _contains_lp(z: Zonotope, p, tol):
    n, m = z.generators.shape
    rhs = p - z.center
    if m == 0:
        return bool(np.linalg.norm(rhs) <= tol * max(1.0, np.abs(z.center).max()))
    cost = np.zeros(m + 1)
    cost[-1] = 1.0
    a_eq = np.concatenate([z.generators, np.zeros((n, 1))], axis=1)
    eye = np.eye(m)
    a_ub = np.block([[eye, -np.ones((m, 1))], [-eye, -np.ones((m, 1))]])
    res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(2 * m), A_eq=a_eq, b_eq=rhs,
                  bounds=[(None, None)] * m + [(0, None)], method="highs")
    if not res.success:
        return False
    return bool(res.x[-1] <= 1.0 + tol)


def contains_point(z: Zonotope, p, dims=None, tol: float = 1e-9) -> bool:
    """Membership test with boundary tolerance.

    2-D instances use the exact vertex polygon; higher dimensions solve
    the minimum coefficient norm as a linear program.
    """
    if dims is not None:
        z = Zonotope(z.center[list(dims)], z.generators[list(dims), :])
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != z.dim:
        raise DimensionError(f"point dim {p.shape[0]} vs zonotope dim {z.dim}")
    lo, hi = z.interval_hull()
    slack = tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    if ((p < lo - slack) | (p > hi + slack)).any():
        return False
    if z.dim == 2:
        return _contains_polygon(z, p, tol)
    return _contains_lp(z, p, tol)


# -- model identification and reachability -------------------------------


@dataclass
class ReachConfig:
    state_dim: int = 4
    horizon: int = 50
    noise_w: float = 0.005            # noise zonotope radius per state dim
    init_pos_gen: float = 0.05        # measurement spread, meters
    init_vel_gen: float = 0.05        # measurement spread, m/s
    max_order: int = 5
    memory_cap: int = 20000           # max transition pairs per trial
    k_obs: int = 10                   # observed steps before prediction
    dt: float = 0.1

    def noise_zonotope(self) -> Zonotope:
        w = np.full(self.state_dim, self.noise_w, dtype=np.float64)
        return Zonotope(np.zeros(self.state_dim), np.diag(w))

    def initial_set(self, state) -> Zonotope:
        gens = np.diag([self.init_pos_gen, self.init_pos_gen,
                        self.init_vel_gen, self.init_vel_gen])
        return Zonotope(np.asarray(state, dtype=np.float64), gens)


def stack_transitions(chunks, state_dim: int = 4):
    """All consecutive real-state pairs of all chunks: (X_now, X_next),
    each (state_dim, T)."""
    prev, nxt = [], []
    for chunk in chunks:
        real = int(chunk.padding.sum())
        states = np.asarray(chunk.values[:real, :state_dim], dtype=np.float64)
        if real >= 2:
            prev.append(states[:-1])
            nxt.append(states[1:])
    if not prev:
        return (np.zeros((state_dim, 0)), np.zeros((state_dim, 0)))
    x_now = np.concatenate(prev, axis=0).T
    x_next = np.concatenate(nxt, axis=0).T
    return x_now, x_next


def identify_models(chunks, noise_zonotope: Zonotope, dt: float = 0.1,
                    memory_cap: int = 20000, rcond: float = 1e-10) -> MatrixZonotope:
    """Matrix zonotope of linear models consistent with the cluster data.

    Stacks the transition pairs, subtracts the per-column noise matrix
    zonotope from the successor matrix, and multiplies by the
    pseudoinverse of the predecessor matrix. ``dt`` is the sampling
    interval of the transition data (metadata; the identified model maps
    one sample to the next).

    Raises DataExcluded with reason ``memory_cap`` or ``rank_deficient``.
    """
    del dt
    x_now, x_next = stack_transitions(chunks, noise_zonotope.dim)
    n, t = x_now.shape
    if t > memory_cap:
        raise DataExcluded("memory_cap", f"{t} transitions exceed cap {memory_cap}")
    if t < n:
        raise DataExcluded("rank_deficient", f"only {t} transitions for state dim {n}")
    svals = np.linalg.svd(x_now, compute_uv=False)
    if svals[-1] <= rcond * svals[0]:
        raise DataExcluded("rank_deficient", "predecessor matrix is rank deficient")
    pinv = np.linalg.pinv(x_now, rcond=rcond)          # (t, n)
    center = x_next @ pinv
    g_w = noise_zonotope.generators                    # (n, m_w)
    if g_w.shape[1] == 0:
        gens = np.zeros((0, n, n))
    else:
        gens = np.einsum("kj,tl->tjkl", g_w, pinv).reshape(-1, n, n)
    return MatrixZonotope(center, gens)


@dataclass
class ReachResult:
    sets: list
    truncated: bool = False


def reach(models: MatrixZonotope, r0: Zonotope, noise_zonotope: Zonotope,
          n_steps: int, max_order: int = 5, overflow: float = 1e9) -> ReachResult:
    """Iterate the model set from r0 for n_steps.

    Each step maps the current set through the matrix zonotope, adds the
    noise zonotope, and reduces the generator order. If any entry
    exceeds ``overflow`` the horizon is truncated at the last finite
    step and the result is flagged.
    """
    sets = []
    current = r0
    for _ in range(n_steps):
        nxt = reduce_order(minkowski_sum(matzono_times_zono(models, current), noise_zonotope),
                           max_order)
        bound = max(np.abs(nxt.center).max(initial=0.0), np.abs(nxt.generators).max(initial=0.0))
        if not np.isfinite(bound) or bound > overflow:
            return ReachResult(sets, truncated=True)
        sets.append(nxt)
        current = nxt
    return ReachResult(sets, truncated=False)


@dataclass
class TrialResult:
    """Outcome of one reachability trial on a test chunk."""

    chunk_id: str
    method: str
    status: str                      # "ok" or "excluded"
    reason: str = ""                 # exclusion reason when excluded
    sets: list = field(default_factory=list)
    areas: list = field(default_factory=list)
    included: list = field(default_factory=list)
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok"
