"""Query-adaptive matching score.

Given a unit query descriptor q and a set of unit region descriptors
(rows of F), the match score is the largest cosine between q and any
nonnegative combination of the regions:

    max_z  qT F z / ||F z||   s.t.  z >= 0.

Fixing the scale with qT F z = 1 turns this into a small convex QP,
min ||F z||^2 over the same cone slice, solved here by a primal
active-set method.  The score is 1/||F z|| at the optimum, which lies
in [best single-region cosine, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .aggregate import GlobalDescriptor
from .base_regions import BaseRegionSet
from .cfm_store import CfmTensor
from .errors import ValidationError

_RIDGE = 1e-12


class SolverStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class SolverConfig:
    objective_tolerance: float = 1e-10
    constraint_tolerance: float = 1e-9
    max_iterations: int | None = None  # None: 10 K + 100

    def __post_init__(self):
        if self.objective_tolerance <= 0 or self.constraint_tolerance <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def iteration_cap(self, k: int) -> int:
        return self.max_iterations if self.max_iterations is not None else 10 * k + 100


@dataclass(frozen=True, eq=False)
class QamProblem:
    query: np.ndarray
    regions: BaseRegionSet

    def __post_init__(self):
        q = np.asarray(self.query, dtype=np.float64)
        if q.ndim != 1:
            raise ValidationError(f"query must be a vector, got shape {q.shape}")
        if not np.isfinite(q).all():
            raise ValidationError("query contains non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValidationError(f"query must be unit-norm, got norm {np.linalg.norm(q)}")
        if q.shape[0] != self.regions.dim:
            raise ValidationError(
                f"query dim {q.shape[0]} does not match region dim {self.regions.dim}"
            )
        q.flags.writeable = False
        object.__setattr__(self, "query", q)


@dataclass(frozen=True, eq=False)
class QamSolution:
    weights: np.ndarray
    similarity: float
    status: SolverStatus
    iterations: int = 0

    def __post_init__(self):
        z = np.asarray(self.weights, dtype=np.float64)
        if z.ndim != 1 or not np.isfinite(z).all() or (z < 0).any():
            raise ValidationError("weights must be nonnegative finite floats")
        z.flags.writeable = False
        object.__setattr__(self, "weights", z)


def _kkt_step(G: np.ndarray, c: np.ndarray, free: list[int]):
    """Minimize zTGz over the free coordinates subject to cTz = 1.

    Returns (z_free, lam).  A singular system (duplicate regions in the
    working set) is perturbed by a tiny ridge and re-solved.
    """
    nf = len(free)
    a = np.zeros((nf + 1, nf + 1))
    a[:nf, :nf] = 2.0 * G[np.ix_(free, free)]
    a[:nf, nf] = -c[free]
    a[nf, :nf] = c[free]
    b = np.zeros(nf + 1)
    b[nf] = 1.0
    try:
        sol = np.linalg.solve(a, b)
        if not np.isfinite(sol).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        a[:nf, :nf] += 2.0 * _RIDGE * np.eye(nf)
        try:
            sol = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(a, b, rcond=None)[0]
        if not np.isfinite(sol).all():
            sol = np.linalg.lstsq(a, b, rcond=None)[0]
    return sol[:nf], float(sol[nf])


def solve(problem: QamProblem, config: SolverConfig | None = None) -> QamSolution:
    """Active-set solve of min ||Fz||^2 s.t. qTFz = 1, z >= 0.

    Infeasible instances (no region with positive correlation to the
    query) return similarity 0 and zero weights.  If the iteration cap is
    hit, the best feasible iterate seen so far is returned.
    """
    cfg = config or SolverConfig()
    r = problem.regions.descriptors
    k = r.shape[0]
    g = r @ r.T
    c = r @ problem.query
    if c.max() <= 0.0:
        return QamSolution(np.zeros(k), 0.0, SolverStatus.INFEASIBLE, 0)

    z = np.zeros(k)
    start = int(np.argmax(c))
    z[start] = 1.0 / c[start]
    free = [start]
    cap = cfg.iteration_cap(k)
    best_z, best_obj = z.copy(), float(z @ g @ z)
    status = SolverStatus.MAX_ITERATIONS
    iterations = 0

    for iterations in range(1, cap + 1):
        z_free, lam = _kkt_step(g, c, free)
        if z_free.min() >= -cfg.constraint_tolerance:
            z = np.zeros(k)
            z[free] = np.maximum(z_free, 0.0)
            z /= c @ z
            obj = float(z @ g @ z)
            if obj < best_obj:
                best_z, best_obj = z.copy(), obj
            grad = 2.0 * (g @ z)
            clamped = [i for i in range(k) if i not in free]
            if not clamped:
                status = SolverStatus.OPTIMAL
                break
            mu = grad[clamped] - lam * c[clamped]
            dual_tol = max(cfg.objective_tolerance, 1e-12 * (1.0 + abs(lam)))
            if mu.min() >= -dual_tol:
                status = SolverStatus.OPTIMAL
                break
            free.append(clamped[int(np.argmin(mu))])
            free.sort()
        else:
            # partial step to the first coordinate that hits zero
            cur = z[free]
            step = z_free - cur
            blocking, alpha = -1, 1.0
            for i, zi in enumerate(z_free):
                if zi < 0.0 and step[i] < 0.0:
                    a_i = cur[i] / -step[i]
                    if a_i < alpha:
                        blocking, alpha = i, a_i
            moved = cur + alpha * step
            moved[blocking] = 0.0
            z = np.zeros(k)
            z[free] = np.maximum(moved, 0.0)
            scale = float(c @ z)
            if scale <= 0.0:  # numerically dead iterate; restart from the vertex
                z = np.zeros(k)
                z[start] = 1.0 / c[start]
                free = [start]
                continue
            z /= scale
            obj = float(z @ g @ z)
            if obj < best_obj:
                best_z, best_obj = z.copy(), obj
            free.pop(blocking)
            if not free:
                free = [start]

    if status is not SolverStatus.OPTIMAL:
        z = best_z
    num = float(c @ z)
    den = float(np.sqrt(z @ g @ z))
    similarity = num / den if den > 0.0 else 0.0
    return QamSolution(z, similarity, status, iterations)


def qam_similarity(
    query: GlobalDescriptor | np.ndarray,
    regions: BaseRegionSet,
    config: SolverConfig | None = None,
) -> float:
    vec = query.vector if isinstance(query, GlobalDescriptor) else np.asarray(query, dtype=np.float64)
    return solve(QamProblem(vec, regions), config).similarity


def merged_heatmap(t: CfmTensor, assignment: dict[int, int], weights: np.ndarray) -> np.ndarray:
    """Weighted sum of feature maps, min-max scaled to [0, 1].

    Each retained channel d contributes weights[assignment[d]] times its
    activation map.  An all-zero sum stays zero; a constant nonzero map
    scales to all ones.
    """
    z = np.asarray(weights, dtype=np.float64)
    if z.ndim != 1 or (z < 0).any() or not np.isfinite(z).all():
        raise ValidationError("weights must be nonnegative finite floats")
    m = np.zeros((t.height, t.width), dtype=np.float64)
    for channel, cluster in assignment.items():
        if not 0 <= channel < t.channels:
            raise ValidationError(f"channel {channel} outside tensor with {t.channels} channels")
        if not 0 <= cluster < z.shape[0]:
            raise ValidationError(f"cluster {cluster} outside weight vector of length {z.shape[0]}")
        m += z[cluster] * t.values[:, :, channel].astype(np.float64)
    mx = m.max()
    if mx == 0.0:
        return np.zeros_like(m)
    mn = m.min()
    if mx == mn:
        return np.ones_like(m)
    return (m - mn) / (mx - mn)
