import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

ENUMERATION_LIMIT = 9
WEIGHT_TOL = 1.0e-12


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure on the real line."""
    atoms: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float).ravel()
        if atoms.size == 0:
            raise ValueError("a measure needs at least one atom")
        return cls(atoms, np.full(atoms.size, 1.0 / atoms.size))

    def __post_init__(self):
        object.__setattr__(self, "atoms", np.asarray(self.atoms, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.atoms.shape != self.weights.shape or self.atoms.ndim != 1:
            raise ValueError("atoms and weights must be 1-D arrays of equal length")
        if self.atoms.size == 0:
            raise ValueError("a measure needs at least one atom")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {float(self.weights.sum())!r}, not 1")

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def __len__(self) -> int:
        return self.atoms.size


def _check_p(p: float):
    if not p >= 1.0:
        raise ValueError(f"p must be at least 1, got {p}")


def quantile_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 1.0) -> float:
    """∫₀¹|F_µ⁻¹(u) − F_ν⁻¹(u)|^p du for step quantile functions, by merging breakpoints."""
    _check_p(p)
    order1, order2 = np.argsort(mu.atoms, kind="stable"), np.argsort(nu.atoms, kind="stable")
    a, wa = mu.atoms[order1], mu.weights[order1]
    b, wb = nu.atoms[order2], nu.weights[order2]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.unique(np.concatenate([[0.0], ca, cb]))
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    ia = np.minimum(np.searchsorted(ca, mids), a.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids), b.size - 1)
    return float(np.diff(breaks) @ (np.abs(a[ia] - b[ib]) ** p))


def empirical_w1d(samples1, samples2, p: float = 1.0) -> float:
    """W_p between two empirical measures by sorted (monotone) matching.

    Unequal sample counts are split to their least common multiple of
    equal-weight atoms, which the breakpoint merge does without materializing.
    """
    _check_p(p)
    x = np.sort(np.asarray(samples1, dtype=float).ravel())
    y = np.sort(np.asarray(samples2, dtype=float).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("empirical_w1d needs non-empty samples")
    if x.size == y.size:
        return float(np.mean(np.abs(x - y) ** p) ** (1.0 / p))
    cost = quantile_cost(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y), p)
    return cost ** (1.0 / p)


def _enumerate(cost: np.ndarray) -> float:
    n = cost.shape[0]
    rows = np.arange(n)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best:
            best = total
    return float(best)


def ot_bruteforce(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 1.0,
                  use_solver: bool = True) -> float:
    """Exact optimal transport cost^{1/p}, independent of the monotone-coupling argument.

    Equal-size uniform measures up to ``ENUMERATION_LIMIT`` atoms are solved by
    enumerating every matching; larger ones by a min-cost assignment, and
    general weights by the transport linear program.
    """
    _check_p(p)
    cost = np.abs(mu.atoms[:, None] - nu.atoms[None, :]) ** p
    square = len(mu) == len(nu) and mu.is_uniform and nu.is_uniform
    if square and len(mu) <= ENUMERATION_LIMIT:
        return (_enumerate(cost) / len(mu)) ** (1.0 / p)
    if not use_solver:
        raise ValueError(
            f"{len(mu)}x{len(nu)} instance exceeds the enumeration limit "
            f"of {ENUMERATION_LIMIT} atoms and the solver is disabled")
    if square:
        r, c = linear_sum_assignment(cost)
        return (float(cost[r, c].sum()) / len(mu)) ** (1.0 / p)
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    result = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([mu.weights, nu.weights]),
                     bounds=(0.0, None), method="highs")
    if not result.success:
        raise ValueError(f"transport program failed: {result.message}")
    return max(float(result.fun), 0.0) ** (1.0 / p)
