import logging
from dataclasses import dataclass, field

import numpy as np

from bridge.paths import bridge_path, extract_bridge_bm
from bridge.score import BridgeScore
from coupling.fill import euler_bridge_fill
from coupling.marginal import coarse_marginal_coupling
from density.conditional import ConditionalLaws
from errors import CouplingError, DomainExitError
from model.diffusion import DiffusionModel
from simulate.brownian import Stream, block_generator, refine_increments
from simulate.euler import GridSpec, PathBundle, euler_on_refined_grid

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("path_index", "max_coarse_gap", "sup_ybar_chi", "sup_x_chitilde", "censored_flag")


@dataclass
class CoupledPathSet:
    """Every stage of the pathwise coupling for one block of paths.

    Fine-grid arrays hold N + 1 columns; refined arrays hold N·2^level + 1.
    ``chi`` stores the restarted values at each s_l and ``chi_left`` the
    left limits χ_{s_{l+1}−}.
    """
    grid: GridSpec
    level: int
    path_index: np.ndarray
    x: np.ndarray
    ybar_coarse: np.ndarray
    ybar: np.ndarray
    beta: np.ndarray
    chi: np.ndarray
    chi_left: np.ndarray
    chi_tilde: np.ndarray
    max_coarse_gap: np.ndarray
    sup_ybar_chi: np.ndarray
    sup_x_chitilde: np.ndarray
    censored: np.ndarray
    clipped: int = 0
    fill_failures: list[tuple[int, int]] = field(default_factory=list)

    def summary_rows(self) -> list[tuple]:
        return [
            (int(i), float(c), float(y), float(x), int(f))
            for i, c, y, x, f in zip(self.path_index, self.max_coarse_gap, self.sup_ybar_chi,
                                     self.sup_x_chitilde, self.censored)
        ]


def reconstruct_beta(model: DiffusionModel, ybar: np.ndarray, grid: GridSpec) -> np.ndarray:
    """β_{t_k} − β_{t_{k−1}} = (Ȳ_{t_k} − Ȳ_{t_{k−1}} − b(Ȳ_{t_{k−1}})Δ)/σ(Ȳ_{t_{k−1}})."""
    ybar = np.atleast_2d(ybar)
    left = ybar[:, :-1]
    outside = np.isfinite(left) & ~model.in_domain(left)
    if outside.any():
        row, step = np.argwhere(outside)[0]
        raise DomainExitError(int(step), float(left[row, step]))
    return (np.diff(ybar, axis=1) - model.b(left) * grid.dt) / model.s(left)


def refine_beta(beta: np.ndarray, grid: GridSpec, level: int, seed: int, block: int) -> np.ndarray:
    """Refine β by independent Brownian midpoints down to ``level``."""
    h = grid.dt
    for j in range(1, level + 1):
        z = block_generator(seed, Stream.BETA, block, j).standard_normal(
            (beta.shape[0], beta.shape[1]))
        beta = refine_increments(beta, h, z)
        h *= 0.5
    return beta


def restarted_euler(model: DiffusionModel, grid: GridSpec, increments: np.ndarray,
                    restarts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euler scheme on the refined grid restarted at each coarse node from ``restarts``.

    Returns the values (restart value at each s_l) and the left limits at s_{l+1}.
    """
    rows, steps = increments.shape
    factor = steps // grid.N
    nodes = grid.coarse_indices * factor
    dt = grid.T / steps
    values = np.empty((rows, steps + 1))
    left_limits = np.empty((rows, grid.n))
    for l in range(grid.n):
        x = restarts[:, l].copy()
        values[:, nodes[l]] = x
        for k in range(nodes[l], nodes[l + 1]):
            x = x + model.s(x) * increments[:, k] + model.b(x) * dt
            values[:, k + 1] = x
        left_limits[:, l] = x
    return values, left_limits


def _sup_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.max(np.abs(a - b), axis=1)


def assemble_coupled_paths(model: DiffusionModel, grid: GridSpec, X: PathBundle, seed: int,
                           laws: ConditionalLaws | None, score: BridgeScore, block: int = 0,
                           path_index: np.ndarray | None = None, fill_nodes: int = 48,
                           fill_width: float = 8.0) -> CoupledPathSet:
    """Build Ȳ, β, χ and χ̃ for the reference paths X of one path block.

    X must sit on the refined grid of its ``level``; gaps are sup-norms over
    the refined nodes, with the left limits at each coarse node included.
    """
    level = X.level
    factor = 2 ** level
    rows = X.values.shape[0]
    if X.values.shape[1] != grid.N * factor + 1:
        raise CouplingError(f"reference paths have {X.values.shape[1]} nodes, expected "
                            f"{grid.N * factor + 1} for N={grid.N} at level {level}")
    if path_index is None:
        path_index = np.arange(rows)

    coarse = coarse_marginal_coupling(model, grid, X, laws)
    filled = euler_bridge_fill(model, grid, coarse.values, seed, block, fill_nodes, fill_width)
    censored = X.censored | filled.failed_rows | ~np.all(np.isfinite(filled.values), axis=1)

    ybar = np.where(censored[:, None], np.nan, filled.values)
    safe = np.where(censored[:, None], model.x0, ybar)
    beta = np.where(censored[:, None], 0.0, reconstruct_beta(model, safe, grid))
    beta_fine = refine_beta(beta, grid, level, seed, block)

    ybar_bundle = PathBundle(grid=grid, values=safe, increments=beta, level=0, label="euler")
    ybar_fine = euler_on_refined_grid(model, ybar_bundle, beta_fine)
    restarts = safe[:, grid.coarse_indices]
    chi, chi_left = restarted_euler(model, grid, beta_fine, restarts)

    x_values = np.where(censored[:, None], model.x0, X.values)
    nodes = grid.coarse_indices * factor
    chi_tilde = np.empty_like(x_values)
    for l in range(grid.n):
        lo, hi = nodes[l], nodes[l + 1]
        span = (grid.coarse_times[l], grid.coarse_times[l + 1])
        piece = PathBundle(grid=GridSpec(T=span[1] - span[0], N=hi - lo),
                           values=x_values[:, lo:hi + 1], increments=X.increments[:, lo:hi],
                           label="reference", offset=span[0])
        rng = block_generator(seed, Stream.ENDPOINT, block, l)
        w_l = extract_bridge_bm(model, piece, rng, x_values[:, hi], score)
        bridged = bridge_path(model, chi[:, lo], chi_left[:, l], span, w_l, score)
        chi_tilde[:, lo:hi + 1] = bridged.values

    xs = x_values[:, nodes]
    max_coarse_gap = _sup_gap(xs, restarts)
    jump_ref = ybar_fine[:, nodes[1:]]
    sup_ybar_chi = np.maximum(_sup_gap(ybar_fine, chi), _sup_gap(jump_ref, chi_left))
    sup_x_chitilde = np.maximum(_sup_gap(x_values, chi_tilde),
                                _sup_gap(x_values[:, nodes[1:]], chi_left))
    for arr in (max_coarse_gap, sup_ybar_chi, sup_x_chitilde):
        arr[censored] = np.nan
    if censored.any():
        logger.info("Coupled block %d: %d of %d paths censored", block, int(censored.sum()), rows)
    return CoupledPathSet(
        grid=grid, level=level, path_index=np.asarray(path_index), x=X.values,
        ybar_coarse=coarse.values, ybar=ybar, beta=beta, chi=chi, chi_left=chi_left,
        chi_tilde=chi_tilde, max_coarse_gap=max_coarse_gap, sup_ybar_chi=sup_ybar_chi,
        sup_x_chitilde=sup_x_chitilde, censored=censored, clipped=coarse.clipped,
        fill_failures=filled.failed,
    )
