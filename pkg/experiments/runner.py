"""Shared plumbing for the experiment sweeps.

Work items (path groups or sweep cells) fan out over a thread pool and are
collected by index, so aggregation always runs in work-item order and the
results do not depend on the worker count.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

from config import VERSION, ExperimentConfig
from errors import ConfigError
from experiments.fit import Provenance, RateFit, RateRow, rate_fit
from model.diffusion import DiffusionModel, builtin
from simulate.brownian import path_blocks

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ProgressCallback = Callable[[int, int, str], None]

MARKOVIAN_COUPLING = "markovian-coupling substitute"


@dataclass
class ExperimentContext:
    """Validated config plus the model and run-time knobs of one experiment run."""
    config: ExperimentConfig
    model: DiffusionModel
    workers: int = 1
    on_progress: ProgressCallback | None = None
    deviations: list[str] = field(default_factory=list)

    @classmethod
    def from_config(cls, config: ExperimentConfig,
                    on_progress: ProgressCallback | None = None) -> "ExperimentContext":
        model = builtin(config.model.name, config.model.params)
        return cls(config=config, model=model, workers=config.workers, on_progress=on_progress)

    def flag(self, deviation: str):
        if deviation not in self.deviations:
            logger.warning("Deviation: %s", deviation)
            self.deviations.append(deviation)

    def provenance(self) -> Provenance:
        return Provenance(
            config_hash=self.config.config_hash(),
            version=f"wasserpath {VERSION}",
            deviations=list(self.deviations),
            config=self.config.model_dump(mode="json"),
        )


def run_items(fn: Callable[[T], R], items: Sequence[T], workers: int = 1,
              on_progress: ProgressCallback | None = None, label: str = "item") -> list[R]:
    """Apply ``fn`` to every item on a thread pool; results keep the item order.

    Args:
        fn: Work function, called once per item
        items: Work items
        workers: Pool size
        on_progress: Callback(completed, total, status_text)
        label: Name used in progress messages
    """
    total = len(items)
    results: list = [None] * total
    completed = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(futures):
            idx = futures[future]
            results[idx] = future.result()
            completed += 1
            logger.debug("%s %d/%d done", label, completed, total)
            if on_progress:
                on_progress(completed, total, f"{label} {completed}/{total}")
    return results


def block_groups(n_paths: int, group: int) -> list[list[tuple[int, int, int]]]:
    """Path blocks chunked into fixed groups of ``group`` blocks."""
    blocks = list(path_blocks(n_paths))
    return [blocks[i:i + group] for i in range(0, len(blocks), group)]


def dyadic_levels(n_list: Sequence[int]) -> list[int]:
    """Levels j with N = N_0·2^j for every entry of the N-list."""
    base = n_list[0]
    levels = []
    for n in n_list:
        ratio, rem = divmod(n, base)
        if rem or ratio & (ratio - 1):
            raise ConfigError(
                f"N={n} is not {base}·2^j; shared Brownian paths need a dyadic N-list",
                key="grid.N")
        levels.append(ratio.bit_length() - 1)
    return levels


def mean_and_se(values) -> tuple[float, float]:
    """Compensated mean and standard error of the finite entries of ``values``."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    mean = math.fsum(v) / v.size
    if v.size == 1:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2) / (v.size - 1)
    return mean, math.sqrt(var / v.size)


def root_mean_square(values) -> tuple[float, float]:
    """E[v²]^{1/2} with its delta-method standard error."""
    mean, se = mean_and_se(np.square(values))
    if not mean > 0.0:
        return max(mean, 0.0) ** 0.5, 0.0
    root = math.sqrt(mean)
    return root, se / (2.0 * root)


def fit_rows(rows: list[RateRow], use_weights: bool = True,
             floor: float = 0.0) -> tuple[RateFit | None, str | None]:
    """Rate fit over the rows with an estimate above ``floor``; a note instead when that fails."""
    usable = [r for r in rows if r.estimate > floor and math.isfinite(r.estimate)]
    if len(usable) < 3:
        note = f"rate indeterminate: {len(usable)} estimates above {floor:g}, need 3"
        logger.warning(note)
        return None, note
    points = np.array([[r.N, r.estimate] for r in usable])
    weights = None
    if use_weights:
        se = np.array([r.std_error for r in usable])
        weights = se if np.all(np.isfinite(se)) else None
    return rate_fit(points, weights), None


def constant_sigma(model: DiffusionModel) -> bool:
    """True when σ′ vanishes, so the Euler scheme matches the diffusion noise exactly."""
    sigma1 = model.derivative("sigma1")
    if sigma1 is None:
        return False
    lo, hi = model.support(1.0)
    probes = np.linspace(lo, hi, 101)
    return bool(np.all(sigma1(probes) == 0.0))
