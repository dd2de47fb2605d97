import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from bridge.paths import bridge_path
from bridge.score import BridgeScore
from errors import ModelError
from model.diffusion import DiffusionModel
from simulate.brownian import Stream, block_generator

logger = logging.getLogger(__name__)

CHUNK = 4096
P_THRESHOLD = 0.01


@dataclass
class BridgeCheckReport:
    """Two-sample KS comparison of bridged paths against direct simulation."""
    model: str
    samples: int
    steps: int
    shuffled: bool
    pvalues: dict[str, float] = field(default_factory=dict)
    statistics: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p > P_THRESHOLD for p in self.pvalues.values())


def reconstruct_check(model: DiffusionModel, horizon: float, M: int, seed: int,
                      steps: int = 256, shuffle: bool = False,
                      score: BridgeScore | None = None) -> BridgeCheckReport:
    """Draw X_T from the exact law, bridge x0 → X_T, and compare with direct paths.

    Probes are the values at T/4 and T/2 and the increment over [T/2, T].
    With ``shuffle`` the increment is taken against an independently drawn
    endpoint, which must break the last comparison.
    """
    law = model.exact_law
    if law is None:
        raise ModelError(f"{model.describe()} has no exact law to check bridges against")
    if steps % 4:
        raise ValueError("steps must be a multiple of 4")
    evaluate = score if score is not None else BridgeScore(model, horizon=horizon)
    quarter, half = steps // 4, steps // 2
    direct = {"quarter": [], "midpoint": [], "increment": []}
    bridged = {"quarter": [], "midpoint": [], "increment": []}

    for chunk, first in enumerate(range(0, M, CHUNK)):
        rows = min(CHUNK, M - first)
        x0 = np.full(rows, model.x0)

        rng = block_generator(seed, Stream.CHECK, chunk, 0)
        dq = math.sqrt(horizon / 4)
        x_q = law.step(x0, horizon / 4, rng.standard_normal(rows) * dq)
        x_h = law.step(x_q, horizon / 4, rng.standard_normal(rows) * dq)
        x_t = law.step(x_h, horizon / 2, rng.standard_normal(rows) * math.sqrt(horizon / 2))
        direct["quarter"].append(x_q)
        direct["midpoint"].append(x_h)
        direct["increment"].append(x_t - x_h)

        ends = block_generator(seed, Stream.ENDPOINT, chunk, 0)
        z_t = law.step(x0, horizon, ends.standard_normal(rows) * math.sqrt(horizon))
        noise = block_generator(seed, Stream.CHECK, chunk, 1)
        inc = noise.standard_normal((rows, steps)) * math.sqrt(horizon / steps)
        path = bridge_path(model, x0, z_t, (0.0, horizon), inc, evaluate)
        if shuffle:
            z_t = law.step(x0, horizon, ends.standard_normal(rows) * math.sqrt(horizon))
        bridged["quarter"].append(path.values[:, quarter])
        bridged["midpoint"].append(path.values[:, half])
        bridged["increment"].append(z_t - path.values[:, half])

    report = BridgeCheckReport(model=model.describe(), samples=M, steps=steps, shuffled=shuffle)
    for probe in direct:
        result = ks_2samp(np.concatenate(bridged[probe]), np.concatenate(direct[probe]))
        report.pvalues[probe] = float(result.pvalue)
        report.statistics[probe] = float(result.statistic)
    logger.info("Bridge reconstruction check for %s (shuffle=%s): p-values %s",
                report.model, shuffle,
                ", ".join(f"{k}={v:.3g}" for k, v in report.pvalues.items()))
    return report
