"""Bootstrap bias correction of the unit-level residual variance.

The out-of-bag residual variance also contains the estimation error of the
fixed part. That error is estimated by refitting the learner on
``f_oob + e*`` (``e*`` resampled from the centred out-of-bag residuals)
and averaging the squared change of the out-of-bag predictions.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._rng import STREAM_BIAS, substream, substream_seed
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

FLOOR_FACTOR = 1e-8


@dataclass(frozen=True)
class BiasCorrectionResult:
    sigma2_naive: float
    K_hat: float
    sigma2_bc: float
    B: int
    floored: bool = False
    replicate_K: np.ndarray | None = None


def correction_term(oob, refits) -> float:
    """Average over replicates of the per-observation mean squared change."""
    oob = np.asarray(oob, dtype=np.float64)
    per_rep = [float(np.mean((oob - r) ** 2)) for r in refits]
    return math.fsum(per_rep) / len(per_rep)


def _replicate(model, X, base, resid, b):
    rng = substream(model.config.seed, STREAM_BIAS, b, 0)
    y_star = base + rng.choice(resid, size=resid.size, replace=True)
    fitted = model.learner.train(X, y_star, substream_seed(model.config.seed, STREAM_BIAS, b, 1))
    refit = model.learner.predict_oob(fitted)
    return float(np.mean((base - refit) ** 2))


def bias_corrected_variance(model, survey, B: int, n_jobs: int = 1) -> BiasCorrectionResult:
    """Correct ``model.vc.sigma2_eps`` with ``B`` bootstrap refits.

    The result is floored at ``1e-8 var(y)`` (with a logged warning) so that
    it stays positive.
    """
    if B < 1:
        raise ConfigError("B must be a positive integer")
    base = np.asarray(model.oob, dtype=np.float64)
    resid = survey.y - base
    resid = resid - resid.mean()
    X = survey.X
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            per_rep = list(pool.map(lambda b: _replicate(model, X, base, resid, b), range(B)))
    else:
        per_rep = [_replicate(model, X, base, resid, b) for b in range(B)]
    per_rep = np.array(per_rep)
    # exactly rounded sum: independent of replicate order
    K_hat = math.fsum(per_rep) / B
    naive = model.vc.sigma2_eps
    floor = FLOOR_FACTOR * float(np.var(survey.y))
    corrected = naive - K_hat
    floored = corrected < floor
    if floored:
        logger.warning("bias-corrected residual variance %.6g floored at %.6g", corrected, floor)
        corrected = min(floor, naive)
    return BiasCorrectionResult(sigma2_naive=naive, K_hat=K_hat, sigma2_bc=float(corrected),
                                B=B, floored=bool(floored), replicate_K=per_rep)
