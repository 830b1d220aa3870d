"""Evidence (marginal likelihood) estimation by importance sampling.

The flow at temperature T is the proposal; T > 1 widens it, which tames the
right tail of the importance ratios when the fit is imperfect. All weight
arithmetic happens in shifted log space, so the estimator never exponentiates
an unshifted log weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import diffgraph as dg
from .flow import FlowModel
from .mathcore import RngStream
from .targets import TargetModel

ESS_RELIABLE_FLOOR = 10.0


@dataclass
class EvidenceEstimate:
    log_Z_hat: float
    std_err_log: float
    n: int
    T: float
    ess: float
    max_weight_fraction: float
    flagged_unreliable: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EvidenceEstimate":
        return cls(**obj)


def estimate_evidence(
    model: FlowModel,
    target: TargetModel,
    T: float,
    n: int,
    rng: Optional[RngStream] = None,
) -> EvidenceEstimate:
    """Self-normalized-free IS estimate: Z_hat = mean_i p'(theta_i)/q(theta_i)."""
    if n < 2:
        raise ValueError("need n >= 2")
    if T <= 0:
        raise ValueError("temperature must be positive")
    rng = rng or RngStream(0)
    thetas, lq = model.sample(rng, n, T)
    lp = np.asarray(dg.raw(target.log_density(thetas)), dtype=float)
    ell = lp - lq
    if np.any(np.isnan(ell)):
        raise ValueError("NaN importance log-weight")
    m = float(np.max(ell))
    if m == -math.inf:
        raise ValueError("all importance weights are zero")
    w = np.exp(ell - m)
    total = float(w.sum())
    log_Z = m + math.log(total / n)
    w_mean = total / n
    w_std = float(w.std(ddof=1))
    std_err_log = w_std / (math.sqrt(n) * w_mean)
    ess = total * total / float(np.sum(w * w))
    return EvidenceEstimate(
        log_Z_hat=log_Z,
        std_err_log=std_err_log,
        n=n,
        T=float(T),
        ess=ess,
        max_weight_fraction=float(w.max()) / total,
        flagged_unreliable=bool(ess < ESS_RELIABLE_FLOOR),
    )


def temperature_sweep(
    model: FlowModel,
    target: TargetModel,
    T_grid,
    n: int,
    rng: Optional[RngStream] = None,
) -> list:
    """Independent estimates over a temperature grid (split rng streams)."""
    T_grid = list(T_grid)
    if not T_grid:
        raise ValueError("empty temperature grid")
    rng = rng or RngStream(0)
    return [
        estimate_evidence(model, target, float(T), n, rng.child("evidence", i))
        for i, T in enumerate(T_grid)
    ]


def save_evidence_json(estimates, path) -> None:
    with open(path, "w") as f:
        json.dump([e.to_json() for e in estimates], f, indent=1)


def load_evidence_json(path) -> list:
    with open(path) as f:
        return [EvidenceEstimate.from_json(obj) for obj in json.load(f)]
