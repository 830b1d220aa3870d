"""Benchmark target posteriors on unconstrained parameter space.

All log densities are unnormalized (`ln p'`), finite everywhere, vectorized
over rows, and built from diffgraph-registered primitives so they can sit
inside a taped objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np

from . import diffgraph as dg
from .mathcore import RngStream, chi2_quantile

BOX_HALFWIDTH = 5.0


@dataclass
class GmSpec:
    """Isotropic equal-covariance Gaussian mixture (normalized: log Z = 0)."""

    centers: np.ndarray
    sigma: float
    weights: np.ndarray
    seed: Optional[int] = None
    d_min: Optional[float] = None
    d_max: Optional[float] = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.centers.ndim != 2:
            raise ValueError("centers must be a K x d matrix")
        if self.weights.shape != (self.centers.shape[0],):
            raise ValueError("need one weight per center")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        k = self.centers.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.centers[i], self.centers[j]):
                    raise ValueError("centers must be distinct")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_json(self) -> dict:
        out = {
            "centers": self.centers.tolist(),
            "sigma": self.sigma,
            "weights": self.weights.tolist(),
        }
        for key in ("seed", "d_min", "d_max"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "GmSpec":
        return cls(
            centers=np.asarray(obj["centers"], dtype=float),
            sigma=float(obj["sigma"]),
            weights=np.asarray(obj["weights"], dtype=float),
            seed=obj.get("seed"),
            d_min=obj.get("d_min"),
            d_max=obj.get("d_max"),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "GmSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class GmGenConfig:
    """Settings for randomized placement of mixture centers."""

    K: int
    d: int
    d_min: float
    d_max: float
    M: int = 10_000
    seed: int = 0
    max_tries: int = 1000
    box_halfwidth: float = BOX_HALFWIDTH

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")
        if self.K < 1 or self.d < 1 or self.M < 1:
            raise ValueError("K, d, M must be positive")


@dataclass(frozen=True)
class EightSchoolsData:
    y: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.y.shape != (8,) or self.sigma.shape != (8,):
            raise ValueError("eight-schools data needs 8 effects and 8 scales")
        if np.any(self.sigma <= 0):
            raise ValueError("scales must be positive")


@dataclass
class TargetModel:
    """Unnormalized log density plus metadata the metrics need."""

    name: str
    dim: int
    log_density: Callable  # (n, dim) rows -> (n,) values, tape-aware
    true_log_evidence: Optional[float] = None
    mode_centers: Optional[np.ndarray] = None
    component_sigma: Optional[float] = None

    def log_density_unnorm(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(self.log_density(theta[None, :])[0])


# -- Gaussian mixtures -------------------------------------------------------


def ring_gm_2d() -> GmSpec:
    """Six equal modes on a radius-4 ring centered at [3, 3], sigma 0.38.

    The first mode sits on the positive-x axis relative to the ring center.
    """
    angles = 2.0 * np.pi * np.arange(6) / 6.0
    centers = np.array([3.0, 3.0]) + 4.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    return GmSpec(centers=centers, sigma=0.38, weights=np.full(6, 1.0 / 6.0))


def gm_log_density(spec: GmSpec, theta):
    """log of the mixture density, via log-sum-exp over components."""
    one_row = False
    if not dg.is_node(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[None, :]
            one_row = True
    if dg.raw(theta).shape[1] != spec.dim:
        raise ValueError(
            f"dimension mismatch: target is {spec.dim}-d, theta has {dg.raw(theta).shape[1]}"
        )
    c = spec.centers
    var = spec.sigma**2
    sq = (
        dg.sum_(theta * theta, axis=1, keepdims=True)
        - 2.0 * dg.matmul(theta, c.T)
        + np.sum(c * c, axis=1)[None, :]
    )
    logits = np.log(spec.weights)[None, :] - 0.5 * spec.dim * math.log(2 * math.pi * var) - sq / (
        2.0 * var
    )
    out = dg.logsumexp(logits, axis=-1)
    if one_row:
        return float(out[0])
    return out


def generate_gm_centers(cfg: GmGenConfig, rng: Optional[RngStream] = None) -> np.ndarray:
    """Sequential rejection placement of K centers in the box.

    The first center is uniform; each later candidate is accepted iff its
    minimum distance to the accepted set lies strictly inside (d_min, d_max).
    Candidates arrive in batches of M; gives up after max_tries batches.
    """
    rng = rng or RngStream(cfg.seed)
    gen = rng.child("gm_centers").generator()
    b = cfg.box_halfwidth
    centers = [gen.uniform(-b, b, size=cfg.d)]
    tries = 0
    while len(centers) < cfg.K and tries < cfg.max_tries:
        candidates = gen.uniform(-b, b, size=(cfg.M, cfg.d))
        tries += 1
        # Vectorized scan with the same semantics as walking candidates in
        # order: each acceptance immediately constrains later candidates.
        start = 0
        cmat = np.asarray(centers)
        sq = (
            np.sum(candidates * candidates, axis=1)[:, None]
            - 2.0 * candidates @ cmat.T
            + np.sum(cmat * cmat, axis=1)[None, :]
        )
        mins = np.sqrt(np.maximum(sq.min(axis=1), 0.0))
        while len(centers) < cfg.K:
            ok = np.nonzero((mins[start:] > cfg.d_min) & (mins[start:] < cfg.d_max))[0]
            if ok.size == 0:
                break
            i = start + int(ok[0])
            centers.append(candidates[i])
            start = i + 1
            if start < cfg.M:
                d_new = np.linalg.norm(candidates[start:] - candidates[i], axis=1)
                mins[start:] = np.minimum(mins[start:], d_new)
    if len(centers) < cfg.K:
        raise RuntimeError(
            f"could not place {cfg.K} centers in {cfg.max_tries} batches; retry with a new seed"
        )
    return np.asarray(centers)


def gm_target(spec: GmSpec, name: str = "gm") -> TargetModel:
    return TargetModel(
        name=name,
        dim=spec.dim,
        log_density=lambda theta: gm_log_density(spec, theta),
        true_log_evidence=0.0,
        mode_centers=spec.centers,
        component_sigma=spec.sigma,
    )


def make_gm(d: int, K: int = 5, seed: int = 0):
    """Randomized unit-sigma GM with chi-square-quantile distance bounds."""
    if d < 2:
        raise ValueError("make_gm needs d >= 2")
    d_min = math.sqrt(chi2_quantile(d, 0.99))
    d_max = math.sqrt(chi2_quantile(d, 0.999))
    cfg = GmGenConfig(K=K, d=d, d_min=d_min, d_max=d_max, seed=seed)
    centers = generate_gm_centers(cfg, RngStream(seed))
    spec = GmSpec(
        centers=centers,
        sigma=1.0,
        weights=np.full(K, 1.0 / K),
        seed=seed,
        d_min=d_min,
        d_max=d_max,
    )
    return spec, gm_target(spec, name=f"gm{d}d")


def ring_target() -> tuple:
    spec = ring_gm_2d()
    return spec, gm_target(spec, name="ring2d")


# -- eight schools -----------------------------------------------------------


def load_eight_schools() -> EightSchoolsData:
    payload = json.loads(resources.files("flowtemper.data").joinpath("eight_schools.json").read_text())
    return EightSchoolsData(y=payload["y"], sigma=payload["sigma"])


_LOG_HALF_CAUCHY_CONST = math.log(2.0) - math.log(math.pi) - math.log(5.0)


def eight_schools_log_density(data: EightSchoolsData, u):
    """Non-centered parameterization on R^10: u = (mu, log tau, eta_1..8).

    Includes the +log tau Jacobian of the log transform; priors are
    mu ~ N(0, 5^2), tau ~ half-Cauchy(5), eta_j ~ N(0, 1).
    """
    one_row = False
    if not dg.is_node(u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[None, :]
            one_row = True
    if dg.raw(u).shape[1] != 10:
        raise ValueError("eight-schools parameter vector must have dimension 10")
    mu = dg.take_cols(u, np.array([0]))
    log_tau = dg.take_cols(u, np.array([1]))
    eta = dg.take_cols(u, np.arange(2, 10))
    tau = dg.exp(log_tau)

    y = data.y[None, :]
    sig2 = (data.sigma**2)[None, :]
    means = mu + tau * eta
    loglik = dg.sum_(
        -0.5 * np.log(2 * np.pi * sig2) - (y - means) * (y - means) / (2.0 * sig2), axis=1
    )
    lp_eta = dg.sum_(-0.5 * math.log(2 * math.pi) - eta * eta / 2.0, axis=1)
    lp_mu = dg.sum_(
        -0.5 * math.log(2 * math.pi * 25.0) - mu * mu / 50.0, axis=1
    )
    ratio2 = (tau / 5.0) * (tau / 5.0)
    lp_tau = dg.sum_(_LOG_HALF_CAUCHY_CONST - dg.log(1.0 + ratio2), axis=1)
    jac = dg.sum_(log_tau, axis=1)
    out = loglik + lp_eta + lp_mu + lp_tau + jac
    if one_row:
        return float(out[0])
    return out


def eight_schools_target() -> tuple:
    data = load_eight_schools()
    model = TargetModel(
        name="eight_schools",
        dim=10,
        log_density=lambda u: eight_schools_log_density(data, u),
    )
    return data, model


def get_target(name: str) -> TargetModel:
    """Named targets for the CLI ('ring2d', 'eight_schools')."""
    if name == "ring2d":
        return ring_target()[1]
    if name == "eight_schools":
        return eight_schools_target()[1]
    raise ValueError(f"unknown target '{name}' (expected ring2d or eight_schools)")
