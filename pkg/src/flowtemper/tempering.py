"""Tempered bases, tempered training objectives, and temperature schedules.

The default training loss tempers target and base simultaneously: every
integrand term carries 1/T and the latent batch comes from N(0, T*I). That
integrand equals (1/T) times the plain ELBO integrand pointwise, which is the
algebraic heart of why one flow can serve all temperatures at once. An
exact-normalized variant, posterior-only tempering, and the plain objective
are kept for ablations and baselines.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .flow import FlowModel
from .mathcore import RngStream, gaussian_logpdf_rows
from .targets import TargetModel

TEMPERATURE_FLOOR = 0.5


def validate_temperature(T) -> float:
    T = float(T)
    if T < TEMPERATURE_FLOOR:
        raise ValueError(f"temperature {T} below engine floor {TEMPERATURE_FLOOR}")
    return T


@dataclass(frozen=True)
class TemperedBase:
    """Normalized tempered standard normal: q^(1/T) proportional to N(0, T*I)."""

    dim: int
    T: float

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("temperature must be positive")

    def logpdf(self, z):
        return tempered_base_logpdf(z, self.T)

    def sample(self, rng: RngStream, n: int):
        return tempered_base_sample(rng, self.dim, self.T, n)


def tempered_base_sample(rng: RngStream, d: int, T, n: int) -> np.ndarray:
    """sqrt(T)-scaled standard normal draws (reparameterized in T)."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    eps = rng.generator().standard_normal((n, d))
    scale = np.sqrt(T) if T.ndim == 0 else np.sqrt(T)[:, None]
    return eps * scale


def tempered_base_logpdf(z, T):
    """Log density of N(0, T*I); scalar for one vector, array for rows."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return float(gaussian_logpdf_rows(z[None, :], T)[0])
    return gaussian_logpdf_rows(z, T)


class ObjectiveMode(enum.Enum):
    FLOWVAT_EQ7 = "flowvat_eq7"
    FLOWVAT_EXACT_ELBO = "flowvat_exact_elbo"
    TARGET_ONLY = "target_only"
    PLAIN = "plain"


#: modes whose latent batch comes from the tempered base N(0, T*I)
TEMPERED_BASE_MODES = frozenset({ObjectiveMode.FLOWVAT_EQ7, ObjectiveMode.FLOWVAT_EXACT_ELBO})


def base_sample_for_mode(mode: ObjectiveMode, rng: RngStream, d: int, T, n: int) -> np.ndarray:
    if mode in TEMPERED_BASE_MODES:
        return tempered_base_sample(rng, d, T, n)
    return rng.generator().standard_normal((n, d))


def tempered_integrand(
    model: FlowModel,
    target: TargetModel,
    T,
    z_batch,
    mode: ObjectiveMode,
    condition_T=None,
    p=None,
    aux: dict | None = None,
):
    """Per-sample objective values (to be averaged and negated for the loss).

    `T` tempers the objective; the flow is conditioned on `condition_T`
    (defaults to T; annealed baselines pin it to 1 so the flow itself stays
    non-conditional).
    """
    z_v = np.asarray(dg.raw(z_batch), dtype=float)
    T_arr = np.asarray(T, dtype=float)
    cond_T = T_arr if condition_T is None else np.asarray(condition_T, dtype=float)
    theta, logdet = model.forward_batch(z_batch, cond_T, p)
    lp = target.log_density(theta)
    lp_v = np.asarray(dg.raw(lp), dtype=float)
    if not np.all(np.isfinite(lp_v)):
        bad = int(np.nonzero(~np.isfinite(lp_v))[0][0])
        raise ValueError(
            f"non-finite target log-density at theta={np.asarray(dg.raw(theta))[bad]}"
        )
    lq0 = gaussian_logpdf_rows(z_v, 1.0)
    if mode is ObjectiveMode.FLOWVAT_EQ7:
        vals = (lp - lq0 + logdet) / T_arr
    elif mode is ObjectiveMode.FLOWVAT_EXACT_ELBO:
        vals = lp / T_arr - gaussian_logpdf_rows(z_v, T_arr) + logdet
    elif mode is ObjectiveMode.TARGET_ONLY:
        vals = lp / T_arr - lq0 + logdet
    elif mode is ObjectiveMode.PLAIN:
        vals = lp - lq0 + logdet
    else:
        raise ValueError(f"unknown objective mode {mode}")
    if aux is not None:
        aux["loglik"] = lp_v
        aux["theta"] = np.asarray(dg.raw(theta))
    return vals


def negative_tempered_objective(
    model: FlowModel,
    target: TargetModel,
    T,
    z_batch,
    mode: ObjectiveMode,
    condition_T=None,
    p=None,
    aux: dict | None = None,
):
    """Negated Monte-Carlo mean of the mode's tempered integrand."""
    if np.asarray(dg.raw(z_batch)).shape[0] == 0:
        raise ValueError("empty latent batch")
    vals = tempered_integrand(model, target, T, z_batch, mode, condition_T, p, aux)
    return -dg.mean(vals)


# -- temperature schedules ----------------------------------------------------


@dataclass
class ConstantSchedule:
    T: float = 1.0
    kind: str = field(default="constant", init=False)

    def __post_init__(self):
        self.T = validate_temperature(self.T)

    def batch_temperatures(self, rng, batch_size, epoch):
        return np.full(batch_size, self.T)

    def current(self, epoch):
        return self.T

    def observe(self, epoch, loglik):
        return self.T


@dataclass
class UniformRangeSchedule:
    """One independent temperature per batch element, uniform on [lo, hi]."""

    lo: float
    hi: float
    kind: str = field(default="uniform", init=False)

    def __post_init__(self):
        self.lo = validate_temperature(self.lo)
        self.hi = float(self.hi)
        if self.hi < self.lo:
            raise ValueError("need lo <= hi")

    def batch_temperatures(self, rng, batch_size, epoch):
        return rng.generator().uniform(self.lo, self.hi, size=batch_size)

    def current(self, epoch):
        return 0.5 * (self.lo + self.hi)

    def observe(self, epoch, loglik):
        return self.current(epoch)


@dataclass
class LinearAnnealSchedule:
    """Piecewise-constant linear descent from T0 to exactly 1 over pretraining.

    The temperature changes only on epochs divisible by update_every and sits
    at 1 from the last pretraining update onward.
    """

    T0: float = 100.0
    pretrain_epochs: int = 10_000
    update_every: int = 100
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        self.T0 = validate_temperature(self.T0)
        if self.pretrain_epochs < 1 or self.update_every < 1:
            raise ValueError("pretrain_epochs and update_every must be positive")
        self._last_update = max(1, (self.pretrain_epochs - 1) // self.update_every)

    def current(self, epoch):
        if epoch >= self.pretrain_epochs:
            return 1.0
        k = min(epoch // self.update_every, self._last_update)
        return self.T0 + (1.0 - self.T0) * (k / self._last_update)

    def batch_temperatures(self, rng, batch_size, epoch):
        return np.full(batch_size, self.current(epoch))

    def observe(self, epoch, loglik):
        return self.current(epoch)


@dataclass
class AdaAnnSchedule:
    """Adaptive inverse-temperature steps sized by the batch log-density spread.

    delta(1/T) = tol / std(ln p'(theta_i)); a zero-variance batch signals
    degenerate samples and falls back to a capped step of tol. The final
    pretraining update pins T to exactly 1 (the schedule type guarantees
    reaching 1 by the end of pretraining).
    """

    T0: float = 100.0
    tol: float = 0.02
    pretrain_epochs: int = 10_000
    update_every: int = 100
    kind: str = field(default="adaann", init=False)

    def __post_init__(self):
        self.T0 = validate_temperature(self.T0)
        if self.tol < 0:
            raise ValueError("tolerance must be nonnegative")
        self._inv_T = 1.0 / self.T0
        self._last_update = max(1, (self.pretrain_epochs - 1) // self.update_every)

    def current(self, epoch):
        if epoch >= self.pretrain_epochs:
            return 1.0
        return 1.0 / self._inv_T

    def batch_temperatures(self, rng, batch_size, epoch):
        return np.full(batch_size, self.current(epoch))

    def step(self, loglik_values) -> float:
        """Apply one adaptive update (ungated); returns the new temperature."""
        loglik_values = np.asarray(loglik_values, dtype=float)
        if loglik_values.size == 0:
            raise ValueError("empty log-likelihood batch")
        spread = float(np.std(loglik_values))
        delta = self.tol if spread == 0.0 else self.tol / spread
        self._inv_T = min(1.0, self._inv_T + delta)
        return 1.0 / self._inv_T

    def observe(self, epoch, loglik):
        if epoch < self.pretrain_epochs and epoch % self.update_every == 0:
            if epoch // self.update_every >= self._last_update:
                self._inv_T = 1.0
            elif epoch > 0:
                self.step(loglik)
        return self.current(epoch)


def linear_anneal_step(schedule: LinearAnnealSchedule, epoch: int) -> float:
    return schedule.current(epoch)


def adaann_step(schedule: AdaAnnSchedule, loglik_values) -> float:
    return schedule.step(loglik_values)


def sample_training_temperatures(schedule, rng: RngStream, batch_size: int, epoch: int):
    """Per-batch-element temperatures; non-uniform schedules replicate one value."""
    return schedule.batch_temperatures(rng, batch_size, epoch)
