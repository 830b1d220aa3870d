"""Training loop: Monte-Carlo objectives, AdamW, pretrain/fine-tune phases.

An "epoch" is one optimization step on one fresh Monte-Carlo batch (there is
no finite dataset). Runs are fully deterministic given (config, seed): every
random draw comes from a substream keyed by purpose and epoch.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from . import diffgraph as dg
from .diffgraph import ParamVector
from .flow import FlowModel, build_flow
from .mathcore import RngStream
from .targets import TargetModel
from .tempering import (
    AdaAnnSchedule,
    ConstantSchedule,
    LinearAnnealSchedule,
    ObjectiveMode,
    UniformRangeSchedule,
    base_sample_for_mode,
    negative_tempered_objective,
)

METHODS = ("flowvat", "flowvat_exact", "target_only", "nf_vi", "linear_anneal", "adaann")
CONDITIONAL_METHODS = frozenset({"flowvat", "flowvat_exact", "target_only"})

_MODE_BY_METHOD = {
    "flowvat": ObjectiveMode.FLOWVAT_EQ7,
    "flowvat_exact": ObjectiveMode.FLOWVAT_EXACT_ELBO,
    "target_only": ObjectiveMode.TARGET_ONLY,
    "nf_vi": ObjectiveMode.PLAIN,
    "linear_anneal": ObjectiveMode.TARGET_ONLY,
    "adaann": ObjectiveMode.TARGET_ONLY,
}

PRESETS = {
    "desk": dict(
        n_layers=6,
        hidden=(128, 128),
        knots=16,
        interval_halfwidth=8.0,
        pretrain_epochs=3000,
        finetune_epochs=1500,
        pretrain_lr=1e-3,
        finetune_lr=2e-4,
        batch_size=256,
    ),
    "paper": dict(
        n_layers=10,
        hidden=(1024,) * 5,
        knots=16,
        interval_halfwidth=8.0,
        pretrain_epochs=10_000,
        finetune_epochs=5_000,
        pretrain_lr=5e-6,
        finetune_lr=1e-6,
        batch_size=512,
    ),
}


@dataclass
class TrainConfig:
    method: str = "flowvat"
    pretrain_epochs: int = 3000
    finetune_epochs: int = 1500
    pretrain_lr: float = 1e-3
    finetune_lr: float = 2e-4
    batch_size: int = 512
    pretrain_T_range: tuple = (0.95, 10.0)
    finetune_T_range: Optional[tuple] = None  # resolved per method
    anneal_T0: float = 100.0
    adaann_tol: float = 0.02
    update_every: int = 100
    seed: int = 0
    n_layers: int = 6
    hidden: tuple = (128, 128)
    knots: int = 16
    interval_halfwidth: float = 8.0
    elbo_samples: int = 5000
    preset: Optional[str] = None

    @classmethod
    def from_preset(cls, preset: str, method: str = "flowvat", **overrides) -> "TrainConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}' (have {sorted(PRESETS)})")
        kwargs = dict(PRESETS[preset])
        kwargs.update(overrides)
        cfg = cls(method=method, preset=preset, **kwargs)
        return cfg.resolved()

    def resolved(self) -> "TrainConfig":
        """Fill method-dependent defaults and enforce config invariants."""
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}' (have {METHODS})")
        ft = self.finetune_T_range
        if self.method in CONDITIONAL_METHODS:
            ft = tuple(ft) if ft is not None else (0.95, 1.5)
        else:
            if ft is not None and tuple(ft) != (1.0, 1.0):
                raise ValueError(f"method '{self.method}' fine-tunes at T=1 exactly")
            ft = (1.0, 1.0)
        cfg = TrainConfig(**{**asdict(self), "finetune_T_range": ft})
        cfg.hidden = tuple(cfg.hidden)
        cfg.pretrain_T_range = tuple(cfg.pretrain_T_range)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.pretrain_epochs < 1 or self.finetune_epochs < 0:
            raise ValueError("need pretrain_epochs >= 1 and finetune_epochs >= 0")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        lo, hi = self.pretrain_T_range
        if not (0 < lo <= hi):
            raise ValueError("invalid pretrain temperature range")
        if self.method in ("linear_anneal", "adaann"):
            if self.pretrain_epochs <= self.update_every:
                raise ValueError(
                    "annealing schedule cannot reach T=1 within pretraining: "
                    f"pretrain_epochs={self.pretrain_epochs} <= update_every={self.update_every}"
                )
            if self.anneal_T0 < 1.0:
                raise ValueError("anneal_T0 must be >= 1")
        if self.knots < 2 or self.interval_halfwidth <= 0:
            raise ValueError("invalid spline architecture")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["pretrain_T_range"] = list(self.pretrain_T_range)
        d["finetune_T_range"] = list(self.finetune_T_range) if self.finetune_T_range else None
        return d


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def init(cls, n: int, **kw) -> "AdamWState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adamw_step(state: AdamWState, params, grad: np.ndarray, lr: float):
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    values = params.values if isinstance(params, ParamVector) else params
    grad = np.asarray(grad, dtype=float)
    if grad.shape != values.shape:
        raise ValueError("gradient/parameter shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient: training aborts")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    step = state.m / (1.0 - state.beta1**state.t)
    step /= np.sqrt(state.v / (1.0 - state.beta2**state.t)) + state.eps
    if state.weight_decay != 0.0:
        step += state.weight_decay * values
    values -= lr * step
    return params


@dataclass
class ElboEstimate:
    mean: float
    std_err: float
    n: int
    T: float = 1.0
    excluded: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunArtifact:
    run_dir: Optional[str]
    config: dict
    history: list  # (epoch, T_mean, loss)
    checkpoint_path: Optional[str] = None
    pretrain_checkpoint_path: Optional[str] = None
    elbo: Optional[ElboEstimate] = None
    meta: dict = field(default_factory=dict)


def estimate_elbo(model: FlowModel, target: TargetModel, T: float = 1.0, n: int = 5000,
                  rng: Optional[RngStream] = None) -> ElboEstimate:
    """Monte-Carlo ELBO ln p'(theta) - ln q(theta) under the flow at T.

    Non-finite summands are excluded (counted); more than 1% excluded is an
    error rather than a silently biased estimate.
    """
    if n < 2:
        raise ValueError("need n >= 2 for a standard error")
    rng = rng or RngStream(0)
    thetas, lq = model.sample(rng, n, T)
    lp = np.asarray(dg.raw(target.log_density(thetas)), dtype=float)
    vals = lp - lq
    finite = np.isfinite(vals)
    excluded = int(n - finite.sum())
    if excluded > 0.01 * n:
        raise RuntimeError(f"{excluded}/{n} non-finite ELBO summands; model unusable")
    vals = vals[finite]
    return ElboEstimate(
        mean=float(vals.mean()),
        std_err=float(vals.std(ddof=1) / np.sqrt(len(vals))),
        n=len(vals),
        T=float(np.asarray(T, dtype=float)),
        excluded=excluded,
    )


# -- checkpoint container ------------------------------------------------------

_MAGIC = b"FTCP"
_FORMAT_VERSION = 1


def save_checkpoint(model: FlowModel, config: Optional[dict], path) -> None:
    """Self-describing container: header JSON + little-endian float64 payload."""
    header = {
        "format_version": _FORMAT_VERSION,
        "architecture": model.architecture(),
        "param_count": len(model.params),
    }
    if config is not None:
        header["config"] = config
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = model.params.values.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a flowtemper checkpoint")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(blob_len).decode("utf-8"))


def load_checkpoint(path) -> FlowModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a flowtemper checkpoint")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len).decode("utf-8"))
        payload = f.read()
    count = header["param_count"]
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != count:
        raise ValueError(f"{path}: corrupt checkpoint payload ({values.size} of {count} values)")
    model = FlowModel.from_architecture(header["architecture"], params=values.copy())
    return model


# -- training loop ---------------------------------------------------------------


def _pretrain_schedule(cfg: TrainConfig):
    if cfg.method in CONDITIONAL_METHODS:
        return UniformRangeSchedule(*cfg.pretrain_T_range)
    if cfg.method == "nf_vi":
        return ConstantSchedule(1.0)
    if cfg.method == "linear_anneal":
        return LinearAnnealSchedule(cfg.anneal_T0, cfg.pretrain_epochs, cfg.update_every)
    return AdaAnnSchedule(cfg.anneal_T0, cfg.adaann_tol, cfg.pretrain_epochs, cfg.update_every)


def _finetune_schedule(cfg: TrainConfig):
    lo, hi = cfg.finetune_T_range
    if lo == hi:
        return ConstantSchedule(lo)
    return UniformRangeSchedule(lo, hi)


def _format_history_row(epoch: int, t_mean: float, loss: float) -> str:
    return f"{epoch},{t_mean:.17g},{loss:.17g}"


def write_history(history, path) -> None:
    with open(path, "w") as f:
        f.write("epoch,T_mean,loss\n")
        for epoch, t_mean, loss in history:
            f.write(_format_history_row(epoch, t_mean, loss) + "\n")


def train(
    config: TrainConfig,
    target: TargetModel,
    rng: Optional[RngStream] = None,
    run_dir=None,
    progress: bool = False,
    config_snapshot: Optional[dict] = None,
    export_n: int = 2000,
):
    """Run the two-phase protocol; returns (model, RunArtifact).

    Writes config.json / history.csv / checkpoint(_pretrain).bin / elbo.json /
    samples.csv / meta.json into run_dir when given. `config_snapshot` lets a
    caller (the CLI) store its richer resolved config instead of the bare
    trainer config.
    """
    cfg = config.resolved()
    rng = rng or RngStream(cfg.seed)
    t_start = time.time()

    model = build_flow(
        target.dim, cfg.n_layers, cfg.hidden, cfg.knots, cfg.interval_halfwidth,
        rng.child("model"),
    )
    state = AdamWState.init(len(model.params))
    mode = _MODE_BY_METHOD[cfg.method]
    conditional = cfg.method in CONDITIONAL_METHODS
    pre_sched = _pretrain_schedule(cfg)
    fine_sched = _finetune_schedule(cfg)
    annealed = cfg.method in ("linear_anneal", "adaann")

    snapshot = config_snapshot if config_snapshot is not None else cfg.snapshot()
    run_dir_str = None
    if run_dir is not None:
        import os

        run_dir_str = str(run_dir)
        os.makedirs(run_dir_str, exist_ok=True)
        with open(os.path.join(run_dir_str, "config.json"), "w") as f:
            json.dump(snapshot, f, indent=1, sort_keys=True)

    history = []
    last_loglik = None
    total = cfg.pretrain_epochs + cfg.finetune_epochs
    artifact = RunArtifact(run_dir=run_dir_str, config=snapshot, history=history)

    def _save(name):
        if run_dir_str is None:
            return None
        import os

        path = os.path.join(run_dir_str, name)
        save_checkpoint(model, snapshot, path)
        return path

    for epoch in range(total):
        pretraining = epoch < cfg.pretrain_epochs
        sched = pre_sched if pretraining else fine_sched
        if annealed and pretraining:
            sched.observe(epoch, last_loglik)
        T_batch = sched.batch_temperatures(rng.child("T", epoch), cfg.batch_size, epoch)
        z = base_sample_for_mode(mode, rng.child("z", epoch), target.dim, T_batch, cfg.batch_size)
        aux = {}
        cond_T = None if conditional else 1.0

        def objective(leaf):
            return negative_tempered_objective(
                model, target, T_batch, z, mode, condition_T=cond_T, p=leaf, aux=aux
            )

        try:
            loss, grad = dg.evaluate_with_gradient(objective, model.params)
        except dg.NonFiniteValue as err:
            if run_dir_str is not None:
                _save("checkpoint.bin")
                write_history(history, f"{run_dir_str}/history.csv")
            raise RuntimeError(
                f"training aborted at epoch {epoch} (last-good checkpoint retained): {err}"
            ) from err
        lr = cfg.pretrain_lr if pretraining else cfg.finetune_lr
        adamw_step(state, model.params, grad, lr)
        history.append((epoch, float(np.mean(T_batch)), loss))
        last_loglik = aux.get("loglik")
        if epoch + 1 == cfg.pretrain_epochs:
            artifact.pretrain_checkpoint_path = _save("checkpoint_pretrain.bin")
        if progress and (epoch % 500 == 0 or epoch + 1 == total):
            print(f"  epoch {epoch:6d}  T_mean {np.mean(T_batch):7.3f}  loss {loss:.4f}")

    artifact.checkpoint_path = _save("checkpoint.bin")
    artifact.elbo = estimate_elbo(model, target, T=1.0, n=cfg.elbo_samples, rng=rng.child("elbo"))
    artifact.meta = {
        "seed": cfg.seed,
        "method": cfg.method,
        "target": target.name,
        "wall_clock_s": round(time.time() - t_start, 3),
        "version": __version__,
        "param_count": len(model.params),
    }
    if run_dir_str is not None:
        from .evaluate import export_samples

        write_history(history, f"{run_dir_str}/history.csv")
        with open(f"{run_dir_str}/elbo.json", "w") as f:
            json.dump(artifact.elbo.to_json(), f, indent=1)
        with open(f"{run_dir_str}/meta.json", "w") as f:
            json.dump(artifact.meta, f, indent=1, sort_keys=True)
        export_samples(model, target, export_n, 1.0, f"{run_dir_str}/samples.csv",
                       rng=rng.child("export"))
    return model, artifact
