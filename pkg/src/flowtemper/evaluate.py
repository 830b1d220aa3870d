"""Experiment metrics: mode capture, grid-transform drift, sample export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffgraph as dg
from .flow import FlowModel
from .mathcore import RngStream, chi2_quantile
from .targets import GmSpec, TargetModel


@dataclass
class ModeReport:
    """Which mixture modes the sample set covers.

    A mode counts as captured when the fraction of all samples that are both
    assigned to it (nearest center) and inside its `quantile` ball exceeds
    `threshold`.
    """

    fractions: np.ndarray
    captured: np.ndarray
    modes_captured: int
    n_samples: int
    quantile: float
    threshold: float
    radius: float
    dim: int
    sigma: float
    distances: list = field(default_factory=list)  # per-mode assigned distances

    def to_json(self) -> dict:
        return {
            "fractions": self.fractions.tolist(),
            "captured": [bool(c) for c in self.captured],
            "modes_captured": int(self.modes_captured),
            "n_samples": int(self.n_samples),
            "quantile": self.quantile,
            "threshold": self.threshold,
            "radius": self.radius,
            "dim": int(self.dim),
            "sigma": self.sigma,
            "distances": [d.tolist() for d in self.distances],
        }


def mode_capture(samples, spec: GmSpec, quantile: float = 0.9, threshold: float = 0.05) -> ModeReport:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != spec.dim:
        raise ValueError(
            f"dimension mismatch: samples are {samples.shape}, centers are {spec.dim}-d"
        )
    n = samples.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    c = spec.centers
    sq = (
        np.sum(samples * samples, axis=1)[:, None]
        - 2.0 * samples @ c.T
        + np.sum(c * c, axis=1)[None, :]
    )
    dist = np.sqrt(np.maximum(sq, 0.0))
    assign = np.argmin(dist, axis=1)  # ties resolve to the lowest center index
    radius = spec.sigma * math.sqrt(chi2_quantile(spec.dim, quantile))
    K = c.shape[0]
    fractions = np.zeros(K)
    captured = np.zeros(K, dtype=bool)
    distances = []
    for k in range(K):
        mine = assign == k
        d_k = dist[mine, k]
        distances.append(d_k)
        fractions[k] = float(np.sum(d_k <= radius)) / n
        captured[k] = fractions[k] > threshold
    return ModeReport(
        fractions=fractions,
        captured=captured,
        modes_captured=int(captured.sum()),
        n_samples=n,
        quantile=quantile,
        threshold=threshold,
        radius=radius,
        dim=spec.dim,
        sigma=spec.sigma,
        distances=distances,
    )


@dataclass
class GridTransform:
    """A latent-space lattice and its image under the flow per temperature."""

    grid: np.ndarray  # (m, 2)
    mapped: dict  # T -> (m, 2)
    grid_range: tuple
    spacing: float
    shape: tuple  # lattice shape (nx, ny)


def grid_transform(model: FlowModel, grid_range=(-3.0, 3.0), spacing: float = 0.5,
                   T_list=(1.0,)) -> GridTransform:
    if model.dim != 2:
        raise ValueError("grid transform diagnostic is 2-d only")
    lo, hi = grid_range
    axis = np.arange(lo, hi + spacing * 0.5, spacing)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    grid = np.column_stack([X.ravel(), Y.ravel()])
    mapped = {}
    for T in T_list:
        theta, _ = model.forward_batch(grid, float(T))
        mapped[float(T)] = np.asarray(theta)
    return GridTransform(
        grid=grid,
        mapped=mapped,
        grid_range=(float(lo), float(hi)),
        spacing=float(spacing),
        shape=X.shape,
    )


def transform_drift(gt: GridTransform) -> float:
    """Mean over grid points of the largest displacement between any two
    temperature mappings, in units of the grid spacing."""
    temps = sorted(gt.mapped)
    if len(temps) < 2:
        raise ValueError("drift needs at least two temperatures")
    worst = np.zeros(gt.grid.shape[0])
    for i, a in enumerate(temps):
        for b in temps[i + 1 :]:
            disp = np.linalg.norm(gt.mapped[a] - gt.mapped[b], axis=1)
            worst = np.maximum(worst, disp)
    return float(worst.mean() / gt.spacing)


def write_grid_csv(gt: GridTransform, path) -> None:
    with open(path, "w") as f:
        f.write("T,grid_x,grid_y,mapped_x,mapped_y\n")
        for T in sorted(gt.mapped):
            m = gt.mapped[T]
            for (gx, gy), (mx, my) in zip(gt.grid, m):
                f.write(f"{T:.17g},{gx:.17g},{gy:.17g},{mx:.17g},{my:.17g}\n")


def export_samples(model: FlowModel, target: TargetModel, n: int, T: float, path,
                   rng: Optional[RngStream] = None) -> None:
    """CSV of flow samples with their log q and the target's ln p'."""
    rng = rng or RngStream(0)
    thetas, lq = model.sample(rng, n, T)
    lp = np.asarray(dg.raw(target.log_density(thetas)), dtype=float)
    d = model.dim
    header = ",".join([f"theta_{j + 1}" for j in range(d)] + ["log_q", "log_p_unnorm"])
    with open(path, "w") as f:
        f.write(header + "\n")
        for i in range(n):
            row = [f"{v:.17g}" for v in thetas[i]] + [f"{lq[i]:.17g}", f"{lp[i]:.17g}"]
            f.write(",".join(row) + "\n")


def save_modes_json(report: ModeReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=1)
