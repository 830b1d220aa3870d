"""Regenerate the checked-in artifact fixtures (seeded; run rarely).

Fixtures imitate the run artifacts of the inference engine without requiring
it: a well-fit 2-d ring mixture, an evidence sweep, a warped lattice, a
10-d mode report, and a hierarchical-posterior sample pair for the corner.
"""

import json
import math
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
FIX = os.path.join(HERE, "..", "fixtures")

RING_CENTERS = np.array([3.0, 3.0]) + 4.0 * np.column_stack(
    [np.cos(2 * np.pi * np.arange(6) / 6), np.sin(2 * np.pi * np.arange(6) / 6)]
)
RING_SIGMA = 0.38
CHI2_Q90_D10 = 15.987179172105261  # chi-squared 0.9 quantile, 10 dof


def gm_logpdf(x, centers, sigma):
    d = x.shape[1]
    sq = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logs = -0.5 * d * math.log(2 * math.pi * sigma**2) - sq / (2 * sigma**2) - math.log(len(centers))
    m = logs.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logs - m).sum(axis=1, keepdims=True)))[:, 0]


def write_samples(path, theta, log_q, log_p):
    d = theta.shape[1]
    header = ",".join([f"theta_{j + 1}" for j in range(d)] + ["log_q", "log_p_unnorm"])
    with open(path, "w") as f:
        f.write(header + "\n")
        for i in range(len(theta)):
            row = [f"{v:.17g}" for v in theta[i]] + [f"{log_q[i]:.17g}", f"{log_p[i]:.17g}"]
            f.write(",".join(row) + "\n")


def ring_samples(seed, n=4000):
    gen = np.random.default_rng(seed)
    comps = gen.integers(0, 6, size=n)
    theta = RING_CENTERS[comps] + gen.normal(scale=RING_SIGMA, size=(n, 2))
    log_p = gm_logpdf(theta, RING_CENTERS, RING_SIGMA)
    log_q = log_p + gen.normal(scale=0.05, size=n)  # near-perfect variational fit
    return theta, log_q, log_p


def fixture_ring():
    theta, log_q, log_p = ring_samples(seed=1234)
    write_samples(os.path.join(FIX, "samples_ring2d.csv"), theta, log_q, log_p)


def fixture_ring_density_grid():
    xs = np.linspace(-3, 9, 61)
    ys = np.linspace(-3, 9, 61)
    with open(os.path.join(FIX, "ring_density.csv"), "w") as f:
        f.write("x,y,log_density\n")
        for x in xs:
            pts = np.column_stack([np.full_like(ys, x), ys])
            lp = gm_logpdf(pts, RING_CENTERS, RING_SIGMA)
            for y, v in zip(ys, lp):
                f.write(f"{x:.17g},{y:.17g},{v:.17g}\n")


def fixture_evidence():
    gen = np.random.default_rng(7)
    temps = [0.95, 1.0, 1.1, 1.25, 1.4, 1.5]
    entries = []
    for T in temps:
        err = 0.015 + 0.01 * (T - 0.95)
        entries.append(
            {
                "log_Z_hat": float(gen.normal(scale=err)),
                "std_err_log": err,
                "n": 50000,
                "T": T,
                "ess": float(50000 / (1.0 + 2.0 * (T - 0.95))),
                "max_weight_fraction": float(10 ** gen.uniform(-4, -3)),
                "flagged_unreliable": False,
            }
        )
    with open(os.path.join(FIX, "evidence.json"), "w") as f:
        json.dump(entries, f, indent=1)


def fixture_grid():
    axis = np.arange(-3.0, 3.25, 0.5)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    grid = np.column_stack([X.ravel(), Y.ravel()])
    with open(os.path.join(FIX, "grid.csv"), "w") as f:
        f.write("T,grid_x,grid_y,mapped_x,mapped_y\n")
        for T in (0.95, 1.0, 2.0, 5.0, 10.0):
            w = 0.25 * math.log(T) + 0.1
            mapped = grid @ np.array([[1.15, 0.08], [-0.05, 1.1]]).T
            mapped = mapped + w * np.column_stack(
                [np.sin(grid[:, 1] * 1.1), np.cos(grid[:, 0] * 0.9)]
            ) + np.array([1.4, 1.2])
            for (gx, gy), (mx, my) in zip(grid, mapped):
                f.write(f"{T:.17g},{gx:.17g},{gy:.17g},{mx:.17g},{my:.17g}\n")


def fixture_modes():
    gen = np.random.default_rng(11)
    dim, sigma, n = 10, 1.0, 2000
    radius = sigma * math.sqrt(CHI2_Q90_D10)
    counts = [520, 430, 489, 37, 524]  # mode 3 under-covered on purpose
    distances, fractions, captured = [], [], []
    for c in counts:
        d_k = np.sqrt(np.sum(gen.normal(size=(c, dim)) ** 2, axis=1)) * sigma
        distances.append(sorted(float(x) for x in d_k))
        frac = float(np.sum(d_k <= radius)) / n
        fractions.append(frac)
        captured.append(frac > 0.05)
    payload = {
        "fractions": fractions,
        "captured": captured,
        "modes_captured": int(sum(captured)),
        "n_samples": n,
        "quantile": 0.9,
        "threshold": 0.05,
        "radius": radius,
        "dim": dim,
        "sigma": sigma,
        "distances": distances,
    }
    with open(os.path.join(FIX, "modes.json"), "w") as f:
        json.dump(payload, f, indent=1)


def hierarchical_samples(seed, n=2500):
    """Eight-schools-shaped 10-d posterior stand-in (mu, log tau, eta x 8)."""
    gen = np.random.default_rng(seed)
    mu = gen.normal(6.0, 4.0, size=n)
    log_tau = gen.normal(1.2, 0.9, size=n)
    eta = gen.normal(size=(n, 8)) * (1.0 - 0.25 * np.tanh(log_tau))[:, None]
    theta = np.column_stack([mu, log_tau, eta])
    log_q = -0.5 * np.sum(theta**2, axis=1) / 25.0  # placeholder densities
    return theta, log_q, log_q + gen.normal(scale=0.1, size=n)


def fixture_corner():
    theta, log_q, log_p = hierarchical_samples(21)
    write_samples(os.path.join(FIX, "samples_10d.csv"), theta, log_q, log_p)
    ref, rq, rp = hierarchical_samples(22, n=4000)
    write_samples(os.path.join(FIX, "reference_10d.csv"), ref, rq, rp)


if __name__ == "__main__":
    os.makedirs(FIX, exist_ok=True)
    fixture_ring()
    fixture_ring_density_grid()
    fixture_evidence()
    fixture_grid()
    fixture_modes()
    fixture_corner()
    print(f"fixtures written to {FIX}")
