"""Per-mode distance histograms against the expected chi distribution."""

from __future__ import annotations

import argparse
import math

import matplotlib.pyplot as plt
import numpy as np

from . import io, style


def chi_pdf(r, dim, sigma):
    """Density of the distance-to-center of an isotropic Gaussian."""
    r = np.asarray(r, dtype=float)
    log_pdf = (
        (1 - dim / 2) * math.log(2.0)
        - math.lgamma(dim / 2)
        + (dim - 1) * np.log(np.maximum(r, 1e-300) / sigma)
        - r * r / (2 * sigma**2)
        - math.log(sigma)
    )
    return np.exp(log_pdf)


def build_figure(modes, title="distance to assigned center"):
    style.apply()
    k = len(modes["distances"])
    cols = min(k, 3)
    rows = (k + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.1 * cols, 2.6 * rows), squeeze=False)
    dim, sigma, radius = modes["dim"], modes["sigma"], modes["radius"]
    r_hi = max(radius * 1.8, sigma * (math.sqrt(dim) + 4))
    r = np.linspace(0, r_hi, 300)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        if idx >= k:
            ax.axis("off")
            continue
        d_k = np.asarray(modes["distances"][idx], dtype=float)
        status = "captured" if modes["captured"][idx] else "missed"
        if d_k.size:
            ax.hist(d_k, bins=30, range=(0, r_hi), density=True, alpha=0.65, color="#1f77b4")
        ax.plot(r, chi_pdf(r, dim, sigma), color="red", linewidth=1.0, drawstyle="steps-mid")
        ax.axvline(radius, color="red", linestyle="--", linewidth=1.0)
        ax.set_title(f"mode {idx} ({status}, {d_k.size} samples)")
        ax.set_xlim(0, r_hi)
    fig.suptitle(title)
    return fig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--modes", required=True)
    ap.add_argument("--title", default="distance to assigned center")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    modes = io.load_modes(args.modes)
    fig = build_figure(modes, title=args.title)
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
