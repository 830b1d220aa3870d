"""Density panel for 2-d sample sets, with an optional analytic overlay."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt
import numpy as np

from . import io, style


def build_figure(samples, overlay=None, bins=120, title="samples"):
    theta = samples["theta"]
    if theta.shape[1] != 2:
        raise io.SchemaError(f"density panel needs 2-d samples, got {theta.shape[1]}-d")
    style.apply()
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    H, xe, ye = np.histogram2d(theta[:, 0], theta[:, 1], bins=bins)
    ax.pcolormesh(xe, ye, H.T, cmap="viridis", rasterized=True)
    if overlay is not None:
        x, y, logd = overlay
        ax.contour(
            x, y, np.exp(logd - logd.max()), levels=5, colors="white", linewidths=0.7, alpha=0.8
        )
    ax.set_xlabel(r"$\theta_1$")
    ax.set_ylabel(r"$\theta_2$")
    ax.set_title(title)
    ax.set_aspect("equal")
    return fig


def load_overlay(path):
    """Long-format CSV x,y,log_density on a rectangular grid."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise io.SchemaError(f"{path}: overlay needs columns x,y,log_density")
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    if data.shape[0] != xs.size * ys.size:
        raise io.SchemaError(f"{path}: overlay grid is ragged")
    order = np.lexsort((data[:, 1], data[:, 0]))
    logd = data[order, 2].reshape(xs.size, ys.size)
    return xs, ys, logd.T


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", required=True)
    ap.add_argument("--target-density", help="optional x,y,log_density grid CSV overlay")
    ap.add_argument("--bins", type=int, default=120)
    ap.add_argument("--title", default="samples")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    samples = io.load_samples(args.samples)
    overlay = load_overlay(args.target_density) if args.target_density else None
    fig = build_figure(samples, overlay, bins=args.bins, title=args.title)
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
