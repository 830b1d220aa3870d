"""Corner plot: pairwise credible-region contours plus 1-d marginals.

Contours enclose 68% and 95% of the sample mass (histogram-based levels).
A reference sample set, when given, is drawn underneath in thick gray with
the primary set dashed red on top.
"""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt
import numpy as np

from . import io, style


def _mass_levels(H, fractions=(0.68, 0.95)):
    """Density thresholds whose superlevel sets hold the given mass."""
    flat = np.sort(H.ravel())[::-1]
    csum = np.cumsum(flat)
    total = csum[-1]
    levels = []
    for frac in sorted(fractions, reverse=True):
        idx = int(np.searchsorted(csum, frac * total))
        levels.append(flat[min(idx, flat.size - 1)])
    uniq = sorted(set(float(l) for l in levels if l > 0))
    return uniq if len(uniq) >= 1 else [float(flat[0]) * 0.5]


def _pair_contour(ax, x, y, bins, color, linestyle, linewidth):
    H, xe, ye = np.histogram2d(x, y, bins=bins)
    # mild smoothing keeps contours readable without scipy
    kernel = np.array([0.25, 0.5, 0.25])
    H = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), 0, H)
    H = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), 1, H)
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    ax.contour(
        xc, yc, H.T, levels=_mass_levels(H), colors=color,
        linestyles=linestyle, linewidths=linewidth,
    )


def build_figure(samples, reference=None, bins=60, labels=None, title="corner"):
    theta = samples["theta"]
    d = theta.shape[1]
    labels = labels or [rf"$\theta_{{{j + 1}}}$" for j in range(d)]
    style.apply()
    size = max(1.3 * d, 4.0)
    fig, axes = plt.subplots(d, d, figsize=(size, size), squeeze=False)
    ref = reference["theta"] if reference is not None else None
    if ref is not None and ref.shape[1] != d:
        raise io.SchemaError(f"reference samples are {ref.shape[1]}-d, main set is {d}-d")
    for i in range(d):
        for j in range(d):
            ax = axes[i][j]
            ax.grid(False)
            if j > i:
                ax.axis("off")
                continue
            if i == j:
                if ref is not None:
                    ax.hist(ref[:, j], bins=bins, density=True, histtype="step",
                            color="gray", linewidth=1.6)
                ax.hist(theta[:, j], bins=bins, density=True, histtype="step",
                        color="red", linestyle="--", linewidth=1.0)
                ax.set_yticks([])
            else:
                if ref is not None:
                    _pair_contour(ax, ref[:, j], ref[:, i], bins, "gray", "solid", 1.6)
                _pair_contour(ax, theta[:, j], theta[:, i], bins, "red", "dashed", 1.0)
            if i == d - 1:
                ax.set_xlabel(labels[j])
            else:
                ax.set_xticklabels([])
            if j == 0 and i > 0:
                ax.set_ylabel(labels[i])
            elif j > 0:
                ax.set_yticklabels([])
    fig.suptitle(title)
    return fig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", required=True)
    ap.add_argument("--reference", help="optional reference samples.csv drawn underneath")
    ap.add_argument("--bins", type=int, default=60)
    ap.add_argument("--labels", help="comma-separated axis labels")
    ap.add_argument("--title", default="corner")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    samples = io.load_samples(args.samples)
    reference = io.load_samples(args.reference) if args.reference else None
    labels = args.labels.split(",") if args.labels else None
    fig = build_figure(samples, reference, bins=args.bins, labels=labels, title=args.title)
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
