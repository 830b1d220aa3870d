"""Evidence-vs-temperature errorbar panel with a zero reference line."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt
import numpy as np

from . import io, style


def build_figure(estimates, title="evidence via importance sampling"):
    style.apply()
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    T = np.array([e["T"] for e in estimates])
    z = np.array([e["log_Z_hat"] for e in estimates])
    err = np.array([e["std_err_log"] for e in estimates])
    ax.axhline(0.0, color="black", linewidth=1.0, zorder=1)
    ax.errorbar(T, z, yerr=err, fmt="o", capsize=3, markersize=4, color="#1f77b4", zorder=2)
    flagged = [e for e in estimates if e.get("flagged_unreliable")]
    if flagged:
        ax.scatter(
            [e["T"] for e in flagged],
            [e["log_Z_hat"] for e in flagged],
            marker="x",
            color="crimson",
            s=40,
            label="low ESS",
            zorder=3,
        )
        ax.legend(loc="best")
    span = T.max() - T.min()
    pad = 0.05 * span if span > 0 else 0.05
    ax.set_xlim(T.min() - pad, T.max() + pad)
    ax.set_xlabel("proposal temperature T")
    ax.set_ylabel(r"$\ln \hat{Z}$")
    ax.set_title(title)
    return fig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--evidence", required=True)
    ap.add_argument("--title", default="evidence via importance sampling")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    estimates = io.load_evidence(args.evidence)
    fig = build_figure(estimates, title=args.title)
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
