"""Grid-transform panels: one warped lattice per temperature."""

from __future__ import annotations

import argparse

import matplotlib.pyplot as plt

from . import io, style


def build_figure(shape, per_T, title="flow transform of a regular grid"):
    style.apply()
    temps = sorted(per_T)
    nx, ny = shape
    fig, axes = plt.subplots(1, len(temps), figsize=(2.6 * len(temps), 2.8), squeeze=False)
    for ax, T in zip(axes[0], temps):
        mapped = per_T[T].reshape(nx, ny, 2)
        for i in range(nx):
            ax.plot(mapped[i, :, 0], mapped[i, :, 1], color="#1f77b4", linewidth=0.7)
        for j in range(ny):
            ax.plot(mapped[:, j, 0], mapped[:, j, 1], color="#1f77b4", linewidth=0.7)
        ax.set_title(f"T = {T:g}")
        ax.set_aspect("equal")
        ax.grid(False)
    fig.suptitle(title)
    return fig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", required=True)
    ap.add_argument("--title", default="flow transform of a regular grid")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    shape, _, per_T = io.load_grid(args.grid)
    fig = build_figure(shape, per_T, title=args.title)
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
