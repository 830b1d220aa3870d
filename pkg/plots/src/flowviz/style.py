"""Shared figure style so renders are stable across runs."""

import matplotlib as mpl

RC = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.25,
    "figure.autolayout": True,
}


def apply():
    mpl.rcParams.update(RC)
