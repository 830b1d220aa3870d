"""Render every fixture into golden/ (run once; goldens are checked in)."""

import os

from flowviz import corner, density2d, evidence_sweep, grid_panel, mode_histograms

HERE = os.path.dirname(os.path.abspath(__file__))
FIX = os.path.join(HERE, "..", "fixtures")
GOLD = os.path.join(HERE, "..", "golden")


def main():
    os.makedirs(GOLD, exist_ok=True)
    density2d.main([
        "--samples", f"{FIX}/samples_ring2d.csv",
        "--target-density", f"{FIX}/ring_density.csv",
        "--title", "ring mixture",
        "--out", f"{GOLD}/density2d.png",
    ])
    evidence_sweep.main([
        "--evidence", f"{FIX}/evidence.json",
        "--out", f"{GOLD}/evidence_sweep.png",
    ])
    grid_panel.main([
        "--grid", f"{FIX}/grid.csv",
        "--out", f"{GOLD}/grid_panel.png",
    ])
    mode_histograms.main([
        "--modes", f"{FIX}/modes.json",
        "--out", f"{GOLD}/mode_histograms.png",
    ])
    corner.main([
        "--samples", f"{FIX}/samples_10d.csv",
        "--reference", f"{FIX}/reference_10d.csv",
        "--labels", "mu,log tau,eta1,eta2,eta3,eta4,eta5,eta6,eta7,eta8",
        "--title", "hierarchical posterior",
        "--out", f"{GOLD}/corner.png",
    ])


if __name__ == "__main__":
    main()
