#!/usr/bin/env python3
"""Five-seed benchmark run on the 16-class scene with the default config.

Expects data/indian_pines.hsif at the repository root (see README for how to
produce it with the converter). Extra arguments pass straight through to the
train command, so e.g. ``--grouping adjacent`` or ``--config file`` work here
too. Results land in runs/indian_pines/.
"""

import sys
from pathlib import Path

from igmamba.cli import main

REPO = Path(__file__).resolve().parents[1]


if __name__ == "__main__":
    dataset = REPO / "data" / "indian_pines.hsif"
    if not dataset.exists():
        sys.exit(f"missing {dataset}; convert the source scene first (see README)")
    sys.exit(
        main(
            [
                "train",
                "--dataset", str(dataset),
                "--seed", "0",
                "--trials", "5",
                "--out", str(REPO / "runs" / "indian_pines"),
                *sys.argv[1:],
            ]
        )
    )
