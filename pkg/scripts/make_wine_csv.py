"""Merge the UCI red and white wine-quality files into one comma-separated CSV.

Usage: python scripts/make_wine_csv.py winequality-red.csv winequality-white.csv data/winequality.csv

The UCI files are semicolon-separated; the output adds an ``is_red`` column
(1 for red, 0 for white) that the Wine config splits on and then drops.
"""

import sys
from pathlib import Path

import pandas as pd


def main(red: str, white: str, out: str) -> None:
    frames = []
    for path, flag in ((red, 1), (white, 0)):
        df = pd.read_csv(path, sep=";")
        df["is_red"] = flag
        frames.append(df)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(out, index=False)


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])
