#!/usr/bin/env python3
"""Plot training curves written by the train-sim command.

Each input is a JSONL file with one record per PPO update; the mean GBR
series is drawn per file, with a light moving average for readability.

Usage:
    python3 scripts/plot_curves.py runs/sim/curve.jsonl --out curves.png
    python3 scripts/plot_curves.py runs/grid/curve_k*.jsonl --out grid.png
"""

import argparse
import json
from pathlib import Path


def load_curve(path: Path) -> tuple[list[int], list[float]]:
    updates, gbr = [], []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            updates.append(record["update"])
            gbr.append(record["mean_gbr"])
    return updates, gbr


def moving_average(values: list[float], window: int) -> list[float]:
    if window <= 1:
        return list(values)
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo:i + 1]) / (i + 1 - lo))
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("curves", nargs="+", help="curve JSONL files")
    parser.add_argument("--out", default="curves.png", help="output image path")
    parser.add_argument("--window", type=int, default=10, help="smoothing window")
    args = parser.parse_args()

    import matplotlib  # deferred so --help works without a display stack

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for raw in args.curves:
        path = Path(raw)
        updates, gbr = load_curve(path)
        if not updates:
            print(f"skipping empty curve {path}")
            continue
        (line,) = ax.plot(updates, gbr, alpha=0.25, linewidth=1.0)
        ax.plot(updates, moving_average(gbr, args.window), color=line.get_color(),
                linewidth=1.8, label=path.stem)
    ax.set_xlabel("update")
    ax.set_ylabel("mean GBR per batch")
    ax.set_ylim(-1.05, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
