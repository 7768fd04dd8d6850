"""Relaxometry vial study: full pipeline, then per-vial T1 agreement.

    python scripts/vial_study.py [--config configs/vials.json] [--out runs/vials]
"""

import argparse
import csv
import json
import time
from pathlib import Path

from irmanifold.cli import main

ROOT = Path(__file__).resolve().parents[1]


def report(out: Path) -> None:
    with open(out / "roi_t1.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'vial':>8} {'truth ms':>9} {'estimate ms':>12} {'error %':>8}")
    for r in rows:
        est, ref = float(r["t1_estimate_ms"]), float(r["t1_truth_ms"])
        print(f"{r['roi']:>8} {ref:9.1f} {est:12.1f} {100 * (est - ref) / ref:8.1f}")
    agreement = json.loads((out / "agreement.json").read_text())
    print(f"R^2 = {agreement['r_squared']:.4f}  ICC(A,1) = {agreement['icc_a1']:.4f}")


def cli() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "vials.json")
    parser.add_argument("--out", type=Path, default=Path("runs/vials"))
    args = parser.parse_args()
    t0 = time.perf_counter()
    code = main(["run-all", "--config", str(args.config), "--out", str(args.out)])
    print(f"run-all exit {code} after {(time.perf_counter() - t0) / 60:.1f} min")
    if code == 0:
        report(args.out)
    raise SystemExit(code)


if __name__ == "__main__":
    cli()
