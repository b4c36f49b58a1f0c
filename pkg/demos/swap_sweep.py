"""
Robot-count sweep through the command line
==========================================

Runs the obstacle-free ring swap with 6 and 12 robots and prints the
summary table. Equivalent to

    rlss run scenarios/swap6.yaml -o runs/swap --robots 6,12

Takes about a minute on one core.
"""

import csv
import sys
import tempfile
from pathlib import Path

from rlss.cli import main

root = Path(__file__).resolve().parent.parent
out = Path(tempfile.mkdtemp(prefix="rlss-sweep-"))

code = main(["run", str(root / "scenarios" / "swap6.yaml"), "-o", str(out), "--robots", "6,12"])
if code:
    sys.exit(code)

# one row per variant; each variant also has its own trace and metrics in out/<run>/
with open(out / "summary.csv") as f:
    for row in csv.DictReader(f):
        print(row["run"], "robots", row["robots"], "collisions", row["collisions"],
              "deadlocks", row["deadlocks"], "avg ms", round(float(row["avg_ms"]), 1))
print("files in", out)
