"""Walk the straight line between two SFT models and look at the reward.

Runs the default pipeline for one seed (cached under runs/demo, so later demos
reuse it), then prints the interpolation curve under both scorers and the
best point of the barycentric plane over three SFTs.
"""
import csv
import sys
from pathlib import Path

from souplab.pipeline import ExperimentManifest, run_pipeline

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = Path("runs/demo") / f"seed-{seed}"
res = run_pipeline(ExperimentManifest().reseeded(seed), out, log=print)

print(f"\nreward model held-out accuracy: {res.summary['rm']['heldout_accuracy']:.3f}")
for scorer in ("rm", "oracle"):
    curve = res.summary["scans"][f"line_{scorer}"]
    ends = max(curve[0][1], curve[-1][1])
    print(f"\n{scorer} scorer, alpha -> mean reward")
    for alpha, r in curve:
        bar = "#" * int(max(0.0, r - ends + 0.3) * 60)
        print(f"  {alpha:4.2f}  {r:+.4f}  {bar}")

with open(out / "scans" / "plane.csv") as f:
    rows = [dict(r) for r in csv.DictReader(f)]
inside = [r for r in rows if min(float(r[k]) for k in ("w1", "w2", "w3")) >= -1e-9]
outside = [r for r in rows if r not in inside]
mean = lambda rs: sum(float(r["mean"]) for r in rs) / len(rs)
print(f"\nplane: {len(inside)} points inside the triangle avg {mean(inside):.3f}, "
      f"{len(outside)} outside avg {mean(outside):.3f}")
print(f"plots: {out / 'scans'}")
