"""Compare the soup-anchored policy with plain PPO.

Uses the same cached run as the landscape demo (one seed by default, pass more
seeds as arguments) and prints the win/loss/tie table, the mean oracle reward
of every trained policy, and the SALSA-n ablation.
"""
import sys
from pathlib import Path

import numpy as np

from souplab.pipeline import ExperimentManifest, run_pipeline

seeds = [int(s) for s in sys.argv[1:]] or [0]
tables = []
for s in seeds:
    res = run_pipeline(ExperimentManifest().reseeded(s), Path("runs/demo") / f"seed-{s}")
    tables.append(res.summary)

print(f"{'comparison':34s} {'W':>5s} {'L':>5s} {'T':>5s} {'adj %':>7s}   (seeds {seeds})")
for tag in tables[0]["winrates"]:
    w = np.sum([t["winrates"][tag]["W"] for t in tables])
    l = np.sum([t["winrates"][tag]["L"] for t in tables])
    ties = np.sum([t["winrates"][tag]["T"] for t in tables])
    adj = np.mean([t["winrates"][tag]["adj_win_rate"] for t in tables])
    print(f"{tag:34s} {w:5d} {l:5d} {ties:5d} {adj:7.2f}")

print("\nmean oracle reward on held-out prompts")
for cell in tables[0]["mean_oracle"]:
    print(f"  {cell:16s} {np.mean([t['mean_oracle'][cell] for t in tables]):.3f}")

n2 = np.mean([t["winrates"]["salsa-b0.01 vs ppo-b0.2"]["adj_win_rate"] for t in tables])
n3 = np.mean([t["winrates"]["salsa-3-b0.01 vs ppo-b0.2"]["adj_win_rate"] for t in tables])
print(f"\nsoup size vs PPO(0.2): n=1 50.00 (identical to PPO), n=2 {n2:.2f}, n=3 {n3:.2f}")
