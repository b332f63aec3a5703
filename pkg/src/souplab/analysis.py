"""Reward-landscape scans, reward distributions and pairwise win rates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .model import ParameterVector, batch_rewards, sample_batch
from .soup import barycentric_combine, make_soup
from .taskgen import TaskConfig, oracle_reward


def _params(x) -> ParameterVector:
    return x.params if isinstance(x, Checkpoint) else x


@dataclass(frozen=True)
class ScanPoint:
    coords: tuple
    mean_reward: float
    std_reward: float
    n_samples: int


# ---------------------------------------------------------------------------
# sampling + scoring
# ---------------------------------------------------------------------------

def _uniforms(seed: int, n_prompts: int, samples_per_prompt: int, length: int) -> np.ndarray:
    """Per-(prompt, sample) uniforms; identical across models for a given seed."""
    return np.random.default_rng([seed, 0xE7A1]).random((n_prompts * samples_per_prompt, length))


def sample_responses(policy, prompts, samples_per_prompt: int = 1, seed: int = 0,
                     temperature: float = 1.0):
    params = _params(policy)
    rep = [tuple(x) for x in prompts for _ in range(samples_per_prompt)]
    u = _uniforms(seed, len(prompts), samples_per_prompt, params.arch.max_response_len)
    return rep, sample_batch(params.arch, params.as_float64(), rep, u, temperature)


def score_responses(prompts, responses, scorer="oracle", rm=None,
                    task: TaskConfig = TaskConfig()) -> np.ndarray:
    """Score with the oracle or a reward model.

    ``scorer`` is ``"oracle"``, ``"rm"`` (uses ``rm``), or a reward-model
    checkpoint/params directly.
    """
    if isinstance(scorer, (Checkpoint, ParameterVector)):
        rm, scorer = scorer, "rm"
    if scorer == "oracle":
        return np.array([oracle_reward(x, y, task) for x, y in zip(prompts, responses)])
    if scorer == "rm":
        if rm is None:
            raise ValueError("scorer='rm' requires a reward-model checkpoint")
        return batch_rewards(_params(rm), prompts, responses)
    raise ValueError(f"unknown scorer {scorer!r}")


def evaluate_rewards(policy, prompts, scorer="oracle", rm=None, samples_per_prompt: int = 1,
                     seed: int = 0, temperature: float = 1.0,
                     task: TaskConfig = TaskConfig()) -> np.ndarray:
    if len(prompts) == 0:
        raise ValueError("no prompts")
    rep, ys = sample_responses(policy, prompts, samples_per_prompt, seed, temperature)
    return score_responses(rep, ys, scorer, rm, task)


def _point(coords, r) -> ScanPoint:
    return ScanPoint(tuple(coords), float(r.mean()), float(r.std()), int(r.size))


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def scan_line(ref, other, alphas: Sequence[float], prompts, scorer="oracle", rm=None,
              samples_per_prompt: int = 1, seed: int = 0, temperature: float = 1.0,
              task: TaskConfig = TaskConfig()) -> list:
    """Mean reward of the soup ``(1-a) ref + a other`` for each ``a``, common seeds."""
    if len(alphas) == 0:
        raise ValueError("alphas must be non-empty")
    if scorer == "rm" and rm is None:
        raise ValueError("scorer='rm' requires a reward-model checkpoint")
    a, b = _params(ref), _params(other)
    out = []
    for alpha in alphas:
        r = evaluate_rewards(make_soup(a, b, alpha), prompts, scorer, rm, samples_per_prompt,
                             seed, temperature, task)
        out.append(_point((float(alpha),), r))
    return out


def simplex_lattice(grid_extent: float, grid_density: int) -> list:
    """Triangular lattice on the simplex, scaled by ``grid_extent`` about the centroid.

    Points are ``e * v + (1 - e) * c`` for lattice vertices ``v`` with spacing
    ``1/grid_density``; ``e > 1`` reaches outside the triangle.
    """
    if grid_extent < 1:
        raise ValueError("grid_extent must be >= 1")
    if grid_density < 1:
        raise ValueError("grid_density must be >= 1")
    D, e = grid_density, float(grid_extent)
    c = 1.0 / 3.0
    pts = []
    for i in range(D, -1, -1):
        for j in range(D - i, -1, -1):
            k = D - i - j
            v = (i / D, j / D, k / D)
            if e == 1.0:
                pts.append(v)
            else:
                pts.append(tuple(e * vi + (1.0 - e) * c for vi in v))
    return pts


def scan_plane(m1, m2, m3, grid_extent: float, grid_density: int, prompts, scorer="oracle",
               rm=None, samples_per_prompt: int = 1, seed: int = 0, temperature: float = 1.0,
               task: TaskConfig = TaskConfig()) -> list:
    if scorer == "rm" and rm is None:
        raise ValueError("scorer='rm' requires a reward-model checkpoint")
    p1, p2, p3 = _params(m1), _params(m2), _params(m3)
    out = []
    for w in simplex_lattice(grid_extent, grid_density):
        r = evaluate_rewards(barycentric_combine(p1, p2, p3, w), prompts, scorer, rm,
                             samples_per_prompt, seed, temperature, task)
        out.append(_point(w, r))
    return out


@dataclass
class RewardDistribution:
    rewards: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def std(self) -> float:
        return float(self.rewards.std())


def reward_distribution(policy, prompts, scorer="oracle", rm=None, samples_per_prompt: int = 1,
                        seed: int = 0, temperature: float = 1.0, greedy: bool = False,
                        bin_edges: Sequence[float] | None = None,
                        task: TaskConfig = TaskConfig()) -> RewardDistribution:
    """Histogram of rewards over all generations. ``greedy`` decodes by argmax."""
    if len(prompts) == 0:
        raise ValueError("no prompts")
    r = evaluate_rewards(policy, prompts, scorer, rm, samples_per_prompt, seed,
                         0.0 if greedy else temperature, task)
    if bin_edges is None:
        bin_edges = np.linspace(-2.0, task.max_reward + 0.2, 23)
    edges = np.asarray(bin_edges, dtype=np.float64)
    counts, _ = np.histogram(np.clip(r, edges[0], edges[-1]), bins=edges)
    return RewardDistribution(r, edges, counts)


# ---------------------------------------------------------------------------
# win rates
# ---------------------------------------------------------------------------

def judge_pair(reward_a: float, reward_b: float, tau: float = 0.0) -> str:
    """``"a"``, ``"b"`` or ``"tie"``; a tie whenever |r_a - r_b| <= tau."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if abs(reward_a - reward_b) <= tau:
        return "tie"
    return "a" if reward_a > reward_b else "b"


@dataclass(frozen=True)
class WinRateReport:
    wins: int
    losses: int
    ties: int
    judge: str = "oracle"
    tau: float = 0.0
    tag: str = ""

    @property
    def total(self) -> int:
        return self.wins + self.losses + self.ties

    @property
    def win_rate(self) -> float:
        return self.wins / self.total * 100 if self.total else 0.0

    @property
    def adjusted_win_rate(self) -> float:
        """Percent of comparisons won, counting each tie as half a win."""
        return (self.wins + 0.5 * self.ties) / self.total * 100 if self.total else 50.0

    def swapped(self, tag: str = "") -> "WinRateReport":
        return WinRateReport(self.losses, self.wins, self.ties, self.judge, self.tau, tag)

    def row(self) -> list:
        return [self.tag, self.wins, self.losses, self.ties,
                f"{self.win_rate:.2f}", f"{self.adjusted_win_rate:.2f}"]


def evaluate_winrate(a, b, prompts, judge: str = "oracle", tau: float = 0.25, rm=None,
                     seed: int = 0, temperature: float = 1.0, samples_per_prompt: int = 1,
                     task: TaskConfig = TaskConfig(), tag: str = "") -> WinRateReport:
    """Judge one generation of ``a`` against one of ``b`` per prompt.

    Both policies sample with the same per-prompt random numbers, so
    comparing a policy with itself yields only ties.
    """
    if len(prompts) == 0:
        raise ValueError("no prompts")
    ra = evaluate_rewards(a, prompts, judge, rm, samples_per_prompt, seed, temperature, task)
    rb = evaluate_rewards(b, prompts, judge, rm, samples_per_prompt, seed, temperature, task)
    verdicts = [judge_pair(x, y, tau) for x, y in zip(ra, rb)]
    return WinRateReport(verdicts.count("a"), verdicts.count("b"), verdicts.count("tie"),
                         judge, tau, tag)


# ---------------------------------------------------------------------------
# CSV / SVG
# ---------------------------------------------------------------------------

def write_line_csv(path, points) -> None:
    _write(path, ["alpha", "mean", "std", "n"],
           [[p.coords[0], p.mean_reward, p.std_reward, p.n_samples] for p in points])


def write_plane_csv(path, points) -> None:
    _write(path, ["w1", "w2", "w3", "mean", "std", "n"],
           [[*p.coords, p.mean_reward, p.std_reward, p.n_samples] for p in points])


def write_distribution_csv(path, dist: RewardDistribution) -> None:
    e = dist.bin_edges
    _write(path, ["bin_lo", "bin_hi", "count"],
           [[e[i], e[i + 1], int(c)] for i, c in enumerate(dist.counts)])


def write_reports_csv(path, reports) -> None:
    _write(path, ["tag", "W", "L", "T", "win_rate", "adj_win_rate"], [r.row() for r in reports])


def _write(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    # fixed salt and no timestamp keep the SVG bytes reproducible
    plt.rcParams["svg.hashsalt"] = "souplab"
    return plt


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_line_svg(path, points, title: str = "") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(4, 3))
    a = [p.coords[0] for p in points]
    m = np.array([p.mean_reward for p in points])
    s = np.array([p.std_reward / np.sqrt(p.n_samples) for p in points])
    ax.errorbar(a, m, yerr=s, marker="o", capsize=3)
    ax.set_xlabel("alpha")
    ax.set_ylabel("mean reward")
    ax.set_title(title)
    _save(fig, path)
    plt.close(fig)


def plot_plane_svg(path, points, title: str = "") -> None:
    plt = _figure()
    w = np.array([p.coords for p in points])
    # barycentric -> cartesian with vertices (0,0), (1,0), (0.5, sqrt(3)/2)
    x = w[:, 1] + 0.5 * w[:, 2]
    y = np.sqrt(3) / 2 * w[:, 2]
    fig, ax = plt.subplots(figsize=(4, 3.6))
    sc = ax.tricontourf(x, y, [p.mean_reward for p in points], levels=12)
    ax.plot([0, 1, 0.5, 0], [0, 0, np.sqrt(3) / 2, 0], "w--", lw=1)
    fig.colorbar(sc, ax=ax, label="mean reward")
    ax.set_aspect("equal")
    ax.set_axis_off()
    ax.set_title(title)
    _save(fig, path)
    plt.close(fig)


def plot_distributions_svg(path, dists: dict, title: str = "") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(4, 3))
    for name, d in dists.items():
        centers = 0.5 * (d.bin_edges[1:] + d.bin_edges[:-1])
        ax.step(centers, d.counts, where="mid", label=f"{name} (mean {d.mean:.2f})")
    ax.set_xlabel("reward")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    ax.set_title(title)
    _save(fig, path)
    plt.close(fig)


def plot_reports_svg(path, reports, title: str = "") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 0.5 + 0.4 * len(reports)))
    tags = [r.tag for r in reports]
    adj = [r.adjusted_win_rate for r in reports]
    ax.barh(tags, adj, color="tab:blue")
    ax.axvline(50, color="k", lw=0.8, ls="--")
    ax.set_xlabel("adjusted win rate (%)")
    ax.set_title(title)
    _save(fig, path)
    plt.close(fig)
