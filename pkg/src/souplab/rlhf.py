"""KL-penalized policy optimization against a frozen reference.

One loop serves three reference strategies:

* ``single`` -- KL to one SFT model (standard PPO);
* ``soup``   -- KL to the weight-space average of several SFT models;
* ``mkl``    -- the mean of the KLs to two separate SFT models.

Sequence-level KL is the exact per-token KL over the full vocabulary,
summed over response positions.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .model import (
    EOS,
    ParameterVector,
    PolicyBatch,
    PolicyObjective,
    ValueBatch,
    ValueMSELoss,
    batch_rewards,
    policy_logprobs,
    require_compatible,
    response_contexts,
    sample_batch,
    window,
)
from .soup import SoupSpec, _weighted_sum, make_soup_n
from .taskgen import TaskConfig, oracle_reward
from .training import Optimizer, TrainConfig

PPO_BETA = 0.2
SALSA_BETA = 0.01


class RlhfDivergenceError(FloatingPointError):
    pass


def _params(x) -> ParameterVector:
    return x.params if isinstance(x, Checkpoint) else x


def _hash(x) -> str:
    return x.hash if isinstance(x, Checkpoint) else x.digest()


@dataclass(frozen=True, eq=False)
class ReferenceStrategy:
    """Frozen KL anchor(s) for policy optimization.

    Build with :meth:`single`, :meth:`soup` or :meth:`mkl`. For ``soup`` the
    averaged parameters are computed once here and never change.
    """

    kind: str
    members: tuple
    weights: tuple

    def __post_init__(self):
        if self.kind not in ("single", "soup", "mkl"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        params = tuple(_params(m) for m in self.members)
        require_compatible(*params)
        if self.kind == "single" and len(params) != 1:
            raise ValueError("single reference takes exactly one member")
        if self.kind == "mkl" and len(params) != 2:
            raise ValueError("mkl reference takes exactly two members")
        if self.kind == "soup":
            SoupSpec(self.members, self.weights)
            n = len(params)
            if all(w == 1.0 / n for w in self.weights):
                anchors = [(1.0, make_soup_n(list(params)))]
            else:
                anchors = [(1.0, _weighted_sum(list(params), self.weights))]
        elif self.kind == "mkl":
            anchors = [(0.5, params[0]), (0.5, params[1])]
        else:
            anchors = [(1.0, params[0])]
        object.__setattr__(self, "_anchors", tuple(anchors))

    @classmethod
    def single(cls, ref) -> "ReferenceStrategy":
        return cls("single", (ref,), (1.0,))

    @classmethod
    def soup(cls, members: Sequence, weights: Sequence[float] | None = None) -> "ReferenceStrategy":
        n = len(members)
        weights = tuple([1.0 / n] * n) if weights is None else tuple(weights)
        return cls("soup", tuple(members), weights)

    @classmethod
    def mkl(cls, ref, other) -> "ReferenceStrategy":
        return cls("mkl", (ref, other), (0.5, 0.5))

    @property
    def anchors(self) -> tuple:
        """(weight, params) pairs entering the KL penalty."""
        return self._anchors

    @property
    def arch(self):
        return self._anchors[0][1].arch

    def materialized(self) -> ParameterVector:
        """Single parameter vector standing for this reference (first member for mkl)."""
        return self._anchors[0][1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "members": [_hash(m) for m in self.members],
                "weights": list(self.weights)}


@dataclass
class RlhfConfig:
    beta: float = PPO_BETA
    learning_rate: float = 3e-3
    batch_size: int = 16
    rollouts_per_prompt: int = 4
    clip_epsilon: float = 0.2
    inner_epochs: int = 2
    steps: int = 100
    temperature: float = 1.0
    baseline: str = "batch-mean"
    seed: int = 0
    optimizer: str = "adam"
    init_from: str = "ref"
    value_learning_rate: float = 1e-2

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.clip_epsilon <= 1:
            raise ValueError("clip_epsilon must be in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.baseline not in ("batch-mean", "learned-value-head"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.init_from not in ("ref", "soup"):
            raise ValueError(f"unknown init_from {self.init_from!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepStats:
    step: int
    mean_reward: float
    mean_kl: float
    mean_resp_len: float
    loss: float
    mean_oracle: float = float("nan")
    alarm_flag: int = 0


@dataclass
class RunLog:
    steps: list = field(default_factory=list)

    def append(self, s: StepStats) -> None:
        self.steps.append(s)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps], dtype=np.float64)

    def __len__(self):
        return len(self.steps)

    CSV_COLUMNS = ("step", "mean_reward", "mean_kl", "mean_resp_len", "loss", "alarm_flag")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_COLUMNS)
            for s in self.steps:
                w.writerow([getattr(s, c) for c in self.CSV_COLUMNS])


@dataclass
class RlhfRunState:
    theta: np.ndarray
    reference: ReferenceStrategy
    rm: object
    cfg: RlhfConfig
    step: int = 0
    log: RunLog = field(default_factory=RunLog)
    optimizer: Optimizer | None = None
    value_theta: np.ndarray | None = None
    task: TaskConfig = field(default_factory=TaskConfig)

    @property
    def arch(self):
        return self.reference.arch

    @property
    def policy(self) -> ParameterVector:
        return ParameterVector(self.arch, self.theta)


def make_state(policy, reference: ReferenceStrategy, rm, cfg: RlhfConfig,
               task: TaskConfig = TaskConfig()) -> RlhfRunState:
    params = _params(policy)
    require_compatible(params, reference.materialized())
    opt_cfg = TrainConfig(learning_rate=cfg.learning_rate, optimizer=cfg.optimizer,
                          lr_schedule="constant", beta2=0.99)
    value_theta = None
    if cfg.baseline == "learned-value-head":
        arch = params.arch
        value_theta = np.concatenate([params.as_float64()[:arch.backbone_size()],
                                      np.zeros(arch.hidden_dim + 1)])
    return RlhfRunState(params.as_float64(), reference, rm, cfg,
                        optimizer=Optimizer(opt_cfg, len(params), max(cfg.steps, 1)),
                        value_theta=value_theta, task=task)


# ---------------------------------------------------------------------------
# KL and objective
# ---------------------------------------------------------------------------

def kl_sequence(policy: ParameterVector, ref: ParameterVector, prompt, response) -> float:
    """Sum over response positions of KL(policy(.|ctx_t) || ref(.|ctx_t))."""
    require_compatible(policy, ref)
    if len(response) == 0:
        return 0.0
    ctx = response_contexts(prompt, response, policy.arch.context_window)
    lp = policy_logprobs(policy.arch, policy.as_float64(), ctx)
    lq = policy_logprobs(ref.arch, ref.as_float64(), ctx)
    return float((np.exp(lp) * (lp - lq)).sum())


def reference_kl(policy: ParameterVector, reference: ReferenceStrategy, prompt, response) -> float:
    return sum(w * kl_sequence(policy, anchor, prompt, response) for w, anchor in reference.anchors)


def score(rm, prompts, responses) -> np.ndarray:
    """Rewards from a reward-model checkpoint/params or a callable scorer."""
    if callable(rm):
        return np.asarray(rm(prompts, responses), dtype=np.float64)
    return batch_rewards(_params(rm), prompts, responses)


def objective_loss(state: RlhfRunState, prompt, response) -> float:
    """-R(x, y) + beta * KL term for the state's reference strategy."""
    r = float(score(state.rm, [prompt], [response])[0])
    kl = reference_kl(state.policy, state.reference, prompt, response)
    return -r + state.cfg.beta * kl


# ---------------------------------------------------------------------------
# the PPO step
# ---------------------------------------------------------------------------

def _positions(prompts, responses, width):
    ctxs, actions, seq_index = [], [], []
    for i, (x, y) in enumerate(zip(prompts, responses)):
        if not y:
            continue
        ctxs.append(response_contexts(x, y, width))
        actions.extend(y)
        seq_index.extend([i] * len(y))
    return (np.concatenate(ctxs), np.asarray(actions, dtype=np.int64),
            np.asarray(seq_index, dtype=np.int64))


def body_length(response) -> int:
    return len(response) - (1 if response and response[-1] == EOS else 0)


def rlhf_step(state: RlhfRunState, prompts, rng: np.random.Generator):
    """One rollout + clipped-surrogate update. Mutates and returns ``state``."""
    if len(prompts) == 0:
        raise ValueError("rlhf_step needs at least one prompt")
    cfg, arch = state.cfg, state.arch
    W, L = arch.context_window, arch.max_response_len
    batch_prompts = [tuple(x) for x in prompts for _ in range(cfg.rollouts_per_prompt)]
    n = len(batch_prompts)
    uniforms = rng.random((n, L))
    responses = sample_batch(arch, state.theta, batch_prompts, uniforms, cfg.temperature)

    ctx, actions, seq_index = _positions(batch_prompts, responses, W)
    rows = np.arange(len(actions))
    old_lp = policy_logprobs(arch, state.theta, ctx)
    old_probs = np.exp(old_lp)
    ref_lps, ref_ws = [], []
    kl_seq = np.zeros(n)
    for w, anchor in state.reference.anchors:
        lq = policy_logprobs(arch, anchor.as_float64(), ctx)
        ref_lps.append(lq)
        ref_ws.append(w)
        kl_seq += w * np.bincount(seq_index, (old_probs * (old_lp - lq)).sum(axis=1), minlength=n)

    r = score(state.rm, batch_prompts, responses)
    G = r - cfg.beta * kl_seq
    if cfg.baseline == "learned-value-head":
        vctx = np.stack([window(x, W) for x in batch_prompts])
        baseline = _value(state, vctx)
    else:
        baseline = G.mean()
    adv = (G - baseline) / max(G.std(), 1e-6)

    batch = PolicyBatch(ctx, actions, seq_index, n, adv, old_lp[rows, actions], ref_lps, ref_ws)
    objective = PolicyObjective(beta=cfg.beta, clip_epsilon=cfg.clip_epsilon)
    loss = float("nan")
    for _ in range(cfg.inner_epochs):
        try:
            loss, grad = objective.value_and_grad(arch, state.theta, batch)
        except FloatingPointError as e:
            raise RlhfDivergenceError(
                f"step {state.step}: non-finite {getattr(e, 'where', 'loss')} "
                f"(mean reward {r.mean():.4g}, mean kl {kl_seq.mean():.4g})") from e
        state.theta = state.optimizer.step(state.theta, grad)
    if not np.all(np.isfinite(state.theta)):
        raise RlhfDivergenceError(f"step {state.step}: policy parameters went non-finite")
    if cfg.baseline == "learned-value-head":
        _fit_value(state, vctx, G)

    stats = StepStats(
        step=state.step,
        mean_reward=float(r.mean()),
        mean_kl=float(kl_seq.mean()),
        mean_resp_len=float(np.mean([body_length(y) for y in responses])),
        loss=loss,
        mean_oracle=float(np.mean([oracle_reward(x, y, state.task)
                                   for x, y in zip(batch_prompts, responses)])),
    )
    state.step += 1
    state.log.append(stats)
    return state, stats


def _value(state, vctx):
    from .model import rewards
    return rewards(state.arch, state.value_theta, vctx)


def _fit_value(state, vctx, targets):
    loss = ValueMSELoss()
    for _ in range(state.cfg.inner_epochs):
        _, g = loss.value_and_grad(state.arch, state.value_theta, ValueBatch(vctx, targets))
        state.value_theta = state.value_theta - state.cfg.value_learning_rate * g


def run_rlhf(sft: Checkpoint, reference: ReferenceStrategy, rm, cfg: RlhfConfig, prompts,
             task: TaskConfig = TaskConfig(), monitor: tuple | None = (0.5, 10),
             callback: Callable | None = None):
    """Initialize the policy from ``sft`` and run ``cfg.steps`` PPO steps.

    Each step draws ``cfg.batch_size`` prompts (without replacement) from
    ``prompts``. Returns the stage=rlhf checkpoint and the :class:`RunLog`.
    ``monitor`` = (collapse_fraction, window) fills the alarm column.
    """
    prompts = [tuple(x) for x in prompts]
    if not prompts:
        raise ValueError("no prompts")
    start = reference.materialized() if cfg.init_from == "soup" else _params(sft)
    state = make_state(start, reference, rm, cfg, task)
    for step in range(cfg.steps):
        pick = np.random.default_rng([cfg.seed, step, 1]).choice(
            len(prompts), size=min(cfg.batch_size, len(prompts)), replace=False)
        rlhf_step(state, [prompts[i] for i in pick], np.random.default_rng([cfg.seed, step, 2]))
        if monitor is not None and len(state.log) >= 2 * monitor[1]:
            flag = kl_hack_monitor(state.log, *monitor) == "alarm"
            state.log.steps[-1].alarm_flag = int(flag)
        if callback is not None:
            callback(state)
    params = _params(sft) if cfg.steps == 0 else state.policy
    parents = tuple(dict.fromkeys([_hash(sft)] + [_hash(m) for m in reference.members]))
    rm_hash = None if callable(rm) else _hash(rm)
    ckpt = Checkpoint(params, "rlhf", seeds={"rlhf": cfg.seed}, parents=parents,
                      base_hash=getattr(sft, "base_hash", None),
                      meta={"strategy": reference.to_dict(), "rlhf": cfg.to_dict(), "rm": rm_hash})
    return ckpt, state.log


def kl_hack_monitor(stats_log, collapse_fraction: float, window: int) -> str:
    """``"alarm"`` iff trailing-window mean length < fraction x initial-window mean."""
    if not 0 < collapse_fraction < 1:
        raise ValueError("collapse_fraction must be in (0, 1)")
    if isinstance(stats_log, RunLog):
        stats_log = stats_log.steps
    lengths = np.array([s.mean_resp_len if isinstance(s, StepStats) else s for s in stats_log],
                       dtype=np.float64)
    if window < 1 or len(lengths) < 2 * window:
        raise ValueError(f"need at least {2 * window} log entries, got {len(lengths)}")
    head, tail = lengths[:window].mean(), lengths[-window:].mean()
    return "alarm" if tail < collapse_fraction * head else "ok"
