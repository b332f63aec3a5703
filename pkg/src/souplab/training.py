"""Base pretraining, supervised fine-tuning and Bradley-Terry reward models."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .model import (
    ArchDescriptor,
    BradleyTerryLoss,
    CrossEntropyLoss,
    PairBatch,
    ParameterVector,
    TokenBatch,
    final_context,
    init_params,
    rewards,
    response_contexts,
)
from .taskgen import PreferencePair


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, where: str = "loss"):
        super().__init__(f"training diverged at step {step} ({where})")
        self.step = step


@dataclass
class TrainConfig:
    """Optimizer and schedule settings shared by all trainers.

    ``optimizer`` is ``"sgd"``, ``"momentum"`` or ``"adam"``; Adam uses
    decoupled weight decay (AdamW), the other two fold ``weight_decay`` into
    the gradient.
    """

    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 1
    shuffle_seed: int = 0
    init_jitter_scale: float = 0.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_schedule: str = "linear-decay"
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "linear-decay"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.init_jitter_scale < 0 or self.weight_decay < 0:
            raise ValueError("init_jitter_scale and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """Stateful first-order update over a flat float64 parameter array."""

    def __init__(self, cfg: TrainConfig, n_params: int, total_steps: int):
        self.cfg = cfg
        self.total = max(total_steps, 1)
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def lr(self) -> float:
        if self.cfg.lr_schedule == "constant":
            return self.cfg.learning_rate
        return self.cfg.learning_rate * max(0.0, 1.0 - self.t / self.total)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg, lr = self.cfg, self.lr()
        self.t += 1
        if cfg.optimizer == "adam":
            self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
            self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad ** 2
            mhat = self.m / (1 - cfg.beta1 ** self.t)
            vhat = self.v / (1 - cfg.beta2 ** self.t)
            return theta - lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta)
        grad = grad + cfg.weight_decay * theta
        if cfg.optimizer == "momentum":
            self.m = cfg.momentum * self.m + grad
            grad = self.m
        return theta - lr * grad


@dataclass
class LossLog:
    rows: list = field(default_factory=list)

    def add(self, step: int, split: str, loss: float) -> None:
        self.rows.append((step, split, float(loss)))

    def losses(self, split: str = "train") -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[1] == split])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "split", "loss"])
            w.writerows(self.rows)


def _minibatches(n: int, cfg: TrainConfig, epoch: int, seed: int):
    if cfg.shuffle:
        order = np.random.default_rng([seed, cfg.shuffle_seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, cfg.batch_size):
        yield order[lo:lo + cfg.batch_size]


def _fit(theta, loss_spec, arch, make_batch, n_items, cfg, seed, log: LossLog):
    n_batches = -(-n_items // cfg.batch_size)
    opt = Optimizer(cfg, theta.shape[0], n_batches * cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _minibatches(n_items, cfg, epoch, seed):
            try:
                loss, grad = loss_spec.value_and_grad(arch, theta, make_batch(idx))
            except FloatingPointError as e:
                raise DivergenceError(step, getattr(e, "where", "loss")) from e
            log.add(step, "train", loss)
            theta = opt.step(theta, grad)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(step, "parameters")
            step += 1
    return theta


# ---------------------------------------------------------------------------
# next-token training
# ---------------------------------------------------------------------------

def token_batch(sequences, width: int, n_prefix: Sequence[int] | None = None) -> TokenBatch:
    """Rows predicting each token after position ``n_prefix[i]`` of sequence ``i``.

    With ``n_prefix`` = prompt lengths this gives response-only SFT targets;
    with ``n_prefix`` = 1 (just BOS) it gives unconditioned LM targets.
    """
    ctxs, targets = [], []
    for i, seq in enumerate(sequences):
        k = 1 if n_prefix is None else n_prefix[i]
        ctxs.append(response_contexts(seq[:k], seq[k:], width))
        targets.extend(seq[k:])
    return TokenBatch(np.concatenate(ctxs), np.asarray(targets, dtype=np.int64))


def demo_batch(demos, width: int) -> TokenBatch:
    return token_batch([tuple(x) + tuple(y) for x, y in demos], width, [len(x) for x, _ in demos])


def mean_cross_entropy(params: ParameterVector, batch: TokenBatch) -> float:
    return CrossEntropyLoss().value_and_grad(params.arch, params.as_float64(), batch)[0]


def pretrain_base(arch: ArchDescriptor, corpus, cfg: TrainConfig, seed: int,
                  log: LossLog | None = None) -> Checkpoint:
    """Next-token cross-entropy on unconditioned sequences from a fresh init."""
    if not corpus:
        raise ValueError("corpus is empty")
    log = LossLog() if log is None else log
    theta = init_params(arch, seed).as_float64()
    per_seq = [token_batch([s], arch.context_window) for s in corpus]
    theta = _fit(theta, CrossEntropyLoss(), arch, lambda idx: _concat(per_seq, idx),
                 len(corpus), cfg, seed, log)
    return Checkpoint(ParameterVector(arch, theta), "base", seeds={"init": seed},
                      meta={"train": cfg.to_dict(), "n_sequences": len(corpus)})


def train_sft(base: Checkpoint, demos, cfg: TrainConfig, seed: int,
              log: LossLog | None = None) -> Checkpoint:
    """Response-token cross-entropy from ``base`` plus seeded Gaussian jitter."""
    if base.stage != "base":
        raise ValueError(f"train_sft expects a base checkpoint, got stage={base.stage!r}")
    if not demos:
        raise ValueError("no demonstrations")
    log = LossLog() if log is None else log
    arch = base.arch
    theta = base.params.as_float64()
    if cfg.init_jitter_scale > 0:
        rng = np.random.default_rng([seed, 0x717])
        theta = theta + cfg.init_jitter_scale * rng.standard_normal(theta.shape)
    per_demo = [demo_batch([d], arch.context_window) for d in demos]
    theta = _fit(theta, CrossEntropyLoss(), arch, lambda idx: _concat(per_demo, idx),
                 len(demos), cfg, seed, log)
    return Checkpoint(ParameterVector(arch, theta), "sft", seeds={"sft": seed},
                      parents=(base.hash,), base_hash=base.base_hash,
                      meta={"train": cfg.to_dict(), "n_demos": len(demos)})


def _concat(batches, idx) -> TokenBatch:
    return TokenBatch(np.concatenate([batches[i].contexts for i in idx]),
                      np.concatenate([batches[i].targets for i in idx]))


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------

def reward_pair_loss(rm: ParameterVector, pair: PreferencePair) -> float:
    """-log sigmoid(R(x, chosen) - R(x, rejected))."""
    batch = pair_batch([pair], rm.arch.context_window)
    if rm.head != "reward":
        raise ValueError("reward_pair_loss needs reward-layout params")
    return BradleyTerryLoss().value_and_grad(rm.arch, rm.as_float64(), batch)[0]


def pair_batch(pairs, width: int) -> PairBatch:
    return PairBatch(np.stack([final_context(p.prompt, p.chosen, width) for p in pairs]),
                     np.stack([final_context(p.prompt, p.rejected, width) for p in pairs]))


def reward_model_from_sft(sft: ParameterVector, seed: int) -> ParameterVector:
    """Copy the backbone, attach a fresh scalar head (std 1/sqrt(h), bias 0)."""
    arch = sft.arch
    backbone = sft.as_float64()[:arch.backbone_size()]
    rng = np.random.default_rng([seed, 0x4EAD])
    head_w = rng.standard_normal(arch.hidden_dim) / np.sqrt(arch.hidden_dim)
    return ParameterVector(arch, np.concatenate([backbone, head_w, [0.0]]), "reward")


def train_reward_model(sft: Checkpoint, pairs, cfg: TrainConfig, seed: int | None = None,
                       log: LossLog | None = None) -> Checkpoint:
    if not pairs:
        raise ValueError("no preference pairs")
    seed = cfg.shuffle_seed if seed is None else seed
    log = LossLog() if log is None else log
    arch = sft.arch
    theta = reward_model_from_sft(sft.params, seed).as_float64()
    full = pair_batch(pairs, arch.context_window)
    theta = _fit(theta, BradleyTerryLoss(), arch,
                 lambda idx: PairBatch(full.chosen[idx], full.rejected[idx]),
                 len(pairs), cfg, seed, log)
    return Checkpoint(ParameterVector(arch, theta, "reward"), "rm", seeds={"rm": seed},
                      parents=(sft.hash,), base_hash=sft.base_hash,
                      meta={"train": cfg.to_dict(), "n_pairs": len(pairs)})


def pairwise_accuracy(rm, pairs) -> float:
    """Fraction of pairs ranked correctly by ``rm``; exact ties count one half."""
    if not pairs:
        raise ValueError("no pairs to score")
    params = rm.params if isinstance(rm, Checkpoint) else rm
    batch = pair_batch(pairs, params.arch.context_window)
    theta = params.as_float64()
    rc = rewards(params.arch, theta, batch.chosen)
    rr = rewards(params.arch, theta, batch.rejected)
    return float(np.mean(np.where(rc > rr, 1.0, np.where(rc == rr, 0.5, 0.0))))

