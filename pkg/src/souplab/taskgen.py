"""Synthetic target-coverage task with a programmatic reward oracle.

A prompt is BOS followed by a set of distinct "target" content tokens. A
good response emits every target exactly once and stops. The oracle scores

    coverage_bonus * |targets hit| - repetition_penalty * #repeats
    - length_penalty_per_token * len(body)

where the body is the response up to (not including) the first EOS.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import asdict, dataclass
from math import comb
from typing import Callable, Sequence

import numpy as np

from .model import BOS, EOS, N_SPECIAL

SPLITS = ("sft-train", "rm-train", "rlhf-train", "eval")
SPLIT_FRACTIONS = (0.4, 0.2, 0.2, 0.2)


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 19
    n_target_tokens_per_prompt: int = 4
    repetition_penalty: float = 0.5
    length_penalty_per_token: float = 0.05
    coverage_bonus: float = 1.0

    def __post_init__(self):
        if not self.n_target_tokens_per_prompt < self.vocab_size - N_SPECIAL:
            raise ValueError("n_target_tokens_per_prompt must be < vocab_size - 3")
        if self.repetition_penalty < 0 or self.length_penalty_per_token < 0:
            raise ValueError("penalties must be non-negative")
        if self.coverage_bonus <= 0:
            raise ValueError("coverage_bonus must be positive")

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(N_SPECIAL, self.vocab_size)

    @property
    def max_reward(self) -> float:
        k = self.n_target_tokens_per_prompt
        return self.coverage_bonus * k - self.length_penalty_per_token * k

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple
    chosen: tuple
    rejected: tuple
    oracle_margin: float

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.prompt, self.rejected, self.chosen, -self.oracle_margin)


def targets_of(prompt: Sequence[int]) -> set:
    return {int(t) for t in prompt if t >= N_SPECIAL}


def response_body(response: Sequence[int]) -> list:
    body = []
    for t in response:
        if t == EOS:
            break
        body.append(int(t))
    return body


def oracle_reward(prompt: Sequence[int], response: Sequence[int], cfg: TaskConfig = TaskConfig()) -> float:
    body = response_body(response)
    targets = targets_of(prompt)
    seen: set = set()
    hits = repeats = 0
    for t in body:
        if t in seen:
            repeats += 1
        else:
            seen.add(t)
            hits += t in targets
    return (cfg.coverage_bonus * hits
            - cfg.repetition_penalty * repeats
            - cfg.length_penalty_per_token * len(body))


# ---------------------------------------------------------------------------
# prompts and corpora
# ---------------------------------------------------------------------------

def _split_subsets(cfg: TaskConfig, seed: int, split: str) -> list:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    k = cfg.n_target_tokens_per_prompt
    n_content = cfg.vocab_size - N_SPECIAL
    if comb(n_content, k) > 2_000_000:
        raise ValueError("target-subset space too large to enumerate")
    subsets = list(itertools.combinations(range(N_SPECIAL, cfg.vocab_size), k))
    order = np.random.default_rng([seed, 0xC0FFEE]).permutation(len(subsets))
    bounds = np.cumsum((0,) + SPLIT_FRACTIONS) * len(subsets)
    i = SPLITS.index(split)
    lo, hi = int(round(bounds[i])), int(round(bounds[i + 1]))
    return [subsets[j] for j in order[lo:hi]]


def gen_prompts(cfg: TaskConfig, n: int, seed: int, split: str = "sft-train") -> list:
    """``n`` prompts from ``split``; splits partition the subset space by ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pool = _split_subsets(cfg, seed, split)
    if n > len(pool):
        raise ValueError(f"requested {n} prompts but split {split!r} holds {len(pool)} target subsets")
    return [(BOS,) + tuple(s) for s in pool[:n]]


def gen_corpus(cfg: TaskConfig, n: int, seed: int, min_len: int = 4, max_len: int = 14,
               topic_size: tuple = (2, 6), off_topic: float = 0.1) -> list:
    """Unconditioned BOS ... EOS sequences for base pretraining.

    Each sequence draws a small "topic" subset of content tokens and mostly
    emits tokens from it (with replacement), so a base model learns that
    tokens already in context tend to recur.
    """
    rng = np.random.default_rng([seed, 0xBA5E])
    content = cfg.content_tokens
    out = []
    for _ in range(n):
        topic = rng.choice(content, size=int(rng.integers(topic_size[0], topic_size[1] + 1)),
                           replace=False)
        length = int(rng.integers(min_len, max_len + 1))
        body = np.where(rng.random(length) < off_topic, rng.choice(content, size=length),
                        rng.choice(topic, size=length))
        out.append((BOS,) + tuple(int(t) for t in body) + (EOS,))
    return out


def gen_demos(prompts, noise_rate: float, seed: int, cfg: TaskConfig = TaskConfig()) -> list:
    """Scripted demonstrations: targets in random order then EOS, token-level noise."""
    if not 0 <= noise_rate < 1:
        raise ValueError("noise_rate must be in [0, 1)")
    rng = np.random.default_rng([seed, 0xDE30])
    demos = []
    for x in prompts:
        targets = sorted(targets_of(x))
        others = [int(t) for t in cfg.content_tokens if t not in targets]
        body = [int(t) for t in rng.permutation(targets)]
        for i in range(len(body)):
            if rng.random() < noise_rate:
                body[i] = int(rng.choice(others))
        demos.append((tuple(x), tuple(body) + (EOS,)))
    return demos


def uniform_sampler(cfg: TaskConfig, max_len: int = 16) -> Callable:
    """Sampler emitting uniformly random content/EOS tokens until EOS or ``max_len``."""
    choices = np.concatenate([[EOS], cfg.content_tokens])

    def sample(prompt, rng):
        out = []
        while len(out) < max_len:
            t = int(rng.choice(choices))
            out.append(t)
            if t == EOS:
                break
        return tuple(out)

    return sample


def script_sampler(noise_rate: float, cfg: TaskConfig = TaskConfig()) -> Callable:
    def sample(prompt, rng):
        seed = int(rng.integers(2**31))
        return gen_demos([prompt], noise_rate, seed, cfg)[0][1]

    return sample


def gen_preference_pairs(
    prompts,
    sampler_a: Callable,
    sampler_b: Callable,
    min_margin: float,
    seed: int,
    cfg: TaskConfig = TaskConfig(),
) -> list:
    """One candidate pair per prompt, kept only if the oracle margin clears ``min_margin``.

    Samplers are ``f(prompt, rng) -> response``; each gets its own stream
    derived from ``seed`` so identical samplers see identical randomness.
    """
    if min_margin <= 0:
        raise ValueError("min_margin must be positive")
    rng_a = np.random.default_rng([seed, 1])
    rng_b = np.random.default_rng([seed, 1])
    if sampler_a is not sampler_b:
        rng_b = np.random.default_rng([seed, 2])
    ys_a = [sampler_a(x, rng_a) for x in prompts]
    ys_b = [sampler_b(x, rng_b) for x in prompts]
    pairs = label_pairs(prompts, ys_a, ys_b, min_margin, cfg)
    if len(pairs) < len(prompts):
        warnings.warn(f"{len(pairs)} of {len(prompts)} pairs survived min_margin={min_margin}",
                      stacklevel=2)
    return pairs


def label_pairs(prompts, responses_a, responses_b, min_margin: float,
                cfg: TaskConfig = TaskConfig()) -> list:
    """Orient each (a, b) by oracle reward; drop pairs closer than ``min_margin``."""
    pairs = []
    for x, ya, yb in zip(prompts, responses_a, responses_b):
        ra, rb = oracle_reward(x, ya, cfg), oracle_reward(x, yb, cfg)
        if abs(ra - rb) < min_margin:
            continue
        if ra > rb:
            pairs.append(PreferencePair(tuple(x), tuple(ya), tuple(yb), ra - rb))
        else:
            pairs.append(PreferencePair(tuple(x), tuple(yb), tuple(ya), rb - ra))
    return pairs


# ---------------------------------------------------------------------------
# line-delimited JSON
# ---------------------------------------------------------------------------

def write_demos(path, demos) -> None:
    with open(path, "w") as f:
        for x, y in demos:
            f.write(json.dumps({"prompt": list(x), "response": list(y)}) + "\n")


def read_demos(path) -> list:
    with open(path) as f:
        return [(tuple(r["prompt"]), tuple(r["response"])) for r in map(json.loads, f) if r]


def write_pairs(path, pairs) -> None:
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps({"prompt": list(p.prompt), "chosen": list(p.chosen),
                                "rejected": list(p.rejected), "margin": p.oracle_margin}) + "\n")


def read_pairs(path) -> list:
    with open(path) as f:
        return [PreferencePair(tuple(r["prompt"]), tuple(r["chosen"]), tuple(r["rejected"]),
                               float(r["margin"])) for r in map(json.loads, f) if r]


def write_sequences(path, seqs) -> None:
    with open(path, "w") as f:
        for t in seqs:
            f.write(json.dumps({"tokens": list(t)}) + "\n")


def read_sequences(path) -> list:
    with open(path) as f:
        return [tuple(r["tokens"]) for r in map(json.loads, f) if r]


def write_prompts(path, prompts) -> None:
    with open(path, "w") as f:
        for x in prompts:
            f.write(json.dumps({"prompt": list(x)}) + "\n")


def read_prompts(path) -> list:
    with open(path) as f:
        return [tuple(r["prompt"]) for r in map(json.loads, f) if r]
