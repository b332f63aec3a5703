"""Windowed feed-forward autoregressive model with hand-written backprop.

The same backbone serves two heads:

* ``"policy"`` -- a linear vocabulary head producing next-token logits;
* ``"reward"`` -- a one-output linear head read at the final token.

All parameters live in one flat float32 vector with a fixed canonical
layout, so soups are plain elementwise arithmetic. Forward and backward
passes run in float64 on an unpacked copy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3

HEADS = ("policy", "reward")


class ArchMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluation produces NaN/Inf.

    ``where`` names the first intermediate that went non-finite.
    """

    def __init__(self, where: str):
        super().__init__(f"non-finite value first seen in {where!r}")
        self.where = where


@dataclass(frozen=True)
class ArchDescriptor:
    vocab_size: int = 19
    context_window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 64
    max_response_len: int = 16
    param_layout_version: int = 1

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        for name in ("context_window", "embed_dim", "hidden_dim", "max_response_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.param_layout_version != 1:
            raise ValueError(f"unsupported param_layout_version {self.param_layout_version}")

    def layout(self, head: str = "policy") -> list[tuple[str, tuple[int, ...]]]:
        """Canonical (name, shape) list; the order is the flat-vector order."""
        V, W, d, h = self.vocab_size, self.context_window, self.embed_dim, self.hidden_dim
        out = 1 if _check_head(head) == "reward" else V
        return [
            ("embed", (V, d)),
            ("hidden_w", (W * d, h)),
            ("hidden_b", (h,)),
            ("head_w", (h, out)),
            ("head_b", (out,)),
        ]

    def n_params(self, head: str = "policy") -> int:
        V, W, d, h = self.vocab_size, self.context_window, self.embed_dim, self.hidden_dim
        out = 1 if _check_head(head) == "reward" else V
        return V * d + (W * d + 1) * h + (h + 1) * out

    def backbone_size(self) -> int:
        V, W, d, h = self.vocab_size, self.context_window, self.embed_dim, self.hidden_dim
        return V * d + (W * d + 1) * h

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_window": self.context_window,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "max_response_len": self.max_response_len,
            "param_layout_version": self.param_layout_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**d)


def _check_head(head: str) -> str:
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    return head


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float32 weights in canonical layout order. Read-only."""

    arch: ArchDescriptor
    values: np.ndarray
    head: str = "policy"
    _digest: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        _check_head(self.head)
        vals = np.array(self.values, dtype=np.float32).ravel()
        if vals.shape[0] != self.arch.n_params(self.head):
            raise ArchMismatchError(
                f"expected {self.arch.n_params(self.head)} values for {self.head} layout, "
                f"got {vals.shape[0]}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    def as_float64(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def unpack(self) -> dict[str, np.ndarray]:
        return split_params(self.arch, self.head, self.as_float64())

    def digest(self) -> str:
        """sha256 over layout identity and payload bytes."""
        if not self._digest:
            h = hashlib.sha256()
            h.update(repr(sorted(self.arch.to_dict().items())).encode())
            h.update(self.head.encode())
            h.update(self.values.astype("<f4").tobytes())
            self._digest.append(h.hexdigest())
        return self._digest[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def compatible(self, other: "ParameterVector") -> bool:
        return self.arch == other.arch and self.head == other.head

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(self.arch, values, self.head)


def split_params(arch: ArchDescriptor, head: str, theta: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``theta`` keyed by layout name (no copies)."""
    parts, offset = {}, 0
    for name, shape in arch.layout(head):
        n = int(np.prod(shape))
        parts[name] = theta[offset:offset + n].reshape(shape)
        offset += n
    return parts


def require_compatible(*vecs: ParameterVector) -> None:
    first = vecs[0]
    for v in vecs[1:]:
        if not first.compatible(v):
            raise ArchMismatchError("parameter vectors have different architectures or heads")


def zeros(arch: ArchDescriptor, head: str = "policy") -> ParameterVector:
    return ParameterVector(arch, np.zeros(arch.n_params(head), dtype=np.float32), head)


def init_params(arch: ArchDescriptor, seed: int, head: str = "policy") -> ParameterVector:
    """Gaussian weights with std 1/sqrt(fan_in) per layer; biases zero."""
    rng = np.random.default_rng([seed, 0x5EED])
    chunks = []
    fan_in = {
        "embed": arch.vocab_size,
        "hidden_w": arch.context_window * arch.embed_dim,
        "head_w": arch.hidden_dim,
    }
    for name, shape in arch.layout(head):
        if name in fan_in:
            chunks.append(rng.standard_normal(shape).ravel() / np.sqrt(fan_in[name]))
        else:
            chunks.append(np.zeros(int(np.prod(shape))))
    return ParameterVector(arch, np.concatenate(chunks), head)


def axpy(a: float, x: ParameterVector, y: ParameterVector) -> ParameterVector:
    require_compatible(x, y)
    if a == 0:
        return y
    return y.with_values(a * x.as_float64() + y.as_float64())


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------

def window(tokens: Sequence[int], width: int) -> np.ndarray:
    """Last ``width`` tokens, left-padded with PAD."""
    tokens = list(tokens)[-width:]
    return np.array([PAD] * (width - len(tokens)) + tokens, dtype=np.int64)


def check_tokens(tokens: Iterable[int], vocab_size: int) -> None:
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise ValueError(f"token id {t} out of range [0, {vocab_size})")


def response_contexts(prompt: Sequence[int], response: Sequence[int], width: int) -> np.ndarray:
    """One context row per response position: window over prompt + response[:t]."""
    full = list(prompt) + list(response)
    n_prompt = len(prompt)
    return np.stack([window(full[:n_prompt + t], width) for t in range(len(response))]) \
        if len(response) else np.zeros((0, width), dtype=np.int64)


def final_context(prompt: Sequence[int], response: Sequence[int], width: int) -> np.ndarray:
    """Window ending at the last token of prompt + response body.

    A trailing EOS is dropped: it carries no content and would push one more
    prompt token out of the window.
    """
    response = list(response)
    if response and response[-1] == EOS:
        response = response[:-1]
    return window(list(prompt) + response, width)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _Cache:
    contexts: np.ndarray
    emb: np.ndarray
    z: np.ndarray


def _backbone(arch: ArchDescriptor, p: dict, contexts: np.ndarray, check: bool = False):
    contexts = np.asarray(contexts, dtype=np.int64)
    emb = p["embed"][contexts].reshape(contexts.shape[0], -1)
    pre = emb @ p["hidden_w"] + p["hidden_b"]
    if check:
        _check_finite("hidden pre-activation", pre)
    z = np.tanh(pre)
    return _Cache(contexts, emb, z)


def _head(p: dict, cache: _Cache) -> np.ndarray:
    return cache.z @ p["head_w"] + p["head_b"]


def _backward(arch: ArchDescriptor, p: dict, cache: _Cache, dout: np.ndarray, grads: dict) -> None:
    """Accumulate gradients of sum(dout * head_output) into ``grads``."""
    grads["head_w"] += cache.z.T @ dout
    grads["head_b"] += dout.sum(axis=0)
    dz = dout @ p["head_w"].T
    dpre = dz * (1.0 - cache.z ** 2)
    grads["hidden_w"] += cache.emb.T @ dpre
    grads["hidden_b"] += dpre.sum(axis=0)
    demb = (dpre @ p["hidden_w"].T).reshape(-1, arch.embed_dim)
    flat_ctx = cache.contexts.ravel()
    # scatter-add via one-hot matmul; vocabularies here are small
    onehot = np.zeros((flat_ctx.shape[0], arch.vocab_size))
    onehot[np.arange(flat_ctx.shape[0]), flat_ctx] = 1.0
    grads["embed"] += onehot.T @ demb


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLossError(name)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def policy_logprobs(arch: ArchDescriptor, theta: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    """Log next-token distributions, shape (N, V)."""
    p = split_params(arch, "policy", theta)
    return log_softmax(_head(p, _backbone(arch, p, contexts)))


def rewards(arch: ArchDescriptor, theta: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    p = split_params(arch, "reward", theta)
    return _head(p, _backbone(arch, p, contexts))[:, 0]


# ---------------------------------------------------------------------------
# public single-example API
# ---------------------------------------------------------------------------

def token_dist(params: ParameterVector, context: Sequence[int]) -> np.ndarray:
    """Next-token categorical distribution after ``context`` (float64, length V)."""
    if params.head != "policy":
        raise ArchMismatchError("token_dist needs policy-layout params")
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    check_tokens(context, params.arch.vocab_size)
    ctx = window(context, params.arch.context_window)[None, :]
    return np.exp(policy_logprobs(params.arch, params.as_float64(), ctx)[0])


def sequence_logprob(params: ParameterVector, prompt: Sequence[int], response: Sequence[int]) -> float:
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    check_tokens(list(prompt) + list(response), params.arch.vocab_size)
    ctx = response_contexts(prompt, response, params.arch.context_window)
    lp = policy_logprobs(params.arch, params.as_float64(), ctx)
    return float(lp[np.arange(len(response)), np.asarray(response)].sum())


def reward_forward(rm_params: ParameterVector, prompt: Sequence[int], response: Sequence[int]) -> float:
    if rm_params.head != "reward":
        raise ArchMismatchError("reward_forward needs reward-layout params")
    check_tokens(list(prompt) + list(response), rm_params.arch.vocab_size)
    ctx = final_context(prompt, response, rm_params.arch.context_window)[None, :]
    return float(rewards(rm_params.arch, rm_params.as_float64(), ctx)[0])


def batch_rewards(rm_params: ParameterVector, prompts, responses) -> np.ndarray:
    if rm_params.head != "reward":
        raise ArchMismatchError("reward scoring needs reward-layout params")
    W = rm_params.arch.context_window
    ctx = np.stack([final_context(x, y, W) for x, y in zip(prompts, responses)])
    return rewards(rm_params.arch, rm_params.as_float64(), ctx)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_batch(
    arch: ArchDescriptor,
    theta: np.ndarray,
    prompts: Sequence[Sequence[int]],
    uniforms: np.ndarray,
    temperature: float = 1.0,
) -> list[tuple[int, ...]]:
    """Ancestral sampling by inverse CDF, one row of ``uniforms`` per sequence.

    BOS and PAD are never emitted: the tempered distribution is renormalized
    over content tokens and EOS. ``temperature == 0`` selects argmax.
    Sharing ``uniforms`` across models gives common-random-number pairing.
    """
    W, L = arch.context_window, arch.max_response_len
    n = len(prompts)
    p = split_params(arch, "policy", theta)
    buf = np.full((n, W + L), PAD, dtype=np.int64)
    for i, x in enumerate(prompts):
        buf[i, :W] = window(x, W)
    done = np.zeros(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    for t in range(L):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        logits = _head(p, _backbone(arch, p, buf[active, t:t + W]))
        logits[:, [PAD, BOS]] = -np.inf
        if temperature == 0:
            tok = logits.argmax(axis=1)
        else:
            z = logits / temperature
            z -= z.max(axis=1, keepdims=True)
            probs = np.exp(z)
            cdf = np.cumsum(probs, axis=1)
            cdf /= cdf[:, -1:]
            u = uniforms[active, t][:, None]
            tok = np.minimum((cdf <= u).sum(axis=1), arch.vocab_size - 1)
            # guard against landing on a masked id through float ties
            tok = np.where(probs[np.arange(len(tok)), tok] > 0, tok, EOS)
        buf[active, W + t] = tok
        lengths[active] += 1
        done[active[tok == EOS]] = True
    return [tuple(int(v) for v in buf[i, W:W + lengths[i]]) for i in range(n)]


def sequence_uniforms(seed, n: int, length: int) -> np.ndarray:
    return np.random.default_rng(seed).random((n, length))


def generate(params: ParameterVector, prompt: Sequence[int], temperature: float, rng_seed: int) -> tuple[int, ...]:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    check_tokens(prompt, params.arch.vocab_size)
    u = sequence_uniforms(rng_seed, 1, params.arch.max_response_len)
    return sample_batch(params.arch, params.as_float64(), [prompt], u, temperature)[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class TokenBatch:
    """Next-token prediction rows; loss is the weight-normalized cross-entropy."""
    contexts: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None


@dataclass
class PairBatch:
    """Final-token windows of chosen and rejected sequences."""
    chosen: np.ndarray
    rejected: np.ndarray


@dataclass
class ValueBatch:
    contexts: np.ndarray
    targets: np.ndarray


@dataclass
class PolicyBatch:
    """Flattened rollout positions for the clipped surrogate + KL objective.

    ``ref_logprobs`` holds one (N, V) array per frozen reference and
    ``ref_weights`` their mixing weights in the KL penalty.
    """
    contexts: np.ndarray
    actions: np.ndarray
    seq_index: np.ndarray
    n_seqs: int
    advantages: np.ndarray
    old_logprobs: np.ndarray
    ref_logprobs: list = field(default_factory=list)
    ref_weights: list = field(default_factory=list)


class LossSpec:
    head = "policy"

    def value_and_grad(self, arch, theta, batch):
        raise NotImplementedError


@dataclass
class ConstantLoss(LossSpec):
    value: float = 0.0
    head: str = "policy"

    def value_and_grad(self, arch, theta, batch):
        return float(self.value), np.zeros_like(theta)


@dataclass
class CrossEntropyLoss(LossSpec):
    head = "policy"

    def value_and_grad(self, arch, theta, batch: TokenBatch):
        p = split_params(arch, "policy", theta)
        cache = _backbone(arch, p, batch.contexts, check=True)
        logits = _head(p, cache)
        _check_finite("logits", logits)
        lp = log_softmax(logits)
        n = len(batch.targets)
        w = np.ones(n) if batch.weights is None else np.asarray(batch.weights, dtype=np.float64)
        w = w / w.sum()
        rows = np.arange(n)
        loss = float(-(w * lp[rows, batch.targets]).sum())
        _check_finite("loss", loss)
        dlogits = np.exp(lp)
        dlogits[rows, batch.targets] -= 1.0
        dlogits *= w[:, None]
        grads = _zero_grads(arch, "policy")
        _backward(arch, p, cache, dlogits, grads)
        return loss, _flatten(arch, "policy", grads)


@dataclass
class BradleyTerryLoss(LossSpec):
    """Mean of -log sigmoid(R(chosen) - R(rejected))."""
    head = "reward"

    def value_and_grad(self, arch, theta, batch: PairBatch):
        p = split_params(arch, "reward", theta)
        m = len(batch.chosen)
        cache = _backbone(arch, p, np.concatenate([batch.chosen, batch.rejected]), check=True)
        r = _head(p, cache)[:, 0]
        _check_finite("reward", r)
        margin = r[:m] - r[m:]
        loss = float(np.logaddexp(0.0, -margin).mean())
        _check_finite("loss", loss)
        s = _sigmoid(-margin) / m
        dout = np.concatenate([-s, s])[:, None]
        grads = _zero_grads(arch, "reward")
        _backward(arch, p, cache, dout, grads)
        return loss, _flatten(arch, "reward", grads)


@dataclass
class ValueMSELoss(LossSpec):
    """Half mean squared error of a reward-layout head used as a value baseline."""
    head = "reward"

    def value_and_grad(self, arch, theta, batch: ValueBatch):
        p = split_params(arch, "reward", theta)
        cache = _backbone(arch, p, batch.contexts, check=True)
        v = _head(p, cache)[:, 0]
        err = v - batch.targets
        loss = float(0.5 * np.mean(err ** 2))
        _check_finite("loss", loss)
        grads = _zero_grads(arch, "reward")
        _backward(arch, p, cache, (err / len(err))[:, None], grads)
        return loss, _flatten(arch, "reward", grads)


@dataclass
class PolicyObjective(LossSpec):
    """Clipped surrogate plus the analytic per-token KL penalty.

    loss = -(1/S) sum_t min(r_t A, clip(r_t, 1-eps, 1+eps) A)
           + beta (1/S) sum_k w_k sum_t KL(pi(.|ctx_t) || ref_k(.|ctx_t))

    where S is the number of sequences. ``surrogate=False`` keeps only the
    KL term.
    """
    beta: float = 0.0
    clip_epsilon: float = 0.2
    surrogate: bool = True
    head = "policy"

    def value_and_grad(self, arch, theta, batch: PolicyBatch):
        p = split_params(arch, "policy", theta)
        cache = _backbone(arch, p, batch.contexts, check=True)
        logits = _head(p, cache)
        _check_finite("logits", logits)
        lp = log_softmax(logits)
        probs = np.exp(lp)
        n = len(batch.actions)
        rows = np.arange(n)
        S = float(batch.n_seqs)
        dlogits = np.zeros_like(lp)
        loss = 0.0
        if self.surrogate:
            adv = np.asarray(batch.advantages, dtype=np.float64)[batch.seq_index]
            ratio = np.exp(lp[rows, batch.actions] - batch.old_logprobs)
            _check_finite("probability ratio", ratio)
            clipped = np.clip(ratio, 1 - self.clip_epsilon, 1 + self.clip_epsilon)
            unclipped_term = ratio * adv
            clipped_term = clipped * adv
            loss -= float(np.minimum(unclipped_term, clipped_term).sum() / S)
            live = unclipped_term <= clipped_term
            coef = np.where(live, -ratio * adv / S, 0.0)
            dlogits -= probs * coef[:, None]
            dlogits[rows, batch.actions] += coef
        if self.beta != 0 and batch.ref_logprobs:
            for w, ref_lp in zip(batch.ref_weights, batch.ref_logprobs):
                diff = lp - ref_lp
                kl = (probs * diff).sum(axis=1)
                _check_finite("kl", kl)
                loss += float(self.beta * w * kl.sum() / S)
                dlogits += (self.beta * w / S) * probs * (diff - kl[:, None])
        _check_finite("loss", loss)
        grads = _zero_grads(arch, "policy")
        _backward(arch, p, cache, dlogits, grads)
        return loss, _flatten(arch, "policy", grads)


def loss_and_grad(params: ParameterVector, loss: LossSpec, batch) -> tuple[float, ParameterVector]:
    """Loss value and exact gradient, both in the params' canonical layout."""
    if params.head != loss.head:
        raise ArchMismatchError(f"{type(loss).__name__} needs {loss.head}-layout params")
    value, grad = loss.value_and_grad(params.arch, params.as_float64(), batch)
    return value, params.with_values(grad)


def _zero_grads(arch, head):
    return {name: np.zeros(shape) for name, shape in arch.layout(head)}


def _flatten(arch, head, grads):
    return np.concatenate([grads[name].ravel() for name, _ in arch.layout(head)])


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))
