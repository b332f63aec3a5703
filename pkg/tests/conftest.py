import numpy as np
import pytest

from souplab.model import (
    ArchDescriptor,
    PairBatch,
    PolicyBatch,
    TokenBatch,
    ValueBatch,
    init_params,
    policy_logprobs,
)

# <= 500 parameters for the finite-difference oracle
TINY = ArchDescriptor(vocab_size=6, context_window=3, embed_dim=3, hidden_dim=5, max_response_len=5)


@pytest.fixture
def tiny():
    return TINY


def central_diff(f, theta, step=1e-3):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, atol=1e-6):
    err = np.abs(analytic - numeric)
    bound = np.maximum(atol, rel * np.maximum(np.abs(analytic), np.abs(numeric)))
    bad = np.flatnonzero(err > bound)
    assert bad.size == 0, (
        f"{bad.size} entries off; worst idx {bad[np.argmax(err[bad])]} "
        f"analytic {analytic[bad[0]]:.8g} numeric {numeric[bad[0]]:.8g}")


def random_theta(arch, rng, head="policy", scale=0.6):
    return rng.normal(0, scale, arch.n_params(head))


def random_contexts(arch, rng, n):
    return rng.integers(0, arch.vocab_size, size=(n, arch.context_window))


def random_token_batch(arch, rng, n=7, weighted=False):
    w = rng.uniform(0.2, 2.0, n) if weighted else None
    return TokenBatch(random_contexts(arch, rng, n), rng.integers(0, arch.vocab_size, n), w)


def random_pair_batch(arch, rng, n=5):
    return PairBatch(random_contexts(arch, rng, n), random_contexts(arch, rng, n))


def random_value_batch(arch, rng, n=6):
    return ValueBatch(random_contexts(arch, rng, n), rng.normal(0, 1, n))


def _ratios_off_kinks(rng, n, eps):
    """Probability ratios at least 0.05 away from 1 +- eps so FD never crosses a kink."""
    bands = [(0.4, 1 - eps - 0.05), (1 - eps + 0.05, 1 + eps - 0.05), (1 + eps + 0.05, 1.8)]
    pick = rng.integers(0, 3, n)
    return np.array([rng.uniform(*bands[k]) for k in pick])


def random_policy_batch(arch, rng, theta, n_seqs=3, n_refs=1, eps=0.2):
    lens = rng.integers(1, 4, n_seqs)
    seq_index = np.repeat(np.arange(n_seqs), lens)
    n = int(lens.sum())
    ctx = random_contexts(arch, rng, n)
    actions = rng.integers(0, arch.vocab_size, n)
    lp = policy_logprobs(arch, theta, ctx)[np.arange(n), actions]
    old = lp - np.log(_ratios_off_kinks(rng, n, eps))
    refs = [policy_logprobs(arch, random_theta(arch, rng), ctx) for _ in range(n_refs)]
    w = list(rng.dirichlet(np.ones(n_refs))) if n_refs > 1 else [1.0]
    return PolicyBatch(ctx, actions, seq_index, n_seqs, rng.normal(0, 1, n_seqs), old, refs, w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY, 3)


def hand_params(arch, head="policy", **parts):
    """Zero vector with the named layout blocks overwritten."""
    from souplab.model import ParameterVector, split_params
    theta = np.zeros(arch.n_params(head))
    view = split_params(arch, head, theta)
    for k, v in parts.items():
        view[k][...] = v
    return ParameterVector(arch, theta, head)


def tiled(arch, pattern, head="policy"):
    """Vector repeating ``pattern`` across the whole layout."""
    from souplab.model import ParameterVector
    return ParameterVector(arch, np.resize(np.asarray(pattern, dtype=np.float64), arch.n_params(head)), head)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
