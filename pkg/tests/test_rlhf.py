import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, assert_grad_close, central_diff, hand_params, random_policy_batch, random_theta
from souplab import taskgen as tg
from souplab.checkpoint import Checkpoint
from souplab.model import BOS, EOS, ArchDescriptor, ParameterVector, PolicyObjective, init_params
from souplab.rlhf import (
    PPO_BETA,
    SALSA_BETA,
    ReferenceStrategy,
    RlhfConfig,
    RunLog,
    StepStats,
    kl_hack_monitor,
    kl_sequence,
    make_state,
    objective_loss,
    rlhf_step,
    run_rlhf,
)
from souplab.soup import make_soup_n
from souplab.training import reward_model_from_sft

ARCH = ArchDescriptor(vocab_size=19, context_window=4, embed_dim=8, hidden_dim=16)
PROMPTS = tg.gen_prompts(tg.TaskConfig(), 64, 0)


@pytest.fixture(scope="module")
def models():
    base = Checkpoint(init_params(ARCH, 0), "base")
    sfts = [Checkpoint(init_params(ARCH, s), "sft", parents=(base.hash,), base_hash=base.hash)
            for s in (1, 2)]
    rm = Checkpoint(reward_model_from_sft(base.params, 1), "rm", base_hash=base.hash)
    return base, sfts, rm


def _responses(n, seed):
    rng = np.random.default_rng(seed)
    return [tuple(rng.integers(3, 19, rng.integers(0, 8))) + ((EOS,) if rng.random() < 0.7 else ())
            for _ in range(n)]


def test_defaults():
    assert PPO_BETA == 0.2 and SALSA_BETA == 0.01
    for bad in (dict(beta=-1), dict(clip_epsilon=0), dict(clip_epsilon=1.5), dict(steps=-1),
                dict(baseline="none"), dict(init_from="other")):
        with pytest.raises(ValueError):
            RlhfConfig(**bad)


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------

def test_kl_hand_two_point():
    # masses on tokens 2 and 3 only; tokens 0 and 1 get exp(-1e4) = 0
    arch = ArchDescriptor(vocab_size=4, context_window=1, embed_dim=1, hidden_dim=1)
    p = hand_params(arch, head_b=[-1e4, -1e4, math.log(0.1), math.log(0.9)])
    q = hand_params(arch, head_b=[-1e4, -1e4, 0.0, 0.0])
    expect = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert expect == pytest.approx(0.3681, abs=1e-4)
    assert kl_sequence(p, q, (BOS,), (3,)) == pytest.approx(expect, abs=1e-6)
    assert kl_sequence(p, q, (BOS,), (3, 2)) == pytest.approx(2 * expect, abs=1e-6)


def test_kl_zero_cases(models):
    _, (a, b), _ = models
    for y in _responses(20, 0):
        assert kl_sequence(a.params, a.params, PROMPTS[0], y) == 0.0
    assert kl_sequence(a.params, b.params, PROMPTS[0], ()) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = ParameterVector(ARCH, random_theta(ARCH, rng))
    q = ParameterVector(ARCH, random_theta(ARCH, rng))
    for y in _responses(3, seed):
        assert kl_sequence(p, q, PROMPTS[seed % 64], y) >= 0


def test_kl_term_gradient_alone(rng):
    # PolicyObjective with zero advantages is just the beta * KL term
    theta = random_theta(TINY, rng)
    for n_refs in (1, 3):
        batch = random_policy_batch(TINY, rng, theta, n_refs=n_refs)
        batch.advantages[:] = 0
        obj = PolicyObjective(beta=0.7, clip_epsilon=0.2)
        _, g = obj.value_and_grad(TINY, theta, batch)
        num = central_diff(lambda t: obj.value_and_grad(TINY, t, batch)[0], theta)
        assert_grad_close(g, num)


# ---------------------------------------------------------------------------
# objective identities
# ---------------------------------------------------------------------------

def _state(policy, reference, rm, beta=0.5):
    return make_state(policy, reference, rm, RlhfConfig(beta=beta, steps=1))


def test_objective_identities(models):
    _, (a, b), rm = models
    single = _state(b, ReferenceStrategy.single(a), rm)
    soup_same = _state(b, ReferenceStrategy.soup([a, a]), rm)
    mkl_same = _state(b, ReferenceStrategy.mkl(a, a), rm)
    soup_self = _state(a, ReferenceStrategy.soup([a, a, a]), rm)
    zero_beta = [_state(b, r, rm, beta=0.0) for r in
                 (ReferenceStrategy.single(a), ReferenceStrategy.soup([a, b]), ReferenceStrategy.mkl(a, b))]
    for x, y in zip(PROMPTS, _responses(30, 1)):
        lo = objective_loss(single, x, y)
        assert objective_loss(soup_same, x, y) == lo
        assert objective_loss(mkl_same, x, y) == lo
        neg_r = objective_loss(zero_beta[0], x, y)
        assert all(objective_loss(s, x, y) == neg_r for s in zero_beta)
        assert objective_loss(soup_self, x, y) == objective_loss(_state(a, ReferenceStrategy.single(a), rm, 0.0), x, y)


def test_mkl_is_average_of_kls(models):
    _, (a, b), rm = models
    base = models[0]
    st_ = _state(base, ReferenceStrategy.mkl(a, b), rm, beta=1.0)
    st0 = _state(base, ReferenceStrategy.mkl(a, b), rm, beta=0.0)
    for x, y in zip(PROMPTS, _responses(10, 2)):
        kl = objective_loss(st_, x, y) - objective_loss(st0, x, y)
        expect = 0.5 * (kl_sequence(base.params, a.params, x, y) + kl_sequence(base.params, b.params, x, y))
        assert kl == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_soup_reference_is_materialized_soup(models):
    _, (a, b), _ = models
    ref = ReferenceStrategy.soup([a, b])
    assert ref.materialized().values.tobytes() == make_soup_n([a.params, b.params]).values.tobytes()
    assert ref.to_dict() == {"kind": "soup", "members": [a.hash, b.hash], "weights": [0.5, 0.5]}
    with pytest.raises(ValueError):
        ReferenceStrategy("single", (a, b), (0.5, 0.5))
    with pytest.raises(ValueError):
        ReferenceStrategy.soup([a, b], [0.3, 0.3])


# ---------------------------------------------------------------------------
# steps and runs
# ---------------------------------------------------------------------------

def test_single_rollout_has_zero_advantage(models):
    base, _, rm = models
    cfg = RlhfConfig(beta=0.1, steps=1, rollouts_per_prompt=1)
    state = make_state(base, ReferenceStrategy.single(base), rm, cfg)
    before = state.theta.copy()
    rlhf_step(state, PROMPTS[:1], np.random.default_rng(0))
    # zero advantage and zero KL gradient at policy == reference
    assert np.array_equal(state.theta, before)


def test_step_rejects_empty_prompts(models):
    base, _, rm = models
    with pytest.raises(ValueError):
        rlhf_step(_state(base, ReferenceStrategy.single(base), rm), [], np.random.default_rng(0))


def _fresh_kl(ck, ref, rm, seed):
    st_ = make_state(ck, ref, rm, RlhfConfig(learning_rate=1e-12, steps=1))
    return rlhf_step(st_, PROMPTS[:16], np.random.default_rng(100 + seed))[1].mean_kl


def test_huge_beta_holds_policy_at_reference(models):
    base, _, rm = models
    ref = ReferenceStrategy.single(base)
    kls = {}
    for beta in (0.0, 1e6):
        kls[beta] = [_fresh_kl(run_rlhf(base, ref, rm, RlhfConfig(beta=beta, steps=1, batch_size=8, seed=s),
                                        PROMPTS, monitor=None)[0], ref, rm, s) for s in range(5)]
    assert np.mean(kls[1e6]) < 0.25 * np.mean(kls[0.0])


def test_zero_beta_reward_climbing(models):
    base, _, _ = models
    k = 7

    def count_k(prompts, responses):
        return [sum(t == k for t in y) for y in responses]

    _, log = run_rlhf(base, ReferenceStrategy.single(base), count_k,
                      RlhfConfig(beta=0.0, steps=200, batch_size=8, seed=0), PROMPTS, monitor=None)
    r = log.column("mean_reward")
    assert r[-20:].mean() > r[:20].mean()


def test_zero_beta_strategies_agree(models):
    base, (a, b), rm = models
    cfg = RlhfConfig(beta=0.0, steps=3, batch_size=4, seed=3)
    runs = [run_rlhf(a, r, rm, cfg, PROMPTS, monitor=None) for r in
            (ReferenceStrategy.single(a), ReferenceStrategy.soup([a, b]), ReferenceStrategy.mkl(a, b))]
    for ck, log in runs[1:]:
        assert ck.params.values.tobytes() == runs[0][0].params.values.tobytes()
        assert np.array_equal(log.column("mean_reward"), runs[0][1].column("mean_reward"))


def test_steps_zero_returns_sft(models):
    _, (a, b), rm = models
    ck, log = run_rlhf(a, ReferenceStrategy.soup([a, b]), rm, RlhfConfig(steps=0), PROMPTS)
    assert ck.params.values.tobytes() == a.params.values.tobytes() and len(log) == 0
    assert ck.stage == "rlhf" and ck.meta["strategy"]["kind"] == "soup"


def test_run_is_deterministic_and_references_frozen(models):
    _, (a, b), rm = models
    snap = [m.params.values.tobytes() for m in (a, b, rm)]
    ref = ReferenceStrategy.soup([a, b])
    soup_bytes = ref.materialized().values.tobytes()
    cfg = RlhfConfig(beta=0.05, steps=4, batch_size=4, seed=9)
    c1, l1 = run_rlhf(a, ref, rm, cfg, PROMPTS)
    c2, l2 = run_rlhf(a, ref, rm, cfg, PROMPTS)
    assert c1.params.values.tobytes() == c2.params.values.tobytes()
    assert [vars(s) for s in l1.steps] == [vars(s) for s in l2.steps]
    assert [m.params.values.tobytes() for m in (a, b, rm)] == snap
    assert ref.materialized().values.tobytes() == soup_bytes
    assert c1.params.values.tobytes() != a.params.values.tobytes()
    assert c1.meta["rlhf"]["beta"] == 0.05 and c1.parents[0] == a.hash


def test_init_from_soup(models):
    _, (a, b), rm = models
    ref = ReferenceStrategy.soup([a, b])
    st_ = make_state(ref.materialized(), ref, rm, RlhfConfig(steps=1))
    assert st_.policy.values.tobytes() == ref.materialized().values.tobytes()


def test_learned_value_baseline_runs(models):
    _, (a, _), rm = models
    ck, log = run_rlhf(a, ReferenceStrategy.single(a), rm,
                       RlhfConfig(steps=2, batch_size=4, baseline="learned-value-head"), PROMPTS)
    assert len(log) == 2 and ck.params.is_finite()


def test_stats_csv(tmp_path, models):
    _, (a, _), rm = models
    _, log = run_rlhf(a, ReferenceStrategy.single(a), rm, RlhfConfig(steps=2, batch_size=2), PROMPTS)
    log.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "step,mean_reward,mean_kl,mean_resp_len,loss,alarm_flag" and len(lines) == 3


# ---------------------------------------------------------------------------
# KL-hack monitor
# ---------------------------------------------------------------------------

def _log(lengths):
    log = RunLog()
    for i, n in enumerate(lengths):
        log.append(StepStats(i, 0.0, 0.0, float(n), 0.0))
    return log


def test_monitor_cases():
    assert kl_hack_monitor(_log([7] * 12), 0.99, 3) == "ok"
    assert kl_hack_monitor(_log([10] * 6 + [0] * 6), 0.5, 3) == "alarm"
    assert kl_hack_monitor(_log(np.linspace(10, 6, 12)), 0.5, 3) == "ok"
    assert kl_hack_monitor([10, 10, 4, 4], 0.5, 2) == "alarm"
    with pytest.raises(ValueError):
        kl_hack_monitor(_log([1] * 5), 0.5, 3)
    with pytest.raises(ValueError):
        kl_hack_monitor(_log([1] * 6), 1.0, 3)
