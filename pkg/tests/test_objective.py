"""Surrogate objective: mask algebra, advantages, exact gradients, updates."""

from __future__ import annotations

import math

import numpy as np
import pytest

from mismatchlab import (
    Algo,
    BudgetConfig,
    Context,
    MaskingBounds,
    NumericError,
    ObjectiveConfig,
    PolicyParams,
    PromptGroup,
    Rollout,
    SyntheticPromptSource,
    TaskSpec,
    TokenRecord,
    Vocabulary,
    group_advantages,
    infer_engine,
    init_params,
    log_prob,
    make_state,
    mask,
    momentum_update,
    objective_and_grad,
    run_iteration,
    sgd_update,
    train_engine,
)
from mismatchlab.policy import feature_indices
from mismatchlab.tasks import TaskKind

DEFAULT_BOUNDS = MaskingBounds(0.5, 5.0)


def make_batch(seed: int, scale: float, vocab_size: int = 8, max_len: int = 5, n_features: int = 24):
    """Generate a small prompt-group batch through the real rollout path."""
    vocab = Vocabulary(size=vocab_size)
    engine = infer_engine(scale, 7)
    params = init_params(vocab, n_features=n_features, init_scale=0.7, seed=seed)
    source = SyntheticPromptSource(vocab, max_len=max_len)
    state = make_state(seed, vocab, engine, source)
    budget = BudgetConfig(token_budget=30, infer_capacity=8, prompts_per_iteration=3)
    cfg = ObjectiveConfig(group_size=2)
    _, groups = run_iteration(state, params, budget, cfg)
    assert groups
    return params, groups, cfg


def manual_group(theta: PolicyParams, specs: list[tuple[int, float, float]], advantages: list[float]):
    """One group of single-token rollouts with crafted (token, calib, ratio).

    logp_train_old is chosen so the importance ratio against theta comes
    out at the requested value; logp_infer_old then fixes the
    calibration ratio.
    """
    task = TaskSpec(TaskKind.PARITY_MATCH, 100, 0, 4)
    rollouts = []
    for token, calib, ratio in specs:
        ctx = Context(task.prompt_id, ())
        lp_cur = log_prob(theta, ctx, token, train_engine())
        lp_old = lp_cur - math.log(ratio)
        rec = TokenRecord(
            token=token,
            logp_infer_old=lp_old - math.log(calib),
            logp_train_old=lp_old,
            logp_train_cur=lp_cur,
            gen_version=theta.version_id,
        )
        rollouts.append(Rollout(task=task, stream=np.random.default_rng(0), uid=0, group_uid=0, tokens=[rec], terminal=True))
    return PromptGroup(task=task, rollouts=rollouts, rewards=[0.0] * len(specs), advantages=advantages)


def test_mask_paper_default_bounds() -> None:
    assert mask(1.0, DEFAULT_BOUNDS) == 1.0
    assert mask(0.3, DEFAULT_BOUNDS) == 0.0


def test_mask_boundary_sweep_inclusive() -> None:
    assert mask(0.5, DEFAULT_BOUNDS) == 0.5
    assert mask(0.4999, DEFAULT_BOUNDS) == 0.0
    assert mask(5.0, DEFAULT_BOUNDS) == 5.0
    assert mask(5.0001, DEFAULT_BOUNDS) == 0.0


def test_mask_rejects_nonpositive_and_non_finite() -> None:
    for bad in (0.0, -1.0, math.nan, math.inf):
        with pytest.raises(ValueError):
            mask(bad, DEFAULT_BOUNDS)


def test_masking_bounds_invariant() -> None:
    with pytest.raises(ValueError):
        MaskingBounds(alpha=1.5, beta=5.0)
    with pytest.raises(ValueError):
        MaskingBounds(alpha=0.5, beta=0.9)


def test_group_advantages_zero_variance() -> None:
    assert np.all(group_advantages([1.0, 1.0, 1.0, 1.0]) == 0.0)


def test_group_advantages_hand_computed_pair() -> None:
    # mean 0.5, population std 0.5
    assert group_advantages([1.0, 0.0]) == pytest.approx([1.0, -1.0], abs=1e-15)


def test_group_advantages_permutation_equivariance() -> None:
    rng = np.random.default_rng(5)
    rewards = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    base = group_advantages(rewards)
    for _ in range(10):
        perm = rng.permutation(len(rewards))
        assert np.array_equal(group_advantages([rewards[i] for i in perm]), base[perm])


def test_group_advantages_std_floor() -> None:
    adv = group_advantages([1e-7, 0.0])
    assert adv == pytest.approx([5e-8 / 1e-6, -5e-8 / 1e-6])


def test_group_advantages_requires_pair() -> None:
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_degenerate_case_all_algorithms_bit_identical() -> None:
    params, groups, _ = make_batch(seed=3, scale=0.0)
    ref = params.copy()
    results = {}
    for algo in Algo:
        cfg = ObjectiveConfig(algo=algo, group_size=2)
        results[algo] = objective_and_grad(groups, params, params, ref, cfg, DEFAULT_BOUNDS)
    base = results[Algo.ICEPOP]
    assert base.clipped_fraction == 0.0
    for algo in (Algo.GRPO, Algo.TIS):
        other = results[algo]
        assert other.objective_value == base.objective_value
        assert np.array_equal(other.grad, base.grad)
        assert other.clipped_fraction == 0.0


def test_zero_advantages_give_zero_objective_and_gradient() -> None:
    params, groups, cfg = make_batch(seed=4, scale=0.1)
    for group in groups:
        group.advantages = [0.0] * len(group.advantages)
    out = objective_and_grad(groups, params, params, None, cfg, DEFAULT_BOUNDS)
    assert out.objective_value == 0.0
    assert np.all(out.grad == 0.0)


def finite_difference_grad(groups, theta, theta_old, ref, cfg, bounds, h=1e-6):
    fd = np.zeros_like(theta.weights)
    for i in range(theta.weights.shape[0]):
        for j in range(theta.weights.shape[1]):
            wp = theta.weights.copy()
            wp[i, j] += h
            wm = theta.weights.copy()
            wm[i, j] -= h
            up = objective_and_grad(groups, PolicyParams(wp, theta.version_id), theta_old, ref, cfg, bounds)
            dn = objective_and_grad(groups, PolicyParams(wm, theta.version_id), theta_old, ref, cfg, bounds)
            fd[i, j] = (up.objective_value - dn.objective_value) / (2 * h)
    return fd


@pytest.mark.parametrize("algo,kl_coeff", [(Algo.ICEPOP, 0.0), (Algo.GRPO, 0.0), (Algo.TIS, 0.0), (Algo.ICEPOP, 0.4)])
def test_gradient_matches_finite_differences(algo: Algo, kl_coeff: float) -> None:
    params, groups, _ = make_batch(seed=11, scale=0.12, vocab_size=6, max_len=4, n_features=10)
    cfg = ObjectiveConfig(algo=algo, kl_coeff=kl_coeff, group_size=2)
    rng = np.random.default_rng(1)
    theta = PolicyParams(params.weights + rng.normal(0, 0.05, params.weights.shape), params.version_id)
    ref = init_params(Vocabulary(size=6), n_features=10, init_scale=0.5, seed=99)
    out = objective_and_grad(groups, theta, params, ref, cfg, DEFAULT_BOUNDS)
    fd = finite_difference_grad(groups, theta, params, ref, cfg, DEFAULT_BOUNDS)
    rel = np.abs(out.grad - fd) / np.maximum(1.0, np.abs(out.grad))
    assert rel.max() < 1e-5


def test_masked_tokens_contribute_exactly_zero_gradient() -> None:
    vocab = Vocabulary(size=6)
    theta = init_params(vocab, n_features=64, init_scale=0.5, seed=8)
    cfg = ObjectiveConfig(group_size=2)
    # kept token (calib 1) and masked token (calib 0.2 < alpha), both unit ratio
    group = manual_group(theta, [(1, 1.0, 1.0), (2, 0.2, 1.0)], advantages=[1.0, -1.0])
    out = objective_and_grad([group], theta, theta, None, cfg, DEFAULT_BOUNDS)
    assert list(out.per_token_mask_kept) == [True, False]
    assert out.clipped_fraction == 0.5

    # Perturb rows that only feed the masked rollout's context: identical
    # tokens share the context here, so instead verify invariance by
    # moving the masked token's own column through a disjoint-context pair.
    task_a = TaskSpec(TaskKind.PARITY_MATCH, 100, 0, 4)
    task_b = TaskSpec(TaskKind.TARGET_SUM, 205, 5, 4)
    ctx_a = Context(task_a.prompt_id, ())
    ctx_b = Context(task_b.prompt_id, ())
    rows_a = set(feature_indices(ctx_a, theta.n_features))
    rows_b = set(feature_indices(ctx_b, theta.n_features))
    private_b = rows_b - rows_a
    assert private_b, "fixture prompts must not share every feature row"

    def build(theta_now: PolicyParams) -> list[PromptGroup]:
        rollouts = []
        for task, ctx, token, calib in ((task_a, ctx_a, 1, 1.0), (task_b, ctx_b, 2, 0.2)):
            lp_cur = log_prob(theta_now, ctx, token, train_engine())
            rec = TokenRecord(token, lp_cur - math.log(calib), lp_cur, lp_cur, theta_now.version_id)
            rollouts.append(Rollout(task=task, stream=np.random.default_rng(0), uid=0, group_uid=0, tokens=[rec], terminal=True))
        # group pairs the kept rollout (task_a) with the masked one (task_b)
        return [PromptGroup(task=task_a, rollouts=rollouts, rewards=[1.0, 0.0], advantages=[1.0, -1.0])]

    base_groups = build(theta)
    base = objective_and_grad(base_groups, theta, theta, None, cfg, DEFAULT_BOUNDS)
    perturbed = theta.weights.copy()
    for row in private_b:
        perturbed[row, :] += 0.37
    theta_p = PolicyParams(perturbed, theta.version_id)
    out_p = objective_and_grad(base_groups, theta_p, theta, None, cfg, DEFAULT_BOUNDS)
    assert abs(out_p.objective_value - base.objective_value) < 1e-12
    for row in private_b:
        assert np.all(base.grad[row, :] == 0.0)
        assert np.all(out_p.grad[row, :] == 0.0)


def test_wide_bounds_reduce_masked_variant_to_unmasked() -> None:
    params, groups, _ = make_batch(seed=6, scale=0.2)
    wide = MaskingBounds(alpha=1e-12, beta=1e12)
    icepop = objective_and_grad(groups, params, params, None, ObjectiveConfig(algo=Algo.ICEPOP, group_size=2), wide)
    grpo = objective_and_grad(groups, params, params, None, ObjectiveConfig(algo=Algo.GRPO, group_size=2), wide)
    assert icepop.objective_value == grpo.objective_value
    assert np.array_equal(icepop.grad, grpo.grad)


def test_clip_branch_zeroes_gradient_on_both_sides() -> None:
    vocab = Vocabulary(size=6)
    theta = init_params(vocab, n_features=16, init_scale=0.4, seed=10)
    cfg = ObjectiveConfig(group_size=2, clip_eps=0.2)
    # positive advantage with ratio above 1+eps, negative with ratio below 1-eps
    group = manual_group(theta, [(1, 1.0, 1.35), (2, 1.0, 0.7)], advantages=[1.0, -1.0])
    out = objective_and_grad([group], theta, theta, None, cfg, DEFAULT_BOUNDS)
    assert np.all(out.grad == 0.0)
    # surrogate values take the clipped constants
    assert out.per_token_surrogate == pytest.approx([1.2 * 1.0, 0.8 * -1.0])


def test_truncated_variant_agrees_with_masked_inside_common_region() -> None:
    vocab = Vocabulary(size=6)
    theta = init_params(vocab, n_features=16, init_scale=0.4, seed=12)
    specs = [(1, 0.3, 1.0), (2, 0.7, 1.1), (3, 1.9, 0.95), (4, 2.6, 1.0), (5, 6.0, 1.0)]
    group_a = manual_group(theta, specs, advantages=[1.0, -0.5, 0.5, 1.0, -1.0])
    group_b = manual_group(theta, specs, advantages=[1.0, -0.5, 0.5, 1.0, -1.0])
    ice = objective_and_grad([group_a], theta, theta, None, ObjectiveConfig(algo=Algo.ICEPOP, group_size=2), DEFAULT_BOUNDS)
    tis = objective_and_grad([group_b], theta, theta, None, ObjectiveConfig(algo=Algo.TIS, group_size=2, tis_cap=2.0), DEFAULT_BOUNDS)
    calib = ice.per_token_calibration
    common = (calib >= 0.5) & (calib <= 2.0)  # [alpha, min(beta, cap)]
    assert common.sum() == 2
    assert np.array_equal(ice.per_token_surrogate[common], tis.per_token_surrogate[common])


def test_clipped_fraction_counts_masked_tokens() -> None:
    vocab = Vocabulary(size=6)
    theta = init_params(vocab, n_features=16, init_scale=0.4, seed=13)
    group = manual_group(theta, [(1, 0.2, 1.0), (2, 1.0, 1.0), (3, 9.0, 1.0), (4, 1.2, 1.0)], advantages=[1.0, -1.0, 0.5, -0.5])
    out = objective_and_grad([group], theta, theta, None, ObjectiveConfig(group_size=2), DEFAULT_BOUNDS)
    assert out.clipped_fraction == pytest.approx(2 / 4)
    assert out.token_count == 4


def test_empty_group_and_empty_rollout_fail() -> None:
    vocab = Vocabulary(size=6)
    theta = init_params(vocab, n_features=16, init_scale=0.4, seed=1)
    with pytest.raises(ValueError):
        objective_and_grad([], theta, theta, None, ObjectiveConfig(group_size=2), DEFAULT_BOUNDS)
    group = manual_group(theta, [(1, 1.0, 1.0)], advantages=[0.0])
    group.rollouts[0].tokens = []
    with pytest.raises(ValueError):
        objective_and_grad([group], theta, theta, None, ObjectiveConfig(group_size=2), DEFAULT_BOUNDS)


def test_sgd_update_identity_and_basis_vector() -> None:
    vocab = Vocabulary(size=4)
    theta = init_params(vocab, n_features=4, init_scale=0.3, seed=0)
    same = sgd_update(theta, np.zeros_like(theta.weights), lr=0.5)
    assert np.array_equal(same.weights, theta.weights)
    assert same.version_id == theta.version_id + 1

    grad = np.zeros_like(theta.weights)
    grad[2, 1] = 1.0
    bumped = sgd_update(theta, grad, lr=1.0)
    assert bumped.weights[2, 1] == theta.weights[2, 1] + 1.0


def test_sgd_two_steps_equal_summed_gradient_at_same_theta() -> None:
    vocab = Vocabulary(size=4)
    theta = init_params(vocab, n_features=6, init_scale=0.5, seed=3)
    rng = np.random.default_rng(2)
    g1 = rng.normal(0, 1, theta.weights.shape)
    g2 = rng.normal(0, 1, theta.weights.shape)
    a = sgd_update(sgd_update(theta, g1, 0.1), g2, 0.1)
    b = sgd_update(theta, g1 + g2, 0.1)
    assert np.allclose(a.weights, b.weights, atol=1e-12, rtol=0)


def test_sgd_rejects_non_finite_result() -> None:
    vocab = Vocabulary(size=4)
    theta = init_params(vocab, n_features=4, init_scale=0.3, seed=0)
    grad = np.full_like(theta.weights, 1e308)
    with pytest.raises(NumericError):
        sgd_update(theta, grad, lr=10.0)


def test_momentum_update_accumulates_velocity() -> None:
    vocab = Vocabulary(size=4)
    theta = init_params(vocab, n_features=4, init_scale=0.3, seed=0)
    grad = np.ones_like(theta.weights)
    velocity = np.zeros_like(theta.weights)
    p1, v1 = momentum_update(theta, grad, velocity, lr=0.1, beta=0.5)
    p2, v2 = momentum_update(p1, grad, v1, lr=0.1, beta=0.5)
    assert np.allclose(v1, grad)
    assert np.allclose(v2, 1.5 * grad)
    assert p2.version_id == theta.version_id + 2


def test_objective_config_invariants() -> None:
    with pytest.raises(ValueError):
        ObjectiveConfig(group_size=1)
    with pytest.raises(ValueError):
        ObjectiveConfig(clip_eps=1.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(kl_coeff=-0.1)
