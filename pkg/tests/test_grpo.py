from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grpo_cases import random_config, relative_error
from oracles import advantages_ref
from segloop.errors import ShapeError
from segloop.grpo import (
    BanditSpec,
    RolloutGroup,
    TokenizedRollout,
    ToyPolicy,
    TrainConfig,
    clipped_loss,
    finite_difference_gradient,
    group_advantages,
    importance_ratios,
    loss_and_gradient,
    train_toy,
)


def single(logp_old, logp_new, S=0.0, ctx=None, act=None):
    n = len(logp_old)
    return TokenizedRollout(
        np.zeros(n, dtype=int) if ctx is None else np.asarray(ctx),
        np.zeros(n, dtype=int) if act is None else np.asarray(act),
        np.asarray(logp_old, dtype=float),
        np.asarray(logp_new, dtype=float),
        S,
    )


class TestAdvantages:
    def test_equal_returns(self):
        assert group_advantages([3.0, 3.0, 3.0]).tolist() == [0.0, 0.0, 0.0]

    def test_two(self):
        a = group_advantages([1.0, 0.0])
        s = math.sqrt(0.25 + 1e-8)
        assert a.tolist() == pytest.approx([0.5 / s, -0.5 / s], abs=1e-15)
        assert a[0] == pytest.approx(0.99999998, abs=1e-8)

    def test_four(self):
        assert group_advantages([2.0, 0.0, 0.0, 2.0]).tolist() == pytest.approx([1, -1, -1, 1], abs=1e-7)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8))
    def test_against_reference(self, S):
        got = group_advantages(S)
        want = advantages_ref(S, 1e-8)
        assert got.tolist() == pytest.approx(want, abs=1e-9)
        if any(s != S[0] for s in S):
            assert abs(got.mean()) <= 1e-12 * max(1.0, np.abs(got).max())
            assert got.std() <= 1.0 + 1e-12

    def test_errors(self):
        with pytest.raises(ShapeError):
            group_advantages([])
        with pytest.raises(ValueError):
            group_advantages([1.0, 2.0], delta=0)


class TestRatiosAndLoss:
    def test_identity_ratio(self):
        r = single([-1.0, -2.0], [-1.0, -2.0])
        assert importance_ratios(r).tolist() == [1.0, 1.0]

    def test_ratio_two(self):
        r = single([-1.0, -2.0], [-1.0, -2.0 + math.log(2)])
        assert importance_ratios(r)[1] == pytest.approx(2.0, abs=1e-15)

    def test_positive_advantage_clipped(self):
        g = RolloutGroup((single([0.0], [math.log(2)]),), np.array([1.0]))
        assert clipped_loss([g], 0.2) == pytest.approx(-1.2, abs=1e-15)

    def test_negative_advantage_clipped(self):
        g = RolloutGroup((single([0.0], [math.log(0.5)]),), np.array([-1.0]))
        assert clipped_loss([g], 0.2) == pytest.approx(0.8, abs=1e-15)

    def test_ratio_one_loss_is_zero(self):
        rs = tuple(single([-0.5], [-0.5], S=s) for s in (1.0, 2.0, 4.0))
        g = RolloutGroup(rs).with_advantages()
        assert abs(clipped_loss([g])) < 1e-15

    def test_unclipped_region_equals_surrogate(self, rng):
        rs = tuple(single([-1.0, -1.0], [-1.0 + d, -1.0 - d], S=float(s)) for d, s in [(0.05, 1), (-0.1, 2), (0.15, 0)])
        g = RolloutGroup(rs).with_advantages()
        plain = -np.mean([np.mean(importance_ratios(r) * a) for r, a in zip(g.rollouts, g.advantages)])
        assert clipped_loss([g]) == pytest.approx(plain, abs=1e-15)

    def test_shift_and_scale_invariance(self, rng):
        base = [single([-1.0], [-1.0 + d], S=s) for d, s in [(0.3, 1.0), (-0.4, 3.0), (0.1, 2.0)]]

        def loss_for(f):
            rs = tuple(TokenizedRollout(r.contexts, r.actions, r.logp_old, r.logp_new, f(r.S)) for r in base)
            return clipped_loss([RolloutGroup(rs).with_advantages()])

        ref = loss_for(lambda s: s)
        assert loss_for(lambda s: s + 17.0) == pytest.approx(ref, abs=1e-12)
        assert loss_for(lambda s: 5.0 * s) == pytest.approx(ref, abs=10 * 1e-8)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            TokenizedRollout(np.zeros(2, int), np.zeros(1, int), np.zeros(2), np.zeros(2), 0.0)
        with pytest.raises(ValueError):
            clipped_loss([], 0.2)
        with pytest.raises(ValueError):
            clipped_loss([RolloutGroup((single([0.0], [0.0]),))])


class TestGradient:
    def test_policy_gradient_form_at_ratio_one(self, rng):
        policy = ToyPolicy(rng.normal(size=(2, 3)))
        acts = [0, 2, 1, 2]
        rs = []
        for a, s in zip(acts, [1.0, 0.0, 2.0, 0.5]):
            lp = policy.logp(np.array([1]), np.array([a]))
            rs.append(TokenizedRollout(np.array([1]), np.array([a]), lp, lp.copy(), s))
        g = RolloutGroup(tuple(rs)).with_advantages()
        _, grad = loss_and_gradient(policy, [g])
        p = policy.probs(1)
        want = np.zeros(3)
        for a, adv in zip(acts, g.advantages):
            dlogp = -p.copy()
            dlogp[a] += 1
            want -= adv * dlogp / len(acts)
        assert np.allclose(grad[1], want, atol=1e-15)
        assert np.all(grad[0] == 0)

    def test_zero_advantage_zero_gradient(self):
        policy = ToyPolicy(np.ones((2, 2)))
        rs = tuple(single([-0.7], [-0.7], S=1.0) for _ in range(3))
        _, grad = loss_and_gradient(policy, [RolloutGroup(rs).with_advantages()])
        assert not grad.any()

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cfg = None
        while cfg is None:
            cfg = random_config(rng)
        policy, groups = cfg
        loss, grad = loss_and_gradient(policy, groups)
        fd = finite_difference_gradient(policy, groups, h=1e-5)
        assert relative_error(grad, fd) <= 1e-4
        assert loss == pytest.approx(clipped_loss([policy.rescore(g) for g in groups]))


class TestTraining:
    bandit = BanditSpec(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))

    def test_learns_small_bandit(self):
        result = train_toy(self.bandit, TrainConfig(iterations=300, seed=1))
        assert self.bandit.greedy_return(result.policy) == self.bandit.optimal_return()
        assert result.curve[-1]["expected_S"] > result.curve[0]["expected_S"]

    def test_zero_step_size_is_flat(self):
        result = train_toy(self.bandit, TrainConfig(iterations=50, step_size=0.0))
        assert all(row["expected_S"] == pytest.approx(1 / 3, abs=1e-15) for row in result.curve)
        assert not result.policy.theta.any()

    def test_log_lines(self):
        result = train_toy(self.bandit, TrainConfig(iterations=3))
        lines = result.log_lines()
        assert len(lines) == 3
        assert lines[0].startswith('{"it":0,"mean_S":')

    def test_deterministic(self):
        a = train_toy(self.bandit, TrainConfig(iterations=40, seed=9))
        b = train_toy(self.bandit, TrainConfig(iterations=40, seed=9))
        assert a.curve == b.curve

    @pytest.mark.parametrize("kwargs", [{"G": 0}, {"eps_clip": 1.0}, {"delta": 0.0}, {"inner_steps": 0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
