import math

import numpy as np
import pytest

from offcritic import oracle as oc
from offcritic.estimators import EstimatorConfig


def is_config(**kw):
    return EstimatorConfig(ratio_mode="is", kl_beta=0.0, rl_alpha=1.0, **kw)


def test_state_indexing_is_a_bijection():
    m = oc.unbiasedness_fixture()
    seen = set()
    for t in range(m.horizon):
        import itertools
        for prefix in itertools.product(range(m.vocab), repeat=t):
            seen.add(m.state_index(prefix))
    assert seen == set(range(m.n_states))


def test_distributions_normalized():
    m = oc.divergent_fixture()
    np.testing.assert_allclose(m.target_dist(()).sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.behaviour_dist((1,)).sum(), 1.0, atol=1e-12)


def test_uniform_reward_gives_zero_gradient():
    m = oc.unbiasedness_fixture()
    flat = oc.make_tabular_mdp(3, 2, m.target_logits, m.behaviour_logits,
                               lambda s: 3.0)
    assert np.abs(oc.exact_policy_gradient(flat)).max() < 1e-12


def test_tiny_hand_computed_gradient():
    # V=2, T=1: policy softmax([a, b]), rewards r0, r1
    # E[R] = p0 r0 + p1 r1; d/da = p0 (1 - p0) r0 - p1 p0 r1
    logits = np.array([[0.3, -0.2]])
    rewards = {(0,): 2.0, (1,): -1.0}
    m = oc.make_tabular_mdp(2, 1, logits, np.zeros((1, 2)),
                            lambda s: rewards[s])
    p = np.exp(logits[0] - logits[0].max())
    p /= p.sum()
    expected_da = p[0] * (1 - p[0]) * 2.0 + p[1] * (-p[0]) * (-1.0)
    grad = oc.exact_policy_gradient(m)
    np.testing.assert_allclose(grad[0], expected_da, atol=1e-12)
    np.testing.assert_allclose(grad.sum(), 0.0, atol=1e-12)  # softmax shift-invariance


def test_autodiff_cross_oracle():
    m = oc.unbiasedness_fixture()
    g_enum = oc.exact_policy_gradient(m)
    g_auto = oc.expected_return_autodiff_gradient(m)
    rel = np.abs(g_enum - g_auto) / (np.abs(g_enum) + 1e-12)
    assert rel.max() < 1e-8


def test_enumeration_budget_enforced():
    class Huge(oc.ToyMDP):
        @property
        def n_trajectories(self):
            return oc.ENUMERATION_BUDGET + 1

    huge = Huge(3, 2, np.zeros((4, 3)), np.zeros((4, 3)), lambda s: 0.0)
    with pytest.raises(oc.OracleError, match="budget"):
        oc.exact_policy_gradient(huge)


def test_value_functions_zero_rewards():
    m = oc.make_tabular_mdp(3, 2, np.zeros((4, 3)), np.zeros((4, 3)),
                            lambda s: 0.0)
    v, q = oc.exact_value_functions(m)
    assert all(val == 0.0 for val in v.values())
    assert all(np.all(arr == 0.0) for arr in q.values())


def test_value_function_terminal_reward_enumeration():
    m = oc.unbiasedness_fixture()
    v, _ = oc.exact_value_functions(m)
    _, p_t, _, rets, _, _, _ = oc._trajectory_tables(m)
    np.testing.assert_allclose(v[()], float((p_t * rets).sum()), atol=1e-12)


def test_value_function_discounted_two_step_chain_hand_case():
    # V=2, T=2, gamma=0.5, uniform target policy, step reward = action value,
    # no terminal reward. Hand: each step's expected reward is 0.5, so
    # V(s0) = 0.5 + 0.5*0.5 = 0.75 and Q((), a) = a + 0.5*0.5.
    m = oc.make_tabular_mdp(
        2, 2, np.zeros((3, 2)), np.zeros((3, 2)),
        terminal_reward=lambda s: 0.0,
        step_reward=lambda t, prefix, a: float(a),
        gamma=0.5)
    v, q = oc.exact_value_functions(m)
    np.testing.assert_allclose(v[()], 0.75, atol=1e-12)
    np.testing.assert_allclose(q[()], [0.25, 1.25], atol=1e-12)
    np.testing.assert_allclose(v[(0,)], 0.5, atol=1e-12)


def test_v_consistent_with_q():
    m = oc.unbiasedness_fixture()
    v, q = oc.exact_value_functions(m)
    for prefix, qs in q.items():
        np.testing.assert_allclose(v[prefix],
                                   float(m.target_dist(prefix) @ qs),
                                   atol=1e-12)


def test_q_gradient_identity_via_autodiff():
    # grad of V(s0) w.r.t. tabular logits (autodiff) == score-function sum
    m = oc.unbiasedness_fixture()
    rel = np.abs(oc.exact_policy_gradient(m)
                 - oc.expected_return_autodiff_gradient(m))
    assert rel.max() < 1e-10


def test_is_estimator_unbiased_within_3se():
    m = oc.unbiasedness_fixture()
    study = oc.estimator_bias_variance(m, is_config(), n_samples=10 ** 5, seed=11)
    assert (study.se_grad > 0).all()
    assert study.within_3se


def test_identical_policies_zero_ratio_variance():
    m = oc.unbiasedness_fixture()
    same = oc.make_tabular_mdp(3, 2, m.target_logits, m.target_logits,
                               oc.default_terminal_reward)
    study = oc.estimator_bias_variance(same, is_config(), 1000, seed=2)
    np.testing.assert_allclose(study.ratio_products, 1.0, atol=1e-12)


def test_variance_ordering_is_vs_ris_tris_on_divergent_fixture():
    m = oc.divergent_fixture()
    n = 10 ** 5
    st_is = oc.estimator_bias_variance(m, is_config(), n, seed=3)
    st_ris = oc.estimator_bias_variance(
        m, EstimatorConfig(ratio_mode="ris", ris_lambda=0.5, kl_beta=0.0),
        n, seed=3)
    st_tris = oc.estimator_bias_variance(
        m, EstimatorConfig(ratio_mode="tris", ris_lambda=0.5, trunc_c=0.95,
                           kl_beta=0.0), n, seed=3)
    assert st_is.return_variance > st_ris.return_variance
    assert st_is.return_variance > st_tris.return_variance
    assert st_is.ratio_products.max() >= 10.0 * st_ris.ratio_products.max()


def test_tris_bias_nonzero_where_clamp_binds():
    m = oc.clamp_binding_fixture()
    cfg = EstimatorConfig(ratio_mode="tris", ris_lambda=0.5, trunc_c=0.95,
                          clamp_mode="lower", kl_beta=0.0)
    study = oc.estimator_bias_variance(m, cfg, 10 ** 5, seed=5)
    # clamp actually binds on this fixture
    raw = oc._ratio_products(m, EstimatorConfig(ratio_mode="ris",
                                                ris_lambda=0.5, kl_beta=0.0))
    assert (raw < 0.95 ** 2 + 1e-9).any()
    deviation = np.abs(study.mean_grad - study.exact_grad)
    assert (deviation > 3.0 * study.se_grad).any()


def test_kl_shrink_reduces_exact_is_variance_monotonically():
    # geometric bridge from a divergent target toward the behaviour: KL and
    # exact IS variance both fall strictly
    b = np.array([0.7, 0.2, 0.1])
    p = np.array([0.05, 0.15, 0.8])
    kls, variances = [], []
    for t in np.linspace(0.0, 0.8, 5):
        mix = p ** (1 - t) * b ** t
        mix /= mix.sum()
        kls.append(float(np.sum(mix * np.log(mix / b))))
        variances.append(oc.exact_is_ratio_variance(mix, b))
    assert all(a > b_ for a, b_ in zip(kls, kls[1:]))
    assert all(a > b_ for a, b_ in zip(variances, variances[1:]))


# ---------------------------------------------------------------------------
# the cited KL/variance bound
# ---------------------------------------------------------------------------


def test_wexler_constructed_instance_satisfied():
    rep = oc.wexler_variance_check(*oc.wexler_fixture())
    assert rep.applicable and rep.satisfied
    assert rep.variance_ratio >= rep.bound
    assert rep.d > math.log(rep.c) > 0


def test_wexler_equal_importance_functions_not_applicable():
    pi = np.full(4, 0.25)
    b = np.array([0.4, 0.3, 0.2, 0.1])
    rep = oc.wexler_variance_check(pi, b, b)
    assert not rep.applicable
    assert "precondition" in rep.reason


def test_wexler_zero_variance_when_behaviour_equals_target():
    pi = np.array([0.3, 0.3, 0.4])
    assert oc.exact_is_ratio_variance(pi, pi) == pytest.approx(0.0, abs=1e-12)


def test_wexler_invalid_distribution_not_applicable():
    rep = oc.wexler_variance_check([0.5, 0.6], [0.5, 0.5], [0.5, 0.5])
    assert not rep.applicable
