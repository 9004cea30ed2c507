"""Exact-enumeration and Monte-Carlo ground truth for the estimators.

ToyMDP: a token MDP small enough (V <= 5, T <= 3) to enumerate every
trajectory, with tabular-softmax target and behaviour policies. States are
the generation prefixes; the reward is a per-step function plus a terminal
function of the whole sequence, discounted by gamma with the terminal
reward paid at the final step.

Everything exact is computed by full enumeration; Monte Carlo appears only
where the sampling estimator itself is the object under study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkit as nk
from .estimators import EstimatorConfig

ENUMERATION_BUDGET = 10 ** 6


class OracleError(ValueError):
    pass


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyMDP:
    """Enumerable sequence MDP with tabular policies over prefix states."""

    vocab: int
    horizon: int
    target_logits: np.ndarray     # [n_states x V]
    behaviour_logits: np.ndarray  # [n_states x V]
    terminal_reward: Callable[[tuple[int, ...]], float]
    step_reward: Callable[[int, tuple[int, ...], int], float] | None = None
    gamma: float = 1.0

    def __post_init__(self):
        self.target_logits = np.asarray(self.target_logits, dtype=np.float64)
        self.behaviour_logits = np.asarray(self.behaviour_logits, dtype=np.float64)
        want = (self.n_states, self.vocab)
        if self.target_logits.shape != want or self.behaviour_logits.shape != want:
            raise OracleError(
                f"logit tables must be {want}, got {self.target_logits.shape} "
                f"and {self.behaviour_logits.shape}")

    @property
    def n_states(self) -> int:
        # prefixes of length 0..T-1
        return sum(self.vocab ** t for t in range(self.horizon))

    @property
    def n_trajectories(self) -> int:
        return self.vocab ** self.horizon

    def state_index(self, prefix: tuple[int, ...]) -> int:
        base = sum(self.vocab ** t for t in range(len(prefix)))
        offset = 0
        for a in prefix:
            offset = offset * self.vocab + a
        return base + offset

    def target_dist(self, prefix) -> np.ndarray:
        return _softmax(self.target_logits[self.state_index(prefix)])

    def behaviour_dist(self, prefix) -> np.ndarray:
        return _softmax(self.behaviour_logits[self.state_index(prefix)])

    def trajectories(self):
        """All complete sequences as tuples, lexicographic order."""
        def rec(prefix):
            if len(prefix) == self.horizon:
                yield prefix
                return
            for a in range(self.vocab):
                yield from rec(prefix + (a,))
        yield from rec(())

    def trajectory_return(self, seq: tuple[int, ...]) -> float:
        """Sum of gamma^t step rewards, terminal reward folded into the last."""
        total = 0.0
        for t, a in enumerate(seq):
            r = self.step_reward(t, seq[:t], a) if self.step_reward else 0.0
            if t == self.horizon - 1:
                r += self.terminal_reward(seq)
            total += (self.gamma ** t) * r
        return total


def make_tabular_mdp(vocab: int, horizon: int, target_logits, behaviour_logits,
                     terminal_reward, step_reward=None, gamma: float = 1.0) -> ToyMDP:
    return ToyMDP(vocab, horizon, target_logits, behaviour_logits,
                  terminal_reward, step_reward, gamma)


def uniform_logits(vocab: int, horizon: int) -> np.ndarray:
    n = sum(vocab ** t for t in range(horizon))
    return np.zeros((n, vocab))


def _check_budget(mdp: ToyMDP) -> None:
    if mdp.n_trajectories > ENUMERATION_BUDGET:
        raise OracleError(
            f"{mdp.n_trajectories} trajectories exceed the enumeration "
            f"budget {ENUMERATION_BUDGET}")


def _trajectory_tables(mdp: ToyMDP):
    """Per-trajectory probabilities, returns, and score-function gradients."""
    seqs = list(mdp.trajectories())
    n_params = mdp.n_states * mdp.vocab
    p_t = np.empty(len(seqs))
    p_b = np.empty(len(seqs))
    rets = np.empty(len(seqs))
    grads = np.zeros((len(seqs), n_params))
    lp_t = np.empty((len(seqs), mdp.horizon))
    lp_b = np.empty((len(seqs), mdp.horizon))
    for i, seq in enumerate(seqs):
        pt = pb = 1.0
        for t, a in enumerate(seq):
            prefix = seq[:t]
            s = mdp.state_index(prefix)
            dt = mdp.target_dist(prefix)
            db = mdp.behaviour_dist(prefix)
            pt *= dt[a]
            pb *= db[a]
            lp_t[i, t] = math.log(dt[a])
            lp_b[i, t] = math.log(db[a])
            block = grads[i, s * mdp.vocab:(s + 1) * mdp.vocab]
            block -= dt
            block[a] += 1.0
        p_t[i] = pt
        p_b[i] = pb
        rets[i] = mdp.trajectory_return(seq)
    return seqs, p_t, p_b, rets, grads, lp_t, lp_b


def exact_policy_gradient(mdp: ToyMDP) -> np.ndarray:
    """Sum over all trajectories of p(tau) R(tau) grad log p(tau)."""
    _check_budget(mdp)
    _, p_t, _, rets, grads, _, _ = _trajectory_tables(mdp)
    return (p_t * rets) @ grads


def expected_return_autodiff_gradient(mdp: ToyMDP) -> np.ndarray:
    """Same gradient through the reverse-mode kernel: build sum_tau p R as a
    graph over the logit table and differentiate. Cross-oracle for the
    score-function enumeration."""
    _check_budget(mdp)
    theta = nk.Tensor(mdp.target_logits, requires_grad=True)
    seqs = list(mdp.trajectories())
    with nk.Tape() as tape:
        ls = nk.log_softmax(theta, axis=-1)
        rows, cols, weights = [], [], []
        for seq in seqs:
            for t, a in enumerate(seq):
                rows.append(mdp.state_index(seq[:t]))
                cols.append(a)
        picked = nk.take_entries(ls, rows, cols)
        logps = nk.sum_row_groups(nk.reshape(picked, (len(seqs) * mdp.horizon, 1)),
                                  mdp.horizon)
        rets = nk.Tensor(np.array([[mdp.trajectory_return(s)] for s in seqs]))
        objective = nk.tsum(nk.mul(nk.exp(logps), rets))
        tape.backward(objective)
    return theta.grad.reshape(-1).copy()


def exact_value_functions(mdp: ToyMDP):
    """Backward induction: V(s) and Q(s, a) for every prefix state."""
    _check_budget(mdp)

    def q_value(prefix: tuple[int, ...], a: int) -> float:
        t = len(prefix)
        r = mdp.step_reward(t, prefix, a) if mdp.step_reward else 0.0
        if t == mdp.horizon - 1:
            r += mdp.terminal_reward(prefix + (a,))
            return r
        return r + mdp.gamma * v_value(prefix + (a,))

    _v_cache: dict[tuple, float] = {}

    def v_value(prefix: tuple[int, ...]) -> float:
        if prefix in _v_cache:
            return _v_cache[prefix]
        dist = mdp.target_dist(prefix)
        val = float(sum(dist[a] * q_value(prefix, a) for a in range(mdp.vocab)))
        _v_cache[prefix] = val
        return val

    v_table: dict[tuple, float] = {}
    q_table: dict[tuple, np.ndarray] = {}

    def rec(prefix):
        if len(prefix) == mdp.horizon:
            return
        v_table[prefix] = v_value(prefix)
        q_table[prefix] = np.array([q_value(prefix, a) for a in range(mdp.vocab)])
        for a in range(mdp.vocab):
            rec(prefix + (a,))

    rec(())
    return v_table, q_table


@dataclass
class EstimatorStudy:
    """Monte-Carlo study of one ratio scheme against the exact gradient."""

    mean_grad: np.ndarray
    se_grad: np.ndarray
    exact_grad: np.ndarray
    bias_norm: float
    return_variance: float      # variance of R(tau) * prod(ratios)
    ratio_products: np.ndarray  # per-draw sequence ratio products
    weighted_returns: np.ndarray

    @property
    def within_3se(self) -> bool:
        return bool(np.all(np.abs(self.mean_grad - self.exact_grad)
                           <= 3.0 * self.se_grad))


def _ratio_products(mdp: ToyMDP, config: EstimatorConfig):
    """Per-trajectory products of the selected per-step ratio."""
    from .estimators import step_ratios

    _, _, _, _, _, lp_t, lp_b = _trajectory_tables(mdp)
    prods = np.empty(lp_t.shape[0])
    for i in range(lp_t.shape[0]):
        prods[i] = step_ratios(lp_b[i], lp_t[i], config).product
    return prods


def estimator_bias_variance(mdp: ToyMDP, est_config: EstimatorConfig,
                            n_samples: int, seed: int) -> EstimatorStudy:
    """Draw trajectories from the behaviour policy, form the per-draw
    gradient estimate R * prod(mu) * grad log pi, and compare its mean
    against the enumerated exact gradient."""
    _check_budget(mdp)
    if n_samples < 1:
        raise OracleError("need at least one sample")
    _, p_t, p_b, rets, grads, _, _ = _trajectory_tables(mdp)
    prods = _ratio_products(mdp, est_config)
    exact = (p_t * rets) @ grads

    rng = np.random.default_rng(seed)
    draws = rng.choice(len(p_b), size=n_samples, p=p_b / p_b.sum())
    weights = rets[draws] * prods[draws]                  # [n]
    per_draw = weights[:, None] * grads[draws]            # [n x P]
    mean_grad = per_draw.mean(axis=0)
    se_grad = per_draw.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return EstimatorStudy(
        mean_grad=mean_grad,
        se_grad=se_grad,
        exact_grad=exact,
        bias_norm=float(np.linalg.norm(mean_grad - exact)),
        return_variance=float(weights.var()),
        ratio_products=prods[draws],
        weighted_returns=weights,
    )


def exact_is_ratio_variance(pi: np.ndarray, pi_b: np.ndarray) -> float:
    """Var under pi_b of pi(X)/pi_b(X), by enumeration: sum pi^2/pi_b - 1."""
    pi = np.asarray(pi, dtype=np.float64)
    pi_b = np.asarray(pi_b, dtype=np.float64)
    if np.any(pi_b <= 0):
        raise OracleError("behaviour support must cover the target")
    return float(np.sum(pi * pi / pi_b) - 1.0)


@dataclass
class WexlerReport:
    """Numeric check of the cited KL/variance bound on one instance."""

    applicable: bool
    reason: str = ""
    d: float = float("nan")
    c: float = float("nan")
    variance_b1: float = float("nan")
    variance_b2: float = float("nan")
    variance_ratio: float = float("nan")
    bound: float = float("nan")
    satisfied: bool = False

    def lines(self) -> list[str]:
        if not self.applicable:
            return [f"not applicable: {self.reason}"]
        return [
            f"d = D(b1||pi) - D(b2||pi) = {self.d:.6f}",
            f"c = {self.c:.6f} (ln c = {math.log(self.c):.6f})",
            f"Var_b1(pi/b1) = {self.variance_b1:.6f}",
            f"Var_b2(pi/b2) = {self.variance_b2:.6f}",
            f"variance ratio = {self.variance_ratio:.6f}",
            f"bound e^(2d)/c^2 = {self.bound:.6f}",
            f"satisfied: {self.satisfied}",
        ]


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p) - np.log(q))))


def wexler_variance_check(pi, b1, b2, c: float = 1.5,
                          n_samples: int = 0) -> WexlerReport:
    """Check E_b1[Var(pi/pi_b)] / E_b2[Var(pi/pi_b)] >= e^(2d)/c^2 for one
    constructed instance with d = D(b1||pi) - D(b2||pi) > ln c > 0.

    Variances are exact (enumeration over the discrete support); n_samples
    is accepted for interface parity and unused at these sizes. Instances
    violating the precondition yield a not-applicable report, never a crash.
    """
    pi = np.asarray(pi, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    for name, v in (("pi", pi), ("b1", b1), ("b2", b2)):
        if abs(v.sum() - 1.0) > 1e-9 or np.any(v <= 0):
            return WexlerReport(False, f"{name} is not a strictly positive "
                                       "distribution")
    d = _kl(b1, pi) - _kl(b2, pi)
    if c <= 1.0:
        return WexlerReport(False, f"need ln c > 0, got c={c}")
    if d <= math.log(c):
        return WexlerReport(False,
                            f"precondition d > ln c failed: d={d:.6f}, "
                            f"ln c={math.log(c):.6f}")
    v1 = exact_is_ratio_variance(pi, b1)
    v2 = exact_is_ratio_variance(pi, b2)
    if v2 == 0.0:
        return WexlerReport(False, "b2 equals pi: zero reference variance")
    ratio = v1 / v2
    bound = math.exp(2.0 * d) / (c * c)
    return WexlerReport(True, "", d, c, v1, v2, ratio, bound, ratio >= bound)


# ---------------------------------------------------------------------------
# fixtures used by tests, diagnostics, and the acceptance suite
# ---------------------------------------------------------------------------


def default_terminal_reward(seq: tuple[int, ...]) -> float:
    """Deterministic, non-degenerate reward keyed on sequence content."""
    return 1.0 + 0.5 * seq.count(2) - 0.25 * seq.count(0) + 0.1 * seq[-1]


def unbiasedness_fixture() -> ToyMDP:
    """vocab-3 / horizon-2 MDP with mildly different policies."""
    rng = np.random.default_rng(7)
    n = sum(3 ** t for t in range(2))
    return make_tabular_mdp(
        3, 2,
        target_logits=rng.normal(0, 0.7, (n, 3)),
        behaviour_logits=rng.normal(0, 0.7, (n, 3)),
        terminal_reward=default_terminal_reward,
    )


def divergent_fixture() -> ToyMDP:
    """Behaviour nearly deterministic away from the target's mass."""
    n = sum(3 ** t for t in range(2))
    target = np.tile(np.log(np.array([0.10, 0.10, 0.80])), (n, 1))
    behaviour = np.tile(np.log(np.array([0.90, 0.09, 0.01])), (n, 1))
    return make_tabular_mdp(3, 2, target, behaviour, default_terminal_reward)


def clamp_binding_fixture() -> ToyMDP:
    """Target thinner than behaviour nearly everywhere, so RIS ratios sit
    well below the default lower clamp c=0.95 and TRIS biases upward."""
    n = sum(3 ** t for t in range(2))
    target = np.tile(np.log(np.array([0.70, 0.20, 0.10])), (n, 1))
    behaviour = np.tile(np.log(np.array([0.10, 0.30, 0.60])), (n, 1))
    return make_tabular_mdp(3, 2, target, behaviour, default_terminal_reward)


def wexler_fixture():
    """(pi, b1, b2, c): uniform target, one far and one near importance
    function, constant chosen inside the admissible window."""
    pi = np.full(4, 0.25)
    b1 = np.array([0.85, 0.05, 0.05, 0.05])
    b2 = np.array([0.30, 0.25, 0.25, 0.20])
    return pi, b1, b2, 1.5
