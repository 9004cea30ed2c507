"""Importance-ratio estimators and the off-policy self-critical loss.

Three ratio schemes over (target prob pi, behaviour prob pi_b):

    IS    mu      = pi / pi_b                       (unbounded)
    RIS   mu_r    = pi / (lam*pi + (1-lam)*pi_b)    (bounded by 1/lam)
    TRIS  mu_tr   = clamp of mu_r at threshold c    (default: lower clamp)

plus a per-action KL-control penalty beta*(log pi_b - log pi) added to the
self-critical advantage inside the reward bracket.

The loss is the REINFORCE surrogate: gradient flows only through the
explicit log pi terms; ratio products, behaviour log-probs and the detached
target log-probs are fixed weights. Per-step ratios are accumulated in log
space and exponentiated once per sequence, so long sequences cannot
underflow the product.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk

RATIO_MODES = ("is", "ris", "tris")
CLAMP_MODES = ("lower", "upper", "both")


class EstimatorError(ValueError):
    pass


@dataclass
class EstimatorConfig:
    """Knobs of the off-policy gradient estimator.

    ris_lambda is the RIS mixing weight, trunc_c the truncation threshold,
    kl_beta the KL-control weight, rl_alpha the RL share of the combined
    RL+MLE loss, discount the (vacuous for terminal rewards) gamma.
    """

    ris_lambda: float = 0.5
    trunc_c: float = 0.95
    trunc_c_upper: float | None = None  # only for clamp_mode="both"
    kl_beta: float = 0.05
    rl_alpha: float = 0.5
    discount: float = 1.0
    clamp_mode: str = "lower"
    ratio_mode: str = "tris"
    per_prefix_products: bool = False

    def validated(self) -> "EstimatorConfig":
        if not (0.0 < self.ris_lambda <= 1.0):
            raise EstimatorError(f"lambda must be in (0,1], got {self.ris_lambda}")
        if self.trunc_c <= 0.0:
            raise EstimatorError(f"c must be positive, got {self.trunc_c}")
        if self.clamp_mode not in CLAMP_MODES:
            raise EstimatorError(f"unknown clamp mode {self.clamp_mode!r}")
        if self.ratio_mode not in RATIO_MODES:
            raise EstimatorError(f"unknown ratio mode {self.ratio_mode!r}")
        if self.clamp_mode == "lower" and self.trunc_c > 1.0 / self.ris_lambda:
            raise EstimatorError(
                f"lower clamp c={self.trunc_c} exceeds the RIS bound "
                f"1/lambda={1.0 / self.ris_lambda}")
        if self.clamp_mode == "both" and self.trunc_c_upper is None:
            raise EstimatorError("clamp_mode='both' needs trunc_c_upper")
        if self.kl_beta < 0.0:
            raise EstimatorError(f"beta must be >= 0, got {self.kl_beta}")
        if not (0.0 <= self.rl_alpha <= 1.0):
            raise EstimatorError(f"alpha must be in [0,1], got {self.rl_alpha}")
        if not (0.0 < self.discount <= 1.0):
            raise EstimatorError(f"gamma must be in (0,1], got {self.discount}")
        return self

    def with_updates(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw).validated()


# ---------------------------------------------------------------------------
# ratio primitives (accept scalars or numpy arrays)
# ---------------------------------------------------------------------------


def is_ratio(pi, pi_b):
    """Plain importance ratio pi / pi_b."""
    pi = np.asarray(pi, dtype=np.float64)
    pi_b = np.asarray(pi_b, dtype=np.float64)
    if np.any(pi_b <= 0.0):
        raise EstimatorError(
            "behaviour probability is zero: the behaviour policy assigned no "
            "mass to its own sample")
    out = pi / pi_b
    return float(out) if out.ndim == 0 else out


def ris_ratio(pi, pi_b, ris_lambda):
    """Relative importance ratio, bounded above by 1/lambda."""
    lam = np.asarray(ris_lambda, dtype=np.float64)
    if np.any(lam <= 0.0) or np.any(lam > 1.0):
        raise EstimatorError(f"lambda must be in (0,1], got {ris_lambda}")
    pi = np.asarray(pi, dtype=np.float64)
    pi_b = np.asarray(pi_b, dtype=np.float64)
    out = pi / (lam * pi + (1.0 - lam) * pi_b)
    return float(out) if out.ndim == 0 else out


def tris_ratio(ris, c, clamp_mode="lower", c_upper=None):
    """Truncate the relative ratio: lower clamp by default (min value -> c)."""
    if c <= 0.0:
        raise EstimatorError(f"c must be positive, got {c}")
    ris = np.asarray(ris, dtype=np.float64)
    if clamp_mode == "lower":
        out = np.maximum(c, ris)
    elif clamp_mode == "upper":
        out = np.minimum(c, ris)
    elif clamp_mode == "both":
        if c_upper is None:
            raise EstimatorError("clamp_mode='both' needs c_upper")
        out = np.clip(ris, c, c_upper)
    else:
        raise EstimatorError(f"unknown clamp mode {clamp_mode!r}")
    return float(out) if out.ndim == 0 else out


def ris_log_ratio(log_pi, log_pi_b, ris_lambda):
    """log of ris_ratio computed without leaving log space."""
    log_pi = np.asarray(log_pi, dtype=np.float64)
    log_pi_b = np.asarray(log_pi_b, dtype=np.float64)
    if ris_lambda == 1.0:
        return np.zeros_like(log_pi)
    denom = np.logaddexp(np.log(ris_lambda) + log_pi,
                         np.log1p(-ris_lambda) + log_pi_b)
    return log_pi - denom


def kl_penalty_term(log_pi_b, log_pi, beta):
    """beta * (log pi_b - log pi): prior-affinity reward plus entropy bonus."""
    return beta * (np.asarray(log_pi_b) - np.asarray(log_pi))


def exact_state_kl(pi_dist, pi_b_dist) -> float:
    """KL(pi || pi_b) between two full action distributions."""
    p = np.asarray(pi_dist, dtype=np.float64)
    q = np.asarray(pi_b_dist, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise EstimatorError("distributions must sum to 1")
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


# ---------------------------------------------------------------------------
# per-episode ratios and the batch loss
# ---------------------------------------------------------------------------


@dataclass
class StepRatios:
    """All three ratio schemes for one episode plus the selected product."""

    is_ratios: np.ndarray
    ris_ratios: np.ndarray
    tris_ratios: np.ndarray
    selected: np.ndarray
    product: float


@dataclass
class RatioTrace:
    """Per-iteration (min, max, mean, variance) of recorded ratio values."""

    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        from .dataio import write_csv

        write_csv(path, ["iteration", "min", "max", "mean", "variance"], self.rows)

    @property
    def variances(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])


def record_ratio_stats(trace: RatioTrace, iteration: int, values) -> None:
    """Append population stats of the batch's ratio values to the trace."""
    v = np.asarray(values, dtype=np.float64)
    trace.rows.append((iteration, float(v.min()), float(v.max()),
                       float(v.mean()), float(v.var())))


def step_ratios(behaviour_log_probs, target_log_probs,
                config: EstimatorConfig) -> StepRatios:
    """Compute IS/RIS/TRIS per-step ratios in log space for one episode."""
    lp_b = np.asarray(behaviour_log_probs, dtype=np.float64)
    lp_t = np.asarray(target_log_probs, dtype=np.float64)
    log_is = lp_t - lp_b
    log_ris = ris_log_ratio(lp_t, lp_b, config.ris_lambda)
    tris = tris_ratio(np.exp(log_ris), config.trunc_c, config.clamp_mode,
                      config.trunc_c_upper)
    if config.ratio_mode == "is":
        log_selected = log_is
    elif config.ratio_mode == "ris":
        log_selected = log_ris
    else:
        log_selected = np.log(tris)
    return StepRatios(
        is_ratios=np.exp(log_is),
        ris_ratios=np.exp(log_ris),
        tris_ratios=np.asarray(tris, dtype=np.float64),
        selected=np.exp(log_selected),
        product=float(np.exp(log_selected.sum())),
    )


def off_policy_loss(episodes, config: EstimatorConfig,
                    trace: RatioTrace | None = None,
                    iteration: int = 0):
    """Assemble the batch loss whose gradient is the off-policy estimator.

    Each episode must carry behaviour_log_probs (fixed floats),
    target_log_probs (a differentiable [T] Tensor) and advantage. Returns
    (loss Tensor, [StepRatios]); minimizing the loss ascends the estimator.
    The mean is taken over all (episode, step) terms.
    """
    config = config.validated()
    if not episodes:
        raise EstimatorError("empty episode batch")
    contributions = []
    ratios_out = []
    all_steps = []
    total_steps = 0
    for ep in episodes:
        if getattr(ep, "advantage", None) is None:
            raise EstimatorError(
                "episode missing its greedy-baseline advantage")
        lp_t_tensor = ep.target_log_probs
        lp_t = lp_t_tensor.data
        lp_b = np.asarray(ep.behaviour_log_probs, dtype=np.float64)
        if lp_b.shape != lp_t.shape:
            raise EstimatorError(
                f"behaviour/target log-prob length mismatch: "
                f"{lp_b.shape} vs {lp_t.shape}")
        sr = step_ratios(lp_b, lp_t, config)
        ratios_out.append(sr)
        all_steps.append(sr.selected)
        if config.per_prefix_products:
            weight = np.exp(np.cumsum(np.log(sr.selected)))
        else:
            weight = sr.product
        adv = ep.advantage.value if hasattr(ep.advantage, "value") else float(ep.advantage)
        bracket = adv + kl_penalty_term(lp_b, lp_t, config.kl_beta)
        coef = bracket * weight  # fixed numbers; gradient only via log pi
        contributions.append(nk.tsum(nk.mul(nk.Tensor(-coef), lp_t_tensor)))
        total_steps += lp_t.size
    loss = contributions[0]
    for c in contributions[1:]:
        loss = nk.add(loss, c)
    loss = nk.mul(loss, 1.0 / total_steps)
    if trace is not None:
        record_ratio_stats(trace, iteration, np.concatenate(all_steps))
    return loss, ratios_out
