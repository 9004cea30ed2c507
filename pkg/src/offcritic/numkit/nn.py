"""Neural building blocks composed from the tensor primitives.

Everything here is differentiable end to end through the tape; the
finite-difference harness at the bottom is the independent oracle every op
and model is checked against.

GRU convention used throughout (documented because several exist):
update gate z = sigmoid(x Wz + h Uz + bz), reset gate r = sigmoid(x Wr +
h Ur + br), candidate h~ = tanh(x Wc + (r * h) Uc + bc) with the reset
applied to the hidden state before the candidate projection, and the mix
h' = (1 - z) * h + z * h~.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .tensor import DimensionError, Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = tk.matmul(x, w)
    if b is not None:
        out = tk.add(out, b)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = tk.as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gg = g * gain.data
        dxhat_mean = gg.mean(axis=-1, keepdims=True)
        cross = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gg - dxhat_mean - xhat * cross)
        dgain = tk._unbroadcast(g * xhat, gain.shape)
        dbias = tk._unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return tk._apply((x, gain, bias), out_data, bw)


@dataclass
class GRUParams:
    """One GRU cell's weights: input projections W*, recurrent U*, biases b*."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wc: Tensor
    uc: Tensor
    bc: Tensor

    @classmethod
    def create(cls, d_in: int, d_h: int, rng: np.random.Generator,
               scale: float = 0.08) -> "GRUParams":
        def w(r, c):
            return Tensor(rng.normal(0.0, scale, size=(r, c)), requires_grad=True)

        def b(c):
            return Tensor(np.zeros(c), requires_grad=True)

        return cls(w(d_in, d_h), w(d_h, d_h), b(d_h),
                   w(d_in, d_h), w(d_h, d_h), b(d_h),
                   w(d_in, d_h), w(d_h, d_h), b(d_h))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc")}


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """One GRU step. x: [B x d_in], h: [B x d_h] -> [B x d_h]."""
    if x.shape[1] != p.wz.shape[0] or h.shape[1] != p.uz.shape[0]:
        raise DimensionError(
            f"gru_cell shapes: x {x.shape}, h {h.shape}, "
            f"wz {p.wz.shape}, uz {p.uz.shape}")
    z = tk.sigmoid(tk.add(linear(x, p.wz, p.bz), tk.matmul(h, p.uz)))
    r = tk.sigmoid(tk.add(linear(x, p.wr, p.br), tk.matmul(h, p.ur)))
    cand = tk.tanh(tk.add(linear(x, p.wc, p.bc), tk.matmul(tk.mul(r, h), p.uc)))
    one_minus_z = tk.sub(1.0, z)
    return tk.add(tk.mul(one_minus_z, h), tk.mul(z, cand))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v. mask is a fixed additive array."""
    d = q.shape[-1]
    scores = tk.mul(tk.matmul(q, tk.transpose(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = tk.add(scores, Tensor(mask))
    return tk.matmul(tk.softmax(scores, axis=-1), v)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor,
                 w2: Tensor, b2: Tensor) -> Tensor:
    return linear(tk.relu(linear(x, w1, b1)), w2, b2)


def embedding(table: Tensor, ids) -> Tensor:
    return tk.take_rows(table, ids)


def sequence_nll(logits: Tensor, targets) -> Tensor:
    """Per-step negative log-likelihoods: logits [T x V], targets [T] -> [T]."""
    lp = tk.log_softmax(logits, axis=-1)
    return tk.neg(tk.take_index(lp, targets))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean NLL over steps, computed through log-sum-exp."""
    return tk.tmean(sequence_nll(logits, targets))


def causal_mask(t: int, neg: float = -1e9) -> np.ndarray:
    """Additive mask hiding positions j > i. Finite so gradients stay finite."""
    return np.triu(np.full((t, t), neg), k=1)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(build_loss, params: dict[str, Tensor],
                            h: float = 1e-5,
                            max_coords_per_param: int | None = None,
                            rng: np.random.Generator | None = None,
                            abs_floor: float = 0.0) -> float:
    """Compare tape gradients with central differences.

    build_loss() must rebuild the graph from the current param .data and
    return a scalar Tensor. Returns the max elementwise relative error
    |analytic - numeric| / (|analytic| + 1e-8). When max_coords_per_param
    is set, a random coordinate subset of each parameter is probed (used
    for whole-model checks where full FD would be quadratic).

    abs_floor: coordinates where both the analytic and numeric values are
    below it count as consistent zeros. Central differences of an O(1) loss
    carry ~eps*|loss|/h cancellation noise, so gradients under ~1e-6 cannot
    be resolved to 1e-4 relative accuracy in float64; deep models always
    contain a few such coordinates. Disagreement (one side big) still fails.
    """
    for p in params.values():
        p.zero_grad()
    with tk.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    def eval_loss() -> float:
        with tk.Tape():
            return build_loss().item()

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            assert rng is not None
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if abs(a_flat[i]) < abs_floor and abs(numeric) < abs_floor:
                continue
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + 1e-8)
            worst = max(worst, err)
    return worst
