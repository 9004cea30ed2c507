"""Shared diagnostic studies: gradient checks, ratio-curve reproductions,
bias/variance measurements, and the KL-variance bound report.

Used by the test suite and by the `diagnose` CLI subcommand; reports land
as CSV or plain text under a diagnostics/ directory.
"""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .numkit import Tensor


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_gradcheck_cases(rng):
    """(name, constructor) for every differentiable kernel op; dims <= 8.

    Each constructor returns (build_loss, params): build_loss rebuilds the
    graph from the params' current data and returns a scalar Tensor.
    """
    def case_matmul():
        a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        return lambda: nk.tsum(nk.mul(nk.matmul(a, b), w)), {"a": a, "b": b}

    def case_add_broadcast():
        a, b = _leaf(rng, 4, 5), _leaf(rng, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        return lambda: nk.tsum(nk.mul(nk.add(a, b), w)), {"a": a, "b": b}

    def case_mul():
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        return lambda: nk.tsum(nk.mul(a, b)), {"a": a, "b": b}

    def case_sub_neg():
        a, b = _leaf(rng, 6), _leaf(rng, 6)
        return lambda: nk.tsum(nk.mul(nk.sub(a, nk.neg(b)), a)), {"a": a, "b": b}

    def case_softmax():
        a = _leaf(rng, 2, 6)
        w = Tensor(rng.normal(size=(2, 6)))
        return lambda: nk.tsum(nk.mul(nk.softmax(a, axis=-1), w)), {"a": a}

    def case_log_softmax():
        a = _leaf(rng, 2, 6)
        w = Tensor(rng.normal(size=(2, 6)))
        return lambda: nk.tsum(nk.mul(nk.log_softmax(a, axis=-1), w)), {"a": a}

    def case_log_exp():
        a = _leaf(rng, 5)
        return (lambda: nk.tsum(nk.log(nk.add(nk.exp(a), 1.5))), {"a": a})

    def case_tanh_sigmoid_relu():
        a = _leaf(rng, 7)
        return (lambda: nk.tsum(nk.mul(nk.tanh(a), nk.sigmoid(nk.relu(a)))),
                {"a": a})

    def case_transpose_reshape():
        a = _leaf(rng, 3, 4)
        w = Tensor(rng.normal(size=(12,)))
        return (lambda: nk.tsum(nk.mul(nk.reshape(nk.transpose(a), (12,)), w)),
                {"a": a})

    def case_concat_slice():
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
        return (lambda: nk.tsum(nk.slice_cols(nk.concat([a, b], axis=1), 1, 4)),
                {"a": a, "b": b})

    def case_slice_rows():
        a = _leaf(rng, 5, 3)
        w = Tensor(rng.normal(size=(2, 3)))
        return lambda: nk.tsum(nk.mul(nk.slice_rows(a, 1, 3), w)), {"a": a}

    def case_repeat_groupsum():
        a = _leaf(rng, 3, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: nk.tsum(
            nk.mul(nk.sum_row_groups(nk.repeat_rows(a, 2), 2), w)), {"a": a})

    def case_mean():
        a = _leaf(rng, 4, 4)
        return lambda: nk.tmean(nk.mul(a, a)), {"a": a}

    def case_take_rows():
        a = _leaf(rng, 6, 4)
        ids = rng.integers(0, 6, size=5)
        w = Tensor(rng.normal(size=(5, 4)))
        return lambda: nk.tsum(nk.mul(nk.take_rows(a, ids), w)), {"a": a}

    def case_take_entries():
        a = _leaf(rng, 4, 5)
        rows = rng.integers(0, 4, size=6)
        cols = rng.integers(0, 5, size=6)
        w = Tensor(rng.normal(size=6))
        return lambda: nk.tsum(nk.mul(nk.take_entries(a, rows, cols), w)), {"a": a}

    def case_layer_norm():
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        return (lambda: nk.tsum(nk.mul(nk.layer_norm(x, g, b), w)),
                {"x": x, "g": g, "b": b})

    def case_gru_cell():
        p = nk.GRUParams.create(3, 4, rng, scale=0.4)
        x, h = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
        params = {"x": x, "h": h, **p.named("gru")}
        w = Tensor(rng.normal(size=(2, 4)))
        return lambda: nk.tsum(nk.mul(nk.gru_cell(x, h, p), w)), params

    def case_attention():
        q, k, v = _leaf(rng, 4, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
        w = Tensor(rng.normal(size=(4, 4)))
        return (lambda: nk.tsum(nk.mul(nk.scaled_dot_attention(q, k, v), w)),
                {"q": q, "k": k, "v": v})

    def case_attention_masked():
        q, k, v = _leaf(rng, 4, 4), _leaf(rng, 4, 4), _leaf(rng, 4, 4)
        mask = nk.causal_mask(4)
        w = Tensor(rng.normal(size=(4, 4)))
        return (lambda: nk.tsum(nk.mul(nk.scaled_dot_attention(q, k, v, mask), w)),
                {"q": q, "k": k, "v": v})

    def case_feed_forward():
        x = _leaf(rng, 3, 4)
        w1, b1 = _leaf(rng, 4, 6), _leaf(rng, 6)
        w2, b2 = _leaf(rng, 6, 4), _leaf(rng, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        return (lambda: nk.tsum(nk.mul(nk.feed_forward(x, w1, b1, w2, b2), w)),
                {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2})

    def case_cross_entropy():
        logits = _leaf(rng, 4, 6)
        targets = rng.integers(0, 6, size=4)
        return lambda: nk.cross_entropy(logits, targets), {"logits": logits}

    def case_composite_gru_attention():
        # GRU step feeding an attention readout: end-to-end kernel check
        p = nk.GRUParams.create(4, 4, rng, scale=0.4)
        x, h = _leaf(rng, 2, 4), _leaf(rng, 2, 4)
        k, v = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        params = {"x": x, "h": h, "k": k, "v": v, **p.named("gru")}

        def build():
            hq = nk.gru_cell(x, h, p)
            return nk.tsum(nk.scaled_dot_attention(hq, k, v))

        return build, params

    return [
        ("matmul", case_matmul), ("add", case_add_broadcast), ("mul", case_mul),
        ("sub_neg", case_sub_neg), ("softmax", case_softmax),
        ("log_softmax", case_log_softmax), ("log_exp", case_log_exp),
        ("tanh_sigmoid_relu", case_tanh_sigmoid_relu),
        ("transpose_reshape", case_transpose_reshape),
        ("concat_slice", case_concat_slice), ("slice_rows", case_slice_rows),
        ("repeat_groupsum", case_repeat_groupsum), ("mean", case_mean),
        ("take_rows", case_take_rows), ("take_entries", case_take_entries),
        ("layer_norm", case_layer_norm), ("gru_cell", case_gru_cell),
        ("attention", case_attention), ("attention_masked", case_attention_masked),
        ("feed_forward", case_feed_forward), ("cross_entropy", case_cross_entropy),
        ("composite", case_composite_gru_attention),
    ]


# multi-op compositions get the same consistent-zero floor as whole models:
# deep chains always contain a few coordinates whose true gradient sits
# under the float64 central-difference noise floor
MODEL_LIKE_CASES = frozenset({"composite"})


def case_abs_floor(name: str) -> float:
    return 1e-6 if name in MODEL_LIKE_CASES else 0.0


def run_op_gradchecks(instances_per_op: int = 20, seed: int = 1234) -> dict:
    """Worst relative FD error per op over random instances."""
    worst: dict[str, float] = {}
    for trial in range(instances_per_op):
        rng = np.random.default_rng(seed + trial)
        for name, ctor in op_gradcheck_cases(rng):
            build, params = ctor()
            err = nk.finite_difference_check(build, params,
                                             abs_floor=case_abs_floor(name))
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def run_policy_gradchecks(instances: int = 20, seed: int = 77,
                          coords_per_param: int = 3) -> dict:
    """Whole-model FD checks for both policies at tiny sizes.

    init_scale 0.5 and the 1e-6 consistent-zero floor keep every probed
    coordinate inside what float64 central differences can resolve.
    """
    from .policies import (BehaviourPolicy, RegionFeatures, TransformerPolicy,
                           sequence_log_probs)

    worst = {"behaviour_policy": 0.0, "target_policy": 0.0}
    for trial in range(instances):
        rng = np.random.default_rng(seed + trial)
        fr = RegionFeatures(rng.normal(size=(2, 8)))
        token_ids = list(rng.integers(4, 7, size=3))
        w = Tensor(rng.normal(size=3))
        models = {
            "behaviour_policy": BehaviourPolicy(
                7, emb_dim=4, hidden_dim=6, feat_dim=8, t_max=8,
                seed=seed + trial, init_scale=0.5),
            "target_policy": TransformerPolicy(
                7, d_model=8, n_heads=2, n_layers=2, d_ff=12, feat_dim=8,
                t_max=8, seed=seed + trial, init_scale=0.5),
        }
        for name, policy in models.items():
            ctx = [4, 6] if name == "behaviour_policy" else None

            def build(policy=policy, ctx=ctx):
                lp = sequence_log_probs(policy, fr, token_ids,
                                        context_tokens=ctx)
                return nk.tsum(nk.mul(lp, w))

            err = nk.finite_difference_check(
                build, policy.parameters(), max_coords_per_param=coords_per_param,
                rng=rng, abs_floor=1e-6)
            worst[name] = max(worst[name], err)
    return worst


# ---------------------------------------------------------------------------
# estimator-level studies (ratio curves, bias/variance, KL bound)
# ---------------------------------------------------------------------------

RATIO_SCHEMES = {
    "is": dict(ratio_mode="is", kl_beta=0.0),
    "ris": dict(ratio_mode="ris", kl_beta=0.0),
    "ris_kl": dict(ratio_mode="ris", kl_beta=0.05),
    "tris_kl": dict(ratio_mode="tris", kl_beta=0.05),
}


def ratio_curve_study(out_dir, seed: int = 0, n_train: int = 80,
                      n_val: int = 16, epochs: int = 2) -> dict:
    """Train the same starting point under each ratio scheme and emit one
    per-step-ratio trace CSV per scheme (the figure-in-kind artifact)."""
    from pathlib import Path

    from . import dataio as dio
    from . import trainer as tr
    from .estimators import EstimatorConfig
    from .policies import TransformerPolicy

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = dio.generate_toy_corpus(n_train, seed * 31 + 1, seed * 31 + 2)
    val = dio.generate_toy_corpus(n_val, seed * 31 + 3, seed * 31 + 4)
    splits = {"train": train, "val": val}
    vocab = dio.build_vocabulary(train)
    cfg = tr.TrainConfig(seed=seed, batch_size=16, t_max=30)
    behaviour = tr.train_behaviour(splits, vocab, cfg, epochs=4).policy
    mle = tr.pretrain_mle(splits, vocab, cfg, epochs=4)
    base = tr.params_snapshot(mle.policy)
    paths = {}
    for name, overrides in RATIO_SCHEMES.items():
        target = TransformerPolicy(len(vocab), t_max=cfg.t_max, seed=0)
        tr.load_params(target, base)
        est = EstimatorConfig(rl_alpha=1.0, **overrides)
        res = tr.train_rl(target, behaviour, splits, vocab, est, cfg,
                          epochs=epochs, lr=1e-3)
        path = out_dir / f"ratios_{name}.csv"
        res.trace.to_csv(path)
        paths[name] = path
    return paths


def bias_variance_study(out_dir, n_samples: int = 10 ** 5, seed: int = 0):
    """CSV of bias / variance / max-ratio per estimator mode on the oracle
    fixtures, plus the qualitative variance-ordering verdict."""
    from pathlib import Path

    from . import oracle as oc
    from .dataio import write_csv
    from .estimators import EstimatorConfig

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for fixture_name, mdp in (("unbiasedness", oc.unbiasedness_fixture()),
                              ("divergent", oc.divergent_fixture())):
        for mode in ("is", "ris", "tris"):
            cfg = EstimatorConfig(ratio_mode=mode, kl_beta=0.0)
            st = oc.estimator_bias_variance(mdp, cfg, n_samples, seed)
            rows.append((fixture_name, mode, st.bias_norm, st.return_variance,
                         float(st.ratio_products.max()), st.within_3se))
    path = out_dir / "bias_variance.csv"
    write_csv(path, ["fixture", "mode", "bias_norm", "return_variance",
                     "max_ratio_product", "mean_within_3se"], rows)
    return path, rows


def wexler_study(out_dir):
    from pathlib import Path

    from . import oracle as oc

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = oc.wexler_variance_check(*oc.wexler_fixture())
    path = Path(out_dir) / "wexler.txt"
    path.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    return path, report
