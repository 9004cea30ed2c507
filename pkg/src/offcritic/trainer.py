"""Training orchestration: behaviour auto-encoder training, target MLE
pretraining, and the off-policy self-critical RL phase.

The combined RL objective is (1 - alpha) * MLE + alpha * (off-policy loss);
alpha=0 short-circuits to a pure MLE step (no rollouts, no sampling RNG
consumed), which keeps its parameter trajectory bit-identical to MLE
pretraining under the same seed. The behaviour policy is frozen for the
whole RL phase: all its forward passes run off-tape and its parameters are
byte-compared before and after.

RNG streams are derived from the run seed in a fixed order (init, data,
rollout), so phases that skip a stream still shuffle identically.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk
from .estimators import EstimatorConfig, RatioTrace, off_policy_loss
from .policies import (
    BehaviourPolicy,
    RegionFeatures,
    Rollout,
    TransformerPolicy,
    Vocabulary,
    rollout,
    visual_attend_batched,
)
from .rewards import Advantage, CiderStats, build_idf, cider_score, \
    self_critical_advantage

RUN_LOG_HEADER = ["iter", "loss_total", "loss_mle", "advantage_mean",
                  "ratio_mean", "ratio_var", "kl_mean"]


class TrainerError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    mle_lr: float = 4e-4
    rl_lr: float = 4e-5
    behaviour_lr: float = 1e-3
    batch_size: int = 20
    mle_epochs: int = 10
    rl_epochs: int = 12
    behaviour_epochs: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 20
    seed: int = 0
    t_max: int = 30
    greedy_from: str = "target"  # which policy decodes the baseline
    cider_variant: str = "cider-d"

    def validated(self) -> "TrainConfig":
        if self.mle_lr <= 0 or self.rl_lr <= 0:
            raise TrainerError("learning rates must be positive")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.greedy_from not in ("behaviour", "target"):
            raise TrainerError(f"unknown greedy_from {self.greedy_from!r}")
        return self

    def with_updates(self, **kw) -> "TrainConfig":
        return replace(self, **kw).validated()


@dataclass
class Episode:
    """One RL unit: rollouts, fixed behaviour log-probs, differentiable
    target log-probs, and the self-critical advantage."""

    features: RegionFeatures
    reference: list[int]
    sampled: Rollout
    greedy: Rollout | None
    behaviour_log_probs: np.ndarray
    target_log_probs: nk.Tensor | None = None
    advantage: Advantage | None = None
    kl_steps: np.ndarray | None = None


@dataclass
class StepInfo:
    iteration: int
    loss_total: float
    loss_mle: float
    advantage_mean: float
    ratio_mean: float
    ratio_var: float
    kl_mean: float
    used_mle: bool
    used_rl: bool
    grad_norm: float

    def log_row(self):
        return (self.iteration, self.loss_total, self.loss_mle,
                self.advantage_mean, self.ratio_mean, self.ratio_var,
                self.kl_mean)


@dataclass
class TrainResult:
    policy: object
    log_rows: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_epoch: int = -1
    trace: RatioTrace | None = None
    step_infos: list = field(default_factory=list)
    rng_states: dict | None = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, nk.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_global_norm(params: dict[str, nk.Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# seeds, snapshots, shared loop pieces
# ---------------------------------------------------------------------------


def derive_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Fixed-order streams so unused ones never shift the others."""
    init_ss, data_ss, rollout_ss = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init_ss),
            "data": np.random.default_rng(data_ss),
            "rollout": np.random.default_rng(rollout_ss),
            "init_seed": int(init_ss.generate_state(1)[0])}


def params_snapshot(policy) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in policy.parameters().items()}


def load_params(policy, values: dict[str, np.ndarray]) -> None:
    params = policy.parameters()
    if set(params) != set(values):
        raise TrainerError("parameter name mismatch while loading weights")
    for k, p in params.items():
        if p.data.shape != values[k].shape:
            raise TrainerError(f"shape mismatch for {k}")
        p.data[...] = values[k]


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(value: float, iteration: int, what: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(
            f"{what} diverged at iteration {iteration}: {value!r}")


def region_features(record) -> RegionFeatures:
    return RegionFeatures(record.features, image_id=record.id)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mle_loss(target: TransformerPolicy, records, vocab: Vocabulary):
    """Teacher-forced NLL of (tokens + eos), averaged over all tokens."""
    parts = []
    total_tokens = 0
    for rec in records:
        seq = vocab.encode(rec.tokens) + [vocab.eos_id]
        lp = target.sequence_log_probs(region_features(rec), seq,
                                       bos_id=vocab.bos_id)
        parts.append(nk.tsum(lp))
        total_tokens += len(seq)
    total = parts[0]
    for p in parts[1:]:
        total = nk.add(total, p)
    return nk.mul(total, -1.0 / total_tokens)


def reconstruction_loss(behaviour: BehaviourPolicy, records, vocab: Vocabulary):
    """Batched teacher-forced auto-encoder loss: encode each paragraph,
    decode it back against (tokens + eos) with visual attention."""
    b = len(records)
    token_lists = [vocab.encode(rec.tokens) for rec in records]
    enc_len = max(len(t) for t in token_lists)
    enc_ids = np.zeros((b, enc_len), dtype=np.intp)
    enc_mask = np.zeros((b, enc_len))
    dec_len = max(len(t) for t in token_lists) + 1
    targets = np.zeros((b, dec_len), dtype=np.intp)
    tgt_mask = np.zeros((b, dec_len))
    for i, toks in enumerate(token_lists):
        enc_ids[i, :len(toks)] = toks
        enc_mask[i, :len(toks)] = 1.0
        seq = toks + [vocab.eos_id]
        targets[i, :len(seq)] = seq
        tgt_mask[i, :len(seq)] = 1.0
    h_e = behaviour.encode_batched(enc_ids, enc_mask)
    feat_stack = nk.Tensor(np.concatenate([rec.features for rec in records]))
    k = records[0].features.shape[0]

    h = h_e
    total = None
    for t in range(dec_len):
        logits = nk.linear(h, behaviour.w_out, behaviour.b_out)
        nll = nk.sequence_nll(logits, targets[:, t])
        masked = nk.mul(nll, nk.Tensor(tgt_mask[:, t]))
        total = masked if total is None else nk.add(total, masked)
        if t + 1 < dec_len:
            i_t = visual_attend_batched(feat_stack, h_e, h, behaviour.w_alpha, k)
            h = nk.gru_cell(i_t, h, behaviour.dec)
    return nk.mul(nk.tsum(total), 1.0 / tgt_mask.sum())


def reconstruction_perplexity(behaviour, records, vocab) -> float:
    loss = reconstruction_loss(behaviour, records, vocab)
    return float(np.exp(loss.item()))


def mle_perplexity(target, records, vocab) -> float:
    loss = mle_loss(target, records, vocab)
    return float(np.exp(loss.item()))


# ---------------------------------------------------------------------------
# evaluation: greedy decode + BLEU-1..4 + consensus score
# ---------------------------------------------------------------------------


def corpus_bleu_scores(candidates, references) -> dict[str, float]:
    """Corpus-level BLEU-1..4 with count clipping and brevity penalty."""
    if len(candidates) != len(references):
        raise TrainerError("one reference per candidate required")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            c_counts = Counter(tuple(cand[i:i + n])
                               for i in range(len(cand) - n + 1))
            r_counts = Counter(tuple(ref[i:i + n])
                               for i in range(len(ref) - n + 1))
            totals[n - 1] += sum(c_counts.values())
            matches[n - 1] += sum(min(c, r_counts.get(g, 0))
                                  for g, c in c_counts.items())
    if cand_len == 0:
        return {f"bleu{k}": 0.0 for k in range(1, 5)}
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    out = {}
    for k in range(1, 5):
        ps = precisions[:k]
        if any(p == 0.0 for p in ps):
            out[f"bleu{k}"] = 0.0
        else:
            out[f"bleu{k}"] = bp * math.exp(sum(math.log(p) for p in ps) / k)
    return out


def _strip_eos(token_ids, eos_id: int) -> list[int]:
    toks = list(token_ids)
    if toks and toks[-1] == eos_id:
        toks.pop()
    return toks


def evaluate(policy, records, vocab: Vocabulary,
             cider_variant: str = "cider-d",
             stats: CiderStats | None = None) -> dict[str, float]:
    """Greedy-decode every record and score BLEU-1..4 plus the consensus
    reward against the single reference paragraph. IDF statistics default
    to the evaluation references themselves."""
    if not records:
        raise TrainerError("empty evaluation set")
    references = [vocab.encode(rec.tokens) for rec in records]
    if stats is None:
        stats = build_idf(references)
    candidates = []
    for rec in records:
        r = rollout(policy, region_features(rec), "greedy",
                    t_max=policy.t_max, eos_id=vocab.eos_id)
        candidates.append(_strip_eos(r.token_ids, vocab.eos_id))
    metrics = corpus_bleu_scores(candidates, references)
    cider_vals = [cider_score(c, [ref], stats, cider_variant) if c else 0.0
                  for c, ref in zip(candidates, references)]
    metrics["cider"] = float(np.mean(cider_vals))
    return metrics


def early_stop(history, patience: int):
    """(stop?, best_index): best = first maximum; stop after `patience`
    epochs without improvement."""
    if not history:
        raise TrainerError("empty history")
    best = int(np.argmax(history))
    return (len(history) - 1 - best) >= patience, best


# ---------------------------------------------------------------------------
# training phases
# ---------------------------------------------------------------------------


def _fit(policy, splits, vocab, cfg: TrainConfig, *, epochs: int, lr: float,
         step_fn, eval_fn, trace: RatioTrace | None = None) -> TrainResult:
    """Shared epoch loop: shuffle with the data stream, step per batch,
    evaluate per epoch, keep the best-metric parameters."""
    train = splits["train"]
    rngs = derive_rngs(cfg.seed)
    adam = Adam(policy.parameters(), lr=lr, beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    result = TrainResult(policy=policy, trace=trace)
    best_params = params_snapshot(policy)
    iteration = 0
    if epochs > 0:
        # the starting checkpoint competes in best-model selection, so a
        # phase that only hurts hands back its initialization
        result.val_history.append(eval_fn(-1))
    for epoch in range(epochs):
        for batch_idx in _epoch_batches(len(train), cfg.batch_size,
                                        rngs["data"]):
            batch = [train[i] for i in batch_idx]
            info = step_fn(batch, adam, iteration, rngs)
            _check_finite(info.loss_total, iteration, "total loss")
            result.log_rows.append(info.log_row())
            result.step_infos.append(info)
            iteration += 1
        metric = eval_fn(epoch)
        result.val_history.append(metric)
        stop, best = early_stop(result.val_history, cfg.patience)
        if best == epoch + 1:
            best_params = params_snapshot(policy)
        result.best_epoch = best - 1  # -1 means the starting parameters won
        if stop:
            break
    if epochs > 0 and result.val_history:
        load_params(policy, best_params)
    result.rng_states = {name: rngs[name].bit_generator.state
                         for name in ("data", "rollout")}
    return result


def _mle_step_fn(policy, vocab, cfg):
    def step(batch, adam, iteration, rngs):
        adam.zero_grad()
        with nk.Tape() as tape:
            loss = mle_loss(policy, batch, vocab)
            tape.backward(loss)
        norm = clip_global_norm(adam.params, cfg.clip_norm)
        adam.step()
        val = loss.item()
        nan = float("nan")
        return StepInfo(iteration, val, val, nan, nan, nan, nan,
                        used_mle=True, used_rl=False, grad_norm=norm)
    return step


def pretrain_mle(splits, vocab: Vocabulary, cfg: TrainConfig,
                 init_params: dict[str, np.ndarray] | None = None,
                 epochs: int | None = None, lr: float | None = None,
                 **model_kwargs) -> TrainResult:
    """Standard teacher-forced MLE for the transformer target policy."""
    cfg = cfg.validated()
    rngs = derive_rngs(cfg.seed)
    target = TransformerPolicy(len(vocab), t_max=cfg.t_max,
                               seed=rngs["init_seed"], **model_kwargs)
    if init_params is not None:
        load_params(target, init_params)
    val = splits.get("val") or splits["train"]

    def eval_fn(epoch):
        return evaluate(target, val, vocab, cfg.cider_variant)["cider"]

    return _fit(target, splits, vocab, cfg,
                epochs=cfg.mle_epochs if epochs is None else epochs,
                lr=cfg.mle_lr if lr is None else lr,
                step_fn=_mle_step_fn(target, vocab, cfg), eval_fn=eval_fn)


def train_behaviour(splits, vocab: Vocabulary, cfg: TrainConfig,
                    epochs: int | None = None, lr: float | None = None,
                    **model_kwargs) -> TrainResult:
    """Fit the image-guided auto-encoder; tracks validation reconstruction
    perplexity (negated, so the shared keep-best logic maximizes it)."""
    cfg = cfg.validated()
    rngs = derive_rngs(cfg.seed)
    behaviour = BehaviourPolicy(len(vocab), t_max=cfg.t_max,
                                seed=rngs["init_seed"], **model_kwargs)
    val = splits.get("val") or splits["train"]

    def step(batch, adam, iteration, rngs_):
        adam.zero_grad()
        with nk.Tape() as tape:
            loss = reconstruction_loss(behaviour, batch, vocab)
            tape.backward(loss)
        norm = clip_global_norm(adam.params, cfg.clip_norm)
        adam.step()
        v = loss.item()
        nan = float("nan")
        return StepInfo(iteration, v, v, nan, nan, nan, nan,
                        used_mle=True, used_rl=False, grad_norm=norm)

    def eval_fn(epoch):
        return -reconstruction_perplexity(behaviour, val, vocab)

    return _fit(behaviour, splits, vocab, cfg,
                epochs=cfg.behaviour_epochs if epochs is None else epochs,
                lr=cfg.behaviour_lr if lr is None else lr,
                step_fn=step, eval_fn=eval_fn)


def assemble_episode(target: TransformerPolicy, behaviour: BehaviourPolicy,
                     record, vocab: Vocabulary, est_cfg: EstimatorConfig,
                     cfg: TrainConfig, rng: np.random.Generator,
                     stats: CiderStats) -> Episode:
    """Rollouts and advantage for one record (all off-tape)."""
    ref_ids = vocab.encode(record.tokens)
    feats = region_features(record)
    h_e = behaviour.encode(ref_ids)
    sampled = rollout(behaviour, feats, "multinomial", t_max=cfg.t_max,
                      rng=rng, eos_id=vocab.eos_id, record_dists=True, h_e=h_e)
    if cfg.greedy_from == "behaviour":
        greedy = rollout(behaviour, feats, "greedy", t_max=cfg.t_max,
                         eos_id=vocab.eos_id, h_e=h_e)
    else:
        greedy = rollout(target, feats, "greedy", t_max=cfg.t_max,
                         eos_id=vocab.eos_id)
    adv = self_critical_advantage(
        _strip_eos(sampled.token_ids, vocab.eos_id) or list(sampled.token_ids),
        _strip_eos(greedy.token_ids, vocab.eos_id) or list(greedy.token_ids),
        [ref_ids], stats, cfg.cider_variant)
    return Episode(features=feats, reference=ref_ids, sampled=sampled,
                   greedy=greedy,
                   behaviour_log_probs=sampled.step_log_probs.copy(),
                   advantage=adv)


def _rl_step_fn(target, behaviour, vocab, est_cfg: EstimatorConfig,
                cfg: TrainConfig, stats: CiderStats, trace: RatioTrace):
    alpha = est_cfg.rl_alpha
    mle_step = _mle_step_fn(target, vocab, cfg)

    def step(batch, adam, iteration, rngs):
        if alpha == 0.0:
            return mle_step(batch, adam, iteration, rngs)
        episodes = [assemble_episode(target, behaviour, rec, vocab, est_cfg,
                                     cfg, rngs["rollout"], stats)
                    for rec in batch]
        adam.zero_grad()
        with nk.Tape() as tape:
            kl_vals = []
            for ep in episodes:
                tokens = list(ep.sampled.token_ids)
                inputs = [vocab.bos_id] + tokens[:-1]
                logits = target.forward_logits(inputs, ep.features)
                lp_full = nk.log_softmax(logits, axis=-1)
                ep.target_log_probs = nk.take_index(lp_full, tokens)
                p_t = np.exp(lp_full.data)
                lp_b_full = np.log(np.maximum(ep.sampled.step_dists, 1e-300))
                ep.kl_steps = np.sum(p_t * (lp_full.data - lp_b_full), axis=1)
                kl_vals.append(ep.kl_steps.mean())
            rl, _ = off_policy_loss(episodes, est_cfg, trace=trace,
                                    iteration=iteration)
            if alpha < 1.0:
                mle = mle_loss(target, batch, vocab)
                total = nk.add(nk.mul(mle, 1.0 - alpha), nk.mul(rl, alpha))
                mle_val, used_mle = mle.item(), True
            else:
                total = rl
                mle_val, used_mle = float("nan"), False
            tape.backward(total)
        norm = clip_global_norm(adam.params, cfg.clip_norm)
        adam.step()
        _, mn, mx, mean, var = trace.rows[-1]
        return StepInfo(
            iteration, total.item(), mle_val,
            float(np.mean([ep.advantage.value for ep in episodes])),
            mean, var, float(np.mean(kl_vals)),
            used_mle=used_mle, used_rl=True, grad_norm=norm)

    return step


def train_rl(target: TransformerPolicy, behaviour: BehaviourPolicy, splits,
             vocab: Vocabulary, est_cfg: EstimatorConfig, cfg: TrainConfig,
             epochs: int | None = None, lr: float | None = None) -> TrainResult:
    """The off-policy self-critical phase. Behaviour stays frozen; the
    greedy-baseline source and all estimator knobs come from the configs."""
    cfg = cfg.validated()
    est_cfg = est_cfg.validated()
    stats = build_idf([vocab.encode(rec.tokens) for rec in splits["train"]])
    trace = RatioTrace()
    before = {k: v.tobytes() for k, v in params_snapshot(behaviour).items()}
    val = splits.get("val") or splits["train"]

    def eval_fn(epoch):
        return evaluate(target, val, vocab, cfg.cider_variant)["cider"]

    result = _fit(target, splits, vocab, cfg,
                  epochs=cfg.rl_epochs if epochs is None else epochs,
                  lr=cfg.rl_lr if lr is None else lr,
                  step_fn=_rl_step_fn(target, behaviour, vocab, est_cfg, cfg,
                                      stats, trace),
                  eval_fn=eval_fn, trace=trace)
    after = {k: v.tobytes() for k, v in params_snapshot(behaviour).items()}
    if before != after:
        raise TrainerError(
            "behaviour policy parameters changed during the RL phase")
    return result
