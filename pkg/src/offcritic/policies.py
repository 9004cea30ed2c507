"""The two policies: a GRU image-guided language auto-encoder (behaviour)
and a miniature transformer decoder with cross-attention (target).

Both expose the same stepping interface: init_state -> step_logits ->
advance, plus teacher-forced sequence_log_probs. The behaviour policy
encodes the ground-truth paragraph to a hidden vector h_e, initialises its
decoder with it, and at every later step feeds the decoder only the
attention-weighted region features; emitted tokens do not feed back, so its
per-step distributions depend on (features, h_e, t) alone.

The softmax of step_logits defines the action distribution; rollouts sample
from it (multinomial via one inverse-CDF uniform per step, greedy via
argmax with lowest-id tie-break) and record the chosen tokens' log-probs
under the full softmax, which keeps rescoring a policy's own rollout
bit-consistent with the recorded log-probs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import numkit as nk
from .numkit import GRUParams, Tensor


class PolicyError(ValueError):
    pass


RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Token <-> id bijection with reserved pad/bos/eos/unk ids 0..3."""

    def __init__(self, content_tokens: Sequence[str]):
        if not content_tokens:
            raise PolicyError("vocabulary needs at least one content token")
        for t in content_tokens:
            if t in RESERVED_TOKENS:
                raise PolicyError(f"content token collides with reserved {t!r}")
        self.tokens = list(RESERVED_TOKENS) + list(content_tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise PolicyError("duplicate tokens in vocabulary")
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.ids.get(w, self.unk_id) for w in words]

    def decode(self, token_ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in token_ids]


@dataclass
class RegionFeatures:
    """K region feature vectors of width N (synthetic Faster R-CNN stand-in)."""

    features: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise PolicyError(f"features must be [K x N], got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise PolicyError("region features must be finite")

    @property
    def k(self) -> int:
        return self.features.shape[0]


@dataclass
class PolicyState:
    """Features + generated prefix (starting at BOS) + opaque decoder cache."""

    features: RegionFeatures
    prefix: tuple[int, ...]
    cache: Any = None


@dataclass
class Rollout:
    """One sampled sequence with the rolling policy's per-step log-probs."""

    token_ids: tuple[int, ...]
    step_log_probs: np.ndarray
    mode: str
    step_dists: np.ndarray | None = None

    def __post_init__(self):
        if len(self.step_log_probs) != len(self.token_ids):
            raise PolicyError("one log-prob per generated token required")
        if np.any(np.asarray(self.step_log_probs) > 0.0):
            raise PolicyError("log-probs must be <= 0")


def visual_attend(features: Tensor, h_e: Tensor, h_t: Tensor,
                  w_alpha: Tensor) -> Tensor:
    """Per-region score concat(f_i, h_e, h_t) . w_alpha, softmax over the K
    regions, then the weighted sum of region features. Returns [1 x N]."""
    k, n = features.shape
    m = h_e.shape[-1]
    l = w_alpha.shape[0]
    if l != n + 2 * m:
        raise PolicyError(
            f"attention weight length L={l} must equal N+2M={n}+2*{m}={n + 2 * m}")
    cat = nk.concat([features, nk.repeat_rows(h_e, k), nk.repeat_rows(h_t, k)],
                    axis=1)
    alpha = nk.softmax(nk.matmul(cat, w_alpha), axis=0)  # [K x 1]
    return nk.matmul(nk.transpose(alpha), features)      # [1 x N]


def visual_attend_batched(feature_stack: Tensor, h_e: Tensor, h_t: Tensor,
                          w_alpha: Tensor, k: int) -> Tensor:
    """Batched attention: feature_stack [B*K x N], h_e/h_t [B x M] -> [B x N]."""
    b = h_e.shape[0]
    cat = nk.concat([feature_stack, nk.repeat_rows(h_e, k),
                     nk.repeat_rows(h_t, k)], axis=1)
    scores = nk.reshape(nk.matmul(cat, w_alpha), (b, k))
    alpha = nk.reshape(nk.softmax(scores, axis=1), (b * k, 1))
    return nk.sum_row_groups(nk.mul(feature_stack, alpha), k)


class BehaviourPolicy:
    """GRU language auto-encoder guided by region features (Eq.-style block:
    encode paragraph -> h_e; h_0 = h_e; I_t = attended features; h_t =
    GRU(I_t, h_{t-1}); logits from an output projection of h_t)."""

    name = "behaviour"

    def __init__(self, vocab_size: int, emb_dim: int = 32, hidden_dim: int = 64,
                 feat_dim: int = 64, t_max: int = 30, seed: int = 0,
                 init_scale: float = 0.08):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.feat_dim = feat_dim
        self.t_max = t_max
        rng = np.random.default_rng(seed)
        scale = init_scale
        self.emb = Tensor(rng.normal(0, scale, (vocab_size, emb_dim)),
                          requires_grad=True)
        self.enc = GRUParams.create(emb_dim, hidden_dim, rng, scale)
        self.dec = GRUParams.create(feat_dim, hidden_dim, rng, scale)
        self.w_alpha = Tensor(rng.normal(0, scale, (feat_dim + 2 * hidden_dim, 1)),
                              requires_grad=True)
        self.w_out = Tensor(rng.normal(0, scale, (hidden_dim, vocab_size)),
                            requires_grad=True)
        self.b_out = Tensor(np.zeros(vocab_size), requires_grad=True)

    def config(self) -> dict:
        return {"kind": "behaviour", "vocab_size": self.vocab_size,
                "emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim,
                "feat_dim": self.feat_dim, "t_max": self.t_max}

    def parameters(self) -> dict[str, Tensor]:
        out = {"emb": self.emb, "w_alpha": self.w_alpha,
               "w_out": self.w_out, "b_out": self.b_out}
        out.update(self.enc.named("enc"))
        out.update(self.dec.named("dec"))
        return out

    def _check_ids(self, token_ids) -> None:
        for t in token_ids:
            if not (0 <= int(t) < self.vocab_size):
                raise PolicyError(f"token id {t} outside vocabulary "
                                  f"[0, {self.vocab_size})")

    def encode(self, token_ids: Sequence[int]) -> Tensor:
        """Run the encoder GRU over token embeddings; final hidden [1 x M]."""
        if len(token_ids) == 0:
            raise PolicyError("cannot encode an empty paragraph")
        self._check_ids(token_ids)
        embedded = nk.take_rows(self.emb, list(token_ids))
        h = Tensor(np.zeros((1, self.hidden_dim)))
        for t in range(len(token_ids)):
            h = nk.gru_cell(nk.slice_rows(embedded, t, t + 1), h, self.enc)
        return h

    def encode_batched(self, padded_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Encoder over a padded batch [B x T]; mask 1 where a token exists."""
        b, t_len = padded_ids.shape
        h = Tensor(np.zeros((b, self.hidden_dim)))
        for t in range(t_len):
            x = nk.take_rows(self.emb, padded_ids[:, t])
            h_new = nk.gru_cell(x, h, self.enc)
            m = Tensor(mask[:, t:t + 1])
            h = nk.add(nk.mul(m, h_new), nk.mul(nk.sub(1.0, m), h))
        return h

    def init_state(self, features: RegionFeatures,
                   context_tokens: Sequence[int] | None = None,
                   h_e: Tensor | None = None, bos_id: int = 1) -> PolicyState:
        if h_e is None:
            if context_tokens is None:
                raise PolicyError(
                    "behaviour policy needs the paragraph to encode (or h_e)")
            h_e = self.encode(context_tokens)
        return PolicyState(features=features, prefix=(bos_id,),
                           cache={"h_e": h_e, "h": h_e, "t": 0,
                                  "feat": Tensor(features.features)})

    def step_logits(self, state: PolicyState) -> Tensor:
        h = state.cache["h"]
        return nk.reshape(nk.linear(h, self.w_out, self.b_out),
                          (self.vocab_size,))

    def advance(self, state: PolicyState, token_id: int) -> PolicyState:
        c = state.cache
        i_t = visual_attend(c["feat"], c["h_e"], c["h"], self.w_alpha)
        h_next = nk.gru_cell(i_t, c["h"], self.dec)
        return PolicyState(features=state.features,
                           prefix=state.prefix + (int(token_id),),
                           cache={"h_e": c["h_e"], "h": h_next,
                                  "t": c["t"] + 1, "feat": c["feat"]})

    def decoder_hiddens(self, features: RegionFeatures, n_steps: int,
                        h_e: Tensor) -> Tensor:
        """Hidden states h_0..h_{n-1} as [n x M]; h_0 is h_e itself."""
        feat = Tensor(features.features)
        hs = [h_e]
        h = h_e
        for _ in range(1, n_steps):
            i_t = visual_attend(feat, h_e, h, self.w_alpha)
            h = nk.gru_cell(i_t, h, self.dec)
            hs.append(h)
        return nk.concat(hs, axis=0) if len(hs) > 1 else hs[0]

    def sequence_log_probs(self, features: RegionFeatures,
                           token_ids: Sequence[int],
                           context_tokens: Sequence[int] | None = None,
                           h_e: Tensor | None = None) -> Tensor:
        _validate_sequence(self, token_ids)
        if h_e is None:
            if context_tokens is None:
                raise PolicyError("behaviour rescoring needs the encoded paragraph")
            h_e = self.encode(context_tokens)
        hs = self.decoder_hiddens(features, len(token_ids), h_e)
        logits = nk.linear(hs, self.w_out, self.b_out)
        return nk.take_index(nk.log_softmax(logits, axis=-1), list(token_ids))


class TransformerPolicy:
    """Pre-LN transformer decoder with cross-attention to region features."""

    name = "target"

    def __init__(self, vocab_size: int, d_model: int = 64, n_heads: int = 2,
                 n_layers: int = 2, d_ff: int = 128, feat_dim: int = 64,
                 t_max: int = 30, seed: int = 0, init_scale: float = 0.08):
        if d_model % n_heads != 0:
            raise PolicyError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.feat_dim = feat_dim
        self.t_max = t_max
        rng = np.random.default_rng(seed)
        s = init_scale

        def w(*shape):
            return Tensor(rng.normal(0, s, shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        self.tok_emb = w(vocab_size, d_model)
        self.pos_emb = w(t_max + 1, d_model)
        self.feat_w, self.feat_b = w(feat_dim, d_model), zeros(d_model)
        self.layers = []
        for _ in range(n_layers):
            self.layers.append({
                "ln1_g": ones(d_model), "ln1_b": zeros(d_model),
                "wq": w(d_model, d_model), "bq": zeros(d_model),
                "wk": w(d_model, d_model), "bk": zeros(d_model),
                "wv": w(d_model, d_model), "bv": zeros(d_model),
                "wo": w(d_model, d_model), "bo": zeros(d_model),
                "ln2_g": ones(d_model), "ln2_b": zeros(d_model),
                "cq": w(d_model, d_model), "cbq": zeros(d_model),
                "ck": w(d_model, d_model), "cbk": zeros(d_model),
                "cv": w(d_model, d_model), "cbv": zeros(d_model),
                "co": w(d_model, d_model), "cbo": zeros(d_model),
                "ln3_g": ones(d_model), "ln3_b": zeros(d_model),
                "ff1_w": w(d_model, d_ff), "ff1_b": zeros(d_ff),
                "ff2_w": w(d_ff, d_model), "ff2_b": zeros(d_model),
            })
        self.lnf_g, self.lnf_b = ones(d_model), zeros(d_model)
        self.out_w, self.out_b = w(d_model, vocab_size), zeros(vocab_size)

    def config(self) -> dict:
        return {"kind": "target", "vocab_size": self.vocab_size,
                "d_model": self.d_model, "n_heads": self.n_heads,
                "n_layers": self.n_layers, "d_ff": self.d_ff,
                "feat_dim": self.feat_dim, "t_max": self.t_max}

    def parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
               "feat_w": self.feat_w, "feat_b": self.feat_b}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layer{i}.{k}"] = v
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b,
                    "out_w": self.out_w, "out_b": self.out_b})
        return out

    def _heads(self, x: Tensor) -> list[Tensor]:
        dh = self.d_model // self.n_heads
        return [nk.slice_cols(x, i * dh, (i + 1) * dh) for i in range(self.n_heads)]

    def _attention(self, x: Tensor, kv: Tensor, layer: dict, prefix: str,
                   mask: np.ndarray | None) -> Tensor:
        if prefix == "self":
            q = nk.linear(x, layer["wq"], layer["bq"])
            k = nk.linear(kv, layer["wk"], layer["bk"])
            v = nk.linear(kv, layer["wv"], layer["bv"])
            wo, bo = layer["wo"], layer["bo"]
        else:
            q = nk.linear(x, layer["cq"], layer["cbq"])
            k = nk.linear(kv, layer["ck"], layer["cbk"])
            v = nk.linear(kv, layer["cv"], layer["cbv"])
            wo, bo = layer["co"], layer["cbo"]
        outs = [nk.scaled_dot_attention(qh, kh, vh, mask)
                for qh, kh, vh in zip(self._heads(q), self._heads(k), self._heads(v))]
        return nk.linear(nk.concat(outs, axis=1), wo, bo)

    def forward_logits(self, input_ids: Sequence[int],
                       features: RegionFeatures) -> Tensor:
        t_len = len(input_ids)
        if t_len > self.t_max + 1:
            raise PolicyError(
                f"input length {t_len} exceeds t_max+1={self.t_max + 1}")
        x = nk.add(nk.take_rows(self.tok_emb, list(input_ids)),
                   nk.take_rows(self.pos_emb, np.arange(t_len)))
        feats = nk.linear(Tensor(features.features), self.feat_w, self.feat_b)
        mask = nk.causal_mask(t_len) if t_len > 1 else None
        for layer in self.layers:
            h = nk.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            x = nk.add(x, self._attention(h, h, layer, "self", mask))
            h = nk.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            x = nk.add(x, self._attention(h, feats, layer, "cross", None))
            h = nk.layer_norm(x, layer["ln3_g"], layer["ln3_b"])
            x = nk.add(x, nk.feed_forward(h, layer["ff1_w"], layer["ff1_b"],
                                          layer["ff2_w"], layer["ff2_b"]))
        x = nk.layer_norm(x, self.lnf_g, self.lnf_b)
        return nk.linear(x, self.out_w, self.out_b)

    def init_state(self, features: RegionFeatures,
                   context_tokens: Sequence[int] | None = None,
                   bos_id: int = 1) -> PolicyState:
        return PolicyState(features=features, prefix=(bos_id,), cache=None)

    def step_logits(self, state: PolicyState) -> Tensor:
        logits = self.forward_logits(state.prefix, state.features)
        t = len(state.prefix)
        return nk.reshape(nk.slice_rows(logits, t - 1, t), (self.vocab_size,))

    def advance(self, state: PolicyState, token_id: int) -> PolicyState:
        return PolicyState(features=state.features,
                           prefix=state.prefix + (int(token_id),), cache=None)

    def sequence_log_probs(self, features: RegionFeatures,
                           token_ids: Sequence[int],
                           context_tokens: Sequence[int] | None = None,
                           bos_id: int = 1) -> Tensor:
        _validate_sequence(self, token_ids)
        inputs = [bos_id] + list(token_ids[:-1])
        logits = self.forward_logits(inputs, features)
        return nk.take_index(nk.log_softmax(logits, axis=-1), list(token_ids))


def _validate_sequence(policy, token_ids) -> None:
    if len(token_ids) == 0:
        raise PolicyError("cannot score an empty sequence")
    if len(token_ids) > policy.t_max:
        raise PolicyError(f"sequence length {len(token_ids)} exceeds "
                          f"t_max={policy.t_max}")
    for t in token_ids:
        if not (0 <= int(t) < policy.vocab_size):
            raise PolicyError(f"token id {t} outside vocabulary")


def policy_step_logits(policy, state: PolicyState) -> Tensor:
    """Unnormalized next-token logits; softmax of these is pi(.|state)."""
    if len(state.prefix) - 1 >= policy.t_max:
        raise PolicyError(
            f"prefix already holds {len(state.prefix) - 1} generated tokens "
            f"(t_max={policy.t_max})")
    return policy.step_logits(state)


def encode_paragraph(behaviour: BehaviourPolicy, token_ids) -> Tensor:
    return behaviour.encode(token_ids)


def _stable_log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def rollout(policy, features: RegionFeatures, mode: str, t_max: int | None = None,
            rng: np.random.Generator | int | None = None,
            context_tokens: Sequence[int] | None = None,
            eos_id: int = 2, record_dists: bool = False,
            h_e: Tensor | None = None) -> Rollout:
    """Autoregressive decode: multinomial sampling or greedy argmax.

    Stops at eos_id or after t_max tokens. Multinomial mode consumes exactly
    one uniform draw per step (inverse CDF over the softmax), so a fixed
    seed pins the whole sequence.
    """
    if mode not in ("multinomial", "greedy"):
        raise PolicyError(f"unknown rollout mode {mode!r}")
    t_max = policy.t_max if t_max is None else t_max
    if t_max < 1:
        raise PolicyError("t_max must be >= 1")
    if mode == "multinomial":
        if rng is None:
            raise PolicyError("multinomial rollout needs an rng or seed")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
    if isinstance(policy, BehaviourPolicy):
        state = policy.init_state(features, context_tokens, h_e=h_e)
    else:
        state = policy.init_state(features, context_tokens)
    tokens: list[int] = []
    log_probs: list[float] = []
    dists: list[np.ndarray] = []
    for _ in range(t_max):
        logits = policy.step_logits(state).data.reshape(-1)
        logp = _stable_log_softmax(logits)
        if mode == "greedy":
            tok = int(np.argmax(logits))  # argmax returns the lowest tied id
        else:
            p = np.exp(logp)
            cdf = np.cumsum(p / p.sum())
            tok = int(np.searchsorted(cdf, rng.random(), side="right"))
            tok = min(tok, logits.size - 1)
        tokens.append(tok)
        log_probs.append(float(logp[tok]))
        if record_dists:
            dists.append(np.exp(logp))
        if tok == eos_id:
            break
        state = policy.advance(state, tok)
    return Rollout(token_ids=tuple(tokens),
                   step_log_probs=np.array(log_probs),
                   mode=mode,
                   step_dists=np.array(dists) if record_dists else None)


def sequence_log_probs(policy, features: RegionFeatures, token_ids,
                       context_tokens=None, h_e: Tensor | None = None) -> Tensor:
    """Teacher-forced log pi(a_t | s_t) for every step; differentiable."""
    if isinstance(policy, BehaviourPolicy):
        return policy.sequence_log_probs(features, token_ids,
                                         context_tokens=context_tokens, h_e=h_e)
    return policy.sequence_log_probs(features, token_ids,
                                     context_tokens=context_tokens)
