"""Differentiable next-item score producers.

Three small architectures share one contract: map a left-padded ID matrix
(B, T) to hidden states (B, T, d), then score items by inner product with
the tied item-embedding table. Rows 0 and n_items + 1 of the table are the
PAD and MASK tokens; the PAD row is pinned to zero, at init and after every
update.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .data import PAD_ID
from .errors import ConfigError, InvalidCandidateError, InvalidIdError
from .metering import GLOBAL_METER

ARCHITECTURES = ("gru", "transformer-causal", "transformer-bidirectional")

#: CLI-facing aliases
MODEL_NAMES = {
    "gru4rec": "gru",
    "sasrec": "transformer-causal",
    "bert4rec-mini": "transformer-bidirectional",
}

NEG_INF = -1e9


def debug_checks_enabled() -> bool:
    return os.environ.get("SEQLAB_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    init_scale: float = 0.02

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch.startswith("transformer") and self.dim % self.heads != 0:
            raise ConfigError("dim must be divisible by heads")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


class ParameterSet:
    """Named parameter tensors plus the shapes that define them."""

    def __init__(self, tensors: dict, n_items: int, config: ModelConfig):
        self.tensors = tensors
        self.n_items = n_items
        self.config = config

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ParameterSet":
        clones = {k: ad.parameter(v.data.copy()) for k, v in self.tensors.items()}
        return ParameterSet(clones, self.n_items, self.config)

    def astype(self, dtype) -> "ParameterSet":
        clones = {k: ad.parameter(v.data.astype(dtype)) for k, v in self.tensors.items()}
        return ParameterSet(clones, self.n_items, self.config)


@dataclass
class HiddenStates:
    states: "ad.Tensor"      # (B, T, d)
    valid: np.ndarray        # (B, T) bool, False at PAD positions


def _truncated_normal(rng, shape, scale, dtype):
    """N(0, scale^2) with redraws outside two standard deviations."""
    if scale == 0.0:
        return np.zeros(shape, dtype=dtype)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * scale).astype(dtype)


class SequenceModel:
    """Shared embedding, scoring, and evaluation plumbing."""

    arch = None

    def __init__(self, config: ModelConfig, n_items: int):
        if config.arch != self.arch:
            raise ConfigError(f"{type(self).__name__} requires arch={self.arch!r}")
        if n_items < 2:
            raise ConfigError("catalog must contain more than one item")
        self.config = config
        self.n_items = n_items
        self.mask_id = n_items + 1

    # parameter construction --------------------------------------------
    def init_parameters(self, rng, dtype=np.float32) -> ParameterSet:
        cfg = self.config
        tensors = {}
        emb = _truncated_normal(rng, (self.n_items + 2, cfg.dim), cfg.init_scale, dtype)
        emb[PAD_ID] = 0.0
        tensors["item_emb"] = ad.parameter(emb)
        self._init_body(rng, tensors, dtype)
        return ParameterSet(tensors, self.n_items, cfg)

    def _init_body(self, rng, tensors, dtype):
        raise NotImplementedError

    def _dense(self, rng, tensors, name, shape, dtype):
        tensors[name] = ad.parameter(
            _truncated_normal(rng, shape, self.config.init_scale, dtype)
        )
        tensors[name + "_b"] = ad.parameter(np.zeros(shape[-1], dtype=dtype))

    # forward -------------------------------------------------------------
    def forward(self, params: ParameterSet, input_ids, train=False, rng=None) -> HiddenStates:
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError("input_ids must be a (B, T) matrix")
        if ids.min() < 0 or ids.max() > self.n_items + 1:
            raise InvalidIdError(
                f"item ID outside [0, {self.n_items + 1}] in model input"
            )
        if train and self.config.dropout > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        states = self._body(params, ids, train, rng)
        valid = ids != PAD_ID
        if debug_checks_enabled() and not np.all(np.isfinite(states.data)):
            raise FloatingPointError("non-finite hidden states")
        return HiddenStates(states, valid)

    def _body(self, params, ids, train, rng):
        raise NotImplementedError

    def _dropout(self, x, train, rng):
        if train and self.config.dropout > 0.0:
            return ad.dropout(x, self.config.dropout, rng)
        return x

    # evaluation-time input layout ----------------------------------------
    def inference_row(self, prefix_items) -> np.ndarray:
        """Left-padded input row whose final position predicts the next item."""
        T = self.config.max_len
        window = list(prefix_items)[-T:]
        row = np.full(T, PAD_ID, dtype=np.int64)
        if window:
            row[T - len(window):] = window
        return row


class GRUModel(SequenceModel):
    """Stacked GRU over item embeddings; updates are skipped on PAD steps,
    so the state at a real position depends only on the real prefix."""

    arch = "gru"

    def _init_body(self, rng, tensors, dtype):
        d = self.config.dim
        for layer in range(self.config.layers):
            self._dense(rng, tensors, f"gru{layer}_ih", (d, 3 * d), dtype)
            self._dense(rng, tensors, f"gru{layer}_hh", (d, 3 * d), dtype)

    def _body(self, params, ids, train, rng):
        B, T = ids.shape
        d = self.config.dim
        x = ad.take(params["item_emb"], ids)
        x = self._dropout(x, train, rng)
        step_mask = (ids != PAD_ID).astype(x.dtype)[:, :, None]  # (B, T, 1)
        for layer in range(self.config.layers):
            xw = ad.add(ad.matmul(x, params[f"gru{layer}_ih"]), params[f"gru{layer}_ih_b"])
            w_hh, b_hh = params[f"gru{layer}_hh"], params[f"gru{layer}_hh_b"]
            h = ad.astensor(np.zeros((B, d), dtype=x.dtype))
            steps = []
            for t in range(T):
                gx = xw[:, t, :]
                gh = ad.add(ad.matmul(h, w_hh), b_hh)
                r = ad.sigmoid(ad.add(gx[:, :d], gh[:, :d]))
                z = ad.sigmoid(ad.add(gx[:, d:2 * d], gh[:, d:2 * d]))
                n = ad.tanh(ad.add(gx[:, 2 * d:], ad.mul(r, gh[:, 2 * d:])))
                h_new = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
                m = ad.astensor(step_mask[:, t, :])
                h = ad.add(ad.mul(m, h_new), ad.mul(ad.sub(1.0, m), h))
                steps.append(h)
            x = ad.stack(steps, axis=1)
            if train and layer + 1 < self.config.layers:
                x = self._dropout(x, train, rng)
        return x


class TransformerModel(SequenceModel):
    """Pre-norm self-attention blocks over item plus learned position
    embeddings. Causal variants also forbid attending to future positions;
    PAD keys are never attended except by their own query slot."""

    causal = True

    def _init_body(self, rng, tensors, dtype):
        cfg = self.config
        d = cfg.dim
        tensors["pos_emb"] = ad.parameter(
            _truncated_normal(rng, (cfg.max_len, d), cfg.init_scale, dtype)
        )
        for layer in range(cfg.layers):
            # bias-free q/k/v: a key bias shifts a whole softmax row and
            # would be an unlearnable (zero-gradient) direction
            for name in ("q", "k", "v"):
                tensors[f"attn{layer}_{name}"] = ad.parameter(
                    _truncated_normal(rng, (d, d), cfg.init_scale, dtype)
                )
            self._dense(rng, tensors, f"attn{layer}_o", (d, d), dtype)
            self._dense(rng, tensors, f"ffn{layer}_1", (d, d), dtype)
            self._dense(rng, tensors, f"ffn{layer}_2", (d, d), dtype)
            for ln in ("ln1", "ln2"):
                tensors[f"{ln}{layer}_g"] = ad.parameter(np.ones(d, dtype=dtype))
                tensors[f"{ln}{layer}_b"] = ad.parameter(np.zeros(d, dtype=dtype))

    def _attention_bias(self, ids, dtype):
        B, T = ids.shape
        key_ok = (ids != PAD_ID)[:, None, :]                    # (B, 1, T) keys
        allowed = np.broadcast_to(key_ok, (B, T, T)).copy()
        if self.causal:
            allowed &= np.tril(np.ones((T, T), dtype=bool))
        allowed |= np.eye(T, dtype=bool)                        # self slot always open
        bias = np.where(allowed, 0.0, NEG_INF).astype(dtype)
        return bias[:, None, :, :]                              # (B, 1, T, T)

    def _body(self, params, ids, train, rng):
        cfg = self.config
        B, T = ids.shape
        if T != cfg.max_len:
            raise ValueError(f"input width {T} does not match max_len {cfg.max_len}")
        d, H = cfg.dim, cfg.heads
        dh = d // H
        x = ad.add(ad.take(params["item_emb"], ids), params["pos_emb"])
        x = self._dropout(x, train, rng)
        bias = ad.astensor(self._attention_bias(ids, x.dtype))
        scale = 1.0 / np.sqrt(dh)
        for layer in range(cfg.layers):
            a = ad.layer_norm(x, params[f"ln1{layer}_g"], params[f"ln1{layer}_b"])
            heads = []
            for name in ("q", "k", "v"):
                proj = ad.matmul(a, params[f"attn{layer}_{name}"])
                proj = ad.reshape(proj, (B, T, H, dh))
                heads.append(ad.transpose(proj, (0, 2, 1, 3)))  # (B, H, T, dh)
            q, k, v = heads
            att = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.add(att, bias)
            w = ad.softmax(att, axis=-1)
            w = self._dropout(w, train, rng)
            o = ad.matmul(w, v)
            o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, T, d))
            o = ad.add(ad.matmul(o, params[f"attn{layer}_o"]), params[f"attn{layer}_o_b"])
            o = self._dropout(o, train, rng)
            x = ad.add(x, o)
            b = ad.layer_norm(x, params[f"ln2{layer}_g"], params[f"ln2{layer}_b"])
            f = ad.gelu(ad.add(ad.matmul(b, params[f"ffn{layer}_1"]), params[f"ffn{layer}_1_b"]))
            f = self._dropout(f, train, rng)
            f = ad.add(ad.matmul(f, params[f"ffn{layer}_2"]), params[f"ffn{layer}_2_b"])
            f = self._dropout(f, train, rng)
            x = ad.add(x, f)
        return x


class CausalTransformer(TransformerModel):
    arch = "transformer-causal"
    causal = True


class BidirectionalTransformer(TransformerModel):
    arch = "transformer-bidirectional"
    causal = False

    def inference_row(self, prefix_items) -> np.ndarray:
        """Most recent items plus a trailing MASK slot to predict at."""
        T = self.config.max_len
        window = list(prefix_items)[-(T - 1):] if T > 1 else []
        window = window + [self.mask_id]
        row = np.full(T, PAD_ID, dtype=np.int64)
        row[T - len(window):] = window
        return row


def build_model(config: ModelConfig, n_items: int) -> SequenceModel:
    cls = {
        "gru": GRUModel,
        "transformer-causal": CausalTransformer,
        "transformer-bidirectional": BidirectionalTransformer,
    }[config.arch]
    return cls(config, n_items)


# scoring ---------------------------------------------------------------


def score_full(params: ParameterSet, hidden) -> ad.Tensor:
    """Inner-product scores against every real item: (..., n_items)."""
    hidden = ad.astensor(hidden)
    emb = params["item_emb"]
    real = emb[1:params.n_items + 1]
    scores = ad.matmul(hidden, ad.transpose(real, (1, 0)))
    rows = int(np.prod(hidden.shape[:-1], dtype=np.int64)) if hidden.ndim > 1 else 1
    GLOBAL_METER.add_score_evals(rows * params.n_items)
    if debug_checks_enabled() and not np.all(np.isfinite(scores.data)):
        raise FloatingPointError("non-finite scores")
    return scores


def score_candidates(params: ParameterSet, hidden, candidate_ids) -> ad.Tensor:
    """Scores only for the requested candidates: (..., K).

    Matches the corresponding score_full entries; increments the score
    counter by the number of candidate slots.
    """
    hidden = ad.astensor(hidden)
    cand = np.asarray(candidate_ids, dtype=np.int64)
    if np.any(cand == PAD_ID):
        raise InvalidCandidateError("PAD cannot be scored as a candidate")
    if cand.max() > params.n_items + 1:
        raise InvalidIdError("candidate outside the vocabulary")
    emb_rows = ad.take(params["item_emb"], cand)
    scores = ad.candidate_dot(hidden, emb_rows)
    GLOBAL_METER.add_score_evals(cand.size)
    return scores


# checkpointing ---------------------------------------------------------


def save_checkpoint(path, params: ParameterSet, seed, loss_label="", extra=None):
    meta = {
        "config": asdict(params.config),
        "n_items": params.n_items,
        "seed": int(seed),
        "loss": loss_label,
    }
    if extra:
        meta.update(extra)
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Returns (model, params, meta); reloaded params are bit-identical."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        tensors = {
            k[len("param/"):]: ad.parameter(blob[k])
            for k in blob.files
            if k.startswith("param/")
        }
    config = ModelConfig(**meta["config"])
    params = ParameterSet(tensors, meta["n_items"], config)
    model = build_model(config, meta["n_items"])
    return model, params, meta
