"""RoBERTa-style bidirectional encoder with tied MLM heads.

The token embedding table is the single storage behind every MLM head's
output projection: heads multiply by its transpose at forward time, so tying
survives optimizer steps and embedding swaps structurally rather than by
copying. An optional secondary MLM head can tap the hidden states at a
configurable layer, which is what makes joint mini-model pretraining work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

INIT_STD = 0.02
NEG_INF = -1e9  # additive attention mask; finite so padded rows stay NaN-free


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    l: int
    h: int
    a: int
    V: int
    s_max: int
    f: int | None = None
    n_secondary: int | None = None
    dropout: float = 0.1
    dtype: str = "float64"
    relearn_positional: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.f is None:
            self.f = 4 * self.h
        if self.h % self.a != 0:
            raise ModelError(f"hidden size {self.h} not divisible by {self.a} heads")
        if self.n_secondary is not None and not 1 <= self.n_secondary <= self.l:
            raise ModelError(f"secondary head layer {self.n_secondary} outside 1..{self.l}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def as_dict(self) -> dict:
        return {"l": self.l, "h": self.h, "a": self.a, "V": self.V, "s_max": self.s_max,
                "f": self.f, "n_secondary": self.n_secondary, "dropout": self.dropout,
                "dtype": self.dtype, "relearn_positional": self.relearn_positional,
                "layer_norm_eps": self.layer_norm_eps}


@dataclass
class MaskedBatch:
    """Token batch with MLM corruption applied.

    mask_rows indexes masked positions into the flattened (B*s) sequence;
    labels hold the original token at exactly those positions.
    """

    ids: np.ndarray           # (B, s) int32, post-corruption
    mask_rows: np.ndarray     # (M,) flat indices
    labels: np.ndarray        # (M,) original tokens
    attn_mask: np.ndarray | None = None  # (B, s) 1 = real token, 0 = padding

    @property
    def n_masked(self) -> int:
        return int(self.mask_rows.shape[0])


def _head_param_names(which: str) -> list[str]:
    return [f"head.{which}.dense.w", f"head.{which}.dense.b",
            f"head.{which}.ln.g", f"head.{which}.ln.b"]


def _layer_param_names(i: int) -> list[str]:
    base = f"layers.{i}"
    return [f"{base}.attn.wq", f"{base}.attn.bq", f"{base}.attn.wk", f"{base}.attn.bk",
            f"{base}.attn.wv", f"{base}.attn.bv", f"{base}.attn.wo", f"{base}.attn.bo",
            f"{base}.attn.ln.g", f"{base}.attn.ln.b",
            f"{base}.ffn.w0", f"{base}.ffn.b0", f"{base}.ffn.w1", f"{base}.ffn.b1",
            f"{base}.ffn.ln.g", f"{base}.ffn.ln.b"]


class TransformerModel:
    """Weights plus pure-function forward passes; training loops own mutation."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter],
                 provenance: dict | None = None):
        self.config = config
        self.params = params
        self.provenance = provenance or {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        params: dict[str, Parameter] = {}

        def weight(name, shape):
            params[name] = Parameter(rng.normal(0.0, INIT_STD, size=shape).astype(dt), name)

        def zeros(name, shape):
            params[name] = Parameter(np.zeros(shape, dtype=dt), name)

        def ones(name, shape):
            params[name] = Parameter(np.ones(shape, dtype=dt), name)

        weight("emb.tok", (config.V, config.h))
        weight("emb.pos", (config.s_max, config.h))
        ones("emb.ln.g", (config.h,))
        zeros("emb.ln.b", (config.h,))
        for i in range(config.l):
            cls._init_layer(params, i, config, rng)
        heads = ["primary"] + (["secondary"] if config.n_secondary is not None else [])
        for which in heads:
            weight(f"head.{which}.dense.w", (config.h, config.h))
            zeros(f"head.{which}.dense.b", (config.h,))
            ones(f"head.{which}.ln.g", (config.h,))
            zeros(f"head.{which}.ln.b", (config.h,))
        return cls(config, params)

    @staticmethod
    def _init_layer(params: dict, i: int, config: ModelConfig, rng: np.random.Generator):
        dt = config.np_dtype
        base = f"layers.{i}"
        for nm in ("wq", "wk", "wv", "wo"):
            params[f"{base}.attn.{nm}"] = Parameter(
                rng.normal(0.0, INIT_STD, size=(config.h, config.h)).astype(dt), f"{base}.attn.{nm}")
        for nm in ("bq", "bk", "bv", "bo"):
            params[f"{base}.attn.{nm}"] = Parameter(np.zeros(config.h, dtype=dt), f"{base}.attn.{nm}")
        params[f"{base}.attn.ln.g"] = Parameter(np.ones(config.h, dtype=dt), f"{base}.attn.ln.g")
        params[f"{base}.attn.ln.b"] = Parameter(np.zeros(config.h, dtype=dt), f"{base}.attn.ln.b")
        params[f"{base}.ffn.w0"] = Parameter(
            rng.normal(0.0, INIT_STD, size=(config.h, config.f)).astype(dt), f"{base}.ffn.w0")
        params[f"{base}.ffn.b0"] = Parameter(np.zeros(config.f, dtype=dt), f"{base}.ffn.b0")
        params[f"{base}.ffn.w1"] = Parameter(
            rng.normal(0.0, INIT_STD, size=(config.f, config.h)).astype(dt), f"{base}.ffn.w1")
        params[f"{base}.ffn.b1"] = Parameter(np.zeros(config.h, dtype=dt), f"{base}.ffn.b1")
        params[f"{base}.ffn.ln.g"] = Parameter(np.ones(config.h, dtype=dt), f"{base}.ffn.ln.g")
        params[f"{base}.ffn.ln.b"] = Parameter(np.zeros(config.h, dtype=dt), f"{base}.ffn.ln.b")

    def clone(self) -> "TransformerModel":
        params = {}
        for name, p in self.params.items():
            q = Parameter(p.data.copy(), name, trainable=p.trainable)
            params[name] = q
        return TransformerModel(replace(self.config), params, dict(self.provenance))

    # -- bookkeeping ----------------------------------------------------------

    def parameters(self):
        return self.params.values()

    def param(self, name: str) -> Parameter:
        return self.params[name]

    @property
    def has_secondary(self) -> bool:
        return self.config.n_secondary is not None

    def set_all_trainable(self, flag: bool):
        for p in self.params.values():
            p.trainable = flag

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward --------------------------------------------------------------

    def _attn_bias(self, attn_mask: np.ndarray | None, B: int, s: int) -> Tensor | None:
        if attn_mask is None:
            return None
        bias = np.where(attn_mask[:, None, None, :].astype(bool), 0.0, NEG_INF)
        return Tensor(bias.astype(self.config.np_dtype))

    def _embed(self, ids: np.ndarray, train: bool, rng) -> Tensor:
        c = self.config
        x = ad.embedding(self.params["emb.tok"].tensor, ids)
        pos = ad.slice_rows(self.params["emb.pos"].tensor, ids.shape[1])
        x = ad.add(x, pos)
        x = ad.layer_norm(x, self.params["emb.ln.g"].tensor, self.params["emb.ln.b"].tensor,
                          eps=c.layer_norm_eps)
        return ad.dropout(x, c.dropout, rng, train)

    def _layer_forward(self, i: int, x: Tensor, bias: Tensor | None, train: bool, rng) -> Tensor:
        c = self.config
        p = self.params
        base = f"layers.{i}"
        B, s, h = x.shape
        d = h // c.a

        def proj(which):
            y = ad.add(ad.matmul(x, p[f"{base}.attn.w{which}"].tensor),
                       p[f"{base}.attn.b{which}"].tensor)
            return ad.transpose(ad.reshape(y, (B, s, c.a, d)), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        if bias is not None:
            scores = ad.add(scores, bias)
        probs = ad.softmax(scores)
        probs = ad.dropout(probs, c.dropout, rng, train)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, s, h))
        attn_out = ad.add(ad.matmul(ctx, p[f"{base}.attn.wo"].tensor), p[f"{base}.attn.bo"].tensor)
        attn_out = ad.dropout(attn_out, c.dropout, rng, train)
        x = ad.layer_norm(ad.add(x, attn_out), p[f"{base}.attn.ln.g"].tensor,
                          p[f"{base}.attn.ln.b"].tensor, eps=c.layer_norm_eps)
        ff = ad.gelu(ad.add(ad.matmul(x, p[f"{base}.ffn.w0"].tensor), p[f"{base}.ffn.b0"].tensor))
        ff = ad.add(ad.matmul(ff, p[f"{base}.ffn.w1"].tensor), p[f"{base}.ffn.b1"].tensor)
        ff = ad.dropout(ff, c.dropout, rng, train)
        return ad.layer_norm(ad.add(x, ff), p[f"{base}.ffn.ln.g"].tensor,
                             p[f"{base}.ffn.ln.b"].tensor, eps=c.layer_norm_eps)

    def hidden_states(self, ids: np.ndarray, attn_mask: np.ndarray | None = None,
                      upto_layer: int | None = None, tap_layer: int | None = None,
                      train: bool = False, rng: np.random.Generator | None = None):
        """Forward through the bottom `upto_layer` layers (default all).

        Returns (final hidden states, tapped hidden states) where the tap is
        taken after `tap_layer` layers, or None when not requested.
        """
        c = self.config
        upto = c.l if upto_layer is None else upto_layer
        if not 0 <= upto <= c.l:
            raise ModelError(f"layer index {upto} outside 0..{c.l}")
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ModelError(f"token batch must be 2-D, got shape {ids.shape}")
        if ids.shape[1] > c.s_max:
            raise ModelError(f"sequence length {ids.shape[1]} exceeds s_max {c.s_max}")
        if ids.max(initial=0) >= c.V:
            raise ModelError(f"token id {int(ids.max())} outside vocabulary of {c.V}")
        if train and c.dropout > 0 and rng is None:
            raise ModelError("training-mode forward with dropout needs an rng")
        bias = self._attn_bias(attn_mask, *ids.shape)
        x = self._embed(ids, train, rng)
        tapped = x if tap_layer == 0 else None
        for i in range(upto):
            x = self._layer_forward(i, x, bias, train, rng)
            if tap_layer is not None and i + 1 == tap_layer:
                tapped = x
        return x, tapped

    def encode(self, ids: np.ndarray, attn_mask: np.ndarray | None = None,
               upto_layer: int | None = None, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states after the requested number of layers; layer 0 is the
        post-embedding representation."""
        x, _ = self.hidden_states(ids, attn_mask, upto_layer, None, train, rng)
        return x

    def head_logits(self, hidden: Tensor, mask_rows: np.ndarray, which: str = "primary") -> Tensor:
        """Gather masked positions, transform, and project against the shared
        embedding table. Unmasked positions never enter the head."""
        if which == "secondary" and not self.has_secondary:
            raise ModelError("secondary head requested but n_secondary is not configured")
        c = self.config
        p = self.params
        B, s, h = hidden.shape
        flat = ad.reshape(hidden, (B * s, h))
        sel = ad.take_rows(flat, mask_rows, unique=True)
        t = ad.add(ad.matmul(sel, p[f"head.{which}.dense.w"].tensor),
                   p[f"head.{which}.dense.b"].tensor)
        t = ad.gelu(t)
        t = ad.layer_norm(t, p[f"head.{which}.ln.g"].tensor, p[f"head.{which}.ln.b"].tensor,
                          eps=c.layer_norm_eps)
        return ad.matmul(t, ad.transpose(self.params["emb.tok"].tensor, (1, 0)))

    def mlm_loss(self, batch: MaskedBatch, head: str = "primary", train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Mean cross-entropy over masked positions through one head."""
        if batch.n_masked == 0:
            raise ModelError("batch has zero masked positions")
        if head == "secondary":
            if not self.has_secondary:
                raise ModelError("secondary head requested but n_secondary is not configured")
            upto = self.config.n_secondary
        else:
            upto = self.config.l
        hidden, _ = self.hidden_states(batch.ids, batch.attn_mask, upto_layer=upto,
                                       train=train, rng=rng)
        logits = self.head_logits(hidden, batch.mask_rows, which=head)
        return ad.cross_entropy(logits, batch.labels)

    def dual_head_loss(self, batch: MaskedBatch, train: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
        """Average of the two head losses; the bottom layers receive gradient
        from both heads, the layers above the tap only from the primary."""
        if not self.has_secondary:
            raise ModelError("dual objective requires a secondary head")
        if batch.n_masked == 0:
            raise ModelError("batch has zero masked positions")
        final, tapped = self.hidden_states(batch.ids, batch.attn_mask,
                                           tap_layer=self.config.n_secondary,
                                           train=train, rng=rng)
        loss_p = ad.cross_entropy(self.head_logits(final, batch.mask_rows, "primary"),
                                  batch.labels)
        loss_s = ad.cross_entropy(self.head_logits(tapped, batch.mask_rows, "secondary"),
                                  batch.labels)
        return ad.mean_pair(loss_p, loss_s)

    # -- classification -------------------------------------------------------

    def attach_classifier(self, num_classes: int, seed: int):
        """Fresh sentence-classification head over the first-token state."""
        rng = np.random.default_rng(seed)
        dt = self.config.np_dtype
        h = self.config.h
        self.params["cls.dense.w"] = Parameter(
            rng.normal(0.0, INIT_STD, size=(h, h)).astype(dt), "cls.dense.w")
        self.params["cls.dense.b"] = Parameter(np.zeros(h, dtype=dt), "cls.dense.b")
        self.params["cls.proj.w"] = Parameter(
            rng.normal(0.0, INIT_STD, size=(h, num_classes)).astype(dt), "cls.proj.w")
        self.params["cls.proj.b"] = Parameter(np.zeros(num_classes, dtype=dt), "cls.proj.b")

    def detach_classifier(self):
        for name in [n for n in self.params if n.startswith("cls.")]:
            del self.params[name]

    def classifier_logits(self, ids: np.ndarray, attn_mask: np.ndarray | None = None,
                          train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if "cls.proj.w" not in self.params:
            raise ModelError("no classifier head attached")
        hidden = self.encode(ids, attn_mask, train=train, rng=rng)
        first = ad.take_rows(ad.reshape(hidden, (ids.shape[0] * ids.shape[1], self.config.h)),
                             np.arange(ids.shape[0]) * ids.shape[1], unique=True)
        t = ad.tanh(ad.add(ad.matmul(first, self.params["cls.dense.w"].tensor),
                           self.params["cls.dense.b"].tensor))
        return ad.add(ad.matmul(t, self.params["cls.proj.w"].tensor),
                      self.params["cls.proj.b"].tensor)


def expected_param_count(config: ModelConfig, with_secondary: bool | None = None) -> int:
    """Closed-form parameter count for a model built from `config`."""
    h, f = config.h, config.f
    per_layer = 4 * h * h + 4 * h + 2 * h + h * f + f + f * h + h + 2 * h
    head = h * h + h + 2 * h  # output projection is tied, so not counted
    n_heads = 1 + (config.n_secondary is not None if with_secondary is None else with_secondary)
    return (config.V * h + config.s_max * h + 2 * h
            + config.l * per_layer + n_heads * head)
