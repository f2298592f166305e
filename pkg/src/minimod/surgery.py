"""Model surgery: freeze partitions, mini-model construction, embedding swaps.

Mini-models share their bottom layers bit-for-bit with a parent model, which
is the alignment that lets embeddings trained on the small model plug into
the large one. Construction never mutates the parent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Parameter
from .model import ModelConfig, TransformerModel

GROUPS = ("token_embeddings", "positional_embeddings", "embedding_norm",
          "body_layers", "head_primary", "head_secondary", "classifier")


class SurgeryError(ValueError):
    pass


def group_of(name: str) -> tuple[str, int | None]:
    """Map a parameter name to its freeze group (and 1-based layer index)."""
    if name == "emb.tok":
        return "token_embeddings", None
    if name == "emb.pos":
        return "positional_embeddings", None
    if name.startswith("emb.ln"):
        return "embedding_norm", None
    if name.startswith("layers."):
        return "body_layers", int(name.split(".")[1]) + 1
    if name.startswith("head.primary"):
        return "head_primary", None
    if name.startswith("head.secondary"):
        return "head_secondary", None
    if name.startswith("cls."):
        return "classifier", None
    raise SurgeryError(f"parameter {name!r} matches no freeze group")


@dataclass
class FreezeSpec:
    """Per-group trainability. Groups not listed fall back to the default:
    trainable in pretraining contexts, frozen in adaptation contexts.
    Layer ranges are 1-based inclusive and override the blanket body flag."""

    default_trainable: bool
    groups: dict[str, bool] = field(default_factory=dict)
    layer_ranges: list[tuple[int, int, bool]] = field(default_factory=list)

    def trainable(self, name: str) -> bool:
        group, layer = group_of(name)
        if group == "body_layers" and layer is not None:
            for lo, hi, flag in self.layer_ranges:
                if lo <= layer <= hi:
                    return flag
        if group in self.groups:
            return self.groups[group]
        return self.default_trainable

    def apply(self, model: TransformerModel) -> TransformerModel:
        for name, p in model.params.items():
            p.trainable = self.trainable(name)
        return model

    @classmethod
    def pretraining(cls) -> "FreezeSpec":
        return cls(default_trainable=True)

    @classmethod
    def adaptation(cls, relearn_positional: bool = False) -> "FreezeSpec":
        """Step 2: body and heads frozen, token embeddings (and through tying,
        the output projection) trainable."""
        groups = {"token_embeddings": True}
        if relearn_positional:
            groups["positional_embeddings"] = True
        return cls(default_trainable=False, groups=groups)

    @classmethod
    def finetuning(cls, freeze_positional: bool = True) -> "FreezeSpec":
        """Step 3: embeddings frozen, body and classifier trainable."""
        return cls(default_trainable=True,
                   groups={"token_embeddings": False,
                           "positional_embeddings": not freeze_positional})

    @classmethod
    def bridge(cls, n_frozen: int, n_total: int) -> "FreezeSpec":
        """Mini-model construction: only the fresh layers above the copied
        stack are trainable."""
        return cls(default_trainable=False,
                   layer_ranges=[(n_frozen + 1, n_total, True)])


# ---------------------------------------------------------------------------
# checksums
# ---------------------------------------------------------------------------


def params_checksum(model: TransformerModel, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def frozen_checksum(model: TransformerModel) -> str:
    return params_checksum(model, [n for n, p in model.params.items() if not p.trainable])


def body_checksum(model: TransformerModel) -> str:
    """Everything that is not an embedding table: layers, norms, and heads."""
    names = [n for n in model.params if n not in ("emb.tok", "emb.pos")]
    return params_checksum(model, names)


def group_checksums(model: TransformerModel) -> dict[str, str]:
    by_group: dict[str, list[str]] = {}
    for name in model.params:
        by_group.setdefault(group_of(name)[0], []).append(name)
    return {g: params_checksum(model, ns) for g, ns in sorted(by_group.items())}


# ---------------------------------------------------------------------------
# embedding bundles and swaps
# ---------------------------------------------------------------------------


def vocab_id(vocab) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode()).hexdigest()[:16]


@dataclass
class EmbeddingBundle:
    """Token embedding table for one vocabulary, optionally with a learned
    positional table (only used when positional embeddings are relearned)."""

    token_table: np.ndarray
    vocab_id: str
    positional_table: np.ndarray | None = None

    def copy(self) -> "EmbeddingBundle":
        return EmbeddingBundle(self.token_table.copy(), self.vocab_id,
                               None if self.positional_table is None
                               else self.positional_table.copy())

    def save(self, path):
        arrays = {"token_table": self.token_table}
        if self.positional_table is not None:
            arrays["positional_table"] = self.positional_table
        np.savez(path, vocab_id=np.array(self.vocab_id), **arrays)

    @classmethod
    def load(cls, path) -> "EmbeddingBundle":
        with np.load(path) as z:
            return cls(token_table=z["token_table"],
                       vocab_id=str(z["vocab_id"]),
                       positional_table=z["positional_table"] if "positional_table" in z else None)


def swap_embeddings(model: TransformerModel, bundle: EmbeddingBundle) -> EmbeddingBundle:
    """Install the bundle's embeddings, returning the displaced ones.

    The MLM head projections read the embedding storage at forward time, so
    they re-tie automatically; every other weight is untouched. The model's
    vocabulary size follows the new table.
    """
    h = model.config.h
    if bundle.token_table.ndim != 2 or bundle.token_table.shape[1] != h:
        raise SurgeryError(f"swap_embeddings: table of shape {bundle.token_table.shape} "
                           f"does not match hidden size {h}")
    if bundle.positional_table is not None and bundle.positional_table.shape != (model.config.s_max, h):
        raise SurgeryError(f"swap_embeddings: positional table shape "
                           f"{bundle.positional_table.shape} != {(model.config.s_max, h)}")
    displaced = EmbeddingBundle(
        token_table=model.params["emb.tok"].data.copy(),
        vocab_id=model.provenance.get("vocab_id", ""),
        positional_table=model.params["emb.pos"].data.copy()
        if bundle.positional_table is not None else None)
    dt = model.config.np_dtype
    model.params["emb.tok"].data = np.ascontiguousarray(bundle.token_table, dtype=dt).copy()
    if bundle.positional_table is not None:
        model.params["emb.pos"].data = np.ascontiguousarray(bundle.positional_table, dtype=dt).copy()
    model.config.V = int(bundle.token_table.shape[0])
    model.provenance["vocab_id"] = bundle.vocab_id
    return displaced


# ---------------------------------------------------------------------------
# mini-model construction
# ---------------------------------------------------------------------------


def _copy_params(dst: dict, src_model: TransformerModel, names: list[str],
                 rename: dict[str, str] | None = None):
    for name in names:
        new_name = (rename or {}).get(name, name)
        p = src_model.params[name]
        dst[new_name] = Parameter(p.data.copy(), new_name, trainable=True)


def extract_minijoint(parent: TransformerModel, N: int) -> TransformerModel:
    """Cut out the bottom N layers plus the secondary head as a standalone
    model; its hidden states at depth N are bit-identical to the parent's."""
    if not parent.has_secondary:
        raise SurgeryError("parent has no secondary head to extract")
    if parent.config.n_secondary != N:
        raise SurgeryError(f"secondary head sits at layer {parent.config.n_secondary}, "
                           f"extraction requested at {N}")
    cfg = replace(parent.config, l=N, n_secondary=None)
    params: dict[str, Parameter] = {}
    emb_names = ["emb.tok", "emb.pos", "emb.ln.g", "emb.ln.b"]
    _copy_params(params, parent, emb_names)
    for i in range(N):
        _copy_params(params, parent, [n for n in parent.params if n.startswith(f"layers.{i}.")])
    rename = {f"head.secondary.{part}": f"head.primary.{part}"
              for part in ("dense.w", "dense.b", "ln.g", "ln.b")}
    _copy_params(params, parent, list(rename), rename=rename)
    provenance = {"method": "minijoint", "parent": parent_fingerprint(parent), "n": N,
                  "copied_layers": list(range(1, N + 1)), "fresh_layers": []}
    return TransformerModel(cfg, params, provenance)


def build_minipost(parent: TransformerModel, N: int, k_new: int,
                   bridge_config, corpus_rows: np.ndarray,
                   init_seed: int = 0, out_dir=None):
    """Copy the bottom N layers, embeddings, and head from a trained model,
    stack k_new freshly initialized bridge layers under the head, and train
    only those bridges with the MLM objective.

    Returns (mini_model, bridge TrainResult). The parent is never mutated;
    after training, everything except the bridge layers is bit-identical to
    the parent.
    """
    from . import training as tr  # local import; training depends on this module's types

    if k_new < 1:
        raise SurgeryError(f"mini-model construction needs at least one bridge layer, got {k_new}")
    if not 1 <= N <= parent.config.l:
        raise SurgeryError(f"frozen depth {N} outside 1..{parent.config.l}")
    if corpus_rows is None or len(corpus_rows) == 0:
        raise SurgeryError("bridge training needs a non-empty corpus")
    cfg = replace(parent.config, l=N + k_new, n_secondary=None)
    params: dict[str, Parameter] = {}
    _copy_params(params, parent, ["emb.tok", "emb.pos", "emb.ln.g", "emb.ln.b"])
    for i in range(N):
        _copy_params(params, parent, [n for n in parent.params if n.startswith(f"layers.{i}.")])
    rng = np.random.default_rng(init_seed)
    for i in range(N, N + k_new):
        TransformerModel._init_layer(params, i, cfg, rng)
    _copy_params(params, parent, [n for n in parent.params if n.startswith("head.primary.")])
    provenance = {"method": "minipost", "parent": parent_fingerprint(parent), "n": N,
                  "k_new": k_new, "copied_layers": list(range(1, N + 1)),
                  "fresh_layers": list(range(N + 1, N + k_new + 1))}
    mini = TransformerModel(cfg, params, provenance)

    FreezeSpec.bridge(n_frozen=N, n_total=N + k_new).apply(mini)
    if bridge_config.total_updates > 0:
        import dataclasses

        bridge_config = dataclasses.replace(bridge_config, cost_model="minipost_build",
                                            bridge_layers=k_new)
        result = tr.train_mlm(mini, corpus_rows, bridge_config, out_dir=out_dir)
    else:
        result = tr.TrainResult(curve=tr.TrainingCurve(), checkpoints=[],
                                final_step=0, final_flops=0.0)
    return mini, result


def parent_fingerprint(parent: TransformerModel) -> str:
    return params_checksum(parent)[:16]
