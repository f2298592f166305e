"""MLM training loop, LR schedule, masking, checkpoints, and finetuning.

Every source of randomness in a run flows from one seeded generator whose
state is checkpointed, so a resumed run is bit-equivalent to an
uninterrupted one. Cumulative compute is charged analytically per update
from the cost model matching the run's freeze configuration, never by
instrumentation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flopsmeter as fm
from .data import BOS, N_RESERVED
from .model import MaskedBatch, ModelConfig, TransformerModel

OBJECTIVES = ("mlm_primary", "mlm_secondary", "mlm_dual", "classifier")
COST_MODELS = ("pretrain", "pretrain_dual", "adapt", "minipost_build", "none")
HELDOUT_FRACTION = 0.02
EVAL_SEED_OFFSET = 0x5EED


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, step: int, what: str):
        super().__init__(f"loss diverged (non-finite {what}) at update {step}; "
                         f"last saved checkpoint is preserved")
        self.step = step


class MaskingError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_updates: int
    batch_size: int
    seq_len: int
    peak_lr: float = 7e-4
    warmup_updates: int = 10_000
    warmup_ratio: float | None = None  # overrides warmup_updates when set
    mask_prob: float = 0.15
    seed: int = 0
    checkpoint_schedule: list[int] | None = None
    objective: str = "mlm_primary"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    clip_norm: float | None = None
    cost_model: str = "pretrain"
    bridge_layers: int = 0  # l_t for the minipost_build cost model
    eval_rows: int = 128

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.cost_model not in COST_MODELS:
            raise ValueError(f"unknown cost model {self.cost_model!r}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.warmup() > self.total_updates:
            raise ValueError(f"warmup {self.warmup()} exceeds total updates {self.total_updates}")
        if self.checkpoint_schedule is not None:
            sched = self.checkpoint_schedule
            if sched != sorted(sched) or (sched and sched[-1] != self.total_updates):
                raise ValueError("checkpoint schedule must be sorted and end at total_updates")

    def warmup(self) -> int:
        if self.warmup_ratio is not None:
            return int(round(self.warmup_ratio * self.total_updates))
        return self.warmup_updates

    def schedule(self) -> list[int]:
        if self.checkpoint_schedule is not None:
            return list(self.checkpoint_schedule)
        return default_checkpoint_schedule(self.total_updates)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["checkpoint_schedule"] is not None:
            d["checkpoint_schedule"] = list(d["checkpoint_schedule"])
        return d


def default_checkpoint_schedule(total_updates: int, every: int = 5000,
                                dense_early: bool = False) -> list[int]:
    """Checkpoint every `every` updates (5000 by default, 1000 for runs whose
    per-step cost warrants finer estimates), optionally densified over the
    first 4000 updates."""
    points = set(range(every, total_updates + 1, every))
    if dense_early:
        points |= {1000, 2000, 3000, 4000}
    points = {p for p in points if p <= total_updates}
    if total_updates > 0:
        points.add(total_updates)
    return sorted(points)


def lr_schedule(config: TrainConfig, step: int) -> float:
    """Linear ramp to peak over warmup, then linear decay to zero at the end."""
    U = config.total_updates
    if step < 0 or step > U:
        raise ValueError(f"step {step} outside 0..{U}")
    w = config.warmup()
    if w > 0 and step <= w:
        return config.peak_lr * step / w
    if U == w:
        return config.peak_lr
    return config.peak_lr * (U - step) / (U - w)


# ---------------------------------------------------------------------------
# masking and batching
# ---------------------------------------------------------------------------


def mask_batch(rng: np.random.Generator, token_batch: np.ndarray, p: float, V: int,
               attn_mask: np.ndarray | None = None) -> MaskedBatch:
    """BERT-style corruption: select positions at rate p among non-reserved
    tokens, then 80% [MASK] / 10% random token / 10% unchanged."""
    ids = np.array(token_batch, dtype=np.int32)
    maskable = ids >= N_RESERVED
    if attn_mask is not None:
        maskable &= attn_mask.astype(bool)
    if not maskable.any():
        raise MaskingError("no maskable positions: sequence contains only reserved tokens")
    chosen = (rng.random(ids.shape) < p) & maskable
    rows = np.flatnonzero(chosen.reshape(-1))
    if rows.size == 0:
        raise MaskingError("masking selected zero positions (p too small for this batch)")
    labels = ids.reshape(-1)[rows].copy()
    roll = rng.random(rows.size)
    replacement = np.where(
        roll < 0.8, 1,  # [MASK]
        np.where(roll < 0.9, rng.integers(N_RESERVED, V, size=rows.size), labels))
    ids.reshape(-1)[rows] = replacement
    return MaskedBatch(ids=ids, mask_rows=rows, labels=labels.astype(np.int64),
                       attn_mask=attn_mask)


def pack_corpus(corpus, seq_len: int) -> np.ndarray:
    """Concatenate sentences (BOS-separated) into full-length training rows."""
    if not corpus:
        return np.zeros((0, seq_len), dtype=np.int32)
    stream = np.concatenate([np.concatenate(([BOS], s)).astype(np.int32) for s in corpus])
    n = len(stream) // seq_len
    if n == 0:
        raise TrainingError(f"corpus of {len(stream)} tokens cannot fill one row of {seq_len}")
    return stream[: n * seq_len].reshape(n, seq_len)


def split_heldout(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split: the trailing 2% of packed rows."""
    n_held = max(1, int(len(rows) * HELDOUT_FRACTION))
    return rows[: len(rows) - n_held], rows[len(rows) - n_held:]


# ---------------------------------------------------------------------------
# training curves
# ---------------------------------------------------------------------------


@dataclass
class CurveRecord:
    step: int
    eflops: float
    metrics: dict[str, float]


@dataclass
class TrainingCurve:
    records: list[CurveRecord] = field(default_factory=list)

    def append(self, step: int, eflops: float, metrics: dict[str, float]):
        if self.records:
            last = self.records[-1]
            if step <= last.step:
                raise TrainingError(f"curve steps must increase: {step} after {last.step}")
            # strictly increasing, except for zero-cost runs where both stay 0
            if eflops < last.eflops or (eflops == last.eflops and eflops > 0):
                raise TrainingError(f"curve EFLOPs must increase: {eflops} after {last.eflops}")
        self.records.append(CurveRecord(step, eflops, dict(metrics)))

    def points(self, metric: str) -> list[fm.CurvePoint]:
        return [fm.CurvePoint(r.step, r.eflops, r.metrics[metric])
                for r in self.records if metric in r.metrics]

    def final(self, metric: str) -> float:
        return self.points(metric)[-1].value

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("step,eflops,metric_name,value\n")
            for r in self.records:
                for name, value in sorted(r.metrics.items()):
                    f.write(f"{r.step},{r.eflops!r},{name},{value!r}\n")

    @classmethod
    def from_csv(cls, path) -> "TrainingCurve":
        curve = cls()
        rows: dict[int, tuple[float, dict]] = {}
        with open(path, encoding="utf-8") as f:
            next(f)
            for line in f:
                step_s, ef_s, name, value_s = line.rstrip("\n").split(",")
                ef, metrics = rows.setdefault(int(step_s), (float(ef_s), {}))
                metrics[name] = float(value_s)
        for step in sorted(rows):
            curve.append(step, rows[step][0], rows[step][1])
        return curve


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MMAD"
_VERSION = 1
_HEADER = struct.Struct("<4sI32sQd")
_DTYPE_CODES = {"float64": 0, "float32": 1, "int64": 2, "int32": 3}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


def config_fingerprint(model_config: ModelConfig) -> bytes:
    blob = json.dumps(model_config.as_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def _write_arrays(chunks: list, arrays: dict[str, np.ndarray]):
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[a.dtype.name], a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        chunks.append(a.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.off: self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_arrays(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        out[name] = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(shape).copy()
    return out


@dataclass
class Checkpoint:
    step: int
    flops: float
    fingerprint: bytes
    meta: dict
    params: dict[str, np.ndarray]
    opt_arrays: dict[str, np.ndarray]
    rng_state: dict | None

    @property
    def eflops(self) -> float:
        return self.flops / fm.EFLOP


def save_checkpoint(path, model: TransformerModel, optimizer: ad.Adam | None,
                    rng: np.random.Generator | None, step: int, flops: float,
                    extra_meta: dict | None = None):
    meta = {"model_config": model.config.as_dict(), "provenance": model.provenance,
            "optimizer_t": optimizer.t if optimizer else 0}
    if extra_meta:
        meta.update(extra_meta)
    chunks = [_HEADER.pack(_MAGIC, _VERSION, config_fingerprint(model.config), step, flops)]
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_blob)))
    chunks.append(meta_blob)
    _write_arrays(chunks, {k: p.data for k, p in model.params.items()})
    _write_arrays(chunks, optimizer.state_arrays() if optimizer else {})
    rng_blob = json.dumps(rng.bit_generator.state, sort_keys=True).encode() if rng else b""
    chunks.append(struct.pack("<I", len(rng_blob)))
    chunks.append(rng_blob)
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    raw = open(path, "rb").read()
    if len(raw) < _HEADER.size + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: embedded checksum mismatch (corrupt file)")
    r = _Reader(body)
    magic, version, fingerprint, step, flops = r.unpack(_HEADER.format)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    params = _read_arrays(r)
    opt_arrays = _read_arrays(r)
    (rlen,) = r.unpack("<I")
    rng_state = json.loads(r.take(rlen).decode()) if rlen else None
    return Checkpoint(step=step, flops=flops, fingerprint=fingerprint, meta=meta,
                      params=params, opt_arrays=opt_arrays, rng_state=rng_state)


def restore_model(ckpt: Checkpoint) -> TransformerModel:
    """Rebuild a standalone model from a checkpoint's own metadata."""
    config = ModelConfig(**ckpt.meta["model_config"])
    model = TransformerModel.init(config, seed=0)
    if "cls.proj.w" in ckpt.params:
        model.attach_classifier(ckpt.params["cls.proj.w"].shape[1], seed=0)
    _load_params_into(model, ckpt)
    model.provenance = dict(ckpt.meta.get("provenance", {}))
    return model


def _load_params_into(model: TransformerModel, ckpt: Checkpoint):
    if set(ckpt.params) != set(model.params):
        missing = set(model.params) ^ set(ckpt.params)
        raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:4]}...")
    for name, arr in ckpt.params.items():
        if model.params[name].data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: model {model.params[name].data.shape} "
                f"vs checkpoint {arr.shape}")
        model.params[name].data = arr.copy()


def apply_checkpoint(ckpt: Checkpoint, model: TransformerModel,
                     optimizer: ad.Adam | None = None,
                     rng: np.random.Generator | None = None,
                     strict_config: bool = True):
    if strict_config and ckpt.fingerprint != config_fingerprint(model.config):
        raise CheckpointError("config fingerprint mismatch: checkpoint was written by an "
                              "incompatible model configuration")
    _load_params_into(model, ckpt)
    if optimizer is not None:
        optimizer.load_state_arrays(ckpt.opt_arrays, ckpt.meta.get("optimizer_t", 0))
    if rng is not None and ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def eval_mlm(model: TransformerModel, heldout_rows: np.ndarray, config: TrainConfig,
             head: str = "primary") -> dict[str, float]:
    """Held-out MLM loss and masked-token accuracy under a fixed mask pattern
    (seeded independently of the training stream, identical at every call)."""
    rng = np.random.default_rng(config.seed + EVAL_SEED_OFFSET)
    rows = heldout_rows[: config.eval_rows]
    B = config.batch_size
    losses, correct, total = [], 0, 0
    for i in range(0, len(rows), B):
        chunk = rows[i: i + B]
        batch = mask_batch(rng, chunk, config.mask_prob, model.config.V)
        upto = model.config.n_secondary if head == "secondary" else model.config.l
        hidden, _ = model.hidden_states(batch.ids, upto_layer=upto)
        logits = model.head_logits(hidden, batch.mask_rows, which=head)
        loss = ad.cross_entropy(logits, batch.labels)
        losses.append((loss.item(), batch.n_masked))
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        total += batch.n_masked
    n = sum(m for _, m in losses)
    return {"mlm_loss": sum(v * m for v, m in losses) / n,
            "masked_acc": correct / total}


def _per_update_flops(model: TransformerModel, config: TrainConfig) -> float:
    if config.cost_model == "none":
        return 0.0
    spec = fm.FlopsSpec(U=1, B=config.batch_size, s=config.seq_len, l=max(model.config.l, 1),
                        h=model.config.h, p=config.mask_prob, V=model.config.V,
                        l_t=config.bridge_layers)
    fn = {"pretrain": fm.flops_pretrain, "pretrain_dual": fm.flops_pretrain_dual,
          "adapt": fm.flops_adapt, "minipost_build": fm.flops_minipost_build}[config.cost_model]
    return fn(spec).flops


@dataclass
class TrainResult:
    curve: TrainingCurve
    checkpoints: list
    final_step: int
    final_flops: float


def train_mlm(model: TransformerModel, corpus_rows: np.ndarray, config: TrainConfig,
              freeze=None, out_dir=None, probes: dict | None = None,
              resume_from=None) -> TrainResult:
    """Run MLM updates with periodic evaluation and checkpointing.

    `corpus_rows` are packed (n, s) token rows; the trailing slice is held
    out for evaluation. `freeze` (when given) is applied before training and
    decides which parameters the optimizer may touch.
    """
    if config.objective == "mlm_dual" and not model.has_secondary:
        raise TrainingError("dual objective requires a model with a secondary head")
    if config.objective == "classifier":
        raise TrainingError("use finetune_classifier for the classifier objective")
    if freeze is not None:
        freeze.apply(model)
    train_rows, held = split_heldout(corpus_rows)
    if len(train_rows) == 0:
        raise TrainingError("no training rows after the held-out split")
    rng = np.random.default_rng(config.seed)
    optimizer = ad.Adam(beta1=config.adam_beta1, beta2=config.adam_beta2,
                        eps=config.adam_eps, weight_decay=config.weight_decay)
    per_update = _per_update_flops(model, config)
    start_step, start_flops = 0, 0.0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        apply_checkpoint(ckpt, model, optimizer, rng)
        start_step, start_flops = ckpt.step, ckpt.flops
    flops = start_flops

    eval_head = "secondary" if config.objective == "mlm_secondary" else "primary"
    curve = TrainingCurve()
    saved = []

    def evaluate(step: int):
        metrics = eval_mlm(model, held, config, head=eval_head)
        if config.objective == "mlm_dual":
            metrics.update({f"{k}_secondary": v for k, v in
                            eval_mlm(model, held, config, head="secondary").items()})
        for name, fn in (probes or {}).items():
            metrics[name] = float(fn(model))
        curve.append(step, flops / fm.EFLOP, metrics)

    if start_step == 0:
        evaluate(0)
    schedule = [s for s in config.schedule() if s > start_step]
    loss_fns = {"mlm_primary": lambda b: model.mlm_loss(b, train=True, rng=rng),
                "mlm_secondary": lambda b: model.mlm_loss(b, head="secondary", train=True, rng=rng),
                "mlm_dual": lambda b: model.dual_head_loss(b, train=True, rng=rng)}
    loss_fn = loss_fns[config.objective]

    for step in range(start_step + 1, config.total_updates + 1):
        idx = rng.integers(0, len(train_rows), size=config.batch_size)
        batch = mask_batch(rng, train_rows[idx], config.mask_prob, model.config.V)
        ad.clear_grads(model.parameters())
        with ad.trace() as tape:
            loss = loss_fn(batch)
        if not np.isfinite(loss.data):
            raise DivergenceError(step, "loss")
        grads = ad.backward(tape, loss)
        if config.clip_norm is not None:
            _clip_gradients(grads, config.clip_norm)
        optimizer.step(model.params, grads, lr_schedule(config, step))
        # exact, not accumulated: cost stays perfectly linear in the step count
        flops = start_flops + per_update * (step - start_step)
        if schedule and step == schedule[0]:
            schedule.pop(0)
            evaluate(step)
            if out_dir is not None:
                path = out_dir / f"ckpt_{step:08d}.bin"
                save_checkpoint(path, model, optimizer, rng, step, flops,
                                extra_meta={"objective": config.objective})
                saved.append(path)
    ad.clear_grads(model.parameters())
    return TrainResult(curve=curve, checkpoints=saved, final_step=config.total_updates,
                       final_flops=flops)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


# ---------------------------------------------------------------------------
# classifier finetuning
# ---------------------------------------------------------------------------


def encode_task_split(split, seq_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """[BOS] seq1 [BOS] seq2 padded to seq_len, plus attention mask and labels."""
    B = len(split)
    ids = np.zeros((B, seq_len), dtype=np.int32)
    attn = np.zeros((B, seq_len), dtype=np.int8)
    labels = np.empty(B, dtype=np.int64)
    for i, e in enumerate(split):
        toks = [BOS, *e.seq1.tolist()]
        if e.seq2 is not None:
            toks += [BOS, *e.seq2.tolist()]
        toks = toks[:seq_len]
        ids[i, : len(toks)] = toks
        attn[i, : len(toks)] = 1
        labels[i] = e.label
    return ids, attn, labels


def classifier_accuracy(model: TransformerModel, split, seq_len: int,
                        batch_size: int = 64) -> float:
    ids, attn, labels = encode_task_split(split, seq_len)
    correct = 0
    for i in range(0, len(ids), batch_size):
        logits = model.classifier_logits(ids[i: i + batch_size], attn[i: i + batch_size])
        correct += int((logits.data.argmax(axis=1) == labels[i: i + batch_size]).sum())
    return correct / len(ids)


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 32
    peak_lr: float = 1e-5
    warmup_ratio: float = 0.06
    seq_len: int = 64
    weight_decay: float = 0.01
    seed: int = 0
    clip_norm: float | None = None


def finetune_classifier(model: TransformerModel, task, config: FinetuneConfig, freeze=None):
    """Step-3 style finetuning: fresh classification head, frozen embeddings,
    trainable body. Returns dev/test accuracy on the task's own language."""
    from .surgery import FreezeSpec

    rng = np.random.default_rng(config.seed)
    model.attach_classifier(task.num_classes, seed=config.seed + 1)
    (freeze if freeze is not None else FreezeSpec.finetuning()).apply(model)
    ids, attn, labels = encode_task_split(task.train, config.seq_len)
    if labels.max(initial=0) >= task.num_classes:
        raise TrainingError(f"label {labels.max()} outside {task.num_classes} classes")
    steps_per_epoch = len(ids) // config.batch_size
    total = config.epochs * steps_per_epoch
    sched_cfg = TrainConfig(total_updates=max(total, 1), batch_size=config.batch_size,
                            seq_len=config.seq_len, peak_lr=config.peak_lr,
                            warmup_ratio=config.warmup_ratio, seed=config.seed,
                            cost_model="none", checkpoint_schedule=[max(total, 1)])
    optimizer = ad.Adam(weight_decay=config.weight_decay)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(ids))
        for b in range(steps_per_epoch):
            take = order[b * config.batch_size: (b + 1) * config.batch_size]
            ad.clear_grads(model.parameters())
            with ad.trace() as tape:
                logits = model.classifier_logits(ids[take], attn[take], train=True, rng=rng)
                loss = ad.cross_entropy(logits, labels[take])
            if not np.isfinite(loss.data):
                raise DivergenceError(step, "classifier loss")
            grads = ad.backward(tape, loss)
            if config.clip_norm is not None:
                _clip_gradients(grads, config.clip_norm)
            step += 1
            optimizer.step(model.params, grads, lr_schedule(sched_cfg, step))
    ad.clear_grads(model.parameters())
    return {"dev_acc": classifier_accuracy(model, task.dev, config.seq_len),
            "test_acc": classifier_accuracy(model, task.test, config.seq_len)}
