"""Four-step cross-lingual adaptation pipeline.

Step 1 pretrains in the source language (jointly with a secondary head for
the dual-head variant, or followed by post-hoc mini-model construction).
Step 2 learns target-language embeddings over the adaptation model with the
body frozen. Step 3 finetunes the primary model on source task data with
embeddings frozen, and Step 4 swaps in the target embeddings for zero-shot
evaluation. Compute for every step is charged analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dt
from . import flopsmeter as fm
from . import training as tr
from .model import ModelConfig, TransformerModel
from .surgery import (
    EmbeddingBundle,
    FreezeSpec,
    body_checksum,
    build_minipost,
    extract_minijoint,
    swap_embeddings,
    vocab_id,
)

METHODS = ("bl_base", "bl_small", "minijoint", "minipost")


class PipelineError(RuntimeError):
    pass


@dataclass
class LanguageParams:
    overlap_fraction: float = 0.5
    reorder: str = "none"
    seed: int = 101


@dataclass
class DataParams:
    vocab_size: int = 2048
    corpus_tokens: int = 400_000
    grammar_seed: int = 11
    task_kind: str = "pair_paraphrase"
    task_size: int = 2400
    task_seed: int = 33
    task_seq_len: int = 32


@dataclass
class AdaptationPlan:
    """Everything needed to run one method on one target language."""

    method: str
    model: ModelConfig
    step1: tr.TrainConfig
    step2: tr.TrainConfig
    step3: tr.FinetuneConfig
    language: LanguageParams = field(default_factory=LanguageParams)
    data: DataParams = field(default_factory=DataParams)
    minipost_n: int = 2
    minipost_k_new: int = 1
    step1b: tr.TrainConfig | None = None
    finetune_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    relearn_positional: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise PipelineError(f"unknown method {self.method!r}")
        if self.method == "minijoint" and self.model.n_secondary is None:
            raise PipelineError("minijoint plans need model.n_secondary")
        if self.method != "minijoint" and self.model.n_secondary is not None:
            raise PipelineError(f"{self.method} plans must not configure a secondary head")
        if self.method == "minipost" and self.step1b is None:
            raise PipelineError("minipost plans need a step1b bridge train config")


@dataclass
class LanguageData:
    src_rows: np.ndarray
    trg_rows: np.ndarray
    src_vocab: dt.Vocab
    trg_vocab: dt.Vocab
    spec: dt.SyntheticLanguageSpec
    src_task: dt.TaskDataset
    trg_task: dt.TaskDataset


def prepare_language_data(plan: AdaptationPlan) -> LanguageData:
    """Deterministic corpora and tasks for one plan. The target task is the
    transformed source task, so zero-shot labels correspond exactly."""
    d = plan.data
    corpus, src_vocab = dt.generate_source_corpus(d.grammar_seed, d.corpus_tokens, d.vocab_size)
    spec = dt.build_language(src_vocab.size, plan.language.overlap_fraction,
                             plan.language.reorder, plan.language.seed)
    trg_corpus, trg_vocab = dt.derive_target_language(corpus, src_vocab, spec)
    s = plan.step1.seq_len
    src_task = dt.make_classification_task(corpus, src_vocab, d.task_kind, d.task_size,
                                           seed=d.task_seed)
    trg_task = dt.transform_task(src_task, spec)
    return LanguageData(src_rows=tr.pack_corpus(corpus, s),
                        trg_rows=tr.pack_corpus(trg_corpus, s),
                        src_vocab=src_vocab, trg_vocab=trg_vocab, spec=spec,
                        src_task=src_task, trg_task=trg_task)


# ---------------------------------------------------------------------------
# embedding initialization
# ---------------------------------------------------------------------------


def overlap_init(src_vocab: dt.Vocab, trg_vocab: dt.Vocab, src_embeddings: np.ndarray,
                 sigma: float = 0.02, rng: np.random.Generator | None = None) -> EmbeddingBundle:
    """Target rows for surface forms shared with the source vocabulary are
    copied from the source table; the rest are drawn from N(0, sigma^2).
    Reserved tokens always count as shared."""
    if src_embeddings.shape[0] != src_vocab.size:
        raise PipelineError(f"source table has {src_embeddings.shape[0]} rows for "
                            f"{src_vocab.size} tokens")
    rng = rng if rng is not None else np.random.default_rng(0)
    h = src_embeddings.shape[1]
    table = np.empty((trg_vocab.size, h), dtype=src_embeddings.dtype)
    for j in range(trg_vocab.size):
        surface = trg_vocab.token(j)
        if j < dt.N_RESERVED:
            table[j] = src_embeddings[j]
        elif surface in src_vocab:
            table[j] = src_embeddings[src_vocab.id(surface)]
        else:
            table[j] = rng.normal(0.0, sigma, size=h)
    return EmbeddingBundle(token_table=table, vocab_id=vocab_id(trg_vocab))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


@dataclass
class Step1Result:
    primary: TransformerModel
    adaptation_model: TransformerModel
    curve: tr.TrainingCurve
    eflops: float
    step1b_curve: tr.TrainingCurve | None = None
    step1b_eflops: float = 0.0


def run_step1(plan: AdaptationPlan, lang: LanguageData, out_dir=None,
              reuse_primary: TransformerModel | None = None) -> Step1Result:
    """Source pretraining (plus mini-model construction where the method
    needs one). For minipost, `reuse_primary` skips retraining the parent
    when an identically configured pretrained model already exists."""
    cfg1 = plan.step1
    if plan.method == "minijoint":
        cfg1 = replace(cfg1, objective="mlm_dual", cost_model="pretrain_dual")
    else:
        cfg1 = replace(cfg1, objective="mlm_primary", cost_model="pretrain")

    if reuse_primary is not None:
        if reuse_primary.config.as_dict() != plan.model.as_dict():
            raise PipelineError("reuse_primary config differs from the plan's model config")
        primary = reuse_primary.clone()
        curve, eflops = tr.TrainingCurve(), 0.0
    else:
        primary = TransformerModel.init(plan.model, seed=cfg1.seed)
        FreezeSpec.pretraining().apply(primary)
        result = tr.train_mlm(primary, lang.src_rows, cfg1, out_dir=out_dir)
        curve, eflops = result.curve, result.final_flops / fm.EFLOP
    primary.provenance.setdefault("vocab_id", vocab_id(lang.src_vocab))

    step1b_curve, step1b_eflops = None, 0.0
    if plan.method == "minijoint":
        adaptation_model = extract_minijoint(primary, plan.model.n_secondary)
    elif plan.method == "minipost":
        mini, bres = build_minipost(primary, plan.minipost_n, plan.minipost_k_new,
                                    plan.step1b, lang.src_rows,
                                    init_seed=plan.step1b.seed)
        adaptation_model = mini
        step1b_curve, step1b_eflops = bres.curve, bres.final_flops / fm.EFLOP
    else:
        adaptation_model = primary
    return Step1Result(primary=primary, adaptation_model=adaptation_model, curve=curve,
                       eflops=eflops, step1b_curve=step1b_curve, step1b_eflops=step1b_eflops)


@dataclass
class Step2Result:
    bundle: EmbeddingBundle
    curve: tr.TrainingCurve
    eflops: float
    checkpoints: list


def step2_flops_spec(plan: AdaptationPlan, adaptation_model: TransformerModel) -> fm.FlopsSpec:
    """Adaptation cost symbols for the model actually used in Step 2."""
    return fm.FlopsSpec(U=plan.step2.total_updates, B=plan.step2.batch_size,
                        s=plan.step2.seq_len, l=adaptation_model.config.l,
                        h=adaptation_model.config.h, p=plan.step2.mask_prob,
                        V=adaptation_model.config.V)


def run_step2(plan: AdaptationPlan, adaptation_model: TransformerModel,
              lang: LanguageData, out_dir=None) -> Step2Result:
    """Learn target embeddings over a frozen body. Never mutates the model
    it is given; returns the trained embedding bundle."""
    model = adaptation_model.clone()
    rng = np.random.default_rng(plan.language.seed + 0xE)
    init_bundle = overlap_init(lang.src_vocab, lang.trg_vocab,
                               model.params["emb.tok"].data, rng=rng)
    swap_embeddings(model, init_bundle)
    body_before = body_checksum(model)
    cfg2 = replace(plan.step2, objective="mlm_primary", cost_model="adapt")
    freeze = FreezeSpec.adaptation(plan.relearn_positional)
    result = tr.train_mlm(model, lang.trg_rows, cfg2, freeze=freeze, out_dir=out_dir)
    if body_checksum(model) != body_before:
        raise PipelineError("frozen body changed during step 2")
    bundle = EmbeddingBundle(
        token_table=model.params["emb.tok"].data.copy(), vocab_id=vocab_id(lang.trg_vocab),
        positional_table=model.params["emb.pos"].data.copy() if plan.relearn_positional else None)
    return Step2Result(bundle=bundle, curve=result.curve,
                       eflops=result.final_flops / fm.EFLOP, checkpoints=result.checkpoints)


@dataclass
class Step34Result:
    per_seed: list[dict]
    mean_src_acc: float
    mean_trg_acc: float


def run_step3_step4(plan: AdaptationPlan, primary_model: TransformerModel,
                    trg_bundle: EmbeddingBundle, lang: LanguageData,
                    src_bundle: EmbeddingBundle | None = None) -> Step34Result:
    """Per-seed source finetuning (embeddings frozen) followed by zero-shot
    target evaluation via embedding swap. The target metric and the source
    metric come from the same finetuned body."""
    per_seed = []
    s = plan.data.task_seq_len
    for seed in plan.finetune_seeds:
        m = primary_model.clone()
        if src_bundle is not None:
            swap_embeddings(m, src_bundle)
        ft_cfg = replace(plan.step3, seed=seed)
        metrics = tr.finetune_classifier(m, lang.src_task, ft_cfg)
        src_acc = tr.classifier_accuracy(m, lang.src_task.test, s)
        swap_embeddings(m, trg_bundle)
        trg_acc = tr.classifier_accuracy(m, lang.trg_task.test, s)
        per_seed.append({"seed": seed, "src_acc": src_acc, "trg_acc": trg_acc,
                         "src_dev_acc": metrics["dev_acc"]})
    return Step34Result(
        per_seed=per_seed,
        mean_src_acc=float(np.mean([r["src_acc"] for r in per_seed])),
        mean_trg_acc=float(np.mean([r["trg_acc"] for r in per_seed])))


@dataclass
class MethodReport:
    method: str
    step1_eflops: float
    step1b_eflops: float
    step2_eflops: float
    step2_analytic: dict
    mean_src_acc: float
    mean_trg_acc: float
    per_seed: list[dict]
    step2_curve: tr.TrainingCurve
    final_heldout: dict[str, float]

    def as_dict(self) -> dict:
        return {"method": self.method,
                "eflops": {"step1": self.step1_eflops, "step1b": self.step1b_eflops,
                           "step2": self.step2_eflops},
                "step2_analytic": self.step2_analytic,
                "mean_src_acc": self.mean_src_acc, "mean_trg_acc": self.mean_trg_acc,
                "per_seed": self.per_seed,
                "final_heldout": self.final_heldout}


def run_plan(plan: AdaptationPlan, lang: LanguageData | None = None, out_dir=None,
             reuse_primary: TransformerModel | None = None,
             reuse_step1: Step1Result | None = None) -> tuple[MethodReport, Step1Result]:
    """End-to-end execution of one plan; returns the report plus the Step-1
    artifacts so callers can share pretrained models across plans."""
    lang = lang if lang is not None else prepare_language_data(plan)
    s1 = reuse_step1 if reuse_step1 is not None else run_step1(
        plan, lang, out_dir=out_dir, reuse_primary=reuse_primary)
    s2 = run_step2(plan, s1.adaptation_model, lang, out_dir=out_dir)
    s34 = run_step3_step4(plan, s1.primary, s2.bundle, lang)
    analytic = fm.flops_adapt(step2_flops_spec(plan, s1.adaptation_model))
    report = MethodReport(
        method=plan.method, step1_eflops=s1.eflops, step1b_eflops=s1.step1b_eflops,
        step2_eflops=s2.eflops, step2_analytic=analytic.as_dict(),
        mean_src_acc=s34.mean_src_acc, mean_trg_acc=s34.mean_trg_acc,
        per_seed=s34.per_seed, step2_curve=s2.curve,
        final_heldout=s2.curve.records[-1].metrics if s2.curve.records else {})
    return report, s1


# ---------------------------------------------------------------------------
# depth ablation
# ---------------------------------------------------------------------------


@dataclass
class DepthAblationRow:
    n: int
    step2_eflops_total: float
    interpolation: fm.Interpolation
    final_metric: float


def depth_ablation(base_plan: AdaptationPlan, depths, target_score: float,
                   lang: LanguageData | None = None, metric: str = "masked_acc",
                   step1_cache: dict | None = None) -> list[DepthAblationRow]:
    """Joint pretraining with the secondary head at each depth, then Step-2
    adaptation on the extracted mini-model; reports interpolated cost to the
    target score per depth. `step1_cache` maps depth -> Step1Result to share
    pretrained models across calls."""
    lang = lang if lang is not None else prepare_language_data(base_plan)
    rows = []
    for n in depths:
        plan = replace(base_plan, model=replace(base_plan.model, n_secondary=n))
        cached = (step1_cache or {}).get(n)
        s1 = cached if cached is not None else run_step1(plan, lang)
        if step1_cache is not None:
            step1_cache[n] = s1
        s2 = run_step2(plan, s1.adaptation_model, lang)
        interp = fm.interpolate_cost_to_score(s2.curve.points(metric), target_score)
        rows.append(DepthAblationRow(n=n, step2_eflops_total=s2.eflops,
                                     interpolation=interp,
                                     final_metric=s2.curve.final(metric)))
    return rows
