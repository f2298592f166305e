"""Command-line entry point.

Batch workflow over run directories: generate data, pretrain, build
mini-models, adapt, finetune, evaluate, and analyze, plus pure calculators
(`flops`, `repro-appendix-a`). Every file-writing command drops a manifest
listing artifact hashes. Exit codes: 1 config/schema error, 2 missing
input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dt
from . import flopsmeter as fm
from . import pipeline as pl
from . import training as tr
from .model import ModelConfig
from .surgery import EmbeddingBundle, build_minipost, extract_minijoint, swap_embeddings, vocab_id

EXIT_SCHEMA = 1
EXIT_MISSING = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"l": int, "h": int, "a": int, "V": int, "s_max": int, "f": (int, type(None)),
               "n_secondary": (int, type(None)), "dropout": (int, float), "dtype": str,
               "relearn_positional": bool, "layer_norm_eps": (int, float)}
_TRAIN_KEYS = {"total_updates": int, "batch_size": int, "seq_len": int,
               "peak_lr": (int, float), "warmup_updates": int, "warmup_ratio": (int, float, type(None)),
               "mask_prob": (int, float), "seed": int, "checkpoint_schedule": (list, type(None)),
               "objective": str, "weight_decay": (int, float), "adam_beta1": (int, float),
               "adam_beta2": (int, float), "adam_eps": (int, float),
               "clip_norm": (int, float, type(None)), "cost_model": str, "bridge_layers": int,
               "eval_rows": int}
_FINETUNE_KEYS = {"epochs": int, "batch_size": int, "peak_lr": (int, float),
                  "warmup_ratio": (int, float), "seq_len": int, "weight_decay": (int, float),
                  "seed": int, "clip_norm": (int, float, type(None))}
_DATA_KEYS = {"vocab_size": int, "corpus_tokens": int, "grammar_seed": int, "task_kind": str,
              "task_size": int, "task_seed": int, "task_seq_len": int}
_LANGUAGE_KEYS = {"name": str, "overlap_fraction": (int, float), "reorder": str, "seed": int}
_TOP_KEYS = {"model": dict, "data": dict, "languages": list, "train": dict,
             "methods": list, "minipost_n": int, "minipost_k_new": int,
             "bl_small_l": int, "finetune_seeds": list, "out_dir": str}
_TRAIN_SECTIONS = {"step1": dict, "step1b": (dict, type(None)), "step2": dict, "step3": dict}


def _check_keys(obj: dict, allowed: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    for key, value in obj.items():
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown key")
        want = allowed[key]
        if not isinstance(value, want if isinstance(want, tuple) else (want,)):
            raise ConfigError(f"{where}.{key}: expected {want}, got {type(value).__name__}")
    return obj


def validate_config(raw: dict) -> dict:
    """Strict schema check: unknown keys anywhere are rejected."""
    _check_keys(raw, _TOP_KEYS, "config")
    for section in ("model", "data", "train", "languages", "methods"):
        if section not in raw:
            raise ConfigError(f"config.{section}: required section missing")
    _check_keys(raw["model"], _MODEL_KEYS, "config.model")
    _check_keys(raw["data"], _DATA_KEYS, "config.data")
    _check_keys(raw["train"], _TRAIN_SECTIONS, "config.train")
    for name in ("step1", "step2"):
        if name not in raw["train"]:
            raise ConfigError(f"config.train.{name}: required section missing")
        _check_keys(raw["train"][name], _TRAIN_KEYS, f"config.train.{name}")
    if raw["train"].get("step1b") is not None:
        _check_keys(raw["train"]["step1b"], _TRAIN_KEYS, "config.train.step1b")
    if "step3" in raw["train"]:
        _check_keys(raw["train"]["step3"], _FINETUNE_KEYS, "config.train.step3")
    for i, lang in enumerate(raw["languages"]):
        _check_keys(lang, _LANGUAGE_KEYS, f"config.languages[{i}]")
        for req in ("name", "overlap_fraction", "reorder", "seed"):
            if req not in lang:
                raise ConfigError(f"config.languages[{i}].{req}: required key missing")
    for m in raw["methods"]:
        if m not in pl.METHODS:
            raise ConfigError(f"config.methods: unknown method {m!r}")
    return raw


@dataclasses.dataclass
class Experiment:
    raw: dict
    model: ModelConfig
    data: pl.DataParams
    languages: list[dict]
    step1: tr.TrainConfig
    step1b: tr.TrainConfig | None
    step2: tr.TrainConfig
    step3: tr.FinetuneConfig
    methods: list[str]
    minipost_n: int
    minipost_k_new: int
    bl_small_l: int
    finetune_seeds: tuple[int, ...]
    out_dir: Path


def load_experiment(path: Path, out_override: str | None = None,
                    seed_override: int | None = None) -> Experiment:
    if not Path(path).exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    raw = validate_config(json.loads(Path(path).read_text()))
    try:
        model = ModelConfig(**raw["model"])
        step1 = tr.TrainConfig(**raw["train"]["step1"])
        step2 = tr.TrainConfig(**raw["train"]["step2"])
        step1b = tr.TrainConfig(**raw["train"]["step1b"]) if raw["train"].get("step1b") else None
        step3 = tr.FinetuneConfig(**raw["train"].get("step3", {}))
        data = pl.DataParams(**raw["data"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if seed_override is not None:
        step1 = replace(step1, seed=seed_override)
        step2 = replace(step2, seed=seed_override)
    out_dir = Path(out_override or raw.get("out_dir", "runs/experiment"))
    return Experiment(raw=raw, model=model, data=data, languages=raw["languages"],
                      step1=step1, step1b=step1b, step2=step2, step3=step3,
                      methods=list(raw["methods"]), minipost_n=raw.get("minipost_n", 2),
                      minipost_k_new=raw.get("minipost_k_new", 1),
                      bl_small_l=raw.get("bl_small_l", 2),
                      finetune_seeds=tuple(raw.get("finetune_seeds", [0, 1, 2, 3, 4])),
                      out_dir=out_dir)


def plan_for(exp: Experiment, method: str, language: dict) -> pl.AdaptationPlan:
    model = exp.model
    if method == "bl_small":
        model = replace(model, l=exp.bl_small_l, n_secondary=None)
    elif method == "minijoint":
        if model.n_secondary is None:
            raise ConfigError("minijoint requires model.n_secondary")
    else:
        model = replace(model, n_secondary=None)
    return pl.AdaptationPlan(
        method=method, model=model, step1=exp.step1, step2=exp.step2, step3=exp.step3,
        language=pl.LanguageParams(overlap_fraction=float(language["overlap_fraction"]),
                                   reorder=language["reorder"], seed=language["seed"]),
        data=exp.data, minipost_n=exp.minipost_n, minipost_k_new=exp.minipost_k_new,
        step1b=exp.step1b, finetune_seeds=exp.finetune_seeds)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, artifacts: list[Path]):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command,
                "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "artifacts": {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(artifacts)}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(obj: dict, out: Path | None, name: str, artifacts: list | None = None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(text + "\n")
        if artifacts is not None:
            artifacts.append(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    out = exp.out_dir / "data"
    out.mkdir(parents=True, exist_ok=True)
    d = exp.data
    corpus, src_vocab = dt.generate_source_corpus(d.grammar_seed, d.corpus_tokens, d.vocab_size)
    src_task = dt.make_classification_task(corpus, src_vocab, d.task_kind, d.task_size,
                                           seed=d.task_seed)
    artifacts = []
    dt.save_corpus(corpus, src_vocab, out / "src.corpus.txt")
    src_vocab.save(out / "src.vocab.txt")
    dt.save_task(src_task, src_vocab, out / "src.task")
    artifacts += [out / "src.corpus.txt", out / "src.vocab.txt",
                  *sorted((out / "src.task").glob("*.tsv"))]

    def one_language(lang):
        spec = dt.build_language(src_vocab.size, float(lang["overlap_fraction"]),
                                 lang["reorder"], lang["seed"])
        trg_corpus, trg_vocab = dt.derive_target_language(corpus, src_vocab, spec)
        trg_task = dt.transform_task(src_task, spec)
        base = out / lang["name"]
        base.mkdir(exist_ok=True)
        dt.save_corpus(trg_corpus, trg_vocab, base / "corpus.txt")
        trg_vocab.save(base / "vocab.txt")
        dt.save_language_spec(spec, base / "language.npz")
        dt.save_task(trg_task, trg_vocab, base / "task")
        return [base / "corpus.txt", base / "vocab.txt", base / "language.npz",
                *sorted((base / "task").glob("*.tsv"))]

    threads = int(os.environ.get("MINIMOD_THREADS", "1"))
    if threads > 1 and len(exp.languages) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for paths in pool.map(one_language, exp.languages):
                artifacts += paths
    else:
        for lang in exp.languages:
            artifacts += one_language(lang)
    write_manifest(out, "gen-data", artifacts)
    print(f"wrote {len(artifacts)} data artifacts under {out}")
    return 0


def _planned_costs(plan: pl.AdaptationPlan) -> dict:
    model = plan.model
    s1 = fm.FlopsSpec(U=plan.step1.total_updates, B=plan.step1.batch_size,
                      s=plan.step1.seq_len, l=model.l, h=model.h,
                      p=plan.step1.mask_prob, V=model.V)
    out = {"step1": (fm.flops_pretrain_dual(s1) if plan.method == "minijoint"
                     else fm.flops_pretrain(s1)).as_dict()}
    if plan.method == "minipost":
        lb = plan.minipost_n + plan.minipost_k_new
        sb = fm.FlopsSpec(U=plan.step1b.total_updates, B=plan.step1b.batch_size,
                          s=plan.step1b.seq_len, l=lb, h=model.h,
                          p=plan.step1b.mask_prob, V=model.V, l_t=plan.minipost_k_new)
        out["step1b"] = fm.flops_minipost_build(sb).as_dict()
    l2 = {"bl_base": model.l, "bl_small": model.l,
          "minijoint": model.n_secondary or model.l,
          "minipost": plan.minipost_n + plan.minipost_k_new}[plan.method]
    s2 = fm.FlopsSpec(U=plan.step2.total_updates, B=plan.step2.batch_size,
                      s=plan.step2.seq_len, l=l2, h=model.h,
                      p=plan.step2.mask_prob, V=model.V)
    out["step2"] = fm.flops_adapt(s2).as_dict()
    return out


def cmd_pretrain(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    plan = plan_for(exp, args.method, exp.languages[0])
    if args.dry_run:
        _emit({"method": args.method, "planned_costs": _planned_costs(plan)}, None, "")
        return 0
    out = exp.out_dir / args.method / "step1"
    out.mkdir(parents=True, exist_ok=True)
    lang = pl.prepare_language_data(plan)
    s1 = pl.run_step1(plan, lang, out_dir=out)
    artifacts = list(out.glob("ckpt_*.bin"))
    tr.save_checkpoint(out / "primary.bin", s1.primary, None, None,
                       step=plan.step1.total_updates, flops=s1.eflops * fm.EFLOP)
    artifacts.append(out / "primary.bin")
    if plan.method in ("minijoint", "minipost"):
        tr.save_checkpoint(out / "mini.bin", s1.adaptation_model, None, None,
                           step=plan.step1.total_updates,
                           flops=(s1.eflops + s1.step1b_eflops) * fm.EFLOP)
        artifacts.append(out / "mini.bin")
    s1.curve.to_csv(out / "step1_curve.csv")
    artifacts.append(out / "step1_curve.csv")
    _emit({"method": args.method, "eflops": {"step1": s1.eflops, "step1b": s1.step1b_eflops},
           "final_heldout": s1.curve.records[-1].metrics if s1.curve.records else {}},
          out, "step1_report.json", artifacts)
    write_manifest(out, "pretrain", artifacts)
    return 0


def cmd_build_mini(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    parent_path = Path(args.parent)
    if not parent_path.exists():
        raise FileNotFoundError(f"parent checkpoint {parent_path} does not exist")
    parent = tr.restore_model(tr.load_checkpoint(parent_path))
    out = exp.out_dir / args.method / "mini"
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if args.method == "minijoint":
        mini = extract_minijoint(parent, parent.config.n_secondary)
        eflops = 0.0
    else:
        plan = plan_for(exp, "minipost", exp.languages[0])
        lang = pl.prepare_language_data(plan)
        mini, bres = build_minipost(parent, exp.minipost_n, exp.minipost_k_new,
                                    exp.step1b, lang.src_rows, init_seed=exp.step1b.seed)
        eflops = bres.final_flops / fm.EFLOP
        bres.curve.to_csv(out / "step1b_curve.csv")
        artifacts.append(out / "step1b_curve.csv")
    tr.save_checkpoint(out / "mini.bin", mini, None, None, step=0, flops=eflops * fm.EFLOP)
    artifacts.append(out / "mini.bin")
    _emit({"method": args.method, "step1b_eflops": eflops, "provenance": mini.provenance},
          out, "mini_report.json", artifacts)
    write_manifest(out, "build-mini", artifacts)
    return 0


def cmd_adapt(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    lang_cfg = _find_language(exp, args.language)
    plan = plan_for(exp, args.method, lang_cfg)
    model_path = Path(args.model)
    if not model_path.exists():
        raise FileNotFoundError(f"adaptation model checkpoint {model_path} does not exist")
    model = tr.restore_model(tr.load_checkpoint(model_path))
    lang = pl.prepare_language_data(plan)
    out = exp.out_dir / args.method / lang_cfg["name"] / "step2"
    out.mkdir(parents=True, exist_ok=True)
    s2 = pl.run_step2(plan, model, lang, out_dir=out)
    artifacts = list(out.glob("ckpt_*.bin"))
    s2.bundle.save(out / "trg_embeddings.npz")
    s2.curve.to_csv(out / "step2_curve.csv")
    artifacts += [out / "trg_embeddings.npz", out / "step2_curve.csv"]
    _emit({"method": args.method, "language": lang_cfg["name"], "step2_eflops": s2.eflops,
           "analytic": fm.flops_adapt(pl.step2_flops_spec(plan, model)).as_dict(),
           "final_heldout": s2.curve.records[-1].metrics}, out, "step2_report.json", artifacts)
    write_manifest(out, "adapt", artifacts)
    return 0


def cmd_finetune(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    lang_cfg = _find_language(exp, args.language)
    plan = plan_for(exp, args.method, lang_cfg)
    primary = tr.restore_model(tr.load_checkpoint(Path(args.model)))
    lang = pl.prepare_language_data(plan)
    out = exp.out_dir / args.method / lang_cfg["name"] / "step3"
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    results = []
    for seed in exp.finetune_seeds:
        m = primary.clone()
        metrics = tr.finetune_classifier(m, lang.src_task, replace(exp.step3, seed=seed))
        path = out / f"finetuned_seed{seed}.bin"
        tr.save_checkpoint(path, m, None, None, step=0, flops=0.0)
        artifacts.append(path)
        results.append({"seed": seed, **metrics})
    _emit({"method": args.method, "language": lang_cfg["name"], "per_seed": results,
           "mean_src_test_acc": float(np.mean([r["test_acc"] for r in results]))},
          out, "step3_report.json", artifacts)
    write_manifest(out, "finetune", artifacts)
    return 0


def cmd_evaluate(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    lang_cfg = _find_language(exp, args.language)
    plan = plan_for(exp, args.method, lang_cfg)
    lang = pl.prepare_language_data(plan)
    bundle = EmbeddingBundle.load(Path(args.bundle))
    step3_dir = exp.out_dir / args.method / lang_cfg["name"] / "step3"
    ckpts = sorted(step3_dir.glob("finetuned_seed*.bin"))
    if not ckpts:
        raise FileNotFoundError(f"no finetuned checkpoints under {step3_dir}")
    out = exp.out_dir / args.method / lang_cfg["name"] / "step4"
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for path in ckpts:
        m = tr.restore_model(tr.load_checkpoint(path))
        src_acc = tr.classifier_accuracy(m, lang.src_task.test, exp.data.task_seq_len)
        swap_embeddings(m, bundle)
        trg_acc = tr.classifier_accuracy(m, lang.trg_task.test, exp.data.task_seq_len)
        results.append({"checkpoint": path.name, "src_acc": src_acc, "trg_acc": trg_acc})
    artifacts = []
    _emit({"method": args.method, "language": lang_cfg["name"], "per_seed": results,
           "mean_src_acc": float(np.mean([r["src_acc"] for r in results])),
           "mean_trg_acc": float(np.mean([r["trg_acc"] for r in results]))},
          out, "step4_report.json", artifacts)
    write_manifest(out, "evaluate", artifacts)
    return 0


def _find_language(exp: Experiment, name: str) -> dict:
    for lang in exp.languages:
        if lang["name"] == name:
            return lang
    raise FileNotFoundError(f"language {name!r} not in config "
                            f"({[l['name'] for l in exp.languages]})")


def cmd_flops(args) -> int:
    spec_raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    allowed = {"U": int, "B": int, "s": int, "l": int, "h": int, "p": (int, float),
               "V": int, "l_t": int}
    _check_keys(spec_raw, allowed, "flops-spec")
    defaults = dict(U=125000, B=2048, s=512, l=12, h=768, p=0.15, V=50000, l_t=0)
    defaults.update(spec_raw)
    spec = fm.FlopsSpec(**defaults)
    out = {"spec": defaults,
           "forward_flops_batch1": fm.flops_forward(spec),
           "pretrain": fm.flops_pretrain(spec).as_dict(),
           "pretrain_dual_head": fm.flops_pretrain_dual(spec).as_dict(),
           "adapt": fm.flops_adapt(spec).as_dict()}
    if spec.l_t >= 1:
        out["minipost_build"] = fm.flops_minipost_build(spec).as_dict()
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    cfg = json.loads(Path(args.spec).read_text())
    allowed = {"metric": str, "target": (int, float, type(None)),
               "near_max_of_final": (bool, type(None)), "higher_is_better": (bool, type(None)),
               "baseline_curves": dict, "method_curves": (dict, type(None)),
               "curves": (dict, type(None))}
    _check_keys(cfg, allowed, "analyze-spec")
    metric = cfg.get("metric", "masked_acc")
    higher = cfg.get("higher_is_better", True)

    def interp_table(curve_paths: dict, target: float) -> dict:
        out = {}
        for name, path in sorted(curve_paths.items()):
            if not Path(path).exists():
                raise FileNotFoundError(f"curve file {path} does not exist")
            curve = tr.TrainingCurve.from_csv(path)
            r = fm.interpolate_cost_to_score(curve.points(metric), target,
                                             higher_is_better=higher)
            out[name] = r.as_dict()
        return out

    report: dict = {"metric": metric}
    baselines = cfg.get("baseline_curves") or {}
    if cfg.get("target") is not None:
        target_of = {name: float(cfg["target"]) for name in baselines}
    else:
        target_of = {}
        for name, path in baselines.items():
            final = tr.TrainingCurve.from_csv(path).final(metric)
            target_of[name] = fm.near_max_target(final)
    report["targets"] = target_of
    base_interp = {name: fm.interpolate_cost_to_score(
        tr.TrainingCurve.from_csv(path).points(metric), target_of[name],
        higher_is_better=higher) for name, path in sorted(baselines.items())}
    report["baseline"] = {k: v.as_dict() for k, v in base_interp.items()}
    if cfg.get("method_curves"):
        meth_interp = {name: fm.interpolate_cost_to_score(
            tr.TrainingCurve.from_csv(path).points(metric), target_of[name],
            higher_is_better=higher) for name, path in sorted(cfg["method_curves"].items())}
        report["method"] = {k: v.as_dict() for k, v in meth_interp.items()}
        speed = fm.speedup_report({k: v.days for k, v in base_interp.items()},
                                  {k: v.days for k, v in meth_interp.items()})
        report["speedup"] = speed.as_dict()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    exp = load_experiment(args.config, args.out, args.seed)
    root = exp.out_dir
    table: dict = {}
    for method in exp.methods:
        entry: dict = {"languages": {}}
        s1 = root / method / "step1" / "step1_report.json"
        if s1.exists():
            entry["step1"] = json.loads(s1.read_text())
        for lang in exp.languages:
            name = lang["name"]
            lang_entry = {}
            for step, fname in (("step2", "step2_report.json"), ("step3", "step3_report.json"),
                                ("step4", "step4_report.json")):
                path = root / method / name / step / fname
                if path.exists():
                    lang_entry[step] = json.loads(path.read_text())
            if lang_entry:
                entry["languages"][name] = lang_entry
        table[method] = entry

    # near-max speedups versus bl_base wherever both curves exist
    speedups = {}
    base_days: dict[str, float | None] = {}
    targets: dict[str, float] = {}
    for lang in exp.languages:
        name = lang["name"]
        path = root / "bl_base" / name / "step2" / "step2_curve.csv"
        if not path.exists():
            continue
        curve = tr.TrainingCurve.from_csv(path)
        targets[name] = fm.near_max_target(curve.final(args.metric))
        r = fm.interpolate_cost_to_score(curve.points(args.metric), targets[name])
        base_days[name] = r.days
    for method in exp.methods:
        if method == "bl_base" or not base_days:
            continue
        meth_days: dict[str, float | None] = {}
        for name in base_days:
            path = root / method / name / "step2" / "step2_curve.csv"
            if not path.exists():
                continue
            curve = tr.TrainingCurve.from_csv(path)
            r = fm.interpolate_cost_to_score(curve.points(args.metric), targets[name])
            meth_days[name] = r.days
        if meth_days:
            speedups[method] = fm.speedup_report(
                {k: base_days[k] for k in meth_days}, meth_days).as_dict()
    out = {"methods": table, "near_max_targets": targets, "speedups_vs_bl_base": speedups}
    artifacts: list = []
    _emit(out, root, "report.json", artifacts)
    write_manifest(root, "report", artifacts)
    return 0


def cmd_repro_appendix_a(args) -> int:
    print(json.dumps(fm.appendix_golden_numbers(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minimod",
                                description="mini-model cross-lingual adaptation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", default=None, help="run directory override")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--dry-run", action="store_true")

    sp = sub.add_parser("gen-data", help="write corpora, vocabularies, and tasks")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="step 1: source-language pretraining")
    common(sp)
    sp.add_argument("--method", required=True, choices=pl.METHODS)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("build-mini", help="step 1b: construct a mini-model from a parent")
    common(sp)
    sp.add_argument("--method", required=True, choices=["minijoint", "minipost"])
    sp.add_argument("--parent", required=True, help="parent checkpoint path")
    sp.set_defaults(fn=cmd_build_mini)

    sp = sub.add_parser("adapt", help="step 2: train target embeddings, body frozen")
    common(sp)
    sp.add_argument("--method", required=True, choices=pl.METHODS)
    sp.add_argument("--model", required=True, help="adaptation model checkpoint")
    sp.add_argument("--language", required=True)
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("finetune", help="step 3: source-task finetuning, embeddings frozen")
    common(sp)
    sp.add_argument("--method", required=True, choices=pl.METHODS)
    sp.add_argument("--model", required=True, help="primary model checkpoint")
    sp.add_argument("--language", required=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("evaluate", help="step 4: zero-shot target evaluation via swap")
    common(sp)
    sp.add_argument("--method", required=True, choices=pl.METHODS)
    sp.add_argument("--bundle", required=True, help="target embedding bundle (.npz)")
    sp.add_argument("--language", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("flops", help="evaluate the analytic cost formulas")
    sp.add_argument("--spec", default=None, help="FlopsSpec JSON (defaults: reference config)")
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("analyze", help="interpolation and speedup analysis over curve CSVs")
    sp.add_argument("--spec", required=True, help="analysis spec JSON")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("report", help="aggregate per-method/per-language artifacts")
    common(sp)
    sp.add_argument("--metric", default="masked_acc")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("repro-appendix-a", help="print the analytic golden numbers")
    sp.set_defaults(fn=cmd_repro_appendix_a)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except tr.DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
