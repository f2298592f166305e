"""Analytic training-compute accounting and curve analysis.

Closed-form FLOP counts for MLM pretraining, frozen-body embedding
adaptation, and post-hoc mini-model construction, evaluated exactly in
64-bit arithmetic (no instrumentation). Also the checkpoint-interpolation,
near-maximal-target, and speedup analyses built on those counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

EFLOP = 1e18
EFLOPS_PER_V100_DAY = 2.592  # 30 TFLOP/s sustained for 86400 s


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class FlopsSpec:
    """Symbol set for the cost formulas.

    U: total updates, B: batch size, s: sequence length, l: layer count,
    h: hidden size, p: token mask probability, V: vocabulary size,
    l_t: trainable bridge layers (mini-model construction only).
    """

    U: int
    B: int
    s: int
    l: int
    h: int
    p: float
    V: int
    l_t: int = 0

    def __post_init__(self):
        for name in ("U", "B", "s", "l", "h", "V"):
            if getattr(self, name) < 0 or (name not in ("U",) and getattr(self, name) == 0):
                raise ValueError(f"FlopsSpec.{name} must be positive (got {getattr(self, name)})")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"FlopsSpec.p must lie in (0, 1), got {self.p}")
        if self.l_t < 0 or self.l_t > self.l:
            raise ValueError(f"FlopsSpec.l_t must lie in [0, l], got {self.l_t}")

    @property
    def l_f(self) -> int:
        """Frozen bottom layers in a bridge-construction context."""
        return self.l - self.l_t

    def replace(self, **kw) -> "FlopsSpec":
        d = {k: getattr(self, k) for k in ("U", "B", "s", "l", "h", "p", "V", "l_t")}
        d.update(kw)
        return FlopsSpec(**d)


@dataclass(frozen=True)
class CostReport:
    flops: float
    eflops: float
    v100_days: float

    @classmethod
    def from_flops(cls, flops: float) -> "CostReport":
        ef = flops / EFLOP
        return cls(flops=flops, eflops=ef, v100_days=ef / EFLOPS_PER_V100_DAY)

    def as_dict(self) -> dict:
        return {"flops": self.flops, "eflops": self.eflops, "v100_days": self.v100_days}


def _flop_layer(s: int, h: int) -> float:
    # one transformer layer, forward, batch 1: QKV + output projections and
    # the two s x s attention products, plus the 4h feed-forward pair
    return 24.0 * s * h * h + 4.0 * h * s * s


def _flop_lm(s: int, h: int, p: float, V: int) -> float:
    # masked positions only: dense h->h then tied projection h->V
    return p * (2.0 * s * h * h + 2.0 * s * h * V)


def flops_forward(spec: FlopsSpec, batch_size_1: bool = True) -> float:
    """Forward-pass FLOPs; per sequence when batch_size_1, else times B."""
    per_seq = spec.l * _flop_layer(spec.s, spec.h) + _flop_lm(spec.s, spec.h, spec.p, spec.V)
    return per_seq if batch_size_1 else per_seq * spec.B


def flops_pretrain(spec: FlopsSpec) -> CostReport:
    """Full MLM pretraining: forward tripled for the backward pass."""
    U, B, s, l, h, p, V = spec.U, spec.B, spec.s, spec.l, spec.h, spec.p, spec.V
    total = 72.0 * U * B * s * l * h * h * (1.0 + s / (6.0 * h) + p / (12.0 * l) + p * V / (12.0 * h * l))
    return CostReport.from_flops(total)


def flops_pretrain_dual(spec: FlopsSpec) -> CostReport:
    """Dual-head pretraining: full pretraining plus a second MLM head,
    itself tripled for its backward contribution."""
    extra = 3.0 * spec.U * spec.B * _flop_lm(spec.s, spec.h, spec.p, spec.V)
    return CostReport.from_flops(flops_pretrain(spec).flops + extra)


def flops_adapt(spec: FlopsSpec) -> CostReport:
    """Embedding adaptation with the transformer body frozen: activations
    still backpropagate end to end, but only the tied output projection
    takes a weight-gradient pass."""
    U, B, s, l, h, p, V = spec.U, spec.B, spec.s, spec.l, spec.h, spec.p, spec.V
    total = 48.0 * U * B * s * l * h * h * (1.0 + s / (6.0 * h) + p / (12.0 * l) + p * V / (8.0 * h * l))
    return CostReport.from_flops(total)


def flops_minipost_build(spec: FlopsSpec) -> CostReport:
    """Bridge-layer training cost for post-hoc mini-model construction.

    Frozen bottom layers take no backward pass; the frozen head dense takes
    only the activation pass; each trainable layer takes both passes except
    the lowest, which needs no activation pass downward.
    """
    if spec.l_t < 1:
        raise ValueError("mini-model construction requires at least one trainable layer (l_t >= 1)")
    U, B, s, l, h, p, V = spec.U, spec.B, spec.s, spec.l, spec.h, spec.p, spec.V
    total = U * B * ((l + 2.0 * spec.l_t - 1.0) * _flop_layer(s, h) + 4.0 * p * s * h * h + 4.0 * p * s * h * V)
    return CostReport.from_flops(total)


def eflops_to_days(eflops: float) -> float:
    return eflops / EFLOPS_PER_V100_DAY


# ---------------------------------------------------------------------------
# curve interpolation and speedups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    step: int
    eflops: float
    value: float


@dataclass(frozen=True)
class Interpolation:
    """Estimated cost to first reach a target metric value.

    `reached` is False when the curve never crosses the target; cost fields
    are None in that case and render as infinity in reports.
    """

    reached: bool
    steps: float | None = None
    eflops: float | None = None
    lower_eflops: float | None = None
    upper_eflops: float | None = None

    @property
    def days(self) -> float | None:
        return None if self.eflops is None else eflops_to_days(self.eflops)

    @property
    def lower_days(self) -> float | None:
        return None if self.lower_eflops is None else eflops_to_days(self.lower_eflops)

    @property
    def upper_days(self) -> float | None:
        return None if self.upper_eflops is None else eflops_to_days(self.upper_eflops)

    def as_dict(self) -> dict:
        if not self.reached:
            return {"reached": False, "steps": None, "eflops": None, "days": None,
                    "lower_eflops": None, "upper_eflops": None,
                    "lower_days": None, "upper_days": None}
        return {"reached": True, "steps": self.steps, "eflops": self.eflops, "days": self.days,
                "lower_eflops": self.lower_eflops, "upper_eflops": self.upper_eflops,
                "lower_days": self.lower_days, "upper_days": self.upper_days}


NOT_REACHED = Interpolation(reached=False)


def interpolate_cost_to_score(points: list[CurvePoint], target: float, *,
                              higher_is_better: bool = True,
                              initial_value: float | None = None) -> Interpolation:
    """Linear interpolation between the checkpoints immediately before and
    after the first crossing of `target`.

    The lower/upper estimates are the bracketing checkpoints' own costs. A
    crossing before the first checkpoint interpolates from step 0 with metric
    `initial_value` (0 when not given) and has a lower estimate of 0.
    """
    if not points:
        raise CurveError("empty curve")
    steps = [p.step for p in points]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise CurveError(f"non-monotone step sequence {steps}")

    sign = 1.0 if higher_is_better else -1.0

    def hit(v):
        return sign * v >= sign * target

    first = None
    for i, pt in enumerate(points):
        if hit(pt.value):
            first = i
            break
    if first is None:
        return NOT_REACHED

    if first == 0:
        left = CurvePoint(0, 0.0, initial_value if initial_value is not None else 0.0)
        right = points[0]
        if hit(left.value):  # already at target before any training
            return Interpolation(True, steps=0.0, eflops=0.0, lower_eflops=0.0,
                                 upper_eflops=right.eflops)
    else:
        left, right = points[first - 1], points[first]

    if right.value == left.value:
        frac = 1.0
    else:
        frac = (target - left.value) / (right.value - left.value)
    frac = min(max(frac, 0.0), 1.0)
    est_step = left.step + frac * (right.step - left.step)
    est_eflops = left.eflops + frac * (right.eflops - left.eflops)
    return Interpolation(True, steps=est_step, eflops=est_eflops,
                         lower_eflops=left.eflops, upper_eflops=right.eflops)


def near_max_target(final_baseline_score: float) -> float:
    """Target used for cost-to-performance comparisons: 95% of the
    baseline's end-of-training score."""
    return 0.95 * final_baseline_score


@dataclass(frozen=True)
class SpeedupReport:
    per_language: dict[str, float]
    mean_of_ratios: float | None
    ratio_of_means: float | None
    excluded: tuple[str, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {"per_language": dict(self.per_language),
                "mean_of_ratios": self.mean_of_ratios,
                "ratio_of_means": self.ratio_of_means,
                "excluded": list(self.excluded)}


def speedup_report(baseline_days: dict[str, float | None],
                   method_days: dict[str, float | None]) -> SpeedupReport:
    """Per-language cost ratios baseline/method plus their arithmetic mean.

    The aggregate is the mean of per-language ratios, which differs from the
    ratio of mean costs; both are reported. Languages where either side never
    reached the target (None) are excluded and listed.
    """
    langs = sorted(set(baseline_days) | set(method_days))
    ratios: dict[str, float] = {}
    excluded: list[str] = []
    base_vals, meth_vals = [], []
    for lang in langs:
        b = baseline_days.get(lang)
        m = method_days.get(lang)
        if b is None or m is None:
            excluded.append(lang)
            continue
        ratios[lang] = b / m
        base_vals.append(b)
        meth_vals.append(m)
    mean_ratio = sum(ratios.values()) / len(ratios) if ratios else None
    rom = (sum(base_vals) / len(base_vals)) / (sum(meth_vals) / len(meth_vals)) if meth_vals and sum(meth_vals) else None
    return SpeedupReport(per_language=ratios, mean_of_ratios=mean_ratio,
                         ratio_of_means=rom, excluded=tuple(excluded))


def appendix_golden_numbers() -> dict:
    """Every headline analytic figure at the reference configuration
    (h=768, s=512, B=2048, U=125000, p=0.15, V=50000)."""
    ref = dict(U=125000, B=2048, s=512, h=768, p=0.15, V=50000)
    out = {
        "pretrain_l12_eflops": flops_pretrain(FlopsSpec(l=12, **ref)).eflops,
        "pretrain_l4_eflops": flops_pretrain(FlopsSpec(l=4, **ref)).eflops,
        "adapt_l12_eflops": flops_adapt(FlopsSpec(l=12, **ref)).eflops,
        "adapt_l12_days": flops_adapt(FlopsSpec(l=12, **ref)).v100_days,
        "adapt_l4_eflops": flops_adapt(FlopsSpec(l=4, **ref)).eflops,
        "adapt_l4_days": flops_adapt(FlopsSpec(l=4, **ref)).v100_days,
        "adapt_l6_eflops": flops_adapt(FlopsSpec(l=6, **ref)).eflops,
        "adapt_l6_days": flops_adapt(FlopsSpec(l=6, **ref)).v100_days,
        "adapt_l6_per_5000_steps_eflops": flops_adapt(FlopsSpec(l=6, **dict(ref, U=5000))).eflops,
        "minipost_build_l6_lt2_eflops": flops_minipost_build(FlopsSpec(l=6, l_t=2, **ref)).eflops,
        "pretrain_l12_days": flops_pretrain(FlopsSpec(l=12, **ref)).v100_days,
        "pretrain_dual_l12_days": flops_pretrain_dual(FlopsSpec(l=12, **ref)).v100_days,
        "forward_pass_l12_flops": flops_forward(FlopsSpec(l=12, **ref)),
    }
    # worked interpolation example: 48% at 5k updates, 52% at 10k, target 50%
    per5k = out["adapt_l6_per_5000_steps_eflops"]
    interp = interpolate_cost_to_score(
        [CurvePoint(5000, per5k, 48.0), CurvePoint(10000, 2 * per5k, 52.0)], 50.0)
    out["interp_example_steps"] = interp.steps
    out["interp_example_eflops"] = interp.eflops
    out["near_max_example"] = near_max_target(70.2)
    out["speedup_example"] = speedup_report({"xx": 2.5}, {"xx": 1.0}).per_language["xx"]
    return out
