"""Golden-value and property tests for the analytic cost engine."""

from fractions import Fraction

import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from minimod.flopsmeter import (
    EFLOPS_PER_V100_DAY,
    CurveError,
    CurvePoint,
    FlopsSpec,
    appendix_golden_numbers,
    eflops_to_days,
    flops_adapt,
    flops_forward,
    flops_minipost_build,
    flops_pretrain,
    flops_pretrain_dual,
    interpolate_cost_to_score,
    near_max_target,
    speedup_report,
)

REF = dict(U=125000, B=2048, s=512, h=768, p=0.15, V=50000)


def spec(l, **kw):
    d = dict(REF, l=l)
    d.update(kw)
    return FlopsSpec(**d)


# -- golden numbers at the reference configuration ---------------------------


def test_pretrain_golden():
    assert flops_pretrain(spec(12)).eflops == pytest.approx(78.8, abs=0.05)
    assert flops_pretrain(spec(4)).eflops == pytest.approx(29.3, abs=0.05)


def test_adapt_golden():
    r12 = flops_adapt(spec(12))
    r4 = flops_adapt(spec(4))
    assert r12.eflops == pytest.approx(54.1, abs=0.05)
    assert r12.v100_days == pytest.approx(20.9, abs=0.05)
    assert r4.eflops == pytest.approx(21.1, abs=0.05)
    assert r4.v100_days == pytest.approx(8.1, abs=0.05)


def test_adapt_l6_checkpoint_slice():
    assert flops_adapt(spec(6, U=5000)).eflops == pytest.approx(1.17, abs=0.005)
    r6 = flops_adapt(spec(6))
    assert r6.eflops == pytest.approx(29.3, abs=0.05)
    assert r6.v100_days == pytest.approx(11.3, abs=0.05)


def test_minipost_build_golden():
    assert flops_minipost_build(spec(6, l_t=2)).eflops == pytest.approx(21.6, abs=0.05)


def test_minipost_build_requires_trainable_layer():
    with pytest.raises(ValueError, match="trainable"):
        flops_minipost_build(spec(6, l_t=0))


def test_dual_head_overhead_days():
    # second head adds ~1.8 V100 days at the reference scale
    assert flops_pretrain(spec(12)).v100_days == pytest.approx(30.4, abs=0.05)
    assert flops_pretrain_dual(spec(12)).v100_days == pytest.approx(32.2, abs=0.05)


def test_table2_train_cost_pairs_to_one_decimal():
    pairs = {12: (54.1, 20.9), 4: (21.1, 8.1), 6: (29.3, 11.3)}
    for l, (ef, days) in pairs.items():
        r = flops_adapt(spec(l))
        assert round(r.eflops, 1) == ef
        assert round(r.v100_days, 1) == days


def test_forward_pass_against_integer_arithmetic():
    # independent oracle: exact integer/rational evaluation, term by term
    l, h, s, V = 12, 768, 512, 50000
    p = Fraction(15, 100)
    per_layer = 24 * s * h * h + 4 * h * s * s
    head = p * (2 * s * h * h + 2 * s * h * V)
    expect = l * per_layer + head
    got = flops_forward(spec(12))
    assert got == pytest.approx(float(expect), rel=1e-12)
    assert got == pytest.approx(1.0263e11, rel=1e-4)


def test_forward_head_term_vanishes_as_p_to_zero():
    s = spec(12, p=1e-300)
    l, h, sl = 12, 768, 512
    assert flops_forward(s) == l * (24.0 * sl * h * h + 4.0 * h * sl * sl)


def test_forward_layer_term_linear_in_l():
    lo = flops_forward(spec(6))
    hi = flops_forward(spec(12))
    head = flops_forward(spec(12)) - 12 * (flops_forward(spec(12)) - flops_forward(spec(11)))
    assert hi - lo == pytest.approx(flops_forward(spec(6)) - head, rel=1e-12)


def test_zero_updates_cost_nothing():
    assert flops_pretrain(spec(12, U=0)).flops == 0.0
    assert flops_adapt(spec(12, U=0)).flops == 0.0


def test_structural_identity_pretrain_vs_adapt():
    # replacing the adaptation head-update term pV/8hl by pV/12hl turns the
    # adaptation formula into exactly two-thirds of the pretraining formula
    U, B, s, l, h, p, V = sympy.symbols("U B s l h p V", positive=True)
    pre = 72 * U * B * s * l * h**2 * (1 + s / (6 * h) + p / (12 * l) + p * V / (12 * h * l))
    adapt_amended = 48 * U * B * s * l * h**2 * (1 + s / (6 * h) + p / (12 * l) + p * V / (12 * h * l))
    assert sympy.simplify(pre - sympy.Rational(3, 2) * adapt_amended) == 0
    # spot-check numerically at three random specs
    import random

    rnd = random.Random(17)
    for _ in range(3):
        sp = FlopsSpec(U=rnd.randint(1, 10**6), B=rnd.randint(1, 4096),
                       s=rnd.randint(8, 1024), l=rnd.randint(1, 48),
                       h=8 * rnd.randint(1, 256), p=rnd.uniform(0.01, 0.9),
                       V=rnd.randint(100, 10**5))
        lhs = float(pre.subs({U: sp.U, B: sp.B, s: sp.s, l: sp.l, h: sp.h, p: sp.p, V: sp.V}))
        assert flops_pretrain(sp).flops == pytest.approx(lhs, rel=1e-12)


@given(U=st.integers(1, 10**6), B=st.integers(1, 2**12), s=st.integers(1, 2048),
       l=st.integers(1, 64), h=st.integers(1, 4096), V=st.integers(1, 10**6),
       p=st.floats(0.01, 0.99))
@settings(max_examples=60, deadline=None)
def test_costs_exactly_linear_in_U_and_B(U, B, s, l, h, V, p):
    base = FlopsSpec(U=U, B=B, s=s, l=l, h=h, p=p, V=V, l_t=1)
    for fn in (flops_pretrain, flops_adapt, flops_pretrain_dual, flops_minipost_build):
        f = fn(base).flops
        assert fn(base.replace(U=2 * U)).flops == 2.0 * f
        assert fn(base.replace(B=2 * B)).flops == 2.0 * f


def test_spec_validation():
    with pytest.raises(ValueError):
        FlopsSpec(U=1, B=0, s=1, l=1, h=1, p=0.5, V=1)
    with pytest.raises(ValueError):
        FlopsSpec(U=1, B=1, s=1, l=1, h=1, p=0.0, V=1)
    with pytest.raises(ValueError):
        FlopsSpec(U=1, B=1, s=1, l=2, h=1, p=0.5, V=1, l_t=3)
    assert FlopsSpec(U=0, B=1, s=1, l=4, h=2, p=0.5, V=9, l_t=1).l_f == 3


# -- interpolation ------------------------------------------------------------


def curve(*pts):
    return [CurvePoint(*p) for p in pts]


def test_worked_example_7500_steps():
    per5k = flops_adapt(spec(6, U=5000)).eflops
    r = interpolate_cost_to_score(curve((5000, per5k, 48.0), (10000, 2 * per5k, 52.0)), 50.0)
    assert r.reached
    assert r.steps == 7500.0
    assert 1.755 <= r.eflops <= 1.765
    assert r.lower_eflops == per5k and r.upper_eflops == 2 * per5k


def test_target_before_first_checkpoint():
    r = interpolate_cost_to_score(curve((5000, 1.0, 60.0)), 30.0)
    assert r.lower_eflops == 0.0
    assert r.steps == 2500.0  # interpolates from (0, 0) without an initial value
    r2 = interpolate_cost_to_score(curve((5000, 1.0, 60.0)), 30.0, initial_value=20.0)
    assert r2.lower_eflops == 0.0
    assert r2.steps == pytest.approx(5000 * 0.25)


def test_target_never_reached():
    r = interpolate_cost_to_score(curve((5000, 1.0, 48.0), (10000, 2.0, 52.0)), 99.0)
    assert not r.reached
    assert r.eflops is None and r.days is None


def test_first_crossing_wins_over_later_ones():
    pts = curve((1, 0.1, 10.0), (2, 0.2, 30.0), (3, 0.3, 20.0), (4, 0.4, 40.0))
    r = interpolate_cost_to_score(pts, 25.0)
    assert r.lower_eflops == 0.1 and r.upper_eflops == 0.2


def test_lower_is_better_metric():
    pts = curve((1, 0.1, 5.0), (2, 0.2, 3.0), (3, 0.3, 1.0))
    r = interpolate_cost_to_score(pts, 2.0, higher_is_better=False)
    assert r.lower_eflops == 0.2 and r.upper_eflops == 0.3
    assert r.steps == 2.5


def test_non_monotone_steps_rejected():
    with pytest.raises(CurveError, match="non-monotone"):
        interpolate_cost_to_score(curve((5, 1.0, 1.0), (5, 2.0, 2.0)), 1.5)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 40)), min_size=2, max_size=8),
       st.integers(0, 3))
@settings(max_examples=80, deadline=None)
def test_interpolation_exact_on_piecewise_linear_curves(deltas, quarter):
    # dyadic-rational inputs make the linear interpolation exactly representable;
    # compare against an independent Fraction-arithmetic oracle with no tolerance
    step, ef, val = 0, Fraction(0), Fraction(0)
    pts = []
    values = []
    for dstep, dval in deltas:
        step += 1000 + dstep
        ef += Fraction(step, 4) - ef  # eflops proportional to step/4
        val += dval
        pts.append(CurvePoint(step, float(Fraction(step, 4)), float(val)))
        values.append((step, Fraction(step, 4), val))
    i = len(values) // 2
    left_val = values[i - 1][2]
    right_val = values[i][2]
    target = left_val + Fraction(quarter, 4) * (right_val - left_val)
    if target <= left_val:  # crossing happens at or before the left checkpoint
        return
    (ls, le, lv), (rs, re, rv) = values[i - 1], values[i]
    frac = (target - lv) / (rv - lv)
    expect_step = ls + frac * (rs - ls)
    expect_ef = le + frac * (re - le)
    r = interpolate_cost_to_score(pts, float(target))
    assert r.steps == float(expect_step)
    assert r.eflops == float(expect_ef)


# -- near-max and speedups -----------------------------------------------------


def test_near_max_values():
    assert near_max_target(70.2) == pytest.approx(66.69, abs=0.01)
    assert near_max_target(100.0) == 95.0
    assert near_max_target(0.0) == 0.0


def test_speedup_single_language():
    r = speedup_report({"ar": 2.5}, {"ar": 1.0})
    assert r.per_language["ar"] == 2.5
    assert r.mean_of_ratios == 2.5


def test_speedup_identical_tables():
    days = {"a": 1.3, "b": 0.4}
    r = speedup_report(days, dict(days))
    assert all(v == 1.0 for v in r.per_language.values())
    assert r.mean_of_ratios == 1.0


def test_mean_of_ratios_differs_from_ratio_of_means():
    r = speedup_report({"x": 2.0, "y": 8.0}, {"x": 1.0, "y": 2.0})
    assert r.mean_of_ratios == 3.0
    assert r.ratio_of_means == pytest.approx(10.0 / 3.0)
    assert r.mean_of_ratios != r.ratio_of_means


def test_speedup_excludes_not_reached():
    r = speedup_report({"a": 2.0, "b": None}, {"a": 1.0, "b": 3.0})
    assert r.excluded == ("b",)
    assert r.mean_of_ratios == 2.0


def test_days_conversion():
    assert eflops_to_days(EFLOPS_PER_V100_DAY) == 1.0


def test_appendix_numbers_bundle():
    g = appendix_golden_numbers()
    assert g["pretrain_l12_eflops"] == pytest.approx(78.8, abs=0.05)
    assert g["interp_example_steps"] == 7500.0
    assert g["near_max_example"] == pytest.approx(66.69, abs=0.01)
    assert g["speedup_example"] == 2.5
