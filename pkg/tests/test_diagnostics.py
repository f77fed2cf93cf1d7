from dataclasses import replace

import numpy as np
import pytest

from mmvsde.config import load
from mmvsde.diagnostics import (TestFunction, aldous_modulus, cepa_report, check_pair_in_A, dyadic_blocks,
                                fit_discretization_constant, fit_majorant, flip_increment, martingale_defect,
                                martingale_increments, osgood_majorant)
from mmvsde.errors import UsageError
from mmvsde.monotone import graph_sample
from mmvsde.solver import simulate


def run(name, n=None, **kw):
    sc = load(name, particles=n) if n else load(name)
    scheme = replace(sc.scheme, record="full", **kw)
    return sc, simulate(sc.kernel, sc.operator, sc.levy, scheme, sc.seeds[0])


def test_dyadic_blocks_cover_every_level():
    v = np.arange(1.0, 6.0)
    levels = dict(dyadic_blocks(v))
    assert levels[0].tolist() == [1, 2, 3, 4, 5]
    assert levels[1].tolist() == [3, 7, 5]
    assert levels[2].tolist() == [10, 5]
    assert levels[3].tolist() == [15]
    assert max(levels) == 3


@pytest.mark.parametrize("fn", [TestFunction("bump", (0.3, -0.2), 1.5),
                                TestFunction("quadratic_window", (0.0, 0.5), 2.0)], ids=lambda f: f.kind)
def test_test_function_derivatives_match_finite_differences(fn):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (40, 2))
    eps = 1e-6
    eye = np.eye(2)
    fd_grad = np.stack([(fn.value(x + eps * e) - fn.value(x - eps * e)) / (2 * eps) for e in eye], axis=1)
    assert np.max(np.abs(fd_grad - fn.grad(x))) < 1e-7
    fd_hess = np.stack([(fn.grad(x + eps * e) - fn.grad(x - eps * e)) / (2 * eps) for e in eye], axis=2)
    assert np.max(np.abs(fd_hess - fn.hess(x))) < 1e-6
    far = np.array([[10.0, 10.0]])
    assert fn.value(far)[0] == 0 and np.all(fn.grad(far) == 0) and np.all(fn.hess(far) == 0)


def test_test_function_label_and_errors():
    assert TestFunction("bump", (1.0, 0.5), 2.0).label() == "bump(c=[1,0.5],r=2)"
    with pytest.raises(UsageError):
        TestFunction("cosine")
    with pytest.raises(UsageError):
        TestFunction(radius=0.0)


def test_pair_check_zero_operator_margin_is_zero():
    sc, ens = run("brownian", 200)
    xs, xst = graph_sample(sc.operator, 10, 2.0, 0)
    rep = check_pair_in_A(ens, xs, xst)
    assert rep.passed and abs(rep.worst_margin) < 1e-12


def test_pair_check_reflected_passes_and_flip_fails():
    sc, ens = run("reflected_bm", 500, h=1e-2)
    xs, xst = graph_sample(sc.operator, 50, 2.0, 1)
    assert check_pair_in_A(ens, xs, xst).passed
    bad = flip_increment(ens)
    rep = check_pair_in_A(bad, xs, xst)
    assert not rep.passed and rep.worst_margin < -1e-9


def test_cepa_constants_on_box():
    sc, ens = run("box_2d", 300)
    rep = cepa_report(ens, [0.5, 0.5], sc.operator)
    assert rep.kappa1 > 0 and rep.kappa2 >= 0 and rep.kappa3 >= 0
    lhs_bound = rep.kappa1 * rep.variation - rep.kappa2 * rep.distance_integral - rep.kappa3 * rep.duration
    assert np.all(rep.lhs >= lhs_bound - 1e-9)
    with pytest.raises(UsageError):
        cepa_report(ens, [0.0, 0.0], sc.operator)


def test_cepa_zero_operator_is_trivial():
    _, ens = run("brownian", 100)
    assert cepa_report(ens, [0.0]).method == "trivial"


def test_aldous_frozen_is_zero_and_monotone():
    _, ens = run("frozen")
    rep = aldous_modulus(ens, [0.2, 0.1, 0.05], 0.5)
    assert rep.modulus == [0.0, 0.0, 0.0]
    _, ens = run("brownian", 500)
    rep = aldous_modulus(ens, [0.02, 0.05, 0.1, 0.2, 0.5], 0.3)
    assert all(b >= a for a, b in zip(rep.modulus, rep.modulus[1:]))
    assert all(b <= a for a, b in zip(rep.tail, rep.tail[1:]))
    with pytest.raises(UsageError):
        aldous_modulus(ens, [0.0], 0.5)


def test_martingale_frozen_is_exactly_zero():
    sc, ens = run("frozen")
    f = TestFunction("bump", (0.0, 0.0), 2.0)
    assert np.all(martingale_increments(ens, f, sc.kernel, sc.levy) == 0)


def test_martingale_brownian_defect_within_fitted_constant():
    sc, ens = run("brownian", 5000)
    fns = [TestFunction("bump", (0.0,), 1.5), TestFunction("quadratic_window", (0.2,), 2.0)]
    pairs = [(0.0, 0.5), (0.25, 1.0), (0.5, 1.0)]
    table = martingale_defect(ens, fns, sc.kernel, sc.levy, pairs)
    c = fit_discretization_constant(table, ens.h)
    assert np.isfinite(c) and c >= 0
    assert table.excess(ens.h, c) <= 1e-12
    with pytest.raises(UsageError):
        martingale_defect(ens, fns, sc.kernel, sc.levy, [(0.5, 0.5)])


def test_martingale_generator_forms_agree_without_jumps():
    sc, ens = run("brownian", 300)
    f = TestFunction("bump", (0.0,), 1.5)
    a = martingale_increments(ens, f, sc.kernel, sc.levy, "paper")
    b = martingale_increments(ens, f, sc.kernel, sc.levy, "compensator")
    assert np.array_equal(a, b)


def test_osgood_majorant_closed_forms():
    t = np.linspace(0, 1, 11)
    _, y = osgood_majorant("linear", 0.7, 0.01, t_eval=t)
    assert np.max(np.abs(y - 0.01 * np.exp(0.7 * t))) < 1e-8 * 0.01 * np.e
    _, y = osgood_majorant("linear", 2.0, 0.0, t_eval=t)
    assert np.all(y == 0)
    # y' = C (y - y ln y) for y < 1/e: ln y = 1 - (1 - ln y0) exp(-C t)
    y0, C = 1e-4, 0.2
    _, y = osgood_majorant("linear_plus_log", C, y0, t_eval=t)
    want = np.exp(1 - (1 - np.log(y0)) * np.exp(-C * t))
    assert want.max() < 1 / np.e
    assert np.max(np.abs(y / want - 1)) < 1e-9
    with pytest.raises(UsageError):
        osgood_majorant("cubic", 1.0, 0.1)


def test_fit_majorant_dominates_data():
    t = np.linspace(0, 1, 51)
    e = 1e-3 * (1 + 3 * t**2)
    fit = fit_majorant(t, e)
    assert fit.below and fit.C > 0
    assert np.all(e <= fit.majorant * (1 + 1e-9))
    zero = fit_majorant(t, np.zeros_like(t))
    assert zero.below and zero.C == 0
