import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lumpflow.constitutive import (
    AUXILIARY,
    FluidModel,
    brooks_corey_pc,
    eval_aux,
    evaluate,
    make_power_law_model,
    validation_model,
    validation_porosity,
)
from lumpflow.errors import InvalidArgument, ModelError

unit = st.floats(0.0, 1.0, allow_nan=False)
VALIDATION = validation_model()


def test_fractional_flow_at_half(model):
    assert model.f_w(0.5) == pytest.approx(1.0 / 1.1, rel=1e-14)
    assert model.f_w(0.5) == pytest.approx(0.90909, abs=1e-5)
    assert model.f_o(0.5) == pytest.approx(0.1 / 1.1, rel=1e-14)


def test_mobility_endpoints(model):
    assert model.eta_w(0.0) == 0.0 and model.eta_w(1.0) == 4.0
    assert model.eta_o(0.0) == pytest.approx(0.4) and model.eta_o(1.0) == 0.0
    assert model.eta_star == pytest.approx(4 * 0.4 / 4.4, rel=1e-3)


def test_constant_extension_outside_unit_interval(model):
    assert model.eta_w(1.5) == model.eta_w(1.0)
    assert model.pc(-0.2) == model.pc(0.0)
    assert model.pc_prime(1.1) == 0.0 and model.pc_prime(-0.1) == 0.0
    assert model.eta_w_prime(2.0) == 0.0


def test_capillary_pressure_is_c1_at_switch():
    pc, dpc, _ = brooks_corey_pc(50.0, 0.05)
    eps = 1e-9
    assert pc(0.05 - eps) == pytest.approx(pc(0.05 + eps), rel=1e-7)
    assert dpc(0.05 - eps) == pytest.approx(dpc(0.05 + eps), rel=1e-6)
    assert pc(1.0) == pytest.approx(50.0)
    assert pc(0.05) == pytest.approx(50.0 / np.sqrt(0.05))


@given(unit, unit)
def test_monotonicity(a, b):
    m = VALIDATION
    lo, hi = min(a, b), max(a, b)
    assert m.eta_w(lo) <= m.eta_w(hi)
    assert m.eta_o(lo) >= m.eta_o(hi)
    assert m.pc(lo) >= m.pc(hi)
    assert m.f_w(lo) <= m.f_w(hi) + 1e-15


@given(unit)
def test_fractional_flows_sum_to_one(s):
    m = VALIDATION
    assert m.f_w(s) + m.f_o(s) == pytest.approx(1.0, abs=1e-15)


def test_derivatives_against_finite_differences(model):
    s = np.linspace(0.1, 0.9, 17)
    h = 1e-6
    for f, df in ((model.eta_w, model.eta_w_prime), (model.eta_o, model.eta_o_prime),
                  (model.pc, model.pc_prime), (model.pc_prime, model.pc_second),
                  (model.f_w, model.f_w_prime)):
        fd = (f(s + h) - f(s - h)) / (2 * h)
        np.testing.assert_allclose(df(s), fd, rtol=1e-6, atol=1e-8)


def test_aux_zero_values(model):
    for which in ("g", "p_wg", "p_og", "G"):
        assert model.aux(which, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert model.aux("g_c", 1.0) == pytest.approx(0.0, abs=1e-12)


def test_global_pressure_split(model):
    # p_wg + p_og = pc - pc(0), since f_w + f_o = 1
    s = np.linspace(0.0, 1.0, 41)
    lhs = model.aux("p_wg", s) + model.aux("p_og", s)
    np.testing.assert_allclose(lhs, model.pc(s) - model.pc(0.0), rtol=1e-7, atol=1e-7)


def test_aux_table_matches_quadrature(model):
    s = np.array([0.01, 0.05, 0.2, 0.5, 0.77, 0.999])
    for which in AUXILIARY:
        np.testing.assert_allclose(model.aux(which, s), model.aux(which, s, exact=True), rtol=1e-7, atol=1e-9)


def test_aux_G_closed_form(model):
    # G(s) = int_0^s (f_w - f_o) = 2 int f_w - s
    from scipy.integrate import quad

    for s in (0.3, 0.6, 1.0):
        ref = quad(lambda x: 2 * model.f_w(x) - 1.0, 0.0, s, epsabs=1e-13)[0]
        assert model.aux("G", s) == pytest.approx(ref, rel=1e-8)


def test_g_is_nondecreasing(model):
    s = np.linspace(0.0, 1.0, 201)
    assert np.all(np.diff(model.aux("g", s)) >= -1e-12)


def test_wrappers_and_unknown_names(model):
    assert evaluate(model, "f_w", 0.5) == model.f_w(0.5)
    assert eval_aux(model, "G", 0.5) == model.aux("G", 0.5)
    with pytest.raises(InvalidArgument):
        evaluate(model, "nope", 0.5)
    with pytest.raises(InvalidArgument):
        eval_aux(model, "nope", 0.5)


def test_model_error_for_degenerate_total_mobility():
    with pytest.raises(ModelError):
        FluidModel(lambda s: np.asarray(s) ** 2, lambda s: (1 - np.asarray(s)) ** 2 * 0 + 0 * s,
                   lambda s: 1 - np.asarray(s), lambda s: -np.ones_like(np.asarray(s, float)))


def test_model_error_for_nonmonotone_pc():
    with pytest.raises(ModelError):
        FluidModel(lambda s: 1 + 0 * np.asarray(s), lambda s: 1 + 0 * np.asarray(s),
                   lambda s: np.asarray(s), lambda s: np.ones_like(np.asarray(s, float)))


def test_pc_second_missing():
    m = FluidModel(lambda s: 1 + np.asarray(s), lambda s: 2 - np.asarray(s),
                   lambda s: 1 - np.asarray(s), lambda s: -np.ones_like(np.asarray(s, float)))
    with pytest.raises(ModelError):
        m.pc_second(0.5)


def test_power_law_reproduces_validation_mobilities(model):
    m = make_power_law_model(2, 2, 0.125, 0.125, 0.5, 1.0, 0.5, k_w=4.0, k_o=0.4)
    s = np.linspace(0, 1, 11)
    np.testing.assert_allclose(m.eta_w(s), model.eta_w(s), rtol=1e-14)
    np.testing.assert_allclose(m.eta_o(s), model.eta_o(s), rtol=1e-14)


def test_power_law_pc_consistency():
    m = make_power_law_model(2, 3, 0.5, 0.5, 2.0, 1.5, 0.5, offset=1.0)
    assert m.pc(1.0) == pytest.approx(1.0, abs=1e-14)
    s = np.linspace(0.1, 0.9, 9)
    h = 1e-6
    np.testing.assert_allclose(m.pc_prime(s), (m.pc(s + h) - m.pc(s - h)) / (2 * h), rtol=1e-6)


def test_power_law_bracket_violations():
    with pytest.raises(InvalidArgument, match="k_w"):
        make_power_law_model(2, 2, 0.5, 0.5, 1.0, 1.0, 0.5, k_w=4.0)
    with pytest.raises(InvalidArgument, match="theta_w"):
        make_power_law_model(0.5, 2, 0.5, 0.5, 1.0, 1.0, 0.5)
    with pytest.raises(InvalidArgument, match="c ="):
        make_power_law_model(2, 2, 0.5, 0.5, 1.0, 1.0, 0.5, c=5.0)


def test_validation_porosity():
    assert validation_porosity(0.0, 0.0) == pytest.approx(0.2)
    assert validation_porosity(1.0, 1.0) == pytest.approx(0.4)
