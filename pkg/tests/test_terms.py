import numpy as np
import pytest
from hypothesis import given, strategies as st

from qact import terms as T
from qact.errors import DomainError


def test_named_keys_round_trip():
    for name in T.ANSATZ_1D:
        assert T.term_name(T.make_term(name, 1), 1) == name
    for name in T.ANSATZ_2D:
        assert T.term_name(T.make_term(name, 2), 2) == name


def test_key_forms_agree():
    assert T.make_term("v-2", 1) == T.make_term(-2, 1) == T.make_term((-2,), 1)
    assert T.make_term("v2", 2) == T.make_term(((2, 0), (0, 2)), 2)


@pytest.mark.parametrize("key,dim", [("w2", 1), ("v99", 2), (3, 2), ((1, 2, 3), 2)])
def test_bad_keys(key, dim):
    with pytest.raises(DomainError):
        T.make_term(key, dim)


def test_duplicate_terms_rejected():
    with pytest.raises(DomainError):
        T.normalize_terms({"v2": 1.0, 2: 3.0}, 1)


def test_singular_domain():
    terms = T.normalize_terms({"v-2": 1.0}, 1)
    assert T.is_singular(terms)
    with pytest.raises(DomainError):
        T.check_domain(terms, (np.array([0.5, 0.0]),))


coef = st.floats(-3, 3, allow_nan=False)
pt = st.floats(-2, 2, allow_nan=False)


@given(coef, coef, coef, coef, pt, pt)
def test_gradient_and_hessian_match_finite_differences(c2, c22, c13, c4, x, y):
    terms = T.normalize_terms({"v2": c2, "v22": c22, "v13": c13, "v4": c4}, 2)
    h = 1e-5
    q = (np.array(x), np.array(y))
    g = T.gradient(terms, q)
    H = T.hessian(terms, q)
    for a in range(2):
        e = np.eye(2)[a] * h
        up = T.evaluate(terms, (q[0] + e[0], q[1] + e[1]))
        dn = T.evaluate(terms, (q[0] - e[0], q[1] - e[1]))
        assert g[a] == pytest.approx((up - dn) / (2 * h), abs=1e-5 * (1 + abs(g[a])))
        gu = T.gradient(terms, (q[0] + e[0], q[1] + e[1]))
        gd = T.gradient(terms, (q[0] - e[0], q[1] - e[1]))
        np.testing.assert_allclose(H[a], (gu - gd) / (2 * h), atol=1e-4 * (1 + np.abs(H).max()))
    np.testing.assert_allclose(H, H.T)


def test_evaluate_known_values():
    terms = T.normalize_terms({"v2": 0.5, "v22": 0.05, "v44": 2.0}, 2)
    x, y = 1.5, -0.5
    expect = 0.5 * (x**2 + y**2) + 0.05 * x**2 * y**2 + 2.0 * x**4 * y**4
    assert float(T.evaluate(terms, (np.array(x), np.array(y)))) == pytest.approx(expect)
