import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrmogen.bounds import (
    kl_divergence,
    mutual_information,
    run_bound_suite,
    verify_entropy_bound,
    verify_kl_bound,
)
from attrmogen.errors import ParameterError


def binary_entropy(p):
    return -(p * np.log(p) + (1 - p) * np.log(1 - p))


def test_uniform_a_marginal_is_tight():
    rng = np.random.default_rng(5)
    cond_s_given_a = rng.dirichlet(np.ones(5), size=4)  # 4 attribute values
    joint = (cond_s_given_a * 0.25).T  # rows S, columns A
    c = verify_entropy_bound(joint)
    assert c.holds and abs(c.slack) < 1e-9


def test_non_uniform_a_marginal_is_strict():
    joint = np.array([[0.5, 0.1], [0.1, 0.3]])
    c = verify_entropy_bound(joint)
    # slack equals ln|A| - H(A) with A-marginal (0.6, 0.4)
    assert c.slack == pytest.approx(np.log(2) - binary_entropy(0.6), abs=1e-12)
    assert c.slack > 1e-6


def test_point_mass_attribute():
    joint = np.array([[0.3, 0.0, 0.0], [0.7, 0.0, 0.0]])
    c = verify_entropy_bound(joint)
    assert c.lhs == pytest.approx(0.0, abs=1e-15)
    assert c.rhs == pytest.approx(np.log(3))


def test_kl_identical_conditionals_vanish():
    c = verify_kl_bound(np.tile([0.2, 0.5, 0.3], (3, 1)), np.array([0.2, 0.3, 0.5]))
    assert c.lhs == pytest.approx(0, abs=1e-15) and c.rhs == pytest.approx(0, abs=1e-15)


def test_kl_two_point_example():
    c = verify_kl_bound(np.array([[0.9, 0.1], [0.1, 0.9]]), np.array([0.5, 0.5]))
    # I(X;S) = ln 2 - H(0.9, 0.1): S-marginal is uniform
    assert c.lhs == pytest.approx(np.log(2) - binary_entropy(0.9), abs=1e-12)
    assert c.lhs == pytest.approx(0.3681, abs=1e-4)
    # E_x E_x' KL: two off-diagonal pairs of weight 1/4, each KL = 0.8 ln 9
    assert c.rhs == pytest.approx(0.5 * 0.8 * np.log(9), abs=1e-12)
    assert c.holds


def test_kl_single_x_is_tight():
    c = verify_kl_bound(np.array([[0.1, 0.2, 0.7]]), np.array([1.0]))
    assert abs(c.slack) < 1e-9


def test_kl_zero_support_flagged():
    c = verify_kl_bound(np.array([[0.5, 0.5], [1.0, 0.0]]), np.array([0.5, 0.5]))
    assert c.flagged and c.holds and np.isinf(c.rhs)
    assert np.isinf(kl_divergence([0.5, 0.5], [1.0, 0.0]))


def test_kl_rejects_non_distribution():
    with pytest.raises(ParameterError):
        verify_kl_bound(np.array([[0.5, 0.6]]), np.array([1.0]))


def test_mutual_information_independent_is_zero():
    joint = np.outer([0.2, 0.8], [0.1, 0.3, 0.6])
    assert mutual_information(joint) == pytest.approx(0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_entropy_bound_equality_iff_uniform_a(ns, na, seed, uniform):
    rng = np.random.default_rng(seed)
    pa = np.full(na, 1 / na) if uniform else rng.dirichlet(np.ones(na))
    joint = (rng.dirichlet(np.ones(ns), size=na) * pa[:, None]).T
    c = verify_entropy_bound(joint)
    assert c.holds
    gap = np.log(na) + np.sum(pa * np.log(pa))  # ln|A| - H(A)
    assert c.slack == pytest.approx(gap, abs=1e-9)
    if uniform or na == 1:
        assert abs(c.slack) < 1e-9
    elif gap > 1e-6:
        assert c.slack > 1e-9


def test_bound_suite_holds_everywhere():
    out = run_bound_suite(1000, 200, seed=0)
    for name in ("entropy_bound", "kl_bound"):
        assert out[name]["violations"] == 0
        assert out[name]["worst_slack"] >= -1e-9
    assert out["entropy_bound"]["trials"] == 1000 and out["kl_bound"]["trials"] == 200
