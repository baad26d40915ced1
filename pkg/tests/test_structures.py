"""Structure tests: covariance values, parameter derivatives, and the
sparse gather/scatter maps against dense matrices."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagaboost.structures import (GpStructure, GroupedStructure,
                                  chol_with_jitter, make_structure)


def test_grouped_basic():
    s = GroupedStructure([0, 1, 1, 2, 0])
    assert s.n == 5 and s.m == 3
    np.testing.assert_array_equal(s.apply_z([10.0, 20.0, 30.0]),
                                  [10, 20, 20, 30, 10])
    np.testing.assert_array_equal(s.apply_zt(np.ones(5)), [2, 2, 1])


def test_grouped_validation():
    with pytest.raises(ValueError):
        GroupedStructure([[0, 1]])
    with pytest.raises(ValueError):
        GroupedStructure([0, 1.5])
    with pytest.raises(ValueError):
        GroupedStructure([0, 3], m=2)
    with pytest.raises(ValueError):
        GroupedStructure([0, 1]).check_theta([0.0])
    with pytest.raises(ValueError):
        GroupedStructure([0, 1]).check_theta([1.0, 1.0])


def test_grouped_dense_consistency():
    rng = np.random.default_rng(0)
    s = GroupedStructure(rng.integers(0, 7, size=40))
    Z = s.dense_z()
    v = rng.standard_normal(s.m)
    np.testing.assert_allclose(s.apply_z(v), Z @ v)
    u = rng.standard_normal(s.n)
    np.testing.assert_allclose(s.apply_zt(u), Z.T @ u)
    np.testing.assert_allclose(s.dense_sigma([2.5]), 2.5 * np.eye(s.m))


def test_gp_covariance_values():
    # two points at distance 1: Sigma_01 = sigma2 * exp(-1/rho)
    s = GpStructure([[0.0, 0.0], [1.0, 0.0]])
    Sigma = s.build_sigma([2.0, 0.5])
    assert Sigma[0, 1] == pytest.approx(2.0 * np.exp(-2.0), rel=1e-12)
    assert Sigma[0, 0] == pytest.approx(2.0 * (1.0 + s.jitter), rel=1e-12)
    C = s.cross_covariance([2.0, 0.5], [[0.5, 0.0]])
    assert C[0, 0] == pytest.approx(2.0 * np.exp(-1.0), rel=1e-12)


def test_gp_dsigma_finite_differences():
    rng = np.random.default_rng(1)
    s = GpStructure(rng.uniform(size=(8, 2)))
    theta = np.array([1.3, 0.4])
    h = 1e-6
    for k in range(2):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fd = (s.build_sigma(tp) - s.build_sigma(tm)) / (2 * h)
        np.testing.assert_allclose(s.dsigma_dtheta(theta, k), fd,
                                   rtol=1e-5, atol=1e-9)


def test_gp_validation():
    s = GpStructure([[0.0], [1.0]])
    with pytest.raises(ValueError):
        s.check_theta([1.0])
    with pytest.raises(ValueError):
        s.check_theta([1.0, -0.1])
    with pytest.raises(ValueError):
        GpStructure([0.0, 1.0])


def test_make_structure():
    assert make_structure("grouped", group_index=[0, 1]).kind == "grouped"
    assert make_structure("gp", locations=[[0.0], [1.0]]).kind == "gp"
    with pytest.raises(ValueError):
        make_structure("grouped")
    with pytest.raises(ValueError):
        make_structure("spline", locations=[[0.0]])


def test_chol_with_jitter_recovers_spd():
    A = np.array([[4.0, 2.0], [2.0, 1.0]])  # singular
    L = chol_with_jitter(A, 1.0)
    np.testing.assert_allclose(L @ L.T, A, atol=1e-3)
    with pytest.raises(np.linalg.LinAlgError):
        chol_with_jitter(np.array([[1.0, 0.0], [0.0, -1.0]]), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=30),
       st.floats(min_value=0.01, max_value=10.0))
def test_grouped_quadratic_form_property(ids, sigma2):
    # v' Z' Z v computed sparsely equals the dense quadratic form
    s = GroupedStructure(np.asarray(ids), m=6)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(6)
    sparse = float(np.sum(s.apply_z(v) ** 2))
    dense = float(v @ s.dense_z().T @ s.dense_z() @ v)
    assert sparse == pytest.approx(dense, rel=1e-10, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=100))
def test_gp_sigma_is_spd_property(n, seed):
    rng = np.random.default_rng(seed)
    s = GpStructure(rng.uniform(size=(n, 2)))
    Sigma = s.build_sigma([1.0, 0.3])
    np.testing.assert_allclose(Sigma, Sigma.T, rtol=1e-12)
    w = np.linalg.eigvalsh(Sigma)
    assert np.all(w > 0)
