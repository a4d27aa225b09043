import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrgrad.core import (
    GradientSet,
    InvalidInputError,
    NumericTolerances,
    gram,
    make_rng,
    normalize,
    pinv_rows_times_ones,
    pseudoinverse_rows_times_ones,
    unit,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3, 4], 0.0), [0.6, 0.8], atol=1e-15)
    assert np.all(normalize([0, 0, 0], 1e-12) == 0)
    np.testing.assert_allclose(normalize([1, 0], 1.0), [0.5, 0.0], atol=1e-15)


def test_normalize_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        normalize([1.0, np.nan])
    with pytest.raises(InvalidInputError):
        normalize([np.inf, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.integers(1, 12), elements=finite))
def test_normalize_shrinks_and_keeps_direction(v):
    out = normalize(v, 1e-12)
    n = np.linalg.norm(v)
    if n > 0:
        assert np.linalg.norm(out) < 1
    if n > 1e-3:
        assert abs(float(out @ v) / (np.linalg.norm(out) * n) - 1) < 1e-12


def test_unit_maps_zero_to_zero():
    assert np.all(unit(np.zeros(3)) == 0)
    np.testing.assert_allclose(np.linalg.norm(unit([1e-9, 2e-9])), 1.0, rtol=1e-15)


def test_gram_examples():
    np.testing.assert_array_equal(gram(GradientSet(np.eye(2))), np.eye(2))
    np.testing.assert_array_equal(gram(GradientSet.from_columns([[1, 0], [-1, 0]])), [[1, -1], [-1, 1]])
    c, s = math.cos(math.radians(120)), math.sin(math.radians(120))
    np.testing.assert_allclose(gram(GradientSet.from_columns([[1, 0], [c, s]])), [[1, -0.5], [-0.5, 1]], atol=1e-15)


def test_gram_is_psd_and_symmetric():
    rng = make_rng(3)
    for _ in range(50):
        G = GradientSet(rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(1, 8)))) * 10)
        A = gram(G)
        assert np.max(np.abs(A - A.T)) <= 1e-14
        np.testing.assert_allclose(np.diag(A), G.norms**2, rtol=1e-13)
        assert np.linalg.eigvalsh(A).min() >= -1e-10 * np.trace(A)


def test_gradient_set_cached_fields():
    G = GradientSet(np.array([[3.0, 0.0], [4.0, 0.0]]))
    np.testing.assert_allclose(G.norms, [5.0, 0.0])
    assert G.m == 2 and G.D == 2
    assert list(G.active) == [True, False]
    assert np.all(G.directions[:, 1] == 0)
    assert np.linalg.norm(G.units[:, 0]) >= 1 - 2 * 1e-12 / 5
    with pytest.raises(ValueError):
        G.matrix[0, 0] = 1.0


def test_gradient_set_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        GradientSet(np.array([[np.nan]]))
    with pytest.raises(InvalidInputError):
        GradientSet(np.zeros((0, 2)))
    with pytest.raises(InvalidInputError):
        GradientSet(np.ones((2, 2)), names=("a",))


def test_json_round_trip():
    G = GradientSet(np.array([[1.0, 0.1], [2.0, -3.0], [0.5, 1e-7]]), names=("a", "b"))
    back = GradientSet.from_json(G.to_json())
    assert np.array_equal(back.matrix, G.matrix)
    assert back.names == ("a", "b")
    doc = json.loads(G.to_json())
    assert doc["dim"] == 3 and doc["tasks"] == 2 and len(doc["gradients"]) == 2


@pytest.mark.parametrize(
    "doc",
    [
        {"gradients": [[1, 2], [3]]},
        {"gradients": []},
        {"gradients": [[1, 2]], "dim": 3},
        {"gradients": [[1, 2]], "tasks": 2},
        {"gradients": [[1, "x"]]},
        {"gradients": [[1, 2]], "extra": 1},
        {"gradients": [[1, 2]], "names": ["a", "b"]},
        [1, 2],
    ],
)
def test_json_schema_rejections(doc):
    with pytest.raises(InvalidInputError):
        GradientSet.from_dict(doc)


def test_json_invalid_text():
    with pytest.raises(InvalidInputError):
        GradientSet.from_json("{not json")


def test_tolerances_must_be_positive():
    with pytest.raises(InvalidInputError):
        NumericTolerances(delta=0.0)
    with pytest.raises(InvalidInputError):
        NumericTolerances(cone_zero_tol=-1.0)


def test_pinv_examples():
    M = np.eye(3)[:, :2]
    np.testing.assert_allclose(pseudoinverse_rows_times_ones(M), [1, 1, 0], atol=1e-15)
    u = unit([1.0, 2.0, -2.0])
    np.testing.assert_allclose(pseudoinverse_rows_times_ones(u[:, None]), u, atol=1e-15)
    c, s = math.cos(math.radians(60)), math.sin(math.radians(60))
    M = np.array([[1, c], [0, s]])
    x = pseudoinverse_rows_times_ones(M)
    proj = M.T @ x
    assert abs(proj[0] - proj[1]) < 1e-14


def test_pinv_zero_matrix_is_flagged():
    res = pinv_rows_times_ones(np.zeros((3, 2)))
    assert res.degenerate and not res.full_column_rank
    assert np.all(res.vector == 0)


def test_pinv_equal_projection_random():
    rng = make_rng(11)
    for _ in range(200):
        m = int(rng.integers(1, 7))
        D = int(rng.integers(m, 65))
        M = rng.standard_normal((D, m))
        M /= np.linalg.norm(M, axis=0)
        res = pinv_rows_times_ones(M)
        assert res.full_column_rank
        np.testing.assert_allclose(M.T @ res.vector, np.ones(m), rtol=1e-9)


def test_pinv_rank_deficient_is_not_full_rank():
    M = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    res = pinv_rows_times_ones(M)
    assert res.rank == 2 and not res.full_column_rank


def test_make_rng_streams_are_independent_of_new_consumers():
    a = make_rng(5, 1).standard_normal(4)
    make_rng(5, 2).standard_normal(100)
    assert np.array_equal(a, make_rng(5, 1).standard_normal(4))
    assert not np.array_equal(a, make_rng(5, 2).standard_normal(4))
