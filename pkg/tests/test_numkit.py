import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trexlab import numkit


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    np.testing.assert_allclose(numkit.matmul(a, b), triple_loop(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        numkit.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_l2_normalize_zero_row_stays_finite():
    out = numkit.l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


def test_precision_context_restores():
    before = numkit.get_dtype()
    with numkit.precision("float64"):
        assert numkit.get_dtype() == np.float64
    assert numkit.get_dtype() == before
    with pytest.raises(ValueError):
        numkit.set_precision("float16")


@pytest.mark.parametrize("d", [1, 2, 5, 16, 40])
def test_sym_eigh_reconstructs(d):
    rng = np.random.default_rng(d)
    a = rng.standard_normal((d, d))
    s = a + a.T
    w, v = numkit.sym_eigh(s)
    assert np.all(np.diff(w) <= 0)
    recon = v @ np.diag(w) @ v.T
    assert np.linalg.norm(recon - s) <= 1e-4 * max(np.linalg.norm(s), 1e-12)
    np.testing.assert_allclose(v.T @ v, np.eye(d), atol=1e-10)
    # independent LAPACK route as a second opinion
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(s))[::-1], atol=1e-9)


def test_sym_eigh_diagonal_and_zero():
    w, v = numkit.sym_eigh(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(w, [3.0, 2.0, 1.0])
    w, _ = numkit.sym_eigh(np.zeros((3, 3)))
    np.testing.assert_allclose(w, 0.0)


def test_sym_eigh_rejects_asymmetric():
    with pytest.raises(numkit.ContractError):
        numkit.sym_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(numkit.ContractError):
        numkit.sym_eigh(np.ones((2, 3)))


def test_logdet_determinant_lemma():
    # det(I + c x x^T) = 1 + c ||x||^2
    rng = np.random.default_rng(0)
    x = rng.standard_normal(6)
    c = 0.7
    got = numkit.logdet_psd(np.eye(6) + c * np.outer(x, x))
    assert got == pytest.approx(np.log1p(c * x @ x), abs=1e-10)


def test_logdet_rejects_non_psd_shift():
    with pytest.raises(numkit.ContractError):
        numkit.logdet_psd(np.diag([1.0, 0.5]))


def test_pearson_conventions():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert numkit.pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert numkit.pearson(a, -a) == pytest.approx(-1.0)
    assert numkit.pearson(a, np.ones(4)) == 0.0
    with pytest.raises(numkit.ContractError):
        numkit.pearson(a, a[:3])


def test_correlation_matrix_flags_constant_columns():
    x = np.array([[1.0, 5.0, 2.0], [2.0, 5.0, 4.0], [3.0, 5.0, 7.0]])
    corr, degenerate = numkit.correlation_matrix(x)
    assert degenerate.tolist() == [False, True, False]
    assert corr[1, 1] == 0.0
    assert corr[0, 2] == pytest.approx(numkit.pearson(x[:, 0], x[:, 2]))
