import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faultfilter.linop import (
    DimensionError,
    HermiticityError,
    check_density_matrix,
    dag,
    destroy,
    expect,
    identity,
    is_hermitian,
    lindblad_heisenberg,
    lindblad_schrodinger,
    matrix_from_json,
    matrix_to_json,
    sigma_minus,
    sigma_plus,
    sigma_x,
    sigma_y,
    sigma_z,
    tensor,
)

from oracles import lindblad_scalar

E = np.diag([1.0, 0.0]).astype(complex)
G = np.diag([0.0, 1.0]).astype(complex)


def test_tensor_identity():
    assert np.array_equal(tensor(identity(2), identity(2)), identity(4))


def test_tensor_sigma_z_identity():
    assert np.array_equal(tensor(sigma_z(), identity(2)), np.diag([1, 1, -1, -1]))


def test_tensor_ladder_single_entry():
    out = tensor(sigma_minus(), sigma_plus())
    expected = np.zeros((4, 4))
    expected[2, 1] = 1
    assert np.array_equal(out, expected)


def test_tensor_index_formula():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 2))
    out = tensor(a, b)
    m, k = b.shape
    for i in range(2):
        for j in range(3):
            for p in range(m):
                for q in range(k):
                    assert out[i * m + p, j * k + q] == a[i, j] * b[p, q]


def test_tensor_rejects_vectors():
    with pytest.raises(DimensionError):
        tensor(np.ones(2), np.eye(2))


def test_ladder_conventions():
    up = np.array([1, 0])
    down = np.array([0, 1])
    assert np.array_equal(sigma_minus() @ up, down)
    assert np.array_equal(sigma_plus() @ sigma_minus() @ up, up)
    assert np.allclose(sigma_x() @ sigma_y(), 1j * sigma_z())
    a = destroy(4)
    assert np.allclose(np.diag(dag(a) @ a), [0, 1, 2, 3])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_generator_annihilates_identity(n):
    rng = np.random.default_rng(n)
    H = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    H = H + dag(H)
    L = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    assert np.abs(lindblad_heisenberg(H, L, np.eye(n))).max() < 1e-13


def test_generator_ancilla_decay():
    lam = 0.7 - 0.3j
    X = sigma_plus() @ sigma_minus()
    out = lindblad_heisenberg(np.zeros((2, 2)), lam * sigma_minus(), X)
    assert np.allclose(out, -abs(lam) ** 2 * X, atol=1e-14)


def test_generator_precession():
    out = lindblad_heisenberg(sigma_z(), np.zeros((2, 2)), sigma_x())
    assert np.allclose(out, -2 * sigma_y(), atol=1e-14)


def test_generator_amplitude_damping_of_sigma_z():
    out = lindblad_heisenberg(np.zeros((2, 2)), sigma_minus(), sigma_z())
    assert np.allclose(out, -(np.eye(2) + sigma_z()), atol=1e-14)


def test_adjoint_zero_generator():
    rho = np.array([[0.6, 0.2j], [-0.2j, 0.4]])
    assert np.abs(lindblad_schrodinger(np.zeros((2, 2)), np.zeros((2, 2)), rho)).max() == 0


def test_adjoint_amplitude_decay():
    out = lindblad_schrodinger(np.zeros((2, 2)), sigma_minus(), E)
    assert np.allclose(out, G - E, atol=1e-14)


def test_generator_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    H = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    H = H + dag(H)
    L = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    X = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    assert np.allclose(lindblad_heisenberg(H, L, X), lindblad_scalar(H, L, X), atol=1e-13)


def test_generator_rejects_non_hermitian_h():
    with pytest.raises(HermiticityError):
        lindblad_heisenberg(sigma_minus(), sigma_minus(), sigma_z())


def test_generator_rejects_dimension_mismatch():
    with pytest.raises(DimensionError):
        lindblad_schrodinger(np.zeros((2, 2)), np.zeros((3, 3)), np.eye(2))


def test_generator_broadcasts():
    rng = np.random.default_rng(9)
    rho = rng.standard_normal((5, 2, 2)) + 0j
    out = lindblad_schrodinger(sigma_z(), sigma_minus(), rho)
    for k in range(5):
        assert np.allclose(out[k], lindblad_schrodinger(sigma_z(), sigma_minus(), rho[k]))


def test_expect_examples():
    assert expect(np.eye(3) / 3, np.eye(3)) == pytest.approx(1)
    assert expect(E, sigma_z()) == pytest.approx(1)
    rho = 0.5 * (np.eye(2) + 0.6 * sigma_x())
    assert expect(rho, sigma_x()) == pytest.approx(0.6)


def test_expect_dimension_mismatch():
    with pytest.raises(DimensionError):
        expect(np.eye(2), np.eye(3))


def test_check_density_matrix():
    check_density_matrix(np.eye(2) / 2)
    with pytest.raises(ValueError):
        check_density_matrix(np.eye(2))
    with pytest.raises(ValueError):
        check_density_matrix(np.diag([1.5, -0.5]))
    with pytest.raises(HermiticityError):
        check_density_matrix(np.array([[0.5, 0.1], [0.3, 0.5]]))


def test_json_round_trip():
    a = np.array([[1 + 2j, -0.5], [0.25j, 3]])
    assert np.array_equal(matrix_from_json(matrix_to_json(a)), a)
    assert matrix_to_json(a)[0][0] == [1.0, 2.0]


def test_json_rejects_flat_lists():
    with pytest.raises(DimensionError):
        matrix_from_json([[1, 2], [3, 4]])


# -- properties --------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def operators(draw, n=None):
    n = n or draw(st.integers(2, 4))
    re = draw(arrays(float, (n, n), elements=finite))
    im = draw(arrays(float, (n, n), elements=finite))
    return re + 1j * im


@st.composite
def generator_inputs(draw):
    n = draw(st.integers(2, 4))
    A = draw(operators(n))
    return A + dag(A), draw(operators(n)), draw(operators(n)), draw(operators(n))


@settings(max_examples=60, deadline=None)
@given(generator_inputs())
def test_duality_property(args):
    H, L, rho, X = args
    lhs = np.trace(rho @ lindblad_heisenberg(H, L, X))
    rhs = np.trace(lindblad_schrodinger(H, L, rho) @ X)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=60, deadline=None)
@given(generator_inputs())
def test_adjoint_is_trace_free(args):
    H, L, rho, _ = args
    scale = 1 + np.abs(L).max() ** 2 * np.abs(rho).max()
    assert abs(np.trace(lindblad_schrodinger(H, L, rho))) <= 1e-12 * scale * 10


@settings(max_examples=60, deadline=None)
@given(generator_inputs())
def test_generator_preserves_hermiticity(args):
    H, L, A, _ = args
    X = A + dag(A)
    assert is_hermitian(lindblad_heisenberg(H, L, X), atol=1e-12 * (1 + np.abs(X).max()) * 100)


@settings(max_examples=40, deadline=None)
@given(operators(2), operators(3), operators(2))
def test_tensor_bilinear_and_associative(a, b, c):
    assert np.allclose(tensor(tensor(a, b), c), tensor(a, tensor(b, c)))
    assert np.allclose(tensor(a + c, b), tensor(a, b) + tensor(c, b))
