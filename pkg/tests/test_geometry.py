import numpy as np
import pytest
import sympy as sp

from finsler_holonomy.errors import DegenerateMetricError
from finsler_holonomy.geometry import (
    berwald_coefficients,
    christoffel_jet,
    connection_eval,
    curvature_vector,
    horizontal_lift,
    nonlinear_connection,
    riemann_tensor,
    spray_coeffs,
)
from finsler_holonomy.models import builtin_model, fundamental_tensor, indicatrix_sample

from test_models import QUARTIC


def sympy_levi_civita(metric, xs):
    """Christoffel symbols Gam[i][j][k] and Riemann Rm[i][l][j][k] with
    R(d_j, d_k) d_l = Rm^i_ljk d_i, from a sympy metric matrix."""
    n = len(xs)
    ginv = metric.inv()
    gam = [[[sp.simplify(sum(ginv[i, m] * (sp.diff(metric[m, j], xs[k]) + sp.diff(metric[m, k], xs[j])
                                           - sp.diff(metric[j, k], xs[m])) for m in range(n)) / 2)
             for k in range(n)] for j in range(n)] for i in range(n)]
    rm = [[[[sp.diff(gam[i][k][l], xs[j]) - sp.diff(gam[i][j][l], xs[k])
             + sum(gam[i][j][m] * gam[m][k][l] - gam[i][k][m] * gam[m][j][l] for m in range(n))
             for k in range(n)] for j in range(n)] for l in range(n)] for i in range(n)]
    return gam, rm


def _num(tensor, xs, point):
    f = sp.lambdify(xs, tensor, "numpy")
    return np.array(f(*point), dtype=float)


@pytest.fixture(scope="module")
def sphere_oracle():
    xs = sp.symbols("x1 x2")
    lam = 4 / (1 + xs[0] ** 2 + xs[1] ** 2) ** 2
    return xs, sympy_levi_civita(sp.eye(2) * lam, xs)


@pytest.mark.parametrize("x", [[0.0, 0.0], [0.4, -0.7], [1.5, 0.2]])
def test_sphere_connection_matches_christoffel_oracle(sphere2, sphere_oracle, x):
    xs, (gam, rm) = sphere_oracle
    G = _num(gam, xs, x)
    Rm = _num(rm, xs, x)
    y = indicatrix_sample(sphere2, x, 5, seed=2)
    c = connection_eval(sphere2, x, y)
    assert np.max(np.abs(c.G - 0.5 * np.einsum("ijk,sj,sk->si", G, y, y))) <= 1e-9
    assert np.max(np.abs(c.Gj - np.einsum("ijk,sk->sij", G, y))) <= 1e-9
    assert np.max(np.abs(c.Gjk - G)) <= 1e-9
    assert np.max(np.abs(c.R + np.einsum("iljk,sl->sijk", Rm, y))) <= 1e-9


def test_spray_at_origin_example(sphere2, sphere_oracle):
    xs, (gam, _) = sphere_oracle
    G = _num(gam, xs, [0.0, 0.0])
    y = np.array([1.0, 0.0])
    assert np.allclose(spray_coeffs(sphere2, [0, 0], y), 0.5 * np.einsum("ijk,j,k->i", G, y, y), atol=1e-9)


def test_levi_civita_route_matches_sympy():
    xs = sp.symbols("x1 x2")
    m = builtin_model("riemannian_diag", dim=2, diag=["1 + x2^2", "2 + x1*x2"])
    metric = sp.diag(1 + xs[1] ** 2, 2 + xs[0] * xs[1])
    gam, rm = sympy_levi_civita(metric, xs)
    p = [0.3, -0.4]
    assert np.allclose(christoffel_jet(m, p).value, _num(gam, xs, p), atol=1e-13)
    assert np.allclose(riemann_tensor(m, np.array(p)), _num(rm, xs, p), atol=1e-12)


def test_sphere_constant_curvature(sphere2, sphere3):
    for m, radius in ((sphere2, 1.0), (builtin_model("sphere", dim=2, radius=2.0), 2.0), (sphere3, 1.0)):
        n = m.dim
        x = np.linspace(0.1, 0.3, n)
        y = indicatrix_sample(m, x, 6, seed=1)
        g = fundamental_tensor(m, x, y).g
        K = 1.0 / radius**2
        for j in range(n):
            for k in range(j + 1, n):
                X, Y = np.eye(n)[j], np.eye(n)[k]
                r = curvature_vector(m, x, y, X, Y)
                expect = K * (np.einsum("sab,a,sb->s", g, X, y)[:, None] * Y
                              - np.einsum("sab,a,sb->s", g, Y, y)[:, None] * X)
                assert np.max(np.abs(r - expect)) <= 1e-12


def test_randers_curvature_matches_finite_differences(randers2):
    x = np.array([0.2, -0.1])
    y = indicatrix_sample(randers2, x, 4, seed=0)
    c = connection_eval(randers2, x, y)

    def dGj(h):
        out = []
        for k in range(2):
            e = np.eye(2)[k] * h
            out.append((nonlinear_connection(randers2, x + e, y) - nonlinear_connection(randers2, x - e, y)) / (2 * h))
        return np.stack(out, axis=-1)  # [s, i, j, k] = d_k G^i_j

    h = 1e-4
    d = (4 * dGj(h / 2) - dGj(h)) / 3
    t = np.einsum("smj,sikm->sijk", c.Gj, c.Gjk)
    R_fd = d - np.swapaxes(d, -1, -2) + t - np.swapaxes(t, -1, -2)
    assert np.max(np.abs(c.R - R_fd)) <= 1e-6
    assert np.max(np.abs(c.R)) > 1e-3


def test_constant_randers_is_flat(randers_const):
    y = indicatrix_sample(randers_const, [0.3, 0.3], 8, seed=0)
    assert np.max(np.abs(connection_eval(randers_const, [0.3, 0.3], y).R)) <= 1e-12


FAMILY_MODELS = [
    builtin_model("euclidean", dim=2),
    builtin_model("riemannian_diag", dim=2, diag=["1", "x1^2 + 1"]),
    builtin_model("sphere", dim=3),
    builtin_model("randers", dim=2, b=["0.3*(1+0.1*x2)", "0"]),
    builtin_model("custom_polynomial", dim=2, F=QUARTIC),
]


@pytest.mark.parametrize("model", FAMILY_MODELS, ids=lambda m: m.family)
def test_connection_symmetries_and_homogeneity(model):
    rng = np.random.default_rng(5)
    n = model.dim
    x = rng.uniform(-0.5, 0.5, (10, n))
    y = rng.normal(size=(10, n))
    c = connection_eval(model, x, y)
    assert np.max(np.abs(c.Gjk - np.swapaxes(c.Gjk, -1, -2))) <= 1e-10
    assert np.max(np.abs(c.R + np.swapaxes(c.R, -1, -2))) <= 1e-10
    for lam in (0.5, 2.0):
        d = connection_eval(model, x, lam * y)
        scale = max(1.0, np.max(np.abs(c.G)))
        assert np.max(np.abs(d.G - lam**2 * c.G)) <= 1e-10 * scale * lam**2
        assert np.max(np.abs(d.Gj - lam * c.Gj)) <= 1e-10 * scale * lam
        assert np.max(np.abs(d.Gjk - c.Gjk)) <= 1e-10 * scale
        assert np.max(np.abs(d.R - lam * c.R)) <= 1e-10 * max(1.0, np.max(np.abs(c.R))) * lam


def test_riemannian_curvature_linear_in_y(sphere3):
    rng = np.random.default_rng(0)
    x = np.array([0.2, 0.1, -0.3])
    y1, y2 = rng.normal(size=(2, 3))
    a, b = 0.7, -1.3
    R = lambda y: connection_eval(sphere3, x, y).R
    assert np.max(np.abs(R(a * y1 + b * y2) - a * R(y1) - b * R(y2))) <= 1e-9


@pytest.mark.parametrize("model", [builtin_model("euclidean", dim=3),
                                   builtin_model("riemannian_diag", dim=2, diag=["2", "3"])],
                         ids=["euclidean", "constant_diag"])
def test_flat_models_vanish(model):
    rng = np.random.default_rng(3)
    n = model.dim
    c = connection_eval(model, rng.normal(size=(20, n)), rng.normal(size=(20, n)))
    for arr in (c.G, c.Gj, c.Gjk, c.R):
        assert np.max(np.abs(arr)) <= 1e-12


def test_minkowski_norm_has_zero_curvature():
    m = builtin_model("custom_polynomial", dim=2, F="pow(y1^4 + y2^4 + y1^2*y2^2, 0.25)")
    y = indicatrix_sample(m, [0.3, 0.1], 8, seed=0)
    assert np.max(np.abs(connection_eval(m, [0.3, 0.1], y).R)) <= 1e-12


def test_horizontal_lift(euclid2, sphere2, sphere_oracle):
    X = np.array([0.3, -1.1])
    y = np.array([0.5, 0.2])
    lift = horizontal_lift(connection_eval(euclid2, [0.1, 0.2], y), X)
    assert np.array_equal(lift, np.concatenate([X, [0.0, 0.0]]))
    xs, (gam, _) = sphere_oracle
    G = _num(gam, xs, [0.0, 0.0])
    lift = horizontal_lift(connection_eval(sphere2, [0.0, 0.0], y), X)
    assert np.array_equal(lift[:2], X)
    assert np.allclose(lift[2:], -np.einsum("kij,j,i->k", G, y, X), atol=1e-9)


def test_berwald_coefficients_consistent(randers2):
    x, y = np.array([0.1, 0.2]), np.array([0.4, 0.9])
    Gj, Gjk = berwald_coefficients(randers2, x, y)
    c = connection_eval(randers2, x, y)
    assert np.allclose(Gj, c.Gj, atol=1e-14) and np.allclose(Gjk, c.Gjk, atol=1e-14)


def test_connection_at_zero_vector_rejected(sphere2):
    with pytest.raises(DegenerateMetricError):
        connection_eval(sphere2, [0.0, 0.0], [0.0, 0.0])
