import numpy as np
import pytest
import sympy as sp

from finsler_holonomy.errors import FieldDepthError
from finsler_holonomy.fields import (
    LinearField,
    covariant_derivative,
    curvature_field,
    evaluate_fields,
    germ_basis,
    lie_bracket,
    metric_orthogonality_check,
    vector_field,
)
from finsler_holonomy.geometry import christoffel_jet
from finsler_holonomy.models import builtin_model, fundamental_tensor, indicatrix_sample
from finsler_holonomy.transport import covariant_derivative_by_flows, covariant_derivative_by_translate

from test_geometry import sympy_levi_civita
from test_models import QUARTIC


def rotations():
    """Matrices L_i with L_i y = y x e_i."""
    out = []
    for e in np.eye(3):
        skew = np.array([[0, -e[2], e[1]], [e[2], 0, -e[0]], [-e[1], e[0], 0]])
        out.append(-skew)
    return out


def test_rotation_generators_so3_table(euclid3):
    Ls = rotations()
    y = np.random.default_rng(0).normal(size=(20, 3))
    e = np.eye(3)
    for i in range(3):
        assert np.allclose(y @ Ls[i].T, np.cross(y, e[i]))
    fx, fy, fz = (LinearField(euclid3, A, f"L{k}") for k, A in enumerate(Ls))
    x = np.zeros(3)
    assert np.max(np.abs(lie_bracket(fx, fy).evaluate(x, y) - fz.evaluate(x, y))) <= 1e-10
    assert np.max(np.abs(lie_bracket(fy, fz).evaluate(x, y) - fx.evaluate(x, y))) <= 1e-10
    assert np.max(np.abs(lie_bracket(fz, fx).evaluate(x, y) - fy.evaluate(x, y))) <= 1e-10


def test_curvature_field_trivial_cases(euclid2, sphere2):
    y = indicatrix_sample(sphere2, [0.1, 0.2], 8, seed=0)
    assert np.max(np.abs(curvature_field(sphere2, "e1", "e1").evaluate([0.1, 0.2], y))) <= 1e-12
    assert np.max(np.abs(curvature_field(euclid2, "e1", "e2").evaluate([0.1, 0.2], y))) == 0.0


def test_sphere_curvature_field_is_rotation(sphere2):
    x = np.zeros(2)
    theta = np.linspace(0, 2 * np.pi, 9)[:-1]
    y = np.stack([np.cos(theta), np.sin(theta)], 1) / 2.0  # F = 2|y| at the origin
    xi = curvature_field(sphere2, "e1", "e2").evaluate(x, y)
    # K (g(X, y) Y - g(Y, y) X) with g = 4 I at the origin
    expect = 4.0 * np.stack([-y[:, 1], y[:, 0]], 1)
    assert np.max(np.abs(xi - expect)) <= 1e-9
    assert np.max(np.abs(np.sum(xi * y, axis=1))) <= 1e-9


@pytest.mark.parametrize("model", [builtin_model("sphere", dim=2), builtin_model("sphere", dim=3),
                                   builtin_model("randers", dim=2, b=["0.3*(1+0.1*x2)", "0"]),
                                   builtin_model("randers", dim=3, b=["0.2+0.1*x3", "-0.1*x1", "0"]),
                                   builtin_model("custom_polynomial", dim=2, F=QUARTIC)],
                         ids=lambda m: f"{m.family}{m.dim}")
def test_metric_orthogonality(model):
    x = np.linspace(0.1, 0.2, model.dim)
    for j in range(model.dim):
        for k in range(j + 1, model.dim):
            xi = curvature_field(model, f"e{j + 1}", f"e{k + 1}")
            assert metric_orthogonality_check(xi, x, samples=100) <= 1e-9


def test_orthogonality_of_derived_fields(randers2):
    x = np.array([0.1, 0.1])
    r = curvature_field(randers2, "e1", "e2")
    for f in (covariant_derivative(r, "e1"), covariant_derivative(covariant_derivative(r, "e2"), "e1"),
              lie_bracket(r, covariant_derivative(r, "e1"))):
        vals = f.evaluate(x, indicatrix_sample(randers2, x, 50))
        assert metric_orthogonality_check(f, x, 50) <= 1e-9 * max(1.0, np.max(np.abs(vals)))


def test_euclidean_zero_field_orthogonality(euclid2):
    assert metric_orthogonality_check(curvature_field(euclid2, "e1", "e2"), [0, 0]) == 0.0


def test_bilinearity_and_antisymmetry(randers2):
    x = np.array([0.2, -0.1])
    y = indicatrix_sample(randers2, x, 20, seed=4)
    X, X2, Y = np.array([1.0, 0.5]), np.array([-0.3, 2.0]), np.array([0.7, -1.0])
    a, b = 1.5, -0.25
    lhs = curvature_field(randers2, list(a * X + b * X2), list(Y)).evaluate(x, y)
    rhs = a * curvature_field(randers2, list(X), list(Y)).evaluate(x, y) \
        + b * curvature_field(randers2, list(X2), list(Y)).evaluate(x, y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10
    swap = curvature_field(randers2, list(Y), list(X)).evaluate(x, y)
    assert np.max(np.abs(swap + curvature_field(randers2, list(X), list(Y)).evaluate(x, y))) <= 1e-12


def test_bracket_with_itself_vanishes(randers2):
    x = np.array([0.1, 0.3])
    r = covariant_derivative(curvature_field(randers2, "e1", "e2"), "e2")
    y = indicatrix_sample(randers2, x, 16)
    assert np.max(np.abs(lie_bracket(r, r).evaluate(x, y))) <= 1e-12


def test_jacobi_identity(sphere3):
    rng = np.random.default_rng(9)
    x = np.array([0.1, -0.2, 0.15])
    fs = [curvature_field(sphere3, list(rng.normal(size=3)), list(rng.normal(size=3))) for _ in range(3)]
    a, b, c = fs
    y = indicatrix_sample(sphere3, x, 50)
    total = evaluate_fields([lie_bracket(a, lie_bracket(b, c)), lie_bracket(b, lie_bracket(c, a)),
                             lie_bracket(c, lie_bracket(a, b))], x, y).sum(axis=0)
    assert np.max(np.abs(total)) <= 1e-8


def test_covariant_derivative_of_x_independent_field_is_zero(euclid3):
    xi = LinearField(euclid3, rotations()[0])
    y = np.random.default_rng(1).normal(size=(10, 3))
    assert np.max(np.abs(covariant_derivative(xi, "e1").evaluate([0.3, 0.1, 0.0], y))) == 0.0


def test_covariant_derivative_matches_levi_civita_oracle():
    """For a Riemannian metric, nabla_X of A(x) y is (d_X A + [Gamma_X, A]) y."""
    xs = sp.symbols("x1 x2")
    model = builtin_model("riemannian_diag", dim=2, diag=["1 + x2^2", "2 + x1*x2"])
    gam, rm = sympy_levi_civita(sp.diag(1 + xs[1] ** 2, 2 + xs[0] * xs[1]), xs)
    A = sp.Matrix(2, 2, lambda i, l: -rm[i][l][0][1])  # r(e1, e2)(y) = A y
    p = {xs[0]: 0.3, xs[1]: -0.4}
    X = np.array([0.6, -1.2])
    dA = sum(X[j] * np.array(sp.diff(A, xs[j]).subs(p), dtype=float) for j in range(2))
    A0 = np.array(A.subs(p), dtype=float)
    G = christoffel_jet(model, [0.3, -0.4]).value
    GX = np.einsum("ijk,j->ik", G, X)
    y = indicatrix_sample(model, [0.3, -0.4], 12)
    expect = y @ (dA + GX @ A0 - A0 @ GX).T
    got = covariant_derivative(curvature_field(model, "e1", "e2"), list(X)).evaluate([0.3, -0.4], y)
    assert np.max(np.abs(got - expect)) <= 1e-8


def test_covariant_derivative_matches_flow_commutator(sphere2):
    p = np.array([0.2, -0.1])
    y = indicatrix_sample(sphere2, p, 6)
    xi = curvature_field(sphere2, "e1", "e2")
    ref = covariant_derivative(xi, "e1").evaluate(p, y)
    errs = [np.max(np.abs(covariant_derivative_by_flows(sphere2, xi, "e1", p, y, h) - ref)) for h in (1e-2, 5e-3)]
    assert errs[1] < errs[0] / 2


def test_covariant_derivative_matches_translate(sphere2):
    p = np.array([0.2, -0.1])
    y = indicatrix_sample(sphere2, p, 6)
    xi = curvature_field(sphere2, "e1", "e2")
    ref = covariant_derivative(xi, "e2").evaluate(p, y)
    opts = {"rtol": 1e-12, "atol": 1e-15}
    est2 = covariant_derivative_by_translate(sphere2, xi, [0.0, 1.0], p, y, 1e-3, opts)
    est4 = covariant_derivative_by_translate(sphere2, xi, [0.0, 1.0], p, y, 1e-3, opts, order=4)
    assert np.max(np.abs(est2 - ref)) <= 1e-5
    assert np.max(np.abs(est4 - ref)) <= 1e-6


def test_fields_are_one_homogeneous(randers2):
    x = np.array([0.1, 0.2])
    y = indicatrix_sample(randers2, x, 10)
    r = curvature_field(randers2, "e1", "e2")
    for f in (r, covariant_derivative(r, "e1"), lie_bracket(r, covariant_derivative(r, "e2"))):
        v = f.evaluate(x, y)
        for lam in (0.5, 2.0):
            assert np.max(np.abs(f.evaluate(x, lam * y) - lam * v)) <= 1e-10 * max(1.0, np.max(np.abs(v)))


def test_polynomial_vector_field_germs(randers2):
    x = np.array([0.1, 0.2])
    y = indicatrix_sample(randers2, x, 5)
    r = curvature_field(randers2, "e1", "e2")
    # a germ vanishing at p contributes nothing to nabla at p
    germ = vector_field(["x1 - 0.1", "0"], 2)
    assert np.max(np.abs(covariant_derivative(r, germ).evaluate(x, y))) <= 1e-13
    assert len(germ_basis(2, 1)) == 6


def test_polynomial_curvature_field_matches_pointwise(randers2):
    x = np.array([0.3, -0.2])
    y = indicatrix_sample(randers2, x, 5)
    f = curvature_field(randers2, ["1 + x1*x2", "x2"], "e2").evaluate(x, y)
    g = curvature_field(randers2, [1 + 0.3 * -0.2, -0.2], "e2").evaluate(x, y)
    assert np.allclose(f, g, atol=1e-14)


def test_depth_cap(sphere2):
    f = curvature_field(sphere2, "e1", "e2")
    with pytest.raises(FieldDepthError):
        for _ in range(13):
            f = covariant_derivative(f, "e1")


def test_provenance_strings(sphere2):
    r = curvature_field(sphere2, "e1", "e2")
    assert str(lie_bracket(covariant_derivative(r, "e1"), r)) == "[∇_{e1} r(e1,e2), r(e1,e2)]"


def test_g_is_conformal_at_origin(sphere2):
    g = fundamental_tensor(sphere2, [0.0, 0.0], [1.0, 0.3]).g
    assert np.allclose(g, 4 * np.eye(2))
