import numpy as np
import pytest

from finsler_holonomy.algebra import (
    AlgebraOptions,
    RankGate,
    curvature_operators,
    generate_curvature_algebra,
    generate_infinitesimal_holonomy,
    numerical_rank,
    riemannian_curvature_operator_algebra,
    riemannian_matching_residual,
    span_residual,
)
from finsler_holonomy.errors import ConfigError
from finsler_holonomy.fields import LinearField, curvature_field, evaluate_fields
from finsler_holonomy.models import builtin_model

from test_fields import rotations
from test_models import QUARTIC


def test_numerical_rank_basics():
    assert numerical_rank(np.zeros((6, 3)))[0] == 0
    v = np.random.default_rng(0).normal(size=(10, 1))
    assert numerical_rank(np.hstack([v, 2 * v]))[0] == 1


def test_rotation_fields_rank_three(euclid3):
    y = np.random.default_rng(2).normal(size=(3, 3))
    vals = evaluate_fields([LinearField(euclid3, L) for L in rotations()], np.zeros(3), y)
    m = np.column_stack([v.ravel() for v in vals])
    assert numerical_rank(m)[0] == 3


def test_rank_gate_rejects_dependent_and_tiny_columns():
    gate = RankGate(1e-8, 1e-10)
    a = np.array([1.0, 2.0, 0.0])
    assert gate.offer(a)[0]
    assert not gate.offer(3 * a)[0]
    assert not gate.offer(np.array([1e-14, 0.0, 0.0]))[0]
    assert gate.offer(np.array([0.0, 0.0, 1.0]))[0]
    assert gate.rank == 2


def test_options_validation():
    with pytest.raises(ConfigError):
        AlgebraOptions.from_dict({"max_fields": 0})
    with pytest.raises(ConfigError):
        AlgebraOptions.from_dict({"tol": 2.0})
    with pytest.raises(ConfigError):
        AlgebraOptions.from_dict({"bogus": 1})
    assert AlgebraOptions().sample_count(3) == 36


@pytest.mark.parametrize("n", [2, 3])
def test_euclidean_rank_zero(n):
    m = builtin_model("euclidean", dim=n)
    for gen in (generate_curvature_algebra, generate_infinitesimal_holonomy):
        b = gen(m, np.zeros(n))
        assert b.rank == 0 and b.closed


def test_sphere_algebras(sphere2, sphere3):
    b = generate_curvature_algebra(sphere2, [0.2, 0.1])
    assert b.rank == 1 and b.closed
    h = generate_infinitesimal_holonomy(sphere2, [0.2, 0.1])
    assert h.rank == 1 and h.closed
    b3 = generate_curvature_algebra(sphere3, [0.1, -0.1, 0.05])
    assert b3.rank == 3 and b3.closed
    assert b3.rank_doubled == 3


def test_riemannian_equivalence(sphere2, sphere3, euclid3):
    for m, dim in ((euclid3, 0), (sphere2, 1), (sphere3, 3)):
        p = np.linspace(0.1, 0.2, m.dim)
        alg = riemannian_curvature_operator_algebra(m, p)
        b = generate_curvature_algebra(m, p)
        assert alg.dim == b.rank == dim
        assert riemannian_matching_residual(b, alg) <= 1e-8


def test_operator_algebra_rejects_finsler_models(randers2):
    with pytest.raises(ConfigError):
        curvature_operators(randers2, [0.0, 0.0])


SURFACES = [
    builtin_model("sphere", dim=2, radius=1.5),
    builtin_model("riemannian_diag", dim=2, diag=["1 + x2^2", "2 + x1*x2"]),
    builtin_model("randers", dim=2, b=["0.3*(1+0.1*x2)", "0"]),
    builtin_model("randers", dim=2, b=["0.3+0.3*x2", "-0.3*x1"]),
    builtin_model("custom_polynomial", dim=2, F=QUARTIC),
]


@pytest.mark.parametrize("model", SURFACES, ids=lambda m: m.family)
def test_surface_curvature_algebra_at_most_one(model):
    b = generate_curvature_algebra(model, [0.1, -0.2])
    assert b.rank <= 1


def test_inclusion_on_nonclosed_randers(randers2):
    p = [0.1, 0.1]
    opts = {"nabla_depth": 1}
    b = generate_curvature_algebra(randers2, p, opts)
    h = generate_infinitesimal_holonomy(randers2, p, opts)
    assert b.rank <= h.rank
    assert np.array_equal(b.sample_set, h.sample_set)
    assert span_residual(h.normalized_matrix(), b.normalized_matrix()) <= 1e-8


def test_generation_log_covers_every_field(randers2):
    h = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"nabla_depth": 1})
    accepted = [e for e in h.generation_log if e.accepted]
    assert [e.field for e in accepted] == [f.provenance for f in h.fields]
    assert {e.rule for e in accepted} <= {"curvature", "covariant_derivative", "bracket"}


def test_truncation_flag(randers2):
    h = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"max_fields": 2})
    assert h.truncated and not h.closed
    assert "truncated, dimension is a lower bound only" in h.flags
    assert h.rank == 2


def test_rank_bounded_by_sample_capacity(randers2):
    h = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"samples": 4, "nabla_depth": 2})
    assert h.rank <= 4 * (2 - 1)
    assert any("saturates" in f for f in h.flags)


def test_determinism(randers2):
    a = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"nabla_depth": 1, "seed": 4})
    b = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"nabla_depth": 1, "seed": 4})
    assert a.to_record() == b.to_record()
    assert np.array_equal(a.eval_matrix, b.eval_matrix)


def test_memo_survives_discarded_fields(randers2):
    """Rejected fields are garbage collected; their ids must not alias new fields."""
    ref = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"nabla_depth": 1, "seed": 4})
    junk = []
    for k in range(5):
        junk.append(np.empty(7 * k + 1))
        b = generate_infinitesimal_holonomy(randers2, [0.1, 0.1], {"nabla_depth": 1, "seed": 4})
        assert b.rank == ref.rank and np.array_equal(b.eval_matrix, ref.eval_matrix)


def test_span_residual():
    b = np.eye(4)[:, :2]
    assert span_residual(b, np.array([1.0, 2.0, 0.0, 0.0])) == pytest.approx(0.0)
    assert span_residual(b, np.array([0.0, 0.0, 1.0, 0.0])) == pytest.approx(1.0)


def test_record_is_serializable(sphere3):
    import json

    rec = generate_infinitesimal_holonomy(sphere3, [0.1, 0.0, 0.0], {"nabla_depth": 1}).to_record()
    assert json.loads(json.dumps(rec)) == rec
    assert rec["rank"] == 3 and rec["fields"][0] == "r(e1,e2)"
