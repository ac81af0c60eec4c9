import pytest

from finsler_holonomy.errors import ExpressionError
from finsler_holonomy.expressions import parse


def test_parse_and_evaluate():
    e = parse("sqrt(x1^2 + 3*y1) / 2 - pow(x2, 2)", ["x1", "x2", "y1"])
    assert e({"x1": 1.0, "x2": 2.0, "y1": 1.0}) == pytest.approx(1.0 - 4.0)


def test_constant_detection():
    assert parse("2*3 + 1", ["x1"]).is_constant
    assert not parse("x1 + 1", ["x1"]).is_constant


@pytest.mark.parametrize("src", ["__import__('os')", "x1.real", "z + 1", "lambda: 1", "x1 if x1 else 2", "exp(x1)"])
def test_unsafe_or_unknown_rejected(src):
    with pytest.raises(ExpressionError):
        parse(src, ["x1"])


def test_pow_requires_constant_exponent():
    with pytest.raises(ExpressionError):
        parse("pow(x1, x1)", ["x1"])
