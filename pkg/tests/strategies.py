"""Hypothesis strategies shared by the expression tests."""
from hypothesis import strategies as st

from missing_physics.expr import BINARY, UNARY

constants = st.floats(-10.0, 10.0, allow_nan=False).filter(lambda v: v == 0.0 or abs(v) > 1e-6)


def programs(max_leaves=8):
    leaf = st.one_of(st.just((0,)), constants.map(lambda v: (float(v),)))

    def extend(children):
        unary = st.tuples(st.sampled_from(UNARY), children).map(lambda t: (t[0],) + t[1])
        binary = st.tuples(st.sampled_from(BINARY), children, children).map(lambda t: (t[0],) + t[1] + t[2])
        return unary | binary

    return st.recursive(leaf, extend, max_leaves=max_leaves)
