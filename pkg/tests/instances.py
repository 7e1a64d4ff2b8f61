"""Hand-built instances shared by the test modules."""

import numpy as np

from bdl.funcrep import GridSpec, abs_affine, affine, quadratic
from bdl.reform import BilevelInstance


def t1(nodes=41):
    g = GridSpec.uniform([-2], [2], [nodes])
    return BilevelInstance(
        F=quadratic(2 * np.eye(2)),
        f=quadratic([[2.0, -2.0], [-2.0, 2.0]]),
        G=[affine([-1.0, 0.0])],
        g=[affine([0.0, 1.0], -1.0)],
        xgrid=g,
        ygrid=g,
        name="t1",
    )


def t2(nodes=21):
    g = GridSpec.uniform([-1], [1], [nodes])
    return BilevelInstance(
        F=affine([0.0, 1.0]),
        f=quadratic([[0.0, 1.0], [1.0, 0.0]]),
        xgrid=g,
        ygrid=g,
        geometric=True,
        name="t2",
    )


def calm_linear(nodes=41):
    """F = -y, f = (x - y)^2, g = y - 1, G = -x on [-2, 2]^2."""
    g = GridSpec.uniform([-2], [2], [nodes])
    return BilevelInstance(
        F=affine([0.0, -1.0]),
        f=quadratic([[2.0, -2.0], [-2.0, 2.0]]),
        G=[affine([-1.0, 0.0])],
        g=[affine([0.0, 1.0], -1.0)],
        xgrid=g,
        ygrid=g,
        name="calm_linear",
    )


def calm_abs(nodes=41):
    """F = x^2 + (y - 0.5)^2, f = |y - x| on [-1, 1]^2; optimum (0.25, 0.25)."""
    g = GridSpec.uniform([-1], [1], [nodes])
    return BilevelInstance(
        F=quadratic(2 * np.eye(2), [0.0, -1.0], 0.25),
        f=abs_affine([-1.0, 1.0]),
        G=[affine([1.0, 0.0], -1.0)],
        g=[affine([0.0, 1.0], -1.0)],
        xgrid=g,
        ygrid=g,
        name="calm_abs",
    )


def geometric(F, f, nodes=21, lo=-1.0, hi=1.0, name="geo"):
    g = GridSpec.uniform([lo], [hi], [nodes])
    return BilevelInstance(F=F, f=f, xgrid=g, ygrid=g, geometric=True, name=name)
