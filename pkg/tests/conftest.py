import numpy as np
import pytest

from ffdmotion.deform import DeformationLattice


def affine_lattice(domain, spacing, A, b=(0.0, 0.0)):
    """Lattice whose field is exactly ``h(w) = A w + b``.

    Cubic B-splines reproduce linear functions when control point ``a`` holds
    the value at its Greville abscissa ``origin + a * spacing``.
    """
    lat = DeformationLattice.zeros(domain, spacing)
    kx, ky = lat.shape
    (ox, oy), (sx, sy) = lat.origin, lat.spacing
    gx = ox + np.arange(kx) * sx
    gy = oy + np.arange(ky) * sy
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    A = np.asarray(A, dtype=float)
    cp = np.stack([A[0, 0] * X + A[0, 1] * Y + b[0], A[1, 0] * X + A[1, 1] * Y + b[1]], -1)
    return lat.with_points(cp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
