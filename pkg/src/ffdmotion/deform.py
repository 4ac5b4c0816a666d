"""Cubic B-spline free-form deformation on a 2-D pixel grid.

Coordinates follow array indexing: ``x`` is the row (axial) axis and ``y``
the column (lateral) axis, both measured in pixels. A deformation ``h`` is a
displacement; the associated mapping is ``T(w) = w + h(w)``, and images are
warped by pulling back, ``out(w) = img(w + h(w))``.

Control point ``a`` along an axis sits at pixel coordinate
``origin + a * spacing``. The default lattice puts knot 0 one spacing before
the first pixel so that every pixel has a full 4x4 support window.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse

FIELD_MAGIC = 0x44495350
SCALAR_MAGIC = 0x534C4446


def basis(i, x):
    """Uniform cubic B-spline segment ``i`` (0..3) at local coordinate ``x``."""
    x = np.asarray(x, dtype=float)
    if i == 0:
        return (1.0 - x) ** 3 / 6.0
    if i == 1:
        return (4.0 - 6.0 * x**2 + 3.0 * x**3) / 6.0
    if i == 2:
        return (1.0 + 3.0 * x + 3.0 * x**2 - 3.0 * x**3) / 6.0
    if i == 3:
        return x**3 / 6.0
    raise IndexError(f"basis index must be 0..3, got {i}")


def basis_deriv(i, x):
    """Derivative of :func:`basis` with respect to the local coordinate."""
    x = np.asarray(x, dtype=float)
    if i == 0:
        return -((1.0 - x) ** 2) / 2.0
    if i == 1:
        return (3.0 * x**2 - 4.0 * x) / 2.0
    if i == 2:
        return (-3.0 * x**2 + 2.0 * x + 1.0) / 2.0
    if i == 3:
        return x**2 / 2.0
    raise IndexError(f"basis index must be 0..3, got {i}")


def _all_basis(u):
    return np.stack([basis(i, u) for i in range(4)], axis=-1)


def _all_basis_deriv(u):
    return np.stack([basis_deriv(i, u) for i in range(4)], axis=-1)


@dataclass(frozen=True, eq=False)
class DeformationLattice:
    """Grid of 2-vector control points defining a displacement field.

    Attributes
    ----------
    control_points : ndarray, shape (Kx, Ky, 2)
        Displacements in pixels, last axis ordered (axial, lateral).
    spacing : tuple of float
        Knot spacing along rows and columns.
    origin : tuple of float
        Pixel coordinates of knot (0, 0).
    domain : tuple of int
        Image size (M, N) the lattice is meant to cover.
    """

    control_points: np.ndarray
    spacing: tuple
    origin: tuple
    domain: tuple

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64)
        if cp.ndim != 3 or cp.shape[2] != 2:
            raise ValueError("control_points must have shape (Kx, Ky, 2)")
        if not np.all(np.isfinite(cp)):
            raise ValueError("control points must be finite")
        sx, sy = (float(s) for s in self.spacing)
        if not (sx > 0 and sy > 0):
            raise ValueError("spacing must be positive in both axes")
        ox, oy = (float(o) for o in self.origin)
        m, n = (int(d) for d in self.domain)
        if m < 1 or n < 1:
            raise ValueError("domain must be at least 1x1")
        # every pixel 0..M-1 needs a full 4-wide support window
        for o, s, k, size in ((ox, sx, cp.shape[0], m), (oy, sy, cp.shape[1], n)):
            lo = np.floor((0 - o) / s) - 1
            hi = np.floor((size - 1 - o) / s) + 2
            if lo < 0 or hi > k - 1:
                raise ValueError("lattice does not cover the image domain")
        cp.setflags(write=False)
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "spacing", (sx, sy))
        object.__setattr__(self, "origin", (ox, oy))
        object.__setattr__(self, "domain", (m, n))

    @classmethod
    def zeros(cls, domain, spacing=8.0):
        """Identity lattice covering ``domain`` with one extra knot per side."""
        m, n = domain
        if np.isscalar(spacing):
            spacing = (spacing, spacing)
        sx, sy = float(spacing[0]), float(spacing[1])
        if not (sx > 0 and sy > 0):
            raise ValueError("spacing must be positive in both axes")
        kx = int(np.floor((m - 1) / sx)) + 4
        ky = int(np.floor((n - 1) / sy)) + 4
        return cls(np.zeros((kx, ky, 2)), (sx, sy), (-sx, -sy), (m, n))

    @property
    def shape(self):
        return self.control_points.shape[:2]

    @property
    def n_params(self):
        return self.control_points.size

    def with_points(self, control_points):
        cp = np.asarray(control_points, dtype=np.float64).reshape(self.control_points.shape)
        return DeformationLattice(cp, self.spacing, self.origin, self.domain)

    def params(self):
        """Flat parameter vector: all axial coefficients, then all lateral."""
        return np.concatenate(
            [self.control_points[..., 0].ravel(), self.control_points[..., 1].ravel()]
        )

    def from_params(self, theta):
        kx, ky = self.shape
        theta = np.asarray(theta, dtype=np.float64)
        cp = np.stack([theta[: kx * ky].reshape(kx, ky), theta[kx * ky :].reshape(kx, ky)], -1)
        return self.with_points(cp)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense per-pixel displacement, ``u[..., 0]`` axial and ``u[..., 1]`` lateral."""

    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError("displacement field must have shape (M, N, 2)")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field must be finite")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def dims(self):
        return self.u.shape[:2]

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros((dims[0], dims[1], 2)))


# ---------------------------------------------------------------------------
# point evaluation


def _locate(coord, origin, spacing, count):
    t = (coord - origin) / spacing
    ft = np.floor(t)
    first = int(ft) - 1
    if first < 0 or first + 3 > count - 1:
        raise ValueError(f"position {coord} lies outside the lattice support")
    return first, t - ft


def _point_weights(lat, w):
    x, y = float(w[0]), float(w[1])
    kx, ky = lat.shape
    ix, ux = _locate(x, lat.origin[0], lat.spacing[0], kx)
    iy, uy = _locate(y, lat.origin[1], lat.spacing[1], ky)
    window = lat.control_points[ix : ix + 4, iy : iy + 4]
    return window, ux, uy


def eval_deformation(lat, w):
    """Displacement ``h(w)`` at one position ``w = (x, y)``."""
    window, ux, uy = _point_weights(lat, w)
    bx, by = _all_basis(ux), _all_basis(uy)
    return np.einsum("i,j,ijc->c", bx, by, window)


def deformation_gradient(lat, w):
    """2x2 matrix of partials ``d h_l / d x_m`` at ``w`` (rows index ``l``)."""
    window, ux, uy = _point_weights(lat, w)
    bx, by = _all_basis(ux), _all_basis(uy)
    dbx = _all_basis_deriv(ux) / lat.spacing[0]
    dby = _all_basis_deriv(uy) / lat.spacing[1]
    d_dx = np.einsum("i,j,ijc->c", dbx, by, window)
    d_dy = np.einsum("i,j,ijc->c", bx, dby, window)
    return np.stack([d_dx, d_dy], axis=1)


def jacobian_det(lat, w):
    """Determinant of the Jacobian of ``w -> w + h(w)``; 1 for the zero lattice."""
    g = deformation_gradient(lat, w)
    return (1.0 + g[0, 0]) * (1.0 + g[1, 1]) - g[0, 1] * g[1, 0]


# ---------------------------------------------------------------------------
# dense evaluation over the pixel grid


@lru_cache(maxsize=64)
def _axis_matrices(size, origin, spacing, count):
    """Per-axis B-spline weights, value and d/dcoord, as dense (size, count)."""
    coords = np.arange(size, dtype=float)
    t = (coords - origin) / spacing
    ft = np.floor(t)
    first = ft.astype(int) - 1
    u = t - ft
    b = np.zeros((size, count))
    db = np.zeros((size, count))
    rows = np.arange(size)
    vals, dvals = _all_basis(u), _all_basis_deriv(u) / spacing
    for i in range(4):
        b[rows, first + i] = vals[:, i]
        db[rows, first + i] = dvals[:, i]
    b.setflags(write=False)
    db.setflags(write=False)
    return b, db


def axis_matrices(lat):
    """Return ``(Bx, dBx, By, dBy)`` so that ``h_l = Bx @ P_l @ By.T``."""
    m, n = lat.domain
    kx, ky = lat.shape
    bx, dbx = _axis_matrices(m, lat.origin[0], lat.spacing[0], kx)
    by, dby = _axis_matrices(n, lat.origin[1], lat.spacing[1], ky)
    return bx, dbx, by, dby


def dense_field(lat):
    """(M, N, 2) array of displacements at every pixel."""
    bx, _, by, _ = axis_matrices(lat)
    cp = lat.control_points
    return np.stack([bx @ cp[..., c] @ by.T for c in range(2)], axis=-1)


def dense_gradient(lat):
    """Per-pixel partials; returns (hx_x, hx_y, hy_x, hy_y), each (M, N)."""
    bx, dbx, by, dby = axis_matrices(lat)
    cp = lat.control_points
    hx_x = dbx @ cp[..., 0] @ by.T
    hx_y = bx @ cp[..., 0] @ dby.T
    hy_x = dbx @ cp[..., 1] @ by.T
    hy_y = bx @ cp[..., 1] @ dby.T
    return hx_x, hx_y, hy_x, hy_y


def dense_jacobian_det(lat):
    hx_x, hx_y, hy_x, hy_y = dense_gradient(lat)
    return (1.0 + hx_x) * (1.0 + hy_y) - hx_y * hy_x


@lru_cache(maxsize=16)
def _kron_operators(m, n, ox, oy, sx, sy, kx, ky):
    bx, dbx = _axis_matrices(m, ox, sx, kx)
    by, dby = _axis_matrices(n, oy, sy, ky)
    bx, dbx, by, dby = (sparse.csr_matrix(a) for a in (bx, dbx, by, dby))
    value = sparse.kron(bx, by, format="csr")
    d_dx = sparse.kron(dbx, by, format="csr")
    d_dy = sparse.kron(bx, dby, format="csr")
    return value, d_dx, d_dy


def pixel_operators(lat):
    """Sparse maps from one component's control points to per-pixel values.

    Returns ``(B, Dx, Dy)``, each of shape (M*N, Kx*Ky), such that for a
    component ``l`` the row-major raveled field is ``B @ P_l.ravel()`` and its
    partials are ``Dx @ P_l.ravel()`` and ``Dy @ P_l.ravel()``.
    """
    m, n = lat.domain
    kx, ky = lat.shape
    return _kron_operators(m, n, *lat.origin, *lat.spacing, kx, ky)


def sample_field(lat):
    """Rasterize ``h`` into a :class:`DisplacementField`."""
    return DisplacementField(dense_field(lat))


# ---------------------------------------------------------------------------
# image interpolation


def interpolate(img, px, py, order="bilinear", with_gradient=False):
    """Sample ``img`` at fractional positions with clamp-to-edge boundaries.

    ``order`` is ``"bilinear"`` or ``"cubic"`` (cubic B-spline interpolation).
    With ``with_gradient`` the exact spatial derivative of the interpolant is
    returned as well; it is zero along an axis where the position was clamped.
    """
    img = np.asarray(img, dtype=np.float64)
    if order == "bilinear":
        return _bilinear(img, px, py, with_gradient)
    if order == "cubic":
        return _cubic(img, px, py, with_gradient)
    raise ValueError(f"unknown interpolation {order!r}")


def _bilinear(img, px, py, with_gradient):
    m, n = img.shape
    cx = np.clip(px, 0.0, m - 1.0)
    cy = np.clip(py, 0.0, n - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.intp), max(m - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.intp), max(n - 2, 0))
    x1 = np.minimum(x0 + 1, m - 1)
    y1 = np.minimum(y0 + 1, n - 1)
    fx = cx - x0
    fy = cy - y0
    v00, v01 = img[x0, y0], img[x0, y1]
    v10, v11 = img[x1, y0], img[x1, y1]
    # convex-combination form so integer positions reproduce pixels exactly
    top = (1.0 - fy) * v00 + fy * v01
    bot = (1.0 - fy) * v10 + fy * v11
    out = (1.0 - fx) * top + fx * bot
    if not with_gradient:
        return out
    gx = bot - top
    gy = (v01 - v00) + fx * ((v11 - v10) - (v01 - v00))
    gx = np.where((px < 0) | (px > m - 1), 0.0, gx)
    gy = np.where((py < 0) | (py > n - 1), 0.0, gy)
    return out, gx, gy


_CUBIC_PAD = 4


def cubic_coefficients(img):
    """B-spline prefilter of an edge-padded copy of ``img``."""
    padded = np.pad(np.asarray(img, dtype=np.float64), _CUBIC_PAD, mode="edge")
    return ndimage.spline_filter(padded, order=3, mode="mirror")


def _cubic(img, px, py, with_gradient):
    m, n = img.shape
    coef = cubic_coefficients(img)
    cx = np.clip(px, 0.0, m - 1.0) + _CUBIC_PAD
    cy = np.clip(py, 0.0, n - 1.0) + _CUBIC_PAD
    # a cubic B-spline centred on integer k spans [k-2, k+2]
    fx, fy = np.floor(cx), np.floor(cy)
    ux, uy = cx - fx, cy - fy
    ix = fx.astype(np.intp) - 1
    iy = fy.astype(np.intp) - 1
    bx, by = _all_basis(ux), _all_basis(uy)
    out = np.zeros(np.shape(cx))
    if with_gradient:
        dbx, dby = _all_basis_deriv(ux), _all_basis_deriv(uy)
        gx = np.zeros_like(out)
        gy = np.zeros_like(out)
    for i in range(4):
        for j in range(4):
            c = coef[ix + i, iy + j]
            out += bx[..., i] * by[..., j] * c
            if with_gradient:
                gx += dbx[..., i] * by[..., j] * c
                gy += bx[..., i] * dby[..., j] * c
    if not with_gradient:
        return out
    gx = np.where((px < 0) | (px > m - 1), 0.0, gx)
    gy = np.where((py < 0) | (py > n - 1), 0.0, gy)
    return out, gx, gy


def pixel_grid(dims):
    m, n = dims
    return np.meshgrid(np.arange(m, dtype=float), np.arange(n, dtype=float), indexing="ij")


def inside_image(px, py, dims):
    """True where the sample ``(px, py)`` lies within the image rectangle."""
    m, n = dims
    return (px >= 0) & (px <= m - 1) & (py >= 0) & (py <= n - 1)


def warp_image(img, lat, order="bilinear"):
    """Pull ``img`` back through the lattice: ``out(w) = img(w + h(w))``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(lat.domain):
        raise ValueError(f"image shape {img.shape} does not match lattice domain {lat.domain}")
    return warp_with_field(img, dense_field(lat), order)


def warp_with_field(img, u, order="bilinear"):
    """Same as :func:`warp_image` but driven by a dense (M, N, 2) field."""
    u = u.u if isinstance(u, DisplacementField) else np.asarray(u)
    gx, gy = pixel_grid(img.shape)
    return interpolate(img, gx + u[..., 0], gy + u[..., 1], order)


# ---------------------------------------------------------------------------
# binary field files


def write_field(path, field):
    """Write a :class:`DisplacementField` as ``magic, M, N`` + f32 pairs."""
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field)
    m, n = u.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", FIELD_MAGIC, m, n))
        fh.write(np.ascontiguousarray(u, dtype="<f4").tobytes())


def read_field(path):
    raw = _read_payload(path, FIELD_MAGIC, 2)
    return DisplacementField(raw.astype(np.float64))


def write_scalar_map(path, values):
    """Single-channel variant of the field layout (magic 0x534C4446)."""
    values = np.asarray(values)
    m, n = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", SCALAR_MAGIC, m, n))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_scalar_map(path):
    return _read_payload(path, SCALAR_MAGIC, 1)[..., 0].astype(np.float64)


def _read_payload(path, magic, channels):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    got, m, n = struct.unpack("<3I", data[:12])
    if got != magic:
        raise ValueError(f"{path}: bad magic 0x{got:08X}")
    want = m * n * channels * 4
    if len(data) - 12 != want:
        raise ValueError(f"{path}: truncated payload ({len(data) - 12} bytes, expected {want})")
    arr = np.frombuffer(data, dtype="<f4", offset=12)
    return arr.reshape(m, n, channels)
