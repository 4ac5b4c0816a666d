"""Evaluation: Jacobian maps, Green strain, RMSE and the Wilcoxon signed-rank test."""

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .deform import DisplacementField, dense_jacobian_det, write_scalar_map
from .rng import SplitMix64

EXACT_MAX_N = 25
MIN_NONZERO = 6


def jacobian_map(lat):
    """Per-pixel Jacobian determinant of ``w -> w + h(w)`` and ``(min, max, mean)``."""
    jmap = dense_jacobian_det(lat)
    return jmap, (float(jmap.min()), float(jmap.max()), float(jmap.mean()))


# ---------------------------------------------------------------------------
# strain


@dataclass(frozen=True, eq=False)
class StrainField:
    """Green-Lagrange strain components on the pixel grid (dimensionless)."""

    exx: np.ndarray
    exy: np.ndarray
    eyx: np.ndarray
    eyy: np.ndarray

    def along(self, direction):
        """Normal strain ``d^T E d`` along a direction ``(dx, dy)`` (normalized here)."""
        d = np.asarray(direction, dtype=float)
        norm = np.hypot(d[0], d[1])
        if norm == 0:
            raise ValueError("direction must be nonzero")
        a, b = d / norm
        return a * a * self.exx + a * b * (self.exy + self.eyx) + b * b * self.eyy

    def project(self, axis=(1.0, 0.0)):
        """Normal strains along ``axis`` and along its perpendicular."""
        a, b = axis
        return self.along((a, b)), self.along((-b, a))

    def max_abs(self):
        return float(max(np.abs(c).max() for c in (self.exx, self.exy, self.eyx, self.eyy)))


def green_strain(field):
    """Green strain ``E = (G^T G - I) / 2`` with ``G = I + grad u``.

    Gradients are central differences, one-sided on the border rows and columns.
    """
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    if u.ndim != 3 or u.shape[2] != 2:
        raise ValueError("expected an (M, N, 2) displacement field")
    if min(u.shape[:2]) < 2:
        raise ValueError("field needs at least two pixels along each axis")
    ux_x, ux_y = np.gradient(u[..., 0])
    uy_x, uy_y = np.gradient(u[..., 1])
    gxx, gxy, gyx, gyy = 1.0 + ux_x, ux_y, uy_x, 1.0 + uy_y
    exx = 0.5 * (gxx * gxx + gyx * gyx - 1.0)
    eyy = 0.5 * (gxy * gxy + gyy * gyy - 1.0)
    exy = 0.5 * (gxx * gxy + gyx * gyy)
    return StrainField(exx, exy, exy.copy(), eyy)


# ---------------------------------------------------------------------------
# accuracy


def _field_stack(items):
    return np.stack([f.u if isinstance(f, DisplacementField) else np.asarray(f, float) for f in items])


def rmse(est, gt, scale=1.0):
    """Axial and lateral RMSE over every pixel and frame, times ``scale`` (mm/px)."""
    if len(est) != len(gt):
        raise ValueError(f"got {len(est)} estimated fields but {len(gt)} ground-truth fields")
    if len(est) == 0:
        raise ValueError("no fields to compare")
    a, b = _field_stack(est), _field_stack(gt)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    err = np.sqrt(np.mean((a - b) ** 2, axis=(0, 1, 2))) * scale
    return float(err[0]), float(err[1])


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1 or np.shape(a) != np.shape(b):
        raise ValueError("a and b must be 1-D and of equal length")
    d = d[d != 0]
    if d.size < MIN_NONZERO:
        raise ValueError(f"too few nonzero differences ({d.size} < {MIN_NONZERO})")
    ranks = rankdata(np.abs(d))
    return ranks, d > 0


def _exact_p(ranks, w_plus):
    # tied ranks are multiples of 1/2, so doubled ranks are integers
    r2 = np.rint(2 * ranks).astype(int)
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts += shifted
    counts /= counts.sum()
    t = int(round(2 * w_plus))
    lower = counts[: t + 1].sum()
    upper = counts[t:].sum()
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(ranks, w_plus):
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w_plus - mean) / np.sqrt(var)
    return float(min(1.0, 2.0 * ndtr(-abs(z))))


def wilcoxon_signed_rank(a, b):
    """Two-sided p-value of the paired signed-rank test of ``a`` against ``b``.

    Zero differences are dropped. Up to ``EXACT_MAX_N`` remaining pairs the null
    distribution is enumerated exactly (tied ranks included); above that a
    tie-corrected normal approximation without continuity correction is used.
    """
    ranks, positive = _signed_ranks(a, b)
    w_plus = float(ranks[positive].sum())
    if ranks.size <= EXACT_MAX_N:
        return float(_exact_p(ranks, w_plus))
    return _normal_p(ranks, w_plus)


def sample_pairs(est, gt, count=EXACT_MAX_N, seed=0, component=0):
    """Seeded ``(estimate, truth)`` samples of one component at random (frame, pixel)."""
    a, b = _field_stack(est), _field_stack(gt)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    idx = np.minimum((SplitMix64(seed).uniform(count) * (a[..., 0].size)).astype(int), a[..., 0].size - 1)
    return a[..., component].ravel()[idx], b[..., component].ravel()[idx]


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    rmse_axial: float
    rmse_lateral: float
    wilcoxon_p: float
    jdet_min: float
    jdet_max: float
    jdet_mean: float

    def __post_init__(self):
        if self.rmse_axial < 0 or self.rmse_lateral < 0:
            raise ValueError("RMSE must be nonnegative")
        if not (0.0 <= self.wilcoxon_p <= 1.0 or np.isnan(self.wilcoxon_p)):
            raise ValueError("p-value must lie in [0, 1]")

    def csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self)]
        writer.writerow(names)
        writer.writerow([repr(float(getattr(self, k))) for k in names])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def text(self):
        return (
            f"RMSE axial    {self.rmse_axial:.4f}\n"
            f"RMSE lateral  {self.rmse_lateral:.4f}\n"
            f"Wilcoxon p    {self.wilcoxon_p:.4f}\n"
            f"|J| mean [min max]  {self.jdet_mean:.4f} [{self.jdet_min:.4f} {self.jdet_max:.4f}]\n"
        )

    def as_dict(self):
        return asdict(self)


def evaluate(est, gt, jdet_maps, scale=1.0, samples=EXACT_MAX_N, seed=0):
    """Build an :class:`EvalReport` from accumulated fields and Jacobian maps.

    The Wilcoxon test compares seeded samples of the axial component; if the
    samples hold too few nonzero differences the p-value is reported as NaN.
    """
    ax, lat = rmse(est, gt, scale)
    try:
        p = wilcoxon_signed_rank(*sample_pairs(est, gt, samples, seed))
    except ValueError:
        p = float("nan")
    j = np.concatenate([np.ravel(m) for m in jdet_maps]) if len(jdet_maps) else np.array([1.0])
    return EvalReport(ax, lat, p, float(j.min()), float(j.max()), float(j.mean()))


# ---------------------------------------------------------------------------
# map export

# PNG heatmaps use a fixed blue-white-red ramp: low -> (0, 0, 255), mid -> white,
# high -> (255, 0, 0); the range is symmetric about ``center``.


def heatmap_rgb(values, center=0.0, span=None):
    v = np.asarray(values, dtype=float)
    if span is None:
        span = float(np.max(np.abs(v - center))) or 1.0
    t = np.clip((v - center) / span, -1.0, 1.0)
    rgb = np.empty(v.shape + (3,))
    rgb[..., 0] = np.where(t < 0, 1.0 + t, 1.0)
    rgb[..., 1] = 1.0 - np.abs(t)
    rgb[..., 2] = np.where(t > 0, 1.0 - t, 1.0)
    return np.rint(rgb * 255).astype(np.uint8)


def export_map(path, values, png=False, center=0.0):
    """Write a scalar map in the single-channel binary layout, plus an optional PNG."""
    write_scalar_map(path, values)
    if png:
        from PIL import Image

        Image.fromarray(heatmap_rgb(values, center)).save(str(path) + ".png")
