"""Terms of the registration energy, each integral taken as a pixel mean."""

import numpy as np

from .config import EnergyConfig
from .deform import (
    dense_field,
    dense_gradient,
    dense_jacobian_det,
    inside_image,
    pixel_grid,
    warp_with_field,
)

LOG_FLOOR = 1e-12  # |J| at or below this is charged |log(LOG_FLOOR)| by the log penalty


def tukey_rho(x, c):
    """Tukey biweight loss; quadratic near zero, saturating at ``c**2 / 6``."""
    x = np.asarray(x, dtype=float)
    z = np.minimum((x / c) ** 2, 1.0)
    return (c * c / 6.0) * (1.0 - (1.0 - z) ** 3)


def tukey_weight(x, c):
    """IRLS weight ``rho'(x) / x``: ``(1 - (x/c)^2)^2`` inside ``|x| < c``, else 0."""
    x = np.asarray(x, dtype=float)
    z = (x / c) ** 2
    return np.where(z < 1.0, (1.0 - z) ** 2, 0.0)


def residual_image(f0, f1, lat, order="bilinear"):
    """``f0(w + h(w)) - f1(w)``, zero where ``w + h(w)`` falls outside the image."""
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    if f0.shape != f1.shape:
        raise ValueError(f"image shapes differ: {f0.shape} vs {f1.shape}")
    if f0.shape != tuple(lat.domain):
        raise ValueError(f"image shape {f0.shape} does not match lattice domain {lat.domain}")
    # pixels whose sample leaves the image are excluded (residual 0), as in the solver
    u = dense_field(lat)
    gx, gy = pixel_grid(f0.shape)
    inside = inside_image(gx + u[..., 0], gy + u[..., 1], f0.shape)
    return np.where(inside, warp_with_field(f0, u, order) - f1, 0.0)


def discrepancy(f0, f1, lat, c, order="bilinear"):
    """Mean Tukey loss of ``f0(w + h(w)) - f1(w)`` over the pixel grid."""
    return float(np.mean(tukey_rho(residual_image(f0, f1, lat, order), c)))


def ssd(f0, f1, lat, order="bilinear"):
    """Mean squared residual (the plain quadratic data term)."""
    r = residual_image(f0, f1, lat, order)
    return float(np.mean(r * r))


def tikhonov(lat, gamma):
    """``gamma`` times the summed pixel means of squared gradient norms of h."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    grads = dense_gradient(lat)
    return float(gamma * sum(np.mean(g * g) for g in grads))


# ---------------------------------------------------------------------------
# Jacobian penalties, per pixel


def proposed_delta(jdet, phi, tau):
    """Per-pixel penalty ``exp(-J) + phi * |J|`` outside the band ``|J - 1| < tau``."""
    jdet = np.asarray(jdet, dtype=float)
    active = np.abs(jdet - 1.0) >= tau
    return np.where(active, np.exp(-jdet) + phi * np.abs(jdet), 0.0)


def log_penalty(jdet):
    jdet = np.asarray(jdet, dtype=float)
    return np.abs(np.log(np.maximum(jdet, LOG_FLOOR)))


def squared_penalty(jdet):
    jdet = np.asarray(jdet, dtype=float)
    return (jdet - 1.0) ** 2


def penalty_terms(jdet, cfg):
    """Per-pixel value, d/dJ and a nonnegative curvature for the chosen penalty.

    The curvature plays the Gauss-Newton role: for the proposed penalty it is
    ``d'^2 / (2 d)``, which is what the residual ``sqrt(2 d)`` contributes; the
    indicator is held fixed at the current iterate.
    """
    kind = cfg.penalty_kind
    jdet = np.asarray(jdet, dtype=float)
    if kind == "none":
        z = np.zeros_like(jdet)
        return z, z, z
    if kind == "proposed":
        value = proposed_delta(jdet, cfg.phi, cfg.tau)
        active = value > 0
        dval = np.where(active, -np.exp(-jdet) + cfg.phi * np.sign(jdet), 0.0)
        curv = np.where(active, dval * dval / (2.0 * np.where(active, value, 1.0)), 0.0)
        return value, dval, curv
    if kind == "heyde":
        return squared_penalty(jdet), 2.0 * (jdet - 1.0), np.full_like(jdet, 2.0)
    if kind == "rohlfing":
        value = log_penalty(jdet)
        ok = jdet > LOG_FLOOR
        safe = np.where(ok, jdet, 1.0)
        dval = np.where(ok, np.sign(np.log(safe)) / safe, 0.0)
        curv = np.where(ok, 1.0 / (safe * safe), 0.0)
        return value, dval, curv
    raise ValueError(f"unknown penalty kind {kind!r}")


def topology_penalty(lat, phi, tau):
    """Pixel mean of the proposed penalty."""
    if phi < 0 or not 0 <= tau < 1:
        raise ValueError("need phi >= 0 and 0 <= tau < 1")
    return float(np.mean(proposed_delta(dense_jacobian_det(lat), phi, tau)))


def rohlfing_penalty(lat):
    """Pixel mean of ``|log J|`` (non-positive J capped, see ``LOG_FLOOR``)."""
    return float(np.mean(log_penalty(dense_jacobian_det(lat))))


def heyde_penalty(lat):
    """Pixel mean of ``(J - 1)^2``."""
    return float(np.mean(squared_penalty(dense_jacobian_det(lat))))


def selected_penalty(lat, cfg):
    kind = cfg.penalty_kind
    if kind == "none":
        return 0.0
    if kind == "proposed":
        return topology_penalty(lat, cfg.phi, cfg.tau)
    if kind == "rohlfing":
        return rohlfing_penalty(lat)
    if kind == "heyde":
        return heyde_penalty(lat)
    raise ValueError(f"unknown penalty kind {kind!r}")


def data_term(f0, f1, lat, cfg):
    if cfg.data_term == "ssd":
        return ssd(f0, f1, lat, cfg.interpolation)
    return discrepancy(f0, f1, lat, cfg.tukey_c, cfg.interpolation)


def pair_energy(f0, f1, lat, cfg=None):
    """Energy of one frame pair, returned as a dict of its terms plus ``total``."""
    cfg = cfg or EnergyConfig()
    terms = {
        "data": data_term(f0, f1, lat, cfg),
        "reg": tikhonov(lat, cfg.gamma),
        "topology": selected_penalty(lat, cfg),
    }
    terms["total"] = terms["data"] + terms["reg"] + terms["topology"]
    return terms


def total_energy(seq, lats, cfg=None):
    """Sum over consecutive pairs of data, regularizer and penalty terms."""
    cfg = cfg or EnergyConfig()
    if len(lats) != seq.frame_count - 1:
        raise ValueError(f"need {seq.frame_count - 1} lattices, got {len(lats)}")
    return float(
        sum(pair_energy(seq[s], seq[s + 1], lat, cfg)["total"] for s, lat in enumerate(lats))
    )
