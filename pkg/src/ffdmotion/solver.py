"""Levenberg-Marquardt registration of frame pairs and whole sequences.

The per-pair objective is ``data + tikhonov + penalty`` (see :mod:`.energy`).
Each LM iteration linearizes around the current control points:

* data term: iteratively reweighted least squares. Weights ``rho'(r)/r`` are
  frozen at the iterate, which makes ``J^T W r`` the exact gradient of the
  robust term and ``J^T W J`` its Gauss-Newton Hessian;
* regularizer: exactly quadratic in the control points;
* Jacobian penalty: per-pixel chain rule through ``det(I + grad h)``, with the
  acceptance band of the proposed penalty held fixed for the iteration.

Steps are damped Marquardt style, ``(H + lam * diag(H)) d = -g``, and only
accepted when the true energy goes down.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import cg

from .config import EnergyConfig
from .deform import (
    DeformationLattice,
    DisplacementField,
    inside_image,
    interpolate,
    pixel_grid,
    pixel_operators,
)
from .energy import penalty_terms, tukey_rho, tukey_weight
from .lowrank import denoise_sequence

log = logging.getLogger(__name__)

DENSE_SOLVE_LIMIT = 2000


@dataclass
class RegistrationResult:
    lattice: DeformationLattice
    final_energy: float
    iterations: int
    energy_history: List[float]
    jdet_range: tuple
    converged: bool = True
    status: str = "converged"
    terms: dict = field(default_factory=dict)
    log_rows: list = field(default_factory=list)
    message: Optional[str] = None

    @property
    def field(self):
        from .deform import sample_field

        return sample_field(self.lattice)


@dataclass
class _State:
    theta: np.ndarray
    residual: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    grads: tuple  # hx_x, hx_y, hy_x, hy_y (raveled)
    jdet: np.ndarray
    terms: dict

    @property
    def total(self):
        return self.terms["total"]


class PairProblem:
    """Energy, gradient and Gauss-Newton Hessian for one frame pair.

    Parameters are ``lattice.params()``: every axial coefficient followed by
    every lateral one.
    """

    def __init__(self, f0, f1, template, cfg=None):
        self.cfg = cfg or EnergyConfig()
        self.f0 = np.asarray(f0, dtype=np.float64)
        self.f1 = np.asarray(f1, dtype=np.float64)
        if self.f0.shape != self.f1.shape:
            raise ValueError(f"image shapes differ: {self.f0.shape} vs {self.f1.shape}")
        if self.f0.shape != tuple(template.domain):
            raise ValueError("lattice domain does not match the images")
        self.template = template
        self.B, self.Dx, self.Dy = pixel_operators(template)
        self.npix = self.f0.size
        self.k = self.B.shape[1]
        gx, gy = pixel_grid(self.f0.shape)
        self.grid_x, self.grid_y = gx.ravel(), gy.ravel()
        self.f1_flat = self.f1.ravel()
        lap = (self.Dx.T @ self.Dx + self.Dy.T @ self.Dy) * (2.0 * self.cfg.gamma / self.npix)
        self.H_reg = sparse.block_diag([lap, lap], format="csr")

    # -- evaluation -------------------------------------------------------

    def state(self, theta):
        cfg = self.cfg
        k = self.k
        px, py = theta[:k], theta[k:]
        hx, hy = self.B @ px, self.B @ py
        warped, gx, gy = interpolate(
            self.f0, self.grid_x + hx, self.grid_y + hy, cfg.interpolation, with_gradient=True
        )
        # samples that leave the image carry no information; drop them
        inside = inside_image(self.grid_x + hx, self.grid_y + hy, self.f0.shape)
        r = np.where(inside, warped - self.f1_flat, 0.0)
        gx, gy = np.where(inside, gx, 0.0), np.where(inside, gy, 0.0)
        grads = (self.Dx @ px, self.Dy @ px, self.Dx @ py, self.Dy @ py)
        hx_x, hx_y, hy_x, hy_y = grads
        jdet = (1.0 + hx_x) * (1.0 + hy_y) - hx_y * hy_x
        if cfg.data_term == "ssd":
            data = float(np.mean(r * r))
        else:
            data = float(np.mean(tukey_rho(r, cfg.tukey_c)))
        reg = float(cfg.gamma * sum(np.mean(g * g) for g in grads))
        pen = float(np.mean(penalty_terms(jdet, cfg)[0]))
        terms = {"data": data, "reg": reg, "topology": pen, "total": data + reg + pen}
        return _State(np.array(theta, dtype=float), r, gx, gy, grads, jdet, terms)

    def energy(self, theta):
        return self.state(theta).total

    def data_weights(self, r):
        if self.cfg.data_term == "ssd":
            return np.full_like(r, 2.0)
        return tukey_weight(r, self.cfg.tukey_c)

    def _jdet_operator(self, st):
        hx_x, hx_y, hy_x, hy_y = st.grads
        dj_dpx = sparse.diags(1.0 + hy_y) @ self.Dx - sparse.diags(hy_x) @ self.Dy
        dj_dpy = sparse.diags(1.0 + hx_x) @ self.Dy - sparse.diags(hx_y) @ self.Dx
        return sparse.hstack([dj_dpx, dj_dpy], format="csr")

    def linearize(self, st):
        """Gradient ``g`` and Gauss-Newton Hessian ``H`` (sparse) at a state."""
        n = self.npix
        B = self.B
        w = self.data_weights(st.residual)
        wr = w * st.residual
        g = np.concatenate([B.T @ (wr * st.gx), B.T @ (wr * st.gy)]) / n
        hxx = B.T @ sparse.diags(w * st.gx * st.gx) @ B
        hxy = B.T @ sparse.diags(w * st.gx * st.gy) @ B
        hyy = B.T @ sparse.diags(w * st.gy * st.gy) @ B
        H = sparse.bmat([[hxx, hxy], [hxy.T, hyy]], format="csr") / n
        g = g + self.H_reg @ st.theta
        H = H + self.H_reg
        if self.cfg.penalty_kind != "none":
            _, dval, curv = penalty_terms(st.jdet, self.cfg)
            if np.any(dval) or np.any(curv):
                G = self._jdet_operator(st)
                g = g + (G.T @ dval) / n
                H = H + (G.T @ sparse.diags(curv) @ G) / n
        return g, H.tocsr()

    # -- least-squares view -------------------------------------------------

    def frozen_at(self, theta):
        """IRLS weights and penalty band frozen at ``theta``."""
        st = self.state(theta)
        active = penalty_terms(st.jdet, self.cfg)[0] > 0
        return self.data_weights(st.residual), active

    def residuals(self, theta, frozen):
        """Stacked residual vector whose half squared norm models the energy."""
        w, active = frozen
        st = self.state(theta)
        n = self.npix
        parts = [np.sqrt(w / n) * st.residual]
        scale = np.sqrt(2.0 * self.cfg.gamma / n)
        parts += [scale * g for g in st.grads]
        parts.append(self._penalty_residual(st.jdet, active))
        return np.concatenate(parts)

    def _penalty_residual(self, jdet, active):
        cfg, n = self.cfg, self.npix
        if cfg.penalty_kind == "none":
            return np.zeros(0)
        if cfg.penalty_kind == "proposed":
            delta = np.exp(-jdet) + cfg.phi * np.abs(jdet)
            return np.sqrt(2.0 * delta[active] / n)
        if cfg.penalty_kind == "heyde":
            return np.sqrt(2.0 / n) * (jdet - 1.0)
        raise ValueError("the log penalty has no least-squares residual form")

    def residual_jacobian(self, theta, frozen):
        """Analytic Jacobian of :meth:`residuals` (dense, for checking)."""
        w, active = frozen
        st = self.state(theta)
        n = self.npix
        B = self.B
        sw = np.sqrt(w / n)
        blocks = [sparse.hstack([sparse.diags(sw * st.gx) @ B, sparse.diags(sw * st.gy) @ B])]
        scale = np.sqrt(2.0 * self.cfg.gamma / n)
        Z = sparse.csr_matrix(self.Dx.shape)
        blocks += [
            scale * sparse.hstack([self.Dx, Z]),
            scale * sparse.hstack([self.Dy, Z]),
            scale * sparse.hstack([Z, self.Dx]),
            scale * sparse.hstack([Z, self.Dy]),
        ]
        kind = self.cfg.penalty_kind
        if kind != "none":
            G = self._jdet_operator(st)
            jd = st.jdet
            if kind == "proposed":
                delta = np.exp(-jd) + self.cfg.phi * np.abs(jd)
                ddelta = -np.exp(-jd) + self.cfg.phi * np.sign(jd)
                coef = np.sqrt(2.0 / n) * ddelta / (2.0 * np.sqrt(delta))
                blocks.append(sparse.diags(coef[active]) @ G[np.flatnonzero(active)])
            elif kind == "heyde":
                blocks.append(np.sqrt(2.0 / n) * G)
            else:
                raise ValueError("the log penalty has no least-squares residual form")
        return sparse.vstack(blocks).toarray()


def _solve(H, rhs):
    n = H.shape[0]
    if n <= DENSE_SOLVE_LIMIT:
        A = H.toarray()
        try:
            return scipy.linalg.solve(A, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            return np.linalg.lstsq(A, rhs, rcond=None)[0]
    d = H.diagonal()
    precond = sparse.diags(1.0 / np.where(d > 0, d, 1.0))
    x, _ = cg(H, rhs, M=precond, rtol=1e-10, maxiter=10 * n)
    return x


def register_pair(f0, f1, init=None, cfg=None, pair_index=0):
    """Fit a lattice so that ``f0(w + h(w))`` matches ``f1(w)``.

    ``init`` is the starting lattice (zero lattice with ``cfg.spacing`` when
    omitted). Returns a :class:`RegistrationResult`; hitting ``max_iters``
    yields the best iterate found with ``converged=False``.
    """
    cfg = cfg or EnergyConfig()
    f0 = np.asarray(f0, dtype=np.float64)
    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
        raise ValueError("frames must be finite")
    if init is None:
        init = DeformationLattice.zeros(f0.shape, cfg.spacing)
    lm = cfg.lm
    prob = PairProblem(f0, f1, init, cfg)
    st = prob.state(init.params())
    if not np.isfinite(st.total):
        raise ValueError("energy is not finite at the initial lattice")
    lam = lm.lambda_init
    history = [st.total]
    rows = []
    iters = 0
    converged = False
    g, H = prob.linearize(st)
    while iters < lm.max_iters:
        if np.max(np.abs(g)) < lm.grad_tol:
            converged = True
            break
        iters += 1
        diag = H.diagonal()
        floor = 1e-12 * max(float(diag.max()), 1.0)
        damping = sparse.diags(lam * np.maximum(diag, floor))
        step = _solve(H + damping, -g)
        trial = prob.state(st.theta + step)
        accepted = bool(np.isfinite(trial.total) and trial.total < st.total)
        rows.append(
            (pair_index, iters, trial.total, lam, int(accepted),
             float(trial.jdet.min()), float(trial.jdet.max()))
        )
        small_step = np.linalg.norm(step) <= lm.step_tol * (np.linalg.norm(st.theta) + lm.step_tol)
        if accepted:
            drop = st.total - trial.total
            st = trial
            history.append(st.total)
            lam = max(lam * lm.lambda_down, 1e-15)
            if small_step or drop <= lm.energy_tol * max(abs(st.total), 1.0):
                converged = True
                break
            g, H = prob.linearize(st)
        else:
            lam *= lm.lambda_up
            predicted = -(g @ step + 0.5 * step @ (H @ step))
            if small_step or predicted <= lm.energy_tol * max(abs(st.total), 1.0) or lam > 1e16:
                converged = True
                break
    lattice = init.from_params(st.theta)
    status = "converged" if converged else "not converged"
    if not converged:
        log.info("pair %d: no convergence within %d iterations", pair_index, lm.max_iters)
    return RegistrationResult(
        lattice=lattice,
        final_energy=st.total,
        iterations=iters,
        energy_history=history,
        jdet_range=(float(st.jdet.min()), float(st.jdet.max())),
        converged=converged,
        status=status,
        terms=dict(st.terms),
        log_rows=rows,
    )


def register_sequence(seq, cfg=None, init=None):
    """Register every consecutive pair, warm-starting each from the previous.

    With ``cfg.rank_k`` set the sequence is first replaced by its rank-k
    Casorati approximation. A pair that raises is recorded with
    ``status="failed"`` and the next pair restarts from the zero lattice.
    """
    cfg = cfg or EnergyConfig()
    if cfg.rank_k is not None:
        seq = denoise_sequence(seq, cfg.rank_k, backend=cfg.svd_backend)
    m, n, s = seq.dims
    zero = DeformationLattice.zeros((m, n), cfg.spacing)
    current = init or zero
    results = []
    for p in range(s - 1):
        try:
            res = register_pair(seq[p], seq[p + 1], current, cfg, pair_index=p)
            current = res.lattice
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("pair %d failed: %s", p, exc)
            res = RegistrationResult(
                lattice=current, final_energy=float("nan"), iterations=0, energy_history=[],
                jdet_range=(float("nan"), float("nan")), converged=False, status="failed",
                message=str(exc),
            )
            current = zero
        results.append(res)
    return results


def mean_ssd(seq, results, cfg=None):
    """Mean over pairs of the masked mean squared residual at each final lattice."""
    plain = (cfg or EnergyConfig()).with_(data_term="ssd")
    vals = []
    for s, res in enumerate(results):
        if res.status == "failed":
            continue
        prob = PairProblem(seq[s], seq[s + 1], res.lattice, plain)
        vals.append(prob.state(res.lattice.params()).terms["data"])
    return float(np.mean(vals)) if vals else float("nan")


def _as_field(item):
    if isinstance(item, RegistrationResult):
        return item.field.u
    if isinstance(item, DisplacementField):
        return item.u
    if isinstance(item, DeformationLattice):
        from .deform import dense_field

        return dense_field(item)
    return np.asarray(item, dtype=float)


def accumulate_displacement(results):
    """Compose per-pair fields into displacements relative to frame 0.

    Pair ``s`` relates frames by ``f_{s+1}(w) = f_s(w + u_s(w))``, so the
    accumulated field obeys ``f_s(w) = f_0(w + T_s(w))`` with
    ``T_s(w) = u_s(w) + T_{s-1}(w + u_s(w))``; the earlier field is sampled
    bilinearly with clamp-to-edge.
    """
    if not results:
        raise ValueError("need at least one pair")
    fields = [_as_field(r) for r in results]
    dims = fields[0].shape
    if any(f.shape != dims for f in fields):
        raise ValueError("all fields must share one domain")
    gx, gy = pixel_grid(dims[:2])
    total = fields[0].copy()
    out = [DisplacementField(total)]
    for u in fields[1:]:
        px, py = gx + u[..., 0], gy + u[..., 1]
        prev = np.stack([interpolate(total[..., c], px, py) for c in range(2)], axis=-1)
        total = u + prev
        out.append(DisplacementField(total))
    return out


LOG_HEADER = ("pair_index", "iter", "energy", "lambda", "accepted", "jdet_min", "jdet_max")


def write_convergence_log(results, path):
    """One CSV row per LM iteration across all pairs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for res in results:
            for row in res.log_rows:
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4],
                                 repr(row[5]), repr(row[6])])
