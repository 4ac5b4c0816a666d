"""Tunable settings shared by the energy terms and the LM solver."""

from dataclasses import dataclass, field, fields, replace
from typing import Optional

PENALTY_KINDS = ("proposed", "rohlfing", "heyde", "none")
DATA_TERMS = ("tukey", "ssd")
INTERPOLATIONS = ("bilinear", "cubic")
SVD_BACKENDS = ("auto", "exact", "truncated")


@dataclass(frozen=True)
class LMSettings:
    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    energy_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        for name in ("lambda_init", "grad_tol", "step_tol", "energy_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down > 0.0:
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass(frozen=True)
class EnergyConfig:
    """All knobs of the registration energy.

    ``tukey_c`` is in gray levels (images are expected on a 0..255 scale),
    ``gamma`` weights the gradient regularizer, ``phi`` and ``tau`` shape the
    Jacobian penalty. ``rank_k`` switches on low-rank denoising of whole
    sequences before registration.
    """

    tukey_c: float = 20.0
    gamma: float = 0.1
    phi: float = 5e-3
    tau: float = 0.1
    rank_k: Optional[int] = None
    penalty_kind: str = "proposed"
    data_term: str = "tukey"
    spacing: float = 8.0
    interpolation: str = "bilinear"
    svd_backend: str = "auto"
    lm: LMSettings = field(default_factory=LMSettings)

    def __post_init__(self):
        vals = (self.tukey_c, self.gamma, self.phi, self.tau, self.spacing)
        if not all(map(_finite, vals)):
            raise ValueError("EnergyConfig values must be finite")
        if self.tukey_c <= 0:
            raise ValueError("tukey_c must be positive")
        if self.gamma < 0 or self.phi < 0:
            raise ValueError("gamma and phi must be nonnegative")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.rank_k is not None and self.rank_k < 1:
            raise ValueError("rank_k must be a positive integer")
        _check_choice("penalty_kind", self.penalty_kind, PENALTY_KINDS)
        _check_choice("data_term", self.data_term, DATA_TERMS)
        _check_choice("interpolation", self.interpolation, INTERPOLATIONS)
        _check_choice("svd_backend", self.svd_backend, SVD_BACKENDS)

    def with_(self, **changes):
        return replace(self, **changes)

    def as_flat_dict(self):
        """Flatten to ``key -> value`` with LM settings prefixed ``lm.``."""
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "lm"}
        for f in fields(self.lm):
            out["lm." + f.name] = getattr(self.lm, f.name)
        return out

    @classmethod
    def from_flat_dict(cls, values, base=None):
        """Inverse of :meth:`as_flat_dict`; string values are coerced."""
        base = base or cls()
        top, lm = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        lm_types = {f.name: f.type for f in fields(LMSettings)}
        for key, raw in values.items():
            if key.startswith("lm."):
                name = key[3:]
                if name not in lm_types:
                    raise KeyError(f"unknown LM setting {name!r}")
                lm[name] = _coerce(raw, lm_types[name])
            else:
                if key not in types or key == "lm":
                    raise KeyError(f"unknown config key {key!r}")
                top[key] = _coerce(raw, types[key])
        new_lm = replace(base.lm, **lm)
        return replace(base, lm=new_lm, **top)


def _finite(x):
    return x == x and abs(x) != float("inf")


def _check_choice(name, value, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    if raw.lower() in ("none", "") and "Optional" in typ:
        return None
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw
