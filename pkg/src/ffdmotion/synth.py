"""Synthetic sequences with exactly known motion, for testing and benchmarks.

Frame 0 is an analytic texture (a sum of seeded Gaussians). Each pair ``s``
(frames ``s -> s+1``) has an analytic incremental field ``u_s`` with
``f_{s+1}(w) = f_s(w + u_s(w))``; frames are produced by evaluating the
texture at ``w + T_s(w)`` where ``T_s`` is the exact composition of the
increments, so no interpolation is involved. Noise is applied afterwards.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .deform import DisplacementField, pixel_grid, write_field
from .rng import SplitMix64, derive_seed
from .sequence import ImageSequence, save_sequence

TEXTURES = ("smooth-blobs", "speckle")
MOTIONS = ("static", "translation", "periodic-contraction", "large-warp")

BLOB_COUNT = 12
BACKGROUND = 30.0
PEAK = 255.0  # frame-0 maximum, matching 8-bit gray levels


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 20)  # (M, N, S)
    texture: str = "speckle"
    motion: str = "periodic-contraction"
    amplitude: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        m, n, s = self.dims
        if m < 1 or n < 1 or s < 2:
            raise ValueError("dims must be positive with at least two frames")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitude and noise_sigma must be nonnegative")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


class Texture:
    """Sum of isotropic Gaussians on a constant background, defined on R^2.

    ``from_seed`` draws the blobs and rescales so frame 0 spans at most 0..255.
    """

    def __init__(self, centers, sigmas, amplitudes, background=BACKGROUND):
        self.centers = np.asarray(centers, dtype=float)
        self.sigmas = np.asarray(sigmas, dtype=float)
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        self.background = float(background)

    @classmethod
    def from_seed(cls, kind, dims, seed):
        m, n = dims
        rng = SplitMix64(derive_seed(seed, 0))
        if kind == "smooth-blobs":
            count = BLOB_COUNT
            size = min(m, n)
            sig = (0.07 * size, 0.15 * size)
            amp = (80.0, 200.0)
        else:
            count = max(1, int(round(m * n / 20)))
            sig = (1.0, 2.0)
            amp = (40.0, 160.0)
        cx = rng.uniform(count, -0.1 * m, 1.1 * m)
        cy = rng.uniform(count, -0.1 * n, 1.1 * n)
        sigmas = rng.uniform(count, *sig)
        amps = rng.uniform(count, *amp)
        raw = cls(np.stack([cx, cy], -1), sigmas, amps)
        # one global gain so frame 0 peaks at PEAK on the pixel grid
        gain = PEAK / float(raw(*np.meshgrid(np.arange(m), np.arange(n), indexing="ij")).max())
        return cls(raw.centers, sigmas, amps * gain, BACKGROUND * gain)

    def __call__(self, x, y):
        out = np.full(np.shape(x), self.background)
        for (cx, cy), s, a in zip(self.centers, self.sigmas, self.amplitudes):
            out += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * s * s))
        return out


# ---------------------------------------------------------------------------
# motion models


def _contraction_pattern(x, y, m, n):
    # axial squeeze with lateral bulge about the centre; divergence-free when M == N
    ax = np.pi * (x - (m - 1) / 2.0) / m
    ay = np.pi * (y - (n - 1) / 2.0) / n
    return -np.sin(ax) * np.cos(ay), np.cos(ax) * np.sin(ay)


def _fold_pattern(x, y, m, n):
    period = m / 2.0
    env = np.exp(-((y - (n - 1) / 2.0) ** 2) / (2.0 * (n / 4.0) ** 2))
    return np.sin(2.0 * np.pi * (x - (m - 1) / 2.0) / period) * env, np.zeros_like(y)


def contraction_cycle(cfg, s):
    """Accumulated contraction amplitude at frame ``s`` (one full cycle)."""
    frames = cfg.dims[2]
    return cfg.amplitude * (1.0 - np.cos(2.0 * np.pi * s / (frames - 1))) / 2.0


def increment(cfg, s, x, y):
    """Analytic incremental field of pair ``s`` (frames s -> s+1) at ``(x, y)``."""
    m, n, frames = cfg.dims
    if cfg.motion == "static":
        return np.zeros_like(x), np.zeros_like(y)
    if cfg.motion == "translation":
        return np.full_like(x, cfg.amplitude), np.zeros_like(y)
    if cfg.motion == "periodic-contraction":
        step = contraction_cycle(cfg, s + 1) - contraction_cycle(cfg, s)
        gx, gy = _contraction_pattern(x, y, m, n)
        return step * gx, step * gy
    if cfg.motion == "large-warp":
        # ramps up so the late pairs fold once amplitude * 4 pi / M exceeds 1
        step = cfg.amplitude * (s + 1) / (frames - 1)
        gx, gy = _fold_pattern(x, y, m, n)
        return step * gx, step * gy
    raise ValueError(f"unknown motion {cfg.motion!r}")


def accumulated_position(cfg, s, x, y):
    """``w + T_s(w)``: where frame-``s`` pixel ``w`` samples frame 0."""
    px, py = np.array(x, dtype=float), np.array(y, dtype=float)
    for j in range(s - 1, -1, -1):
        dx, dy = increment(cfg, j, px, py)
        px, py = px + dx, py + dy
    return px, py


def accumulated_truth(cfg):
    """True accumulated fields ``T_1 .. T_{S-1}`` on the pixel grid."""
    m, n, frames = cfg.dims
    gx, gy = pixel_grid((m, n))
    out = []
    for s in range(1, frames):
        px, py = accumulated_position(cfg, s, gx, gy)
        out.append(DisplacementField(np.stack([px - gx, py - gy], -1)))
    return out


def increment_jacobian(cfg, s, eps=1e-4):
    """Jacobian determinant of ``w -> w + u_s(w)`` by central differences."""
    m, n, _ = cfg.dims
    gx, gy = pixel_grid((m, n))

    def comp(x, y):
        dx, dy = increment(cfg, s, x, y)
        return x + dx, y + dy

    xp, yp = comp(gx + eps, gy)
    xm, ym = comp(gx - eps, gy)
    xq, yq = comp(gx, gy + eps)
    xr, yr = comp(gx, gy - eps)
    a, c = (xp - xm) / (2 * eps), (yp - ym) / (2 * eps)
    b, d = (xq - xr) / (2 * eps), (yq - yr) / (2 * eps)
    return a * d - b * c


# ---------------------------------------------------------------------------


def noise_model(img, sigma, seed):
    """Multiplicative speckle surrogate ``img * (1 + sigma * g)``, g ~ N(0, 1)."""
    img = np.asarray(img, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return img.copy()
    g = SplitMix64(seed).normal(img.size).reshape(img.shape)
    return img * (1.0 + sigma * g)


def salt_and_pepper(img, fraction, seed, low=0.0, high=255.0):
    """Replace a seeded ``fraction`` of pixels by ``low`` or ``high`` at random."""
    img = np.array(img, dtype=np.float64)
    rng = SplitMix64(seed)
    hit = rng.uniform(img.size).reshape(img.shape) < fraction
    salt = rng.uniform(img.size).reshape(img.shape) < 0.5
    img[hit & salt] = high
    img[hit & ~salt] = low
    return img


def generate_phantom(cfg):
    """Return ``(ImageSequence, [incremental truth field per pair])``."""
    m, n, frames = cfg.dims
    tex = Texture.from_seed(cfg.texture, (m, n), cfg.seed)
    gx, gy = pixel_grid((m, n))
    out = []
    for s in range(frames):
        px, py = accumulated_position(cfg, s, gx, gy)
        frame = tex(px, py)
        out.append(noise_model(frame, cfg.noise_sigma, derive_seed(cfg.seed, s + 1)))
    truth = []
    for s in range(frames - 1):
        dx, dy = increment(cfg, s, gx, gy)
        truth.append(DisplacementField(np.stack([dx, dy], -1)))
    return ImageSequence(np.stack(out)), truth


def write_phantom(directory, cfg, record=True):
    """Write the phantom into ``directory``.

    Files: ``sequence.raw``, per-pair increments ``truth_XXX.dsp``, exact
    accumulated fields ``accum_truth_XXX.dsp`` (XXX = frame 1..S-1) and, when
    ``record`` is set, the config as ``phantom.json``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seq, truth = generate_phantom(cfg)
    save_sequence(directory / "sequence.raw", seq, "raw-f32")
    paths = [directory / "sequence.raw"]
    for s, f in enumerate(truth):
        paths.append(directory / f"truth_{s:03d}.dsp")
        write_field(paths[-1], f)
    for s, f in enumerate(accumulated_truth(cfg), start=1):
        paths.append(directory / f"accum_truth_{s:03d}.dsp")
        write_field(paths[-1], f)
    if record:
        paths.append(directory / "phantom.json")
        paths[-1].write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return seq, truth, paths
