"""Image sequences, their on-disk formats, and the Casorati matrix view.

Pixel order inside a Casorati column is row-major: pixel ``(m, n)`` of an
``M x N`` frame (zero-based) lands at row ``m * N + n``. Column ``s`` is frame
``s``.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SEQ_MAGIC = 0x544D4F54
FORMATS = ("raw-f32", "pgm-stack", "npy-like")


@dataclass(frozen=True, eq=False)
class ImageSequence:
    """Stack of ``S >= 2`` equally sized real frames, stored as (S, M, N) float64."""

    frames: np.ndarray

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("frames must form an (S, M, N) stack")
        s, m, n = arr.shape
        if s < 2 or m < 1 or n < 1:
            raise ValueError(f"need S >= 2 and M, N >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("pixel values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @classmethod
    def from_frames(cls, frames):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent frame sizes: {sorted(shapes)}")
        return cls(np.stack([np.asarray(f, dtype=np.float64) for f in frames]))

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def dims(self):
        return self.height, self.width, self.frame_count

    def __len__(self):
        return self.frame_count

    def __getitem__(self, s):
        return self.frames[s]


@dataclass(frozen=True, eq=False)
class CasoratiMatrix:
    data: np.ndarray
    source_dims: tuple  # (M, N, S)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        m, n, s = (int(v) for v in self.source_dims)
        if data.shape != (m * n, s):
            raise ValueError(
                f"matrix shape {data.shape} does not match source dims {(m, n, s)}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "source_dims", (m, n, s))


def to_casorati(seq):
    """Stack vectorized frames as columns of an (M*N, S) matrix."""
    m, n, s = seq.dims
    data = seq.frames.reshape(s, m * n).T.copy()
    return CasoratiMatrix(data, (m, n, s))


def from_casorati(mat):
    """Reshape Casorati columns back into frames."""
    if isinstance(mat, CasoratiMatrix):
        data, (m, n, s) = mat.data, mat.source_dims
    else:
        raise TypeError("from_casorati expects a CasoratiMatrix")
    return ImageSequence(data.T.reshape(s, m, n))


# ---------------------------------------------------------------------------
# file formats


def save_sequence(path, seq, format=None):
    """Write ``seq``; ``format`` is guessed from the suffix as in :func:`load_sequence`."""
    path = Path(path)
    if format is None:
        format = _guess_format(path)
    if format == "raw-f32":
        m, n, s = seq.dims
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4I", SEQ_MAGIC, m, n, s))
            fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
    elif format == "npy-like":
        np.save(path, seq.frames)
    elif format == "pgm-stack":
        _write_pgm_stack(path, seq)
    else:
        raise ValueError(f"unknown format {format!r}")


def load_sequence(path, format=None):
    """Read a sequence from ``path``.

    ``format`` defaults to a guess from the suffix: ``.npy`` means npy-like,
    ``.pgm`` or a directory means pgm-stack, anything else raw-f32.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if format is None:
        format = _guess_format(path)
    if format == "raw-f32":
        return _read_raw(path)
    if format == "npy-like":
        return ImageSequence(np.load(path, allow_pickle=False))
    if format == "pgm-stack":
        return _read_pgm_stack(path)
    raise ValueError(f"unknown format {format!r}")


def _guess_format(path):
    if path.is_dir() or path.suffix.lower() == ".pgm":
        return "pgm-stack"
    if path.suffix.lower() == ".npy":
        return "npy-like"
    return "raw-f32"


def _read_raw(path):
    data = path.read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header")
    magic, m, n, s = struct.unpack("<4I", data[:16])
    if magic != SEQ_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08X}")
    count = (len(data) - 16) // 4
    if count != m * n * s or (len(data) - 16) % 4:
        raise ValueError(f"{path}: truncated payload ({count} values, header promises {m * n * s})")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(s, m, n)
    return ImageSequence(arr)


def _write_pgm_stack(path, seq):
    frames = np.clip(np.rint(seq.frames), 0, 65535)
    maxval = 255 if frames.max() <= 255 else 65535
    dtype = np.uint8 if maxval == 255 else ">u2"

    def encode(f):
        return f"P5\n{f.shape[1]} {f.shape[0]}\n{maxval}\n".encode("ascii") + f.astype(dtype).tobytes()

    if path.is_dir():
        # one file per frame, named so that sorting restores the order
        for s, f in enumerate(frames):
            (path / f"frame_{s:05d}.pgm").write_bytes(encode(f))
        return
    with open(path, "wb") as fh:
        for f in frames:
            fh.write(encode(f))


def _read_pgm_stack(path):
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".pgm")
        frames = [f for p in files for f in _parse_pgm(p.read_bytes(), p)]
    else:
        frames = _parse_pgm(path.read_bytes(), path)
    return ImageSequence.from_frames(frames)


def _parse_pgm(data, path):
    frames, pos = [], 0
    while pos < len(data):
        if data[pos : pos + 1].isspace():
            pos += 1
            continue
        tokens, pos = _pgm_header(data, pos, path)
        width, height, maxval = tokens
        bpp = 1 if maxval < 256 else 2
        size = width * height * bpp
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated payload")
        dtype = np.uint8 if bpp == 1 else ">u2"
        frames.append(np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
                      .reshape(height, width).astype(np.float64))
        pos += size
    if not frames:
        raise ValueError(f"{path}: no PGM frames found")
    return frames


def _pgm_header(data, pos, path):
    if data[pos : pos + 2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) stream")
    pos += 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1  # single whitespace byte ends the header

