"""Command-line front end: ``ffdmotion {synth,denoise,register,analyze,bench}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error. Each command
writes ``manifest.json`` (command line, effective config, paths, version and
per-stage wall-clock seconds) into its output directory. Data files never
contain timings, so reruns with the same inputs are byte-identical.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import evaluate, export_map, green_strain, jacobian_map
from .config import INTERPOLATIONS, PENALTY_KINDS, EnergyConfig
from .deform import read_field, write_field, write_scalar_map
from .lowrank import denoise_sequence
from .sequence import load_sequence, save_sequence
from .solver import (
    accumulate_displacement,
    mean_ssd,
    register_sequence,
    write_convergence_log,
)
from .synth import MOTIONS, TEXTURES, PhantomConfig, write_phantom

log = logging.getLogger("ffdmotion")

MANIFEST = "manifest.json"

# flag name -> EnergyConfig key
CONFIG_FLAGS = {
    "phi": "phi",
    "tau": "tau",
    "gamma": "gamma",
    "tukey_c": "tukey_c",
    "penalty": "penalty_kind",
    "rank": "rank_k",
    "spacing": "spacing",
    "interp": "interpolation",
    "data_term": "data_term",
    "max_iters": "lm.max_iters",
}

# bench grid: (label, penalty kind, phi)
BENCH_PENALTIES = (
    ("no-penalty", "none", 0.0),
    ("phi=0", "proposed", 0.0),
    ("phi=1e-2", "proposed", 1e-2),
    ("phi=5e-3", "proposed", 5e-3),
)
BENCH_HEADER = (
    "experiment", "data", "rank", "penalty", "phi", "cpu_s_per_frame",
    "median_iters", "minimum", "ssd_mean", "jdet_min", "jdet_max",
)
TIMING_COLUMNS = ("cpu_s_per_frame",)


class UsageError(Exception):
    """Bad arguments detected after parsing; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def parse_dims(text):
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 64x64x20, got {text!r}")
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return parts


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        values[key] = value
    return values


def effective_config(args):
    """Built-in defaults, then the config file, then explicit flags."""
    cfg = EnergyConfig()
    try:
        if getattr(args, "config", None):
            cfg = EnergyConfig.from_flat_dict(read_config_file(args.config), cfg)
        overrides = {}
        for flag, key in CONFIG_FLAGS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = value
        return EnergyConfig.from_flat_dict(overrides, cfg)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc).strip("'\""))


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_manifest(outdir, argv, config, inputs, outputs, timings):
    manifest = {
        "command": list(argv),
        "config": _jsonable(config),
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "version": __version__,
        "timings_s": {k: round(v, 6) for k, v in timings.items()},
    }
    path = Path(outdir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class Timer:
    def __init__(self):
        self.stages = {}

    def stage(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = time.perf_counter() - self.t0

        return _Stage()


def _csv_write(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _num(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv):
    cfg = PhantomConfig(
        dims=args.dims, texture=args.texture, motion=args.motion,
        amplitude=args.amplitude, noise_sigma=args.noise, seed=args.seed,
    )
    out = Path(args.output)
    timer = Timer()
    with timer.stage("synth"):
        _, _, paths = write_phantom(out, cfg, record=False)
    config = {"phantom": {**cfg.__dict__, "dims": list(cfg.dims)}}
    write_manifest(out, argv, config, [], paths, timer.stages)
    return 0


def cmd_denoise(args, argv):
    if args.rank < 1:
        raise UsageError("--rank must be a positive integer")
    timer = Timer()
    with timer.stage("load"):
        seq = load_sequence(args.input)
    m, n, s = seq.dims
    if args.rank > min(m * n, s):
        raise UsageError(f"--rank must be at most {min(m * n, s)} for this sequence")
    with timer.stage("denoise"):
        den = denoise_sequence(seq, args.rank, backend=args.backend)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sequence(out, den)
    config = {"rank": args.rank, "backend": args.backend}
    write_manifest(out.parent, argv, config, [args.input], [out], timer.stages)
    return 0


def _register_outputs(outdir, seq, results, cfg):
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / "convergence.csv"]
    write_convergence_log(results, paths[0])
    rows = []
    for s, res in enumerate(results):
        p = outdir / f"field_{s:03d}.dsp"
        write_field(p, res.field)
        jmap, (jmin, jmax, jmean) = jacobian_map(res.lattice)
        q = outdir / f"jdet_{s:03d}.sld"
        write_scalar_map(q, jmap)
        paths += [p, q]
        t = res.terms or {}
        rows.append([
            s, res.status, res.iterations, _num(res.final_energy),
            _num(t.get("data", np.nan)), _num(t.get("reg", np.nan)), _num(t.get("topology", np.nan)),
            _num(jmin), _num(jmax), _num(jmean),
        ])
        if jmin <= 0:
            log.warning("pair %d: jdet min %.4f <= 0 (folding)", s, jmin)
    for s, f in enumerate(accumulate_displacement(results), start=1):
        p = outdir / f"accum_{s:03d}.dsp"
        write_field(p, f)
        paths.append(p)
    summary = outdir / "jdet_summary.csv"
    _csv_write(summary, ("pair", "status", "iterations", "energy", "data", "reg", "topology",
                         "jdet_min", "jdet_max", "jdet_mean"), rows)
    paths.append(summary)
    return paths


def cmd_register(args, argv):
    cfg = effective_config(args)
    timer = Timer()
    with timer.stage("load"):
        seq = load_sequence(args.input)
    with timer.stage("register"):
        results = register_sequence(seq, cfg)
    out = Path(args.output)
    with timer.stage("write"):
        paths = _register_outputs(out, seq, results, cfg)
    jmin = min(r.jdet_range[0] for r in results)
    jmax = max(r.jdet_range[1] for r in results)
    print(f"jdet min {jmin:.4f} max {jmax:.4f} over {len(results)} pairs")
    write_manifest(out, argv, cfg.as_flat_dict(), [args.input], paths, timer.stages)
    return 0


def _numbered(directory, prefix):
    return sorted(Path(directory).glob(f"{prefix}_[0-9][0-9][0-9].dsp"))


def _jdet_numeric(u):
    ux_x, ux_y = np.gradient(u[..., 0])
    uy_x, uy_y = np.gradient(u[..., 1])
    return (1.0 + ux_x) * (1.0 + uy_y) - ux_y * uy_x


def cmd_analyze(args, argv):
    if not (args.gt or args.strain or args.jdet):
        raise UsageError("nothing to do: give --gt, --strain or --jdet")
    est_paths = _numbered(args.estimate, "accum")
    if not est_paths:
        raise OSError(f"no accum_XXX.dsp fields in {args.estimate}")
    est = [read_field(p) for p in est_paths]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    paths = []
    jmaps = [_jdet_numeric(f.u) for f in est]
    if args.gt:
        gt_paths = _numbered(args.gt, "accum_truth")
        if not gt_paths:
            raise OSError(f"no accum_truth_XXX.dsp fields in {args.gt}")
        gt = [read_field(p) for p in gt_paths]
        if len(gt) != len(est) or any(a.dims != b.dims for a, b in zip(est, gt)):
            raise ValueError("estimate and ground truth differ in frame count or dimensions")
        with timer.stage("evaluate"):
            report = evaluate(est, gt, jmaps, scale=args.scale, seed=args.seed)
        report.write_csv(out / "report.csv")
        (out / "report.txt").write_text(report.text())
        paths += [out / "report.csv", out / "report.txt"]
        print(report.text(), end="")
    if args.strain:
        with timer.stage("strain"):
            for s, f in enumerate(est, start=1):
                e = green_strain(f)
                for name in ("exx", "exy", "eyy"):
                    p = out / f"strain_{name}_{s:03d}.sld"
                    export_map(p, getattr(e, name), png=args.png)
                    paths.append(p)
    if args.jdet:
        for s, j in enumerate(jmaps, start=1):
            p = out / f"jdet_{s:03d}.sld"
            export_map(p, j, png=args.png, center=1.0)
            paths.append(p)
    inputs = [args.estimate] + ([args.gt] if args.gt else [])
    config = {"scale": args.scale, "seed": args.seed, "strain": args.strain, "jdet": args.jdet}
    write_manifest(out, argv, config, inputs, paths, timer.stages)
    return 0


def _bench_row(label, data_kind, rank, kind, phi, seq_used, results, cfg, seconds):
    iters = [r.iterations for r in results]
    ok = [r for r in results if r.status != "failed"]
    return [
        label, data_kind, "" if rank is None else rank, kind, _num(phi),
        f"{seconds / max(len(results), 1):.4f}",
        _num(np.median(iters)),
        _num(np.mean([r.final_energy for r in ok])) if ok else "nan",
        _num(mean_ssd(seq_used, results, cfg)),
        _num(min(r.jdet_range[0] for r in ok)) if ok else "nan",
        _num(max(r.jdet_range[1] for r in ok)) if ok else "nan",
    ]


def cmd_bench(args, argv):
    base = effective_config(args)
    if args.rank < 1:
        raise UsageError("--rank must be a positive integer")
    timer = Timer()
    with timer.stage("load"):
        seq = load_sequence(args.input)
    with timer.stage("denoise"):
        low = denoise_sequence(seq, args.rank, backend=base.svd_backend)
    data = (("full-rank", None, seq), ("low-rank", args.rank, low))
    rows = []
    exp = 0
    for data_kind, rank, seq_used in data:
        for label, kind, phi in BENCH_PENALTIES:
            exp += 1
            cfg = base.with_(penalty_kind=kind, phi=phi, rank_k=None)
            t0 = time.perf_counter()
            results = register_sequence(seq_used, cfg)
            secs = time.perf_counter() - t0
            timer.stages[f"exp{exp}"] = secs
            rows.append(_bench_row(f"{exp}:{label}", data_kind, rank, kind, phi, seq_used,
                                   results, cfg, secs))
    reg_rows = []
    for kind in ("proposed", "rohlfing", "heyde"):
        cfg = base.with_(penalty_kind=kind, rank_k=None)
        t0 = time.perf_counter()
        results = register_sequence(low, cfg)
        secs = time.perf_counter() - t0
        timer.stages[f"regularizer:{kind}"] = secs
        reg_rows.append(_bench_row(kind, "low-rank", args.rank, kind, cfg.phi, low, results, cfg, secs))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _csv_write(out / "rank_penalty_grid.csv", BENCH_HEADER, rows)
    _csv_write(out / "regularizers.csv", BENCH_HEADER, reg_rows)
    config = {**base.as_flat_dict(), "bench_rank": args.rank}
    write_manifest(out, argv, config, [args.input],
                   [out / "rank_penalty_grid.csv", out / "regularizers.csv"], timer.stages)
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_energy_flags(p, with_rank=True):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--phi", type=float, help="penalty weight outside the band")
    p.add_argument("--tau", type=float, help="half-width of the penalty-free band around |J|=1")
    p.add_argument("--gamma", type=float, help="gradient regularizer weight")
    p.add_argument("--tukey-c", dest="tukey_c", type=float, help="Tukey cutoff in gray levels")
    p.add_argument("--penalty", choices=PENALTY_KINDS, help="Jacobian penalty")
    if with_rank:
        p.add_argument("--rank", type=int, help="denoise to this Casorati rank first")
    p.add_argument("--spacing", type=float, help="control-point spacing in pixels")
    p.add_argument("--interp", choices=INTERPOLATIONS, help="image interpolation")
    p.add_argument("--data-term", dest="data_term", choices=("tukey", "ssd"))
    p.add_argument("--max-iters", dest="max_iters", type=_positive_int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ffdmotion", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a phantom with known motion")
    p.add_argument("--dims", type=parse_dims, required=True, help="MxNxS, e.g. 64x64x20")
    p.add_argument("--motion", choices=MOTIONS, default="periodic-contraction")
    p.add_argument("--texture", choices=TEXTURES, default="speckle")
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.0, help="multiplicative noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("denoise", help="rank-k Casorati projection")
    p.add_argument("input")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--backend", choices=("auto", "exact", "truncated"), default="auto")
    p.add_argument("-o", "--output", required=True, help="output sequence file")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("register", help="register all consecutive frame pairs")
    p.add_argument("input")
    _add_energy_flags(p)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("analyze", help="RMSE, Wilcoxon, strain and Jacobian maps")
    p.add_argument("estimate", help="directory written by 'register'")
    p.add_argument("--gt", help="phantom directory with accum_truth_XXX.dsp")
    p.add_argument("--strain", action="store_true")
    p.add_argument("--jdet", action="store_true")
    p.add_argument("--png", action="store_true", help="also write PNG heatmaps")
    p.add_argument("--scale", type=float, default=1.0, help="mm per pixel")
    p.add_argument("--seed", type=int, default=0, help="seed of the Wilcoxon samples")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="full/low-rank x penalty grid plus regularizer comparison")
    p.add_argument("input")
    _add_energy_flags(p, with_rank=False)
    p.add_argument("--rank", type=int, default=5, help="rank of the low-rank rows")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, ["ffdmotion"] + argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ffdmotion: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"ffdmotion: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
