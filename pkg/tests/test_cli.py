import json
import subprocess
import sys

import numpy as np
import pytest

from ffdmotion.cli import effective_config, build_parser, main
from ffdmotion.deform import read_field, read_scalar_map
from ffdmotion.sequence import load_sequence

FAST = ["--spacing", "8", "--gamma", "1000", "--tukey-c", "200", "--max-iters", "15"]


@pytest.fixture(scope="module")
def phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    assert main(["synth", "--dims", "24x24x4", "--seed", "3", "--amplitude", "1", "-o", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def registered(phantom, tmp_path_factory):
    d = tmp_path_factory.mktemp("reg")
    assert main(["register", str(phantom / "sequence.raw"), *FAST, "-o", str(d)]) == 0
    return d


def test_synth_outputs(phantom):
    assert load_sequence(phantom / "sequence.raw").dims == (24, 24, 4)
    assert len(list(phantom.glob("truth_*.dsp"))) == 3
    assert len(list(phantom.glob("accum_truth_*.dsp"))) == 3
    man = json.loads((phantom / "manifest.json").read_text())
    assert man["command"][:2] == ["ffdmotion", "synth"] and "synth" in man["timings_s"]


def test_register_outputs(registered, capsys):
    names = {p.name for p in registered.iterdir()}
    for s in range(3):
        assert {f"field_{s:03d}.dsp", f"jdet_{s:03d}.sld", f"accum_{s + 1:03d}.dsp"} <= names
    assert {"convergence.csv", "jdet_summary.csv", "manifest.json"} <= names
    j = read_scalar_map(registered / "jdet_000.sld")
    assert j.shape == (24, 24) and 0.5 < j.min() <= j.max() < 1.5
    man = json.loads((registered / "manifest.json").read_text())
    assert man["config"]["spacing"] == 8.0


def test_analyze(phantom, registered, tmp_path, capsys):
    rc = main(["analyze", str(registered), "--gt", str(phantom), "--strain", "--jdet", "-o", str(tmp_path)])
    assert rc == 0
    assert "RMSE axial" in capsys.readouterr().out
    header, row = (tmp_path / "report.csv").read_text().splitlines()
    assert header.startswith("rmse_axial,rmse_lateral,wilcoxon_p")
    assert float(row.split(",")[0]) < 1.0
    assert (tmp_path / "strain_exx_001.sld").exists() and (tmp_path / "jdet_003.sld").exists()


def test_analyze_mismatch(registered, tmp_path):
    other = tmp_path / "other"
    assert main(["synth", "--dims", "20x24x4", "-o", str(other)]) == 0
    assert main(["analyze", str(registered), "--gt", str(other), "-o", str(tmp_path / "a")]) == 1


def test_analyze_nothing_to_do(registered, tmp_path):
    assert main(["analyze", str(registered), "-o", str(tmp_path)]) == 2


def test_denoise_idempotent(phantom, tmp_path):
    a, b = tmp_path / "a.raw", tmp_path / "b.raw"
    assert main(["denoise", str(phantom / "sequence.raw"), "--rank", "2", "-o", str(a)]) == 0
    assert main(["denoise", str(a), "--rank", "2", "-o", str(b)]) == 0
    x, y = load_sequence(a).frames, load_sequence(b).frames
    assert np.abs(x - y).max() <= 1e-3 * np.abs(x).max()


@pytest.mark.parametrize("argv", [
    ["synth", "-o", "x"],
    ["synth", "--dims", "8x8", "-o", "x"],
    ["register", "in.raw", "--penalty", "bogus", "-o", "x"],
    ["register", "in.raw", "--max-iters", "0", "-o", "x"],
])
def test_argparse_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_usage_errors_after_parse(phantom, tmp_path):
    seq = str(phantom / "sequence.raw")
    assert main(["denoise", seq, "--rank", "0", "-o", str(tmp_path / "d.raw")]) == 2
    assert main(["denoise", seq, "--rank", "99", "-o", str(tmp_path / "d.raw")]) == 2
    assert main(["register", seq, "--rank", "0", "-o", str(tmp_path)]) == 2
    assert main(["register", seq, "--tau", "1.5", "-o", str(tmp_path)]) == 2


def test_missing_input(tmp_path):
    assert main(["register", str(tmp_path / "nope.raw"), "-o", str(tmp_path)]) == 1


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# comment\ngamma = 5\nphi = 0.2\n")
    args = build_parser().parse_args(["register", "x", "--config", str(cfg_file), "--gamma", "7", "-o", "o"])
    cfg = effective_config(args)
    assert cfg.gamma == 7.0 and cfg.phi == 0.2
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 1\n")
    assert main(["register", "x", "--config", str(bad), "-o", str(tmp_path)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ffdmotion", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


def test_register_deterministic(phantom, registered, tmp_path):
    assert main(["register", str(phantom / "sequence.raw"), *FAST, "-o", str(tmp_path)]) == 0
    for p in registered.glob("*.dsp"):
        assert p.read_bytes() == (tmp_path / p.name).read_bytes()
    assert read_field(tmp_path / "accum_003.dsp").dims == (24, 24)
