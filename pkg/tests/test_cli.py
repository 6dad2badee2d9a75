import json

import numpy as np
import pytest

from zulfchain.cli import EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_NUMERICAL, EXIT_OK, main
from zulfchain.io import read_spectrum1d, read_spectrum2d

CH = """\
[spins]
C 13C 20.0
H 1H 2.0
[couplings]
C H 135.2
[fit]
field = 16.440801
truncation = secular
linewidth = 0.5
observe = 1H 13C
free_j = all
"""

NH = """\
[spins]
N 15N 245
H 1H 2.0
[couplings]
N H 3.0
"""


@pytest.fixture
def ch_file(tmp_path):
    p = tmp_path / "ch.spin"
    p.write_text(CH)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "manifest.json"}


def manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


def test_hf_spectrum_single_isotope(ch_file, tmp_path):
    out = tmp_path / "out"
    assert run("hf-spectrum", "--input", ch_file, "--output-dir", out, "--observe", "1H") == EXIT_OK
    assert sorted(outputs(out)) == ["hf_1H.txt", "peaks_1H.txt"]
    spec = read_spectrum1d(out / "hf_1H.txt")
    assert spec.metadata["nucleus"] == "1H"
    m = manifest(out)
    assert m["config"]["options"]["field"] == 16.440801
    assert set(m["outputs"]) == {"hf_1H.txt", "peaks_1H.txt"}
    assert "wall_clock_s" in m["timings"]


def test_runs_are_deterministic(ch_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("fieldcycle", "--input", ch_file, "--output-dir", d, "--tau-max", "0.05") == EXIT_OK
    assert outputs(a) == outputs(b)
    ma, mb = manifest(a), manifest(b)
    for m in (ma, mb):
        m.pop("timings")
        m["config"].pop("output_dir")
    assert ma == mb


def test_rerun_reproduces_outputs(ch_file, tmp_path):
    first, again = tmp_path / "first", tmp_path / "again"
    assert run("zulf-spectrum", "--input", ch_file, "--output-dir", first) == EXIT_OK
    ch_file.unlink()  # the manifest carries the input text
    assert run("rerun", first / "manifest.json", "--output-dir", again) == EXIT_OK
    assert outputs(first) == outputs(again)
    assert manifest(first)["outputs"] == manifest(again)["outputs"]


def test_zulf_spectrum_line(ch_file, tmp_path):
    out = tmp_path / "z"
    assert run("zulf-spectrum", "--input", ch_file, "--output-dir", out) == EXIT_OK
    assert sorted(outputs(out)) == ["peaks_zulf.txt", "zulf_spectrum.txt", "zulf_sticks.txt"]
    sticks = read_spectrum1d(out / "zulf_sticks.txt")
    assert sticks.frequencies == pytest.approx([135.2])
    table = [ln for ln in (out / "peaks_zulf.txt").read_text().splitlines() if not ln.startswith("#")]
    assert float(table[0].split()[0]) == pytest.approx(135.2, abs=0.01)


def test_fieldcycle_peak(ch_file, tmp_path):
    out = tmp_path / "f"
    assert run("fieldcycle", "--input", ch_file, "--output-dir", out) == EXIT_OK
    spec = read_spectrum1d(out / "jspec_C.txt")
    freq = spec.frequencies[np.argmax(np.abs(spec.amplitudes))]
    assert freq == pytest.approx(135.2, abs=2.0)


def test_tocsy2d_output(tmp_path):
    src = tmp_path / "nh.spin"
    src.write_text(NH)
    out = tmp_path / "t"
    assert run("tocsy2d", "--input", src, "--output-dir", out, "--td1", 16, "--td2", 32, "--zero-fill", 2) == EXIT_OK
    spec = read_spectrum2d(out / "tocsy2d.txt")
    assert spec.matrix.shape == (32, 64)


def test_fit_synthetic(ch_file, tmp_path):
    out = tmp_path / "fit"
    assert run("fit", "--input", ch_file, "--output-dir", out) == EXIT_OK
    values = dict(
        ln.split(" = ") for ln in (out / "fit_result.txt").read_text().splitlines() if " = " in ln
    )
    assert values["converged"] == "true"
    assert float(values["J(C,H)"]) == pytest.approx(135.2, abs=0.05)


def test_fit_nonconvergence_exit(ch_file, tmp_path, capsys):
    out = tmp_path / "fit"
    code = run("fit", "--input", ch_file, "--output-dir", out, "--max-iterations", 1, "--perturb", 0.3)
    assert code == EXIT_NONCONVERGENCE
    assert capsys.readouterr().err.startswith("error: NONCONVERGENCE:")
    # the report is still written
    assert (out / "fit_report.txt").exists()


@pytest.mark.parametrize(
    "text",
    [
        "[spins]\nA 2H 0\n",
        "[spins]\nA 1H 0\n[couplings]\nA B 1\n",
    ],
)
def test_bad_input_exit(tmp_path, capsys, text):
    src = tmp_path / "bad.spin"
    src.write_text(text)
    assert run("hf-spectrum", "--input", src, "--output-dir", tmp_path / "o") == EXIT_INPUT
    err = capsys.readouterr().err
    assert err.startswith("error: INPUT:") and err.count("\n") == 1


def test_missing_input_exit(tmp_path, capsys):
    assert run("hf-spectrum", "--input", tmp_path / "nope.spin", "--output-dir", tmp_path / "o") == EXIT_INPUT
    assert "cannot read" in capsys.readouterr().err


def test_bad_target_and_missing_fit_section(ch_file, tmp_path):
    assert run("fit", "--input", ch_file, "--output-dir", tmp_path / "o", "--target", "1H") == EXIT_INPUT
    src = tmp_path / "nh.spin"
    src.write_text(NH)
    assert run("fit", "--input", src, "--output-dir", tmp_path / "o") == EXIT_INPUT


def test_no_command(capsys):
    assert main([]) == EXIT_INPUT


def test_numerical_failure_exit(tmp_path, capsys):
    # polarizing at an absurd field breaks the high-temperature expansion
    src = tmp_path / "hot.spin"
    src.write_text(NH + "[protocol]\npolarize 1e9\nramp 1e9 50e-6\nevolve 50e-6 tau\nramp 50e-6 1e9\ndetect\n")
    code = run("fieldcycle", "--input", src, "--output-dir", tmp_path / "o", "--tau-max", "0.01")
    assert code == EXIT_NUMERICAL
    assert capsys.readouterr().err.startswith("error: NUMERICAL:")


def test_compare(ch_file, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run("hf-spectrum", "--input", ch_file, "--output-dir", a, "--observe", "1H")
    run("hf-spectrum", "--input", ch_file, "--output-dir", b, "--observe", "1H", "--field", "16.4")
    capsys.readouterr()
    assert main(["--compare", str(a / "hf_1H.txt"), str(b / "hf_1H.txt")]) == EXIT_OK
    rows = [ln.split() for ln in capsys.readouterr().out.splitlines() if not ln.startswith("#")]
    assert len(rows) == 2
    # the offsets scale with the field: 2 ppm of a smaller Larmor frequency
    for fa, fb, d in rows:
        assert float(d) == pytest.approx(float(fb) - float(fa), abs=1e-5)
        assert float(d) < 0
