import json
import shutil
import subprocess

import numpy as np
import pytest

from wkam.cli import main
from wkam.evolve import TimeSlab
from wkam.grid import PeriodicGrid
from wkam.io import MAGIC, blob_sha1, read_slab_binary, write_json, write_slab_binary, write_slab_csv
from wkam.suite import compare_directories


def _slab(d=1, N=8, m=2, F=3):
    g = PeriodicGrid(d, N, m)
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(F, m) + g.shape)
    return TimeSlab(g, np.linspace(0, 1, F), frames, 0.5, 0.1)


class TestFormats:
    @pytest.mark.parametrize("d", [1, 2])
    def test_binary_round_trip(self, tmp_path, d):
        slab = _slab(d)
        path = write_slab_binary(tmp_path / "s.bin", slab)
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        assert len(raw) == 8 + 16 + 8 * 3 + 8 * 3 * slab.grid.n_nodes * 2
        g, t, frames = read_slab_binary(path)
        assert g == slab.grid
        np.testing.assert_array_equal(t, slab.times)
        np.testing.assert_array_equal(frames, slab.frames)

    def test_binary_layout_is_node_then_component(self, tmp_path):
        slab = _slab(1, 8, 2, 1)
        raw = write_slab_binary(tmp_path / "s.bin", slab).read_bytes()
        body = np.frombuffer(raw, "<f8", offset=8 + 16 + 8)
        assert body[0] == slab.frames[0, 0, 0] and body[1] == slab.frames[0, 1, 0]
        assert body[2] == slab.frames[0, 0, 1]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTASLAB" + bytes(16))
        with pytest.raises(ValueError):
            read_slab_binary(tmp_path / "x.bin")

    def test_truncated_file(self, tmp_path):
        raw = write_slab_binary(tmp_path / "s.bin", _slab()).read_bytes()
        (tmp_path / "s.bin").write_bytes(raw[:-8])
        with pytest.raises(ValueError):
            read_slab_binary(tmp_path / "s.bin")

    def test_csv_rows(self, tmp_path):
        slab = _slab()
        lines = write_slab_csv(tmp_path / "s.csv", slab).read_text().splitlines()
        assert lines[0] == "frame,t,x1,component,value"
        assert len(lines) == 1 + 3 * 8 * 2
        assert float(lines[2].split(",")[-1]) == slab.frames[0, 1, 0]

    def test_json_is_sorted_and_plain(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": np.float64(1.5), "a": np.arange(3), "c": np.bool_(True)})
        text = (tmp_path / "a.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": True}

    @pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")
    def test_blob_hash_matches_git(self):
        data = b"wkam\n\x00binary"
        ref = subprocess.run(["git", "hash-object", "--stdin"], input=data, capture_output=True, check=True)
        assert blob_sha1(data) == ref.stdout.decode().strip()


def _config(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return str(p)


SMALL = """
[problem]
family = "quadratic"
potential = "sin(pi*x)**2"
coupling = [[0.0, 1.0], [1.0, 0.0]]
d = 1
m = 2

[discretization]
N = 32
Nq = 9
eps = [0.2]
"""


class TestCLI:
    def test_check_exit_zero(self, tmp_path):
        out = tmp_path / "o"
        assert main(["check", _config(tmp_path, SMALL), "--out", str(out)]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "check" and man["status"] == 0
        assert set(man) >= {"version", "config", "inputs", "tolerances", "theta", "dt", "wall_time_s"}
        assert list(man["inputs"].values())[0] == blob_sha1((tmp_path / "run.toml").read_bytes())
        assert json.loads((out / "assumptions.json").read_text())

    def test_check_asymmetric_coupling_exits_one(self, tmp_path):
        cfg = SMALL.replace("[[0.0, 1.0], [1.0, 0.0]]", "[[0.0, 1.0], [0.5, 0.0]]")
        with pytest.warns(UserWarning, match="not symmetric"):
            assert main(["check", _config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1

    def test_mather_lp(self, tmp_path):
        out = tmp_path / "o"
        assert main(["mather-lp", _config(tmp_path, SMALL), "--out", str(out)]) == 0
        res = json.loads((out / "mather_lp.json").read_text())
        assert -1e-9 <= res["value"] <= 5 / 32
        assert (out / "lp_measure.csv").is_file()
        assert "lambda" in json.loads((out / "manifest.json").read_text())

    def test_small_velocity_box_exits_one(self, tmp_path):
        cfg = SMALL.replace("Nq = 9", "Nq = 9\nQmax = 0.01").replace('"sin(pi*x)**2"', '"sin(2*pi*x)**2"')
        out = tmp_path / "o"
        assert main(["mather-adjoint", _config(tmp_path, cfg), "--out", str(out)]) == 1
        assert "error" in json.loads((out / "manifest.json").read_text())

    @pytest.mark.parametrize("argv", [["--grid", "4"], ["--eps", "a,b"]])
    def test_bad_overrides_exit_two(self, tmp_path, argv):
        assert main(["ergodic", _config(tmp_path, SMALL), "--out", str(tmp_path / "o")] + argv) == 2

    @pytest.mark.parametrize("text", ["[problem\nd = 1", "[problem]\ncolour = 3", "[extra]\na = 1",
                                      "[problem]\nfamily = \"cubic\""])
    def test_bad_config_exits_two(self, tmp_path, text):
        assert main(["check", _config(tmp_path, text), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_exits_two(self, tmp_path):
        assert main(["check", str(tmp_path / "nope.toml")]) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_ergodic_and_cauchy_reproducible(self, tmp_path):
        cfg = _config(tmp_path, SMALL + '\n[output]\nformats = ["csv", "json", "bin"]\n')
        for name in ("a", "b"):
            assert main(["cauchy", cfg, "--out", str(tmp_path / name)]) == 0
        assert compare_directories(tmp_path / "a", tmp_path / "b") == []
        g, _, frames = read_slab_binary(tmp_path / "a" / "cauchy_eps0.2.bin")
        assert g.N == 32 and np.isfinite(frames).all()

    def test_uniqueness_set_command(self, tmp_path):
        cfg = _config(tmp_path, SMALL.replace("sin(pi*x)**2", "sin(2*pi*x)**2"))
        out = tmp_path / "o"
        assert main(["uniqueness-set", cfg, "--out", str(out)]) == 0
        nodes = json.loads((out / "uniqueness_set.json").read_text())["nodes"]
        assert [0, 0] in nodes and [16, 1] in nodes


def test_compare_command(tmp_path):
    base = SMALL.replace("sin(pi*x)**2", "sin(2*pi*x)**2")
    out = tmp_path / "o"
    assert main(["compare", _config(tmp_path, base + "\n[compare]\nvalues1 = []\n"), "--out", str(out)]) == 0
    rep = json.loads((out / "compare.json").read_text())
    assert rep["status"] == "pass"
    bad = base + "\n[compare]\nvalues1 = [1.0]\n"
    assert main(["compare", _config(tmp_path, bad), "--out", str(out)]) == 2
