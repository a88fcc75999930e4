import json

import numpy as np
import pytest

from maxtomo.cli import main
from maxtomo.io import read_volume, volume_to_b1set, volume_to_epmap

CONFIG = {
    "grid": {"dims": [7, 7, 7], "resolution_m": 0.01},
    "phantom": {
        "shape": "two-compartment-cylinder", "radius_m": 0.03, "eps_r": 50.0, "sigma_s_per_m": 0.4,
        "length_m": 0.07, "inner": {"radius_m": 0.015, "eps_r": 70.0, "sigma_s_per_m": 0.7},
    },
    "coil": {"n_channels": 2, "former_radius_m": 0.08, "loop_radius_m": 0.025, "segments_per_loop": 12},
    "solver": {"tol": 1e-8},
    "gmt": {"max_iter": 2, "alpha": 0.0},
    "noise": {"snr": 100.0, "seed": 7},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.json").write_text(json.dumps(CONFIG))
    return d


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(workdir):
    d = workdir
    cfg = d / "run.json"
    assert run("phantom", "--config", cfg, "-o", d / "truth.vol") == 0
    assert run("forward", d / "truth.vol", "--config", cfg, "-o", d / "b1.vol", "--currents", d / "jc.json") == 0
    assert run("forward", d / "truth.vol", "--config", cfg, "-o", d / "b1_again.vol") == 0
    assert run("forward", d / "truth.vol", "--config", cfg, "-o", d / "b1_clean.vol", "--noise-snr", "inf") == 0
    code = run("reconstruct", d / "b1.vol", "--config", cfg, "--mask-from", d / "truth.vol",
               "-o", d / "recon.vol", "--trace", d / "trace.tsv", "--reference-currents", d / "jc.json")
    assert code == 0
    return d


def test_phantom_and_forward_outputs(pipeline):
    ep = volume_to_epmap(read_volume(pipeline / "truth.vol"))
    assert ep.n_masked > 0 and ep.eps_r.max() == 70.0
    b1 = volume_to_b1set(read_volume(pipeline / "b1.vol"))
    assert b1.n_channels == 2
    assert np.all(b1.data[:, ~ep.mask] == 0)
    currents = json.loads((pipeline / "jc.json").read_text())
    assert sorted(currents) == ["0", "1"]


def test_forward_is_deterministic(pipeline):
    assert (pipeline / "b1.vol").read_bytes() == (pipeline / "b1_again.vol").read_bytes()
    assert (pipeline / "b1.vol").read_bytes() != (pipeline / "b1_clean.vol").read_bytes()


def test_reconstruct_writes_map_and_trace(pipeline):
    recon = volume_to_epmap(read_volume(pipeline / "recon.vol"))
    lines = (pipeline / "trace.tsv").read_text().strip().splitlines()
    assert lines[0].split("\t")[0] == "iteration"
    assert 2 <= len(lines) <= 4
    assert np.all(recon.eps_r[recon.mask] >= 1)


def test_evaluate(pipeline, capsys):
    d = pipeline
    assert run("evaluate", d / "truth.vol", d / "truth.vol", "-o", d / "self.json") == 0
    rep = json.loads((d / "self.json").read_text())
    assert rep["pnae_mean"] == {"eps_r": 0.0, "sigma_e": 0.0}
    assert rep["ssim"] == {"eps_r": 1.0, "sigma_e": 1.0}
    capsys.readouterr()
    assert run("evaluate", d / "truth.vol", d / "recon.vol") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["pnae_mean"]["eps_r"] > 0


def test_calibrate(pipeline):
    d = pipeline
    assert run("calibrate", d / "b1_clean.vol", d / "b1_clean.vol", "--mask-from", d / "truth.vol",
               "--v-target", 80, "--v-ref", 48, "-o", d / "q.json") == 0
    q = json.loads((d / "q.json").read_text())
    np.testing.assert_allclose([q["0"], q["1"]], [[5 / 3, 0.0], [5 / 3, 0.0]], atol=1e-6)


def test_export_slices(pipeline):
    d = pipeline
    assert run("export-slices", d / "b1.vol", "--axis", "y", "--index", 3, "--prefix", d / "sl") == 0
    side = json.loads((d / "sl.json").read_text())
    assert len(side["images"]) == 2 and side["images"][0]["quantity"] == "magnitude"
    raw = (d / "sl_c0.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 7\n65535\n")
    pix = np.frombuffer(raw[len(b"P5\n7 7\n65535\n"):], ">u2")
    assert pix.size == 49 and pix.max() == 65535
    assert run("export-slices", d / "b1.vol", "--index", 9, "--prefix", d / "bad") == 1


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--size", 3, "--mode", "vsie") == 0
    assert "max relative error" in capsys.readouterr().out


def test_exit_codes(workdir, tmp_path):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("phantom", "--config", tmp_path / "missing.json", "-o", tmp_path / "x.vol") == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"dims": [4, 4, 4], "voxel": 1}}))
    assert run("phantom", "--config", bad, "-o", tmp_path / "x.vol") == 1
    cfg = dict(CONFIG, solver={"tol": 1e-14, "max_iter": 1, "restart": 2})
    p = tmp_path / "tight.json"
    p.write_text(json.dumps(cfg))
    assert run("phantom", "--config", p, "-o", tmp_path / "t.vol") == 0
    assert run("forward", tmp_path / "t.vol", "--config", p, "-o", tmp_path / "b.vol") == 2
