import json

import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator, lsqr

from tvct import data
from tvct.cli import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, main
from tvct.geometry import get_projector


def simulate(d, *extra, views=9, seed=1, dims="16"):
    args = ["simulate", "--dims", dims, "--views", str(views), "--seed", str(seed),
            "--phantom-out", str(d / "phantom.bin"), "--clean-out", str(d / "clean.bin"),
            "--noisy-out", str(d / "noisy.bin"), *extra]
    return main(args)


def reconstruct(d, solver, *extra, name=None):
    name = name or solver
    return main(["reconstruct", "--sinogram", str(d / "noisy.bin"), "--solver", solver,
                 "--out", str(d / f"{name}.bin"), "--history", str(d / f"{name}.csv"), *extra])


@pytest.fixture(scope="module")
def sim9(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim9")
    assert simulate(d) == EXIT_OK
    return d


class TestSimulate:

    def test_files_and_ratio(self, sim9, capsys, tmp_path):
        assert simulate(tmp_path) == EXIT_OK
        out = capsys.readouterr().out
        ratio = float(out.split("noise ratio")[1])
        assert abs(ratio - 0.01) <= 1e-12
        phantom = data.read_volume(tmp_path / "phantom.bin")
        clean, _ = data.read_sinogram(tmp_path / "clean.bin")
        noisy, header = data.read_sinogram(tmp_path / "noisy.bin")
        assert phantom.dims == (16, 16, 16)
        assert clean.geometry.n_views == 9 and clean.geometry.detector_rows == 23
        assert abs(np.linalg.norm(noisy.flat - clean.flat) / np.linalg.norm(clean.flat) - 0.01) <= 1e-12
        assert header["rng"].endswith("seed=1")
        assert json.loads(header["config"])["views"] == 9

    def test_zero_noise_bitwise_equal(self, tmp_path):
        assert simulate(tmp_path, "--noise", "0") == EXIT_OK
        clean = (tmp_path / "clean.bin").read_bytes().split(b"\n\n", 1)[1]
        noisy = (tmp_path / "noisy.bin").read_bytes().split(b"\n\n", 1)[1]
        assert clean == noisy

    def test_rerun_deterministic(self, sim9, tmp_path):
        assert simulate(tmp_path) == EXIT_OK
        first = (tmp_path / "noisy.bin").read_bytes()
        assert first.split(b"\n\n", 1)[1] == (sim9 / "noisy.bin").read_bytes().split(b"\n\n", 1)[1]
        assert simulate(tmp_path) == EXIT_OK
        assert (tmp_path / "noisy.bin").read_bytes() == first

    def test_missing_output_is_usage_error(self, tmp_path, capsys):
        assert main(["simulate", "--phantom-out", str(tmp_path / "p.bin")]) == EXIT_ERROR
        assert "missing" in capsys.readouterr().err

    @pytest.mark.parametrize("bad", [["--views", "0"], ["--noise", "-1"], ["--dims", "4,4"], ["--bogus"]])
    def test_invalid_config(self, tmp_path, bad):
        assert simulate(tmp_path, *bad) == EXIT_ERROR


class TestReconstruct:

    def test_max_iters_one(self, sim9):
        rc = reconstruct(sim9, "gp", "--max-iters", "1", name="one")
        assert rc == EXIT_NOT_CONVERGED
        assert len(data.read_history(sim9 / "one.csv")) == 1
        assert data.read_volume(sim9 / "one.bin").dims == (16, 16, 16)

    def test_unknown_solver(self, sim9, capsys):
        assert reconstruct(sim9, "sgd") == EXIT_ERROR
        assert "unknown solver" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert main(["reconstruct", "--sinogram", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "r.bin"),
                     "--history", str(tmp_path / "h.csv")]) == EXIT_ERROR

    def test_converges_and_echoes_config(self, sim9):
        assert reconstruct(sim9, "upn", "--eps", "1e-5") == EXIT_OK
        header = (sim9 / "upn.bin").read_bytes().split(b"\n\n")[0].decode()
        assert "converged: true" in header
        meta = json.loads((sim9 / "upn.csv.meta.json").read_text())
        assert meta["eps"] == 1e-5 and meta["solver"] == "upn"
        hist = data.read_history(sim9 / "upn.csv")
        assert hist[-1].gradmap_norm_scaled <= 1e-5

    def test_config_file_and_flag_precedence(self, sim9, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# reconstruction settings\nsinogram = {sim9 / 'noisy.bin'}\nsolver = gp\n"
                       f"max-iters = 3\neps = 1e-4\nout = {tmp_path / 'r.bin'}\nhistory = {tmp_path / 'h.csv'}\n")
        assert main(["reconstruct", "--config", str(cfg)]) == EXIT_NOT_CONVERGED
        assert len(data.read_history(tmp_path / "h.csv")) == 3
        assert main(["reconstruct", "--config", str(cfg), "--max-iters", "5"]) == EXIT_NOT_CONVERGED
        assert len(data.read_history(tmp_path / "h.csv")) == 5
        assert json.loads((tmp_path / "h.csv.meta.json").read_text())["solver"] == "gp"

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = blue\n")
        assert main(["reconstruct", "--config", str(cfg)]) == EXIT_ERROR


class TestCompare:

    def test_single_history_is_usage_error(self, sim9):
        reconstruct(sim9, "gp", "--max-iters", "2", name="two")
        assert main(["compare", str(sim9 / "two.csv")]) == EXIT_ERROR

    def test_identical_rows(self, sim9, capsys, tmp_path):
        reconstruct(sim9, "gpbb", "--eps", "1e-5", name="bb")
        capsys.readouterr()
        merged = tmp_path / "m.csv"
        h = str(sim9 / "bb.csv")
        assert main(["compare", h, h, "--merged", str(merged)]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "tolerance: 1e-05"
        assert lines[2] == lines[3]
        n = len(data.read_history(h))
        assert len(merged.read_text().splitlines()) == 1 + 2 * n

    def test_tolerance_mismatch_warns(self, sim9, capsys):
        reconstruct(sim9, "gp", "--max-iters", "2", "--eps", "1e-3", name="loose")
        reconstruct(sim9, "gp", "--max-iters", "2", "--eps", "1e-4", name="tight")
        capsys.readouterr()
        rc = main(["compare", str(sim9 / "loose.csv"), str(sim9 / "tight.csv"), "--reference", str(sim9 / "tight.csv")])
        assert rc == EXIT_OK
        captured = capsys.readouterr()
        assert "warning" in captured.err
        assert "rel_gap" in captured.out


@pytest.mark.slow
def test_gp_and_upn_agree_few_view(tmp_path):
    assert simulate(tmp_path, views=19) == EXIT_OK
    eps = 1e-6
    for solver in ("gp", "upn"):
        assert reconstruct(tmp_path, solver, "--eps", str(eps)) == EXIT_OK
    gp, upn = (data.read_history(tmp_path / f"{s}.csv") for s in ("gp", "upn"))
    nu = max(1 / gp[-1].step_or_Linv, 1 / upn[-1].step_or_Linv)
    assert abs(gp[-1].objective - upn[-1].objective) <= 10 * eps * 16**3 * nu
    assert len(upn) < len(gp)


@pytest.mark.slow
def test_tv_beats_least_squares_baseline(tmp_path):
    assert simulate(tmp_path, views=55) == EXIT_OK
    assert reconstruct(tmp_path, "upn", "--eps", "1e-6", "--alpha", "0.01") == EXIT_OK
    phantom = data.read_volume(tmp_path / "phantom.bin").flat
    x_tv = data.read_volume(tmp_path / "upn.bin").flat
    sino, _ = data.read_sinogram(tmp_path / "noisy.bin")
    A = get_projector(sino.geometry, (16, 16, 16))
    op = LinearOperator((A.n_rays, A.n_voxels), matvec=A.forward, rmatvec=A.adjoint)
    x_ls = lsqr(op, sino.flat, atol=1e-14, btol=1e-14, iter_lim=1000)[0]

    def rmse(x):
        return float(np.sqrt(np.mean((x - phantom) ** 2)))

    assert rmse(x_tv) < rmse(x_ls)
