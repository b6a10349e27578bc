import json

import numpy as np
import pytest

from spatent import cli
from spatent.entropy import LOG2, read_surface_pgm
from spatent.infer import FitConfig, Priors, fit_mcmc, save_draws
from spatent.lattice import GridSpec, NeighbourhoodScheme, build_adjacency, degree_matrix
from spatent.simulate import BinaryField, read_field_csv, write_field_csv

TINY_CONFIG = """
# desk-scale override of the default study
rows = 5
cols = 5
replicates = 2
seed = 314
"""


def run(args):
    return cli.main(args)


def write_config(tmp_path, text=TINY_CONFIG):
    path = tmp_path / "config.ini"
    path.write_text(text)
    return path


def artifact_checksums(manifest_path):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return {k: v["sha256"] for k, v in manifest["artifacts"].items()}


class TestSimulateCommand:
    def test_tiny_grid_produces_25_value_fields(self, tmp_path):
        out = tmp_path / "sim"
        assert run(["simulate", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
        field = read_field_csv(out / "clustered" / "field_0000.csv")
        assert field.grid == GridSpec(5, 5)
        assert (out / "random" / "truth_0001.json").exists()
        with open(out / "manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "simulate"
        assert set(manifest["scenarios"]) == {"clustered", "random"}
        assert len(manifest["scenarios"]["clustered"]["replicates"]) == 2

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run(["simulate", "--config", str(config), "--out", str(out_a)]) == 0
        assert run(["simulate", "--config", str(config), "--out", str(out_b)]) == 0
        for rel in ("clustered/field_0000.csv", "clustered/truth_0000.json",
                    "random/field_0001.csv"):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()
        assert artifact_checksums(out_a / "manifest.json") == artifact_checksums(out_b / "manifest.json")

    def test_invalid_config_key_is_data_error(self, tmp_path, capsys):
        config = tmp_path / "bad.ini"
        config.write_text("rows = 5\nwrap = torus\n")
        assert run(["simulate", "--config", str(config), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
        assert "invalid config key" in capsys.readouterr().err

    def test_malformed_line_is_data_error(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("rows 5\n")
        assert run(["simulate", "--config", str(config), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        assert run(["simulate", "--wrong", "x", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def small_field(tmp_path, values, rows, cols, name="field.csv"):
    path = tmp_path / name
    write_field_csv(BinaryField(GridSpec(rows, cols), np.asarray(values)), path)
    return path


class TestEstimateCommand:
    def test_nine_one_toy_field(self, tmp_path, capsys):
        path = small_field(tmp_path, [1, 0, 0, 0, 0, 0, 0, 0, 0, 0], 2, 5)
        assert run(["estimate", "--field", str(path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        table = {parts[0]: float(parts[1]) for parts in
                 (line.split() for line in lines[1:])}
        assert table["plugin"] == pytest.approx(0.325083, abs=5e-7)
        assert table["miller_madow"] == pytest.approx(0.375083, abs=5e-7)
        assert table["jackknife"] == pytest.approx(0.425290, abs=5e-7)
        assert lines[1].split()[2] == "10"

    def test_all_ones_field_gives_zero_estimates(self, tmp_path, capsys):
        path = small_field(tmp_path, [1] * 16, 4, 4)
        assert run(["estimate", "--field", str(path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        for line in lines[1:]:
            assert float(line.split()[1]) == 0.0

    def test_balanced_field_gives_log_two(self, tmp_path, capsys):
        path = small_field(tmp_path, [0, 1] * 8, 4, 4)
        assert run(["estimate", "--field", str(path)]) == 0
        out = capsys.readouterr().out
        assert f"{LOG2:.6f}" in out

    def test_missing_field_is_data_error(self, tmp_path):
        assert run(["estimate", "--field", str(tmp_path / "nope.csv")]) == cli.EXIT_DATA


FIT_ARGS = ["--iters", "600", "--burn-in", "300", "--thin", "3", "--chains", "2"]


class TestFitCommand:
    def test_fit_writes_draws_and_sidecar(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        path = small_field(tmp_path, (rng.random(36) < 0.5).astype(int), 6, 6)
        out = tmp_path / "fit"
        code = run(["fit", "--field", str(path), "--scheme", "4nn", "--seed", "3",
                    "--out", str(out), *FIT_ARGS])
        assert code in (0, cli.EXIT_CONVERGENCE)
        assert (out / "draws.bin").exists()
        with open(out / "draws.json") as fh:
            sidecar = json.load(fh)
        assert sidecar["command"] == "fit"
        assert sidecar["scheme"] == "4nn"
        assert sidecar["grid"] == [6, 6]
        assert {"beta0", "tau", "rho"} <= set(sidecar["hyperparameters"])
        assert "beta0:" in capsys.readouterr().out.replace(" ", "")

    def test_degenerate_field_warns_and_completes(self, tmp_path, capsys):
        path = small_field(tmp_path, [0] * 16, 4, 4)
        out = tmp_path / "fit"
        code = run(["fit", "--field", str(path), "--scheme", "4nn", "--seed", "1",
                    "--out", str(out), *FIT_ARGS])
        assert code in (0, cli.EXIT_CONVERGENCE)
        assert "degenerate" in capsys.readouterr().err
        assert (out / "draws.bin").exists()

    def test_same_seed_gives_identical_draw_files(self, tmp_path):
        rng = np.random.default_rng(5)
        path = small_field(tmp_path, (rng.random(25) < 0.4).astype(int), 5, 5)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            code = run(["fit", "--field", str(path), "--scheme", "4nn", "--seed", "11",
                        "--out", str(out), *FIT_ARGS])
            assert code in (0, cli.EXIT_CONVERGENCE)
        assert (out_a / "draws.bin").read_bytes() == (out_b / "draws.bin").read_bytes()

    def test_truth_coverage_flag(self, tmp_path, capsys):
        sim = tmp_path / "sim"
        assert run(["simulate", "--config", str(write_config(tmp_path)), "--out", str(sim)]) == 0
        field = sim / "clustered" / "field_0000.csv"
        truth = sim / "clustered" / "truth_0000.json"
        out = tmp_path / "fit"
        code = run(["fit", "--field", str(field), "--scheme", "12nn", "--seed", "2",
                    "--truth", str(truth), "--out", str(out), *FIT_ARGS])
        assert code in (0, cli.EXIT_CONVERGENCE)
        with open(out / "draws.json") as fh:
            sidecar = json.load(fh)
        assert set(sidecar["truth"]["covered"]) == {"beta0", "tau", "rho"}
        assert "truth" in capsys.readouterr().out

    def test_malformed_field_is_data_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,1\n1,3\n")
        assert run(["fit", "--field", str(path), "--scheme", "4nn",
                    "--out", str(tmp_path / "o"), *FIT_ARGS]) == cli.EXIT_DATA

    def test_bad_scheme_is_usage_error(self, tmp_path):
        path = small_field(tmp_path, [0, 1, 1, 0], 2, 2)
        assert run(["fit", "--field", str(path), "--scheme", "8nn",
                    "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE

    def test_invalid_iteration_combo_is_usage_error(self, tmp_path):
        path = small_field(tmp_path, [0, 1, 1, 0], 2, 2)
        assert run(["fit", "--field", str(path), "--scheme", "4nn", "--iters", "100",
                    "--burn-in", "100", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE

    def test_bad_worker_env_is_usage_error(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPATENT_WORKERS", "many")
        path = small_field(tmp_path, [0, 1, 1, 0], 2, 2)
        assert run(["fit", "--field", str(path), "--scheme", "4nn",
                    "--out", str(tmp_path / "o"), *FIT_ARGS]) == cli.EXIT_USAGE


def synthetic_draws_file(tmp_path, beta0, phi_rows, grid=GridSpec(2, 2)):
    from spatent.infer import PosteriorSamples

    phi_rows = np.asarray(phi_rows, dtype=float)
    s = phi_rows.shape[0]
    draws = np.column_stack([np.broadcast_to(beta0, s), np.ones(s), np.zeros(s), phi_rows])
    samples = PosteriorSamples(
        draws=draws,
        columns=["beta0", "tau", "rho"] + [f"phi_{i + 1:04d}" for i in range(grid.n)],
        chain_id=np.zeros(s, dtype=int), grid=grid, scheme="4nn",
        acceptance={}, seed=0, config={},
    )
    path = tmp_path / "draws.bin"
    save_draws(samples, path)
    return path


class TestEntropyCommand:
    def test_single_draw_gives_zero_sd_surface(self, tmp_path):
        path = synthetic_draws_file(tmp_path, 0.2, np.zeros((1, 4)))
        out = tmp_path / "surf"
        assert run(["entropy", "--draws", str(path), "--out", str(out)]) == 0
        sd = np.loadtxt(out / "surface_sd.csv", delimiter=",")
        assert np.allclose(sd, 0.0)

    def test_layers_written_in_all_formats(self, tmp_path):
        rng = np.random.default_rng(1)
        path = synthetic_draws_file(tmp_path, rng.normal(size=40), rng.normal(size=(40, 4)))
        out = tmp_path / "surf"
        assert run(["entropy", "--draws", str(path), "--out", str(out)]) == 0
        for layer in ("point", "mean", "sd", "lower", "upper"):
            assert (out / f"surface_{layer}.csv").exists()
            assert (out / f"surface_{layer}.pgm").exists()
            assert (out / f"surface_{layer}.png").exists()
        mean_csv = np.loadtxt(out / "surface_mean.csv", delimiter=",")
        mean_pgm = read_surface_pgm(out / "surface_mean.pgm")
        assert np.abs(mean_csv - mean_pgm).max() <= LOG2 / 65535

    def test_rerun_is_byte_identical_including_figures(self, tmp_path):
        rng = np.random.default_rng(2)
        path = synthetic_draws_file(tmp_path, rng.normal(size=25), rng.normal(size=(25, 4)))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run(["entropy", "--draws", str(path), "--out", str(out_a)]) == 0
        assert run(["entropy", "--draws", str(path), "--out", str(out_b)]) == 0
        for name in ("surface_mean.csv", "surface_mean.pgm", "surface_mean.png"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_missing_draws_is_data_error(self, tmp_path):
        assert run(["entropy", "--draws", str(tmp_path / "no.bin"),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_corrupt_draws_is_data_error(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"garbage\n")
        assert run(["entropy", "--draws", str(path),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end run: simulate 2x2 scenarios, fit one replicate per scenario."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.ini"
    config.write_text(TINY_CONFIG)
    sim = root / "sim"
    assert cli.main(["simulate", "--config", str(config), "--out", str(sim)]) == 0
    fits = root / "fits"
    for scenario in ("clustered", "random"):
        code = cli.main([
            "fit", "--field", str(sim / scenario / "field_0000.csv"),
            "--scheme", "12nn", "--seed", "8", "--out", str(fits / scenario / "field_0000"),
            *FIT_ARGS,
        ])
        assert code in (0, cli.EXIT_CONVERGENCE)
    return root, sim, fits


class TestCompareCommand:
    def test_zero_fits_is_data_error_listing_pending(self, tmp_path, capsys):
        sim = tmp_path / "sim"
        assert run(["simulate", "--config", str(write_config(tmp_path)), "--out", str(sim)]) == 0
        code = run(["compare", "--manifest", str(sim / "manifest.json"),
                    "--fits", str(tmp_path / "missing")])
        assert code == cli.EXIT_DATA
        err = capsys.readouterr().err
        assert "pending" in err
        assert "clustered/field_0000" in err

    def test_report_groups_by_scenario(self, pipeline, capsys):
        root, sim, fits = pipeline
        out = root / "compare"
        assert cli.main(["compare", "--manifest", str(sim / "manifest.json"),
                         "--fits", str(fits), "--out", str(out)]) == 0
        with open(out / "report.json") as fh:
            report = json.load(fh)
        assert set(report["scenarios"]) == {"clustered", "random"}
        for scenario in ("clustered", "random"):
            block = report["scenarios"][scenario]
            assert block["completed"] == 1
            assert block["expected"] == 2
            cov = block["coverage"]["beta0"]
            assert cov["total"] == 1 and cov["covered"] in (0, 1)
            assert block["replicates"][0]["surfaces"] is not None
        assert len(report["pending"]) == 2
        text = (out / "report.txt").read_text()
        assert "scenario 'clustered'" in text and "scenario 'random'" in text
        assert (out / "coverage.png").exists()
        assert "95% CI coverage" in capsys.readouterr().out

    def test_non_simulate_manifest_rejected(self, pipeline):
        root, sim, fits = pipeline
        bad = root / "bad.json"
        bad.write_text(json.dumps({"command": "fit"}))
        assert cli.main(["compare", "--manifest", str(bad)]) == cli.EXIT_DATA

    def test_missing_manifest(self, tmp_path):
        assert run(["compare", "--manifest", str(tmp_path / "no.json")]) == cli.EXIT_DATA


def test_convergence_failure_exit_code(tmp_path):
    # deliberately hopeless chain length on an informative field: split R-hat
    # above 1.05 must surface as exit code 3
    from spatent.simulate import ScenarioConfig, simulate_scenario

    rep = simulate_scenario(
        ScenarioConfig(name="clustered", grid=GridSpec(8, 8),
                       scheme=NeighbourhoodScheme.FOUR_NEAREST,
                       tau=0.1, rho=0.99, replicates=1, master_seed=3)
    )[0]
    path = tmp_path / "field.csv"
    write_field_csv(rep.field, path)
    code = cli.main(["fit", "--field", str(path), "--scheme", "4nn", "--seed", "1",
                     "--iters", "80", "--burn-in", "40", "--thin", "1", "--chains", "2",
                     "--out", str(tmp_path / "fit")])
    assert code == cli.EXIT_CONVERGENCE
