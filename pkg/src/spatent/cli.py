"""Command-line pipeline: simulate -> fit -> entropy -> estimate/compare.

Commands talk to each other through files only.  Every command writes a run
manifest with a config snapshot, seeds, and artifact checksums, and re-running
with the same inputs reproduces the artifacts byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import entropy as ent
from . import figures, infer, simulate
from .lattice import GridSpec, NeighbourhoodScheme, build_adjacency, degree_matrix, lattice_spectrum

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3

SIMULATE_DEFAULTS = {
    "rows": 40,
    "cols": 40,
    "scheme": "12nn",
    "tau": 0.1,
    "rho_clustered": 0.99,
    "rho_random": 0.0001,
    "replicates": 200,
    "expit_min": 0.1,
    "expit_max": 0.9,
    "seed": 1914,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def worker_count() -> int:
    """Worker processes for parallel sections, from SPATENT_WORKERS (default 1)."""
    raw = os.environ.get("SPATENT_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"SPATENT_WORKERS must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# small file helpers
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_via_tmp(path: Path, writer) -> None:
    """Run writer(tmp_path) and atomically rename the result into place.

    The temporary name keeps the target's suffix so extension-sensitive
    writers (matplotlib) behave the same as on the final path.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp",
                               suffix=path.suffix)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seed, artifacts: dict[str, Path],
                   inputs: dict | None = None) -> None:
    base = path.parent
    payload = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "inputs": inputs or {},
        "artifacts": {
            name: {"path": str(p.relative_to(base)), "sha256": sha256_file(p)}
            for name, p in sorted(artifacts.items())
        },
        "created_unix": int(time.time()),
    }
    atomic_write_json(path, payload)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def parse_config(path: Path) -> dict:
    """Flat key = value file; '#' starts a comment; unknown keys are rejected."""
    values = dict(SIMULATE_DEFAULTS)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SIMULATE_DEFAULTS:
            raise DataError(f"{path}:{lineno}: invalid config key {key!r}")
        caster = type(SIMULATE_DEFAULTS[key])
        try:
            values[key] = caster(value)
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {key} value {value!r} as {caster.__name__}")
    return values


def scenario_configs(values: dict) -> list[simulate.ScenarioConfig]:
    grid = GridSpec(values["rows"], values["cols"])
    scheme = NeighbourhoodScheme.parse(values["scheme"])
    shared = dict(grid=grid, scheme=scheme, tau=values["tau"], replicates=values["replicates"],
                  expit_min=values["expit_min"], expit_max=values["expit_max"],
                  master_seed=values["seed"])
    return [
        simulate.ScenarioConfig(name="clustered", rho=values["rho_clustered"], **shared),
        simulate.ScenarioConfig(name="random", rho=values["rho_random"], **shared),
    ]


def cmd_simulate(args) -> int:
    out = Path(args.out)
    values = parse_config(Path(args.config)) if args.config else dict(SIMULATE_DEFAULTS)
    artifacts: dict[str, Path] = {}
    scenario_index = {}
    for config in scenario_configs(values):
        replicates = simulate.simulate_scenario(config)
        scenario_dir = out / config.name
        paths = []
        for r, rep in enumerate(replicates):
            field_path = scenario_dir / f"field_{r:04d}.csv"
            truth_path = scenario_dir / f"truth_{r:04d}.json"
            write_via_tmp(field_path, lambda p, rep=rep: simulate.write_field_csv(rep.field, p))
            write_via_tmp(truth_path, lambda p, rep=rep: simulate.write_truth_json(rep.truth, p))
            artifacts[f"{config.name}/field_{r:04d}"] = field_path
            artifacts[f"{config.name}/truth_{r:04d}"] = truth_path
            paths.append({
                "field": str(field_path.relative_to(out)),
                "truth": str(truth_path.relative_to(out)),
                "field_sha256": sha256_file(field_path),
            })
        scenario_index[config.name] = {
            "rho": config.rho,
            "tau": config.tau,
            "scheme": config.scheme.value,
            "rows": config.grid.rows,
            "cols": config.grid.cols,
            "replicates": paths,
        }
        print(f"simulated {len(replicates)} replicates for scenario {config.name!r} "
              f"({config.grid.rows}x{config.grid.cols}, rho={config.rho})")
    manifest_path = out / "manifest.json"
    base = {"command": "simulate", "config": values, "master_seed": values["seed"],
            "scenarios": scenario_index}
    artifacts_entry = {
        name: {"path": str(p.relative_to(out)), "sha256": sha256_file(p)}
        for name, p in sorted(artifacts.items())
    }
    base["artifacts"] = artifacts_entry
    base["created_unix"] = int(time.time())
    atomic_write_json(manifest_path, base)
    print(f"manifest: {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    field_path = Path(args.field)
    if not field_path.exists():
        raise DataError(f"field file not found: {field_path}")
    try:
        field = simulate.read_field_csv(field_path)
    except ValueError as exc:
        raise DataError(str(exc))
    if field.x.min() == field.x.max():
        print(f"warning: degenerate field (all cells = {int(field.x[0])}); "
              "the intercept posterior will hug the prior", file=sys.stderr)

    scheme = NeighbourhoodScheme.parse(args.scheme)
    A = build_adjacency(field.grid, scheme)
    degrees = degree_matrix(A)
    eigenvalues = lattice_spectrum(field.grid.rows, field.grid.cols, scheme)
    try:
        config = infer.FitConfig(
            chains=args.chains, iterations=args.iters, burn_in=args.burn_in,
            thinning=args.thin, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    samples = infer.fit_mcmc(field, A, degrees, infer.Priors(), config,
                             eigenvalues=eigenvalues, scheme=scheme.value,
                             workers=worker_count())
    summary = infer.posterior_summary(samples)
    report = infer.diagnostics(samples) if config.chains >= 2 else None

    out = Path(args.out)
    draws_path = out / "draws.bin"
    sidecar_path = out / "draws.json"
    write_via_tmp(draws_path, lambda p: infer.save_draws(samples, p))
    sidecar = {
        "command": "fit",
        "field": str(field_path),
        "field_sha256": sha256_file(field_path),
        "scheme": scheme.value,
        "grid": [field.grid.rows, field.grid.cols],
        "seed": config.seed,
        "config": samples.config,
        "acceptance": samples.acceptance,
        "diagnostics": report,
        "hyperparameters": summary.hyper,
    }

    truth_payload = None
    if args.truth:
        truth = simulate.read_truth_json(Path(args.truth))
        covered = {
            name: bool(summary.hyper[name]["lower"] <= getattr(truth, name) <= summary.hyper[name]["upper"])
            for name in ("beta0", "tau", "rho")
        }
        truth_payload = {
            "path": str(args.truth),
            "values": {"beta0": truth.beta0, "tau": truth.tau, "rho": truth.rho},
            "covered": covered,
        }
    sidecar["truth"] = truth_payload
    atomic_write_json(sidecar_path, sidecar)

    for name in ("beta0", "tau", "rho"):
        h = summary.hyper[name]
        line = f"{name:>6}: mean {h['mean']:+.4f}   95% CI [{h['lower']:+.4f}, {h['upper']:+.4f}]"
        if truth_payload:
            line += f"   truth {truth_payload['values'][name]:+.4f}" \
                    f" {'in' if truth_payload['covered'][name] else 'OUT of'} CI"
        print(line)
    if report is not None:
        print(f"max split R-hat: {report['max_rhat']:.4f}"
              + (f"  flagged: {', '.join(report['flagged'])}" if report["flagged"] else ""))
    print(f"draws: {draws_path}")

    write_manifest(out / "manifest.json", "fit",
                   {**samples.config, "scheme": scheme.value}, config.seed,
                   {"draws": draws_path, "sidecar": sidecar_path},
                   inputs={"field": str(field_path), "field_sha256": sidecar["field_sha256"]})
    if report is not None and report["flagged"]:
        print("convergence failure: split R-hat above 1.05", file=sys.stderr)
        return EXIT_CONVERGENCE
    return 0


# ---------------------------------------------------------------------------
# entropy surfaces
# ---------------------------------------------------------------------------

def cmd_entropy(args) -> int:
    draws_path = Path(args.draws)
    if not draws_path.exists():
        raise DataError(f"draws file not found: {draws_path}")
    try:
        samples = infer.load_draws(draws_path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt draws file {draws_path}: {exc}")
    surface = ent.posterior_entropy_surface(samples)
    out = Path(args.out)
    artifacts: dict[str, Path] = {}
    for name, values in surface.layers().items():
        grid_values = surface.layer_grid(name)
        csv_path = out / f"surface_{name}.csv"
        pgm_path = out / f"surface_{name}.pgm"
        png_path = out / f"surface_{name}.png"
        write_via_tmp(csv_path, lambda p, v=grid_values: ent.write_surface_csv(v, p))
        write_via_tmp(pgm_path, lambda p, v=grid_values: ent.write_surface_pgm(v, p))
        write_via_tmp(png_path, lambda p, v=grid_values, t=name: figures.save_surface_png(
            v, p, title=f"entropy surface ({t})",
            vmax=ent.LOG2 if name != "sd" else max(float(v.max()), 1e-6)))
        artifacts[f"surface_{name}.csv"] = csv_path
        artifacts[f"surface_{name}.pgm"] = pgm_path
        artifacts[f"surface_{name}.png"] = png_path
        print(f"layer {name}: spatial mean {values.mean():.4f} nats "
              f"(max possible {ent.LOG2:.4f})")
    write_manifest(out / "manifest.json", "entropy", {"draws": str(draws_path)},
                   samples.seed, artifacts,
                   inputs={"draws": str(draws_path), "draws_sha256": sha256_file(draws_path)})
    return 0


# ---------------------------------------------------------------------------
# classical estimates
# ---------------------------------------------------------------------------

def cmd_estimate(args) -> int:
    field_path = Path(args.field)
    if not field_path.exists():
        raise DataError(f"field file not found: {field_path}")
    try:
        field = simulate.read_field_csv(field_path)
    except ValueError as exc:
        raise DataError(str(exc))
    counts = np.bincount(field.x, minlength=2)
    n = int(counts.sum())
    rows = [
        ("plugin", ent.plugin_estimator(counts)),
        ("miller_madow", ent.miller_madow(counts)),
        ("jackknife", ent.jackknife_estimator(counts)),
    ]
    print(f"{'estimator':<14}{'value':>12}{'n':>8}")
    for name, value in rows:
        print(f"{name:<14}{value:>12.6f}{n:>8}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _find_fit_sidecars(fits_root: Path) -> dict[str, dict]:
    """Map field checksum -> fit sidecar payload for every fit under fits_root."""
    found = {}
    if not fits_root.exists():
        return found
    for sidecar_path in sorted(fits_root.rglob("draws.json")):
        try:
            with open(sidecar_path) as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError):
            continue
        if payload.get("command") != "fit":
            continue
        payload["_dir"] = str(sidecar_path.parent)
        found[payload["field_sha256"]] = payload
    return found


def _surface_stats(fit_dir) -> dict | None:
    draws_path = Path(fit_dir) / "draws.bin"
    if not draws_path.exists():
        return None
    samples = infer.load_draws(draws_path)
    surface = ent.posterior_entropy_surface(samples)
    return {
        "mean_layer_spatial_mean": float(surface.mean.mean()),
        "mean_layer_spatial_sd": float(surface.mean.std()),
        "point_layer_spatial_mean": float(surface.point.mean()),
    }


def cmd_compare(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("command") != "simulate":
        raise DataError(f"{manifest_path} is not a simulate manifest")
    fits_root = Path(args.fits) if args.fits else manifest_path.parent / "fits"
    out = Path(args.out) if args.out else manifest_path.parent / "compare"
    sidecars = _find_fit_sidecars(fits_root)

    # surface summaries need a pass over each fit's draws: farm out per fit
    fit_dirs = sorted({payload["_dir"] for payload in sidecars.values()})
    if worker_count() > 1 and len(fit_dirs) > 1:
        with ProcessPoolExecutor(max_workers=worker_count()) as pool:
            stats_by_dir = dict(zip(fit_dirs, pool.map(_surface_stats, fit_dirs)))
    else:
        stats_by_dir = {d: _surface_stats(d) for d in fit_dirs}

    report = {"manifest": str(manifest_path), "fits_root": str(fits_root), "scenarios": {}}
    pending = []
    for scenario, info in sorted(manifest["scenarios"].items()):
        rows = []
        for rep in info["replicates"]:
            name = f"{scenario}/{Path(rep['field']).stem}"
            sidecar = sidecars.get(rep["field_sha256"])
            if sidecar is None:
                pending.append(name)
                continue
            truth = simulate.read_truth_json(manifest_path.parent / rep["truth"])
            covered = {
                p: bool(sidecar["hyperparameters"][p]["lower"] <= getattr(truth, p)
                        <= sidecar["hyperparameters"][p]["upper"])
                for p in ("beta0", "tau", "rho")
            }
            rows.append({
                "replicate": name,
                "covered": covered,
                "hyperparameters": sidecar["hyperparameters"],
                "truth": {"beta0": truth.beta0, "tau": truth.tau, "rho": truth.rho},
                "surfaces": stats_by_dir.get(sidecar["_dir"]),
            })
        coverage = {}
        for p in ("beta0", "tau", "rho"):
            hits = sum(r["covered"][p] for r in rows)
            coverage[p] = {
                "covered": hits,
                "total": len(rows),
                "rate": (hits / len(rows)) if rows else None,
            }
        report["scenarios"][scenario] = {
            "rho": info["rho"],
            "completed": len(rows),
            "expected": len(info["replicates"]),
            "coverage": coverage,
            "replicates": rows,
        }

    completed = sum(s["completed"] for s in report["scenarios"].values())
    if completed == 0:
        print("no completed fits; pending replicates:", file=sys.stderr)
        for name in pending:
            print(f"  {name}", file=sys.stderr)
        raise DataError(f"zero completed fits under {fits_root}")
    report["pending"] = pending

    lines = [f"replication report for {manifest_path}"]
    for scenario, block in sorted(report["scenarios"].items()):
        lines.append(f"\nscenario {scenario!r} (rho={block['rho']}): "
                     f"{block['completed']}/{block['expected']} fits")
        for p in ("beta0", "tau", "rho"):
            cov = block["coverage"][p]
            shown = f"{cov['covered']}/{cov['total']}" if cov["total"] else "n/a"
            lines.append(f"  95% CI coverage for {p:<6}: {shown}")
        stats = [r["surfaces"] for r in block["replicates"] if r["surfaces"]]
        if stats:
            means = np.array([s["mean_layer_spatial_mean"] for s in stats])
            lines.append(f"  entropy mean-layer spatial mean: {means.mean():.4f} nats "
                         f"(log 2 = {ent.LOG2:.4f})")
    if pending:
        lines.append(f"\npending ({len(pending)}): " + ", ".join(pending))
    text = "\n".join(lines) + "\n"

    artifacts: dict[str, Path] = {}
    json_path = out / "report.json"
    text_path = out / "report.txt"
    atomic_write_json(json_path, report)
    atomic_write_text(text_path, text)
    artifacts["report.json"] = json_path
    artifacts["report.txt"] = text_path
    png_path = out / "coverage.png"
    write_via_tmp(png_path, lambda p: figures.save_coverage_png(report, p))
    artifacts["coverage.png"] = png_path
    write_manifest(out / "manifest.json", "compare",
                   {"manifest": str(manifest_path), "fits": str(fits_root)},
                   manifest.get("master_seed"), artifacts)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="spatent",
                     description="Bayesian entropy surfaces for binary lattice data")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generate scenario replicates")
    p.add_argument("--config", help="flat key=value config file (defaults reproduce the "
                                    "40x40 two-scenario study)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="MCMC posterior for one field")
    p.add_argument("--field", required=True, help="field CSV (rows x cols of 0/1)")
    p.add_argument("--scheme", default="12nn", choices=["4nn", "12nn"])
    p.add_argument("--iters", type=int, default=20_000)
    p.add_argument("--burn-in", type=int, default=None,
                   help="default: half of --iters")
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--truth", help="truth JSON for coverage flags")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("entropy", help="entropy surfaces from posterior draws")
    p.add_argument("--draws", required=True, help="draws.bin from 'spatent fit'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("estimate", help="classical entropy estimates of one field")
    p.add_argument("--field", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("compare", help="replication report over simulate + fit runs")
    p.add_argument("--manifest", required=True, help="manifest.json from 'spatent simulate'")
    p.add_argument("--fits", help="directory holding fit outputs (default: <manifest dir>/fits)")
    p.add_argument("--out", help="report directory (default: <manifest dir>/compare)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "burn_in", None) is None and getattr(args, "iters", None) is not None:
            args.burn_in = args.iters // 2
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except infer.AdaptationDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
