"""Command-line entry point: ``gdmnowcast {fit,nowcast,rolling,simulate,diagnostics}``.

Settings are resolved as built-in defaults, then the optional ``--config``
JSON file, then explicit flags (flags win). Every subcommand writes into the
``--out`` directory and leaves a ``manifest.json`` there recording the seed,
the resolved configuration and its hash, library versions and input hashes.

Exit codes: 0 success, 2 convergence check failed (outputs still written),
1 any error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ._compat import USE_NUMBA
from .data import CensoredTriangle, build_triangle, read_records, write_long_csv
from .mcmc.diagnostics import convergence_report
from .mcmc.engine import McmcConfig
from .mcmc.samples import PosteriorSamples
from .model import ModelSpec

__all__ = ["main", "build_parser", "CONFIG_SCHEMA_VERSION"]

log = logging.getLogger("gdmnowcast")

CONFIG_SCHEMA_VERSION = 1
CONFIG_KEYS = {"schema_version", "mcmc", "model", "window", "horizon", "t0", "d_max", "days", "models", "scenario"}
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
MODEL_CHOICES = ("gdm", "nb", "rw", "window")


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _load_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {path}")
    try:
        out = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(out, dict):
        raise CliError(f"{path}: top level must be a JSON object")
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = _load_json(path, "config")
    version = cfg.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise CliError(f"{path}: unsupported schema_version {version} (expected {CONFIG_SCHEMA_VERSION})")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise CliError(f"{path}: unknown field(s) {sorted(unknown)}")
    return cfg


def load_spec(path: str | None, d_max: int | None) -> ModelSpec | None:
    if path is None:
        return None
    d = _load_json(path, "spec")
    if "d_max" not in d and d_max is not None:
        d["d_max"] = d_max
    try:
        return ModelSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc


def mcmc_config(args, cfg: dict) -> McmcConfig:
    base = dict(cfg.get("mcmc", {}))
    known = {f.name for f in fields(McmcConfig)}
    unknown = set(base) - known
    if unknown:
        raise CliError(f"config field 'mcmc' has unknown key(s) {sorted(unknown)}")
    for flag, key in (("chains", "n_chains"), ("iterations", "n_iterations"), ("burnin", "burn_in"),
                      ("thin", "thin"), ("seed", "master_seed"), ("jobs", "n_jobs")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    try:
        return McmcConfig(**base)
    except (TypeError, ValueError) as exc:
        raise CliError(f"mcmc configuration: {exc}") from exc


def _pick(args, cfg: dict, name: str, default=None):
    v = getattr(args, name, None)
    return v if v is not None else cfg.get(name, default)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    import numba
    import scipy

    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"gdmnowcast": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "isoformat"):
        return o.isoformat()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=_jsonable, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(out: Path, command: str, seed: int | None, config: dict, inputs: list[str],
                   outputs: list[str]) -> Path:
    manifest = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "versions": _versions(),
        "backend": "numba" if USE_NUMBA else "numpy",
        "inputs": {p: _sha256(Path(p)) for p in inputs},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_triangle(path: str, d_max: int | None):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"data file not found: {path}")
    try:
        records = read_records(p)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if not records:
        raise CliError(f"{path}: no records")
    if d_max is None:
        d_max = max(r.delay for r in records)
    return build_triangle(records, d_max)


def _t0(arg, tri) -> int:
    t0 = tri.n_times - 1 if arg is None else int(arg)
    if not 0 <= t0 < tri.n_times:
        raise CliError(f"--t0 must lie in [0, {tri.n_times - 1}], got {t0}")
    return t0


def _write_convergence(out: Path, samples: PosteriorSamples) -> tuple[bool, list[str]]:
    rep = convergence_report(samples)
    (out / "convergence.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    with (out / "psrf.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "psrf", "degenerate"])
        for name, r, d in rep.rows():
            w.writerow([name, f"{r:.6f}", int(d)])
    return rep.passed, ["convergence.json", "psrf.csv"]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    from .experiment import fit_model

    cfg = load_config(args.config)
    spec = load_spec(_pick(args, {}, "spec"), _pick(args, cfg, "d_max"))
    d_max = spec.d_max if spec is not None else _pick(args, cfg, "d_max")
    tri = _read_triangle(args.data, d_max)
    t0 = _t0(_pick(args, cfg, "t0"), tri)
    model = _pick(args, cfg, "model", "gdm")
    window = _pick(args, cfg, "window")
    mc = mcmc_config(args, cfg)
    resolved = {"model": model, "window": window, "t0": t0, "d_max": tri.d_max, "mcmc": asdict(mc),
                "spec": spec.to_dict() if spec else None}
    inputs = [args.data] + ([args.spec] if args.spec else []) + ([args.config] if args.config else [])
    out = _out_dir(args)
    if args.dry_run:
        write_manifest(out, "fit", mc.master_seed, resolved, inputs, [])
        print(f"dry run: wrote {out / 'manifest.json'}")
        return EXIT_OK
    data = CensoredTriangle(tri, t0)
    samples, _ = fit_model(model, data, mc, spec=spec, window=window)
    samples.save(out / "samples.bin")
    passed, written = _write_convergence(out, samples)
    write_manifest(out, "fit", mc.master_seed, resolved, inputs, ["samples.bin"] + written)
    print(f"wrote {out / 'samples.bin'}; convergence {'passed' if passed else 'FAILED'}")
    return EXIT_OK if passed else EXIT_NOT_CONVERGED


def cmd_nowcast(args) -> int:
    from .prediction import predict_totals

    cfg = load_config(args.config)
    sp = Path(args.samples)
    if not sp.is_file():
        raise CliError(f"samples file not found: {args.samples}")
    samples = PosteriorSamples.load(sp)
    tri = _read_triangle(args.data, samples.meta["d_max"])
    t0 = _t0(_pick(args, cfg, "t0", samples.meta.get("t0")), tri)
    horizon = int(_pick(args, cfg, "horizon", 0))
    if horizon < 0:
        raise CliError("--horizon must be >= 0")
    seed = _pick(args, cfg, "seed", samples.meta.get("config", {}).get("master_seed", 0))
    data = CensoredTriangle(tri, t0)
    first = max(0, t0 - (tri.d_max - 1))
    res = predict_totals(samples, data, horizon, first_row=first, rng=np.random.default_rng([int(seed), 0x5EED]))
    out = _out_dir(args)
    res.write_csv(out / "nowcast.csv")
    write_manifest(out, "nowcast", int(seed), {"t0": t0, "horizon": horizon, "first_row": first},
                   [args.data, args.samples], ["nowcast.csv"])
    print(f"wrote {out / 'nowcast.csv'} ({len(res.rows)} rows x {len(res.regions)} regions)")
    return EXIT_OK


def cmd_rolling(args) -> int:
    from .experiment import RollingConfig, run_rolling

    cfg = load_config(args.config)
    spec = load_spec(args.spec, _pick(args, cfg, "d_max"))
    tri = _read_triangle(args.data, spec.d_max if spec else _pick(args, cfg, "d_max"))
    models = _pick(args, cfg, "models", "gdm,nb,window")
    models = tuple(m.strip() for m in (models.split(",") if isinstance(models, str) else models) if m.strip())
    bad = [m for m in models if m not in MODEL_CHOICES]
    if bad:
        raise CliError(f"--models: unknown model(s) {bad}; choose from {list(MODEL_CHOICES)}")
    days = int(_pick(args, cfg, "days", 20))
    t0_start = _pick(args, cfg, "t0")
    t0_start = tri.n_times - days if t0_start is None else int(t0_start)
    mc = mcmc_config(args, cfg)
    jobs = int(args.jobs or 1)
    rc = RollingConfig(t0_start=t0_start, n_days=days, models=models, horizon=int(_pick(args, cfg, "horizon", 0)),
                       mcmc=McmcConfig(**{**asdict(mc), "n_jobs": 1}), spec=spec, window=_pick(args, cfg, "window"),
                       jobs=jobs)
    try:
        rc.validate(tri.n_times)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    res = run_rolling(tri, rc)
    out = _out_dir(args)
    res.metrics.write_csv(out / "metrics.csv")
    res.write_archive(out / "predictions.csv")
    (out / "table.txt").write_text(res.metrics.render(0))
    (out / "rolling.json").write_text(json.dumps(
        {"failures": res.failures, "leaked_cells": res.leaks, "convergence": res.convergence}, indent=2,
        default=_jsonable) + "\n")
    resolved = {"t0_start": t0_start, "n_days": days, "models": list(models), "horizon": rc.horizon,
                "window": rc.window, "jobs": jobs, "mcmc": asdict(rc.mcmc), "spec": spec.to_dict() if spec else None}
    write_manifest(out, "rolling", mc.master_seed, resolved, [args.data],
                   ["metrics.csv", "predictions.csv", "table.txt", "rolling.json"])
    print(res.metrics.render(0))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .experiment import SimulationScenario, simulate_dataset

    cfg = load_config(args.config)
    scn_d = dict(cfg.get("scenario", {}))
    for flag, key in (("seed", "seed"), ("T", "T"), ("regions", "S"), ("d_max", "d_max")):
        v = getattr(args, flag, None)
        if v is not None:
            scn_d[key] = v
    try:
        scn = SimulationScenario.from_dict(scn_d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"scenario: {exc}") from exc
    sim = simulate_dataset(scn)
    out = _out_dir(args)
    write_long_csv(sim.triangle, out / "data.csv")
    np.savez(out / "truth.npz", lam=sim.lam, y=sim.y, survivor=sim.survivor, nu=sim.nu)
    (out / "scenario.json").write_text(json.dumps(scn.to_dict(), indent=2) + "\n")
    write_manifest(out, "simulate", scn.seed, {"scenario": scn.to_dict()}, [],
                   ["data.csv", "truth.npz", "scenario.json"])
    print(f"wrote {out / 'data.csv'}")
    return EXIT_OK


def cmd_diagnostics(args) -> int:
    sp = Path(args.samples)
    if not sp.is_file():
        raise CliError(f"samples file not found: {args.samples}")
    samples = PosteriorSamples.load(sp)
    out = _out_dir(args)
    passed, written = _write_convergence(out, samples)
    write_manifest(out, "diagnostics", samples.meta.get("config", {}).get("master_seed"), {}, [args.samples],
                   written)
    rep = json.loads((out / "convergence.json").read_text())
    print(json.dumps(rep, indent=2))
    return EXIT_OK if passed else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _mcmc_flags(p):
    g = p.add_argument_group("MCMC")
    g.add_argument("--chains", type=int, help="number of chains (default 4)")
    g.add_argument("--iterations", type=int, help="iterations per chain, burn-in included (default 200000)")
    g.add_argument("--burnin", type=int, help="burn-in iterations (default 100000)")
    g.add_argument("--thin", type=int, help="keep every n-th post-burn-in draw (default 10)")
    g.add_argument("--seed", type=int, help="master seed (default 0)")
    g.add_argument("--jobs", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdmnowcast", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and write posterior samples")
    p.add_argument("--data", required=True, help="CSV of counts (long or wide layout)")
    p.add_argument("--spec", help="model spec JSON (joint model)")
    p.add_argument("--config", help="run config JSON; flags override its values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", choices=MODEL_CHOICES)
    p.add_argument("--window", type=int, help="window length for --model window")
    p.add_argument("--t0", type=int, help="present-day row, zero-based (default: last row)")
    p.add_argument("--d-max", dest="d_max", type=int, help="maximum delay when no spec is given")
    p.add_argument("--dry-run", action="store_true", help="resolve the configuration and write the manifest only")
    _mcmc_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nowcast", help="predict totals from a samples file")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, help="days to forecast past t0 (default 0)")
    p.add_argument("--t0", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("rolling", help="rolling-origin evaluation of several models")
    p.add_argument("--data", required=True)
    p.add_argument("--spec")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--models", help="comma-separated subset of gdm,nb,rw,window (default gdm,nb,window)")
    p.add_argument("--model", dest="models", help=argparse.SUPPRESS)
    p.add_argument("--window", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--t0", type=int, help="first present-day row (default: T - days)")
    p.add_argument("--days", type=int, help="number of refits (default 20)")
    p.add_argument("--d-max", dest="d_max", type=int)
    _mcmc_flags(p)
    p.set_defaults(func=cmd_rolling)

    p = sub.add_parser("simulate", help="write a synthetic data set with its ground truth")
    p.add_argument("--config", help="JSON with a 'scenario' object")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int, help="number of days")
    p.add_argument("--regions", type=int, help="number of regions")
    p.add_argument("--d-max", dest="d_max", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnostics", help="PSRF convergence report for a samples file")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnostics)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
