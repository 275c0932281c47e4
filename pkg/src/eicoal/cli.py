"""Command-line entry point.

Every subcommand reads an optional JSON config, applies flag overrides,
validates the result before doing any work and writes its outputs plus a
``metadata.json`` sidecar (seed, effective config, config hash, versions) to
``--out``.  Exit codes: 0 success, 1 numerical or convergence failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import ESS_THRESHOLD, diagnose
from .epi_dynamics import SamplingScheme, SimulationRejected
from .fidelity import ARMS, FidelityConfig, run_fidelity
from .genealogy import NewickError, TimelineError, TreeValidationError, extract_events, read_newick
from .inference import (
    PRESETS,
    InferenceError,
    ModelLayout,
    PriorConfig,
    RunConfig,
    grid_draws_from_csv,
    run_mcmc,
)
from .metrics import (
    METRIC_COLUMNS,
    MetricsUsageError,
    TruthGrid,
    metrics_row,
    posterior_summary,
    summarize_rows,
    table_to_csv,
)
from .phasetype import build_rate_matrices
from .scenarios import ScenarioConfig, simulate_scenario

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


DEFAULTS = {
    "simulate-epidemic": {
        "scenario": "fixed",
        "N": 15000,
        "gamma": 0.25,
        "nu": 1.0 / 7.0,
        "t_end": 154.0,
        "t_last": 153.0,
        "n_samples": 50,
        "sampling": "isochronous",
        "window": 35.0,
        "het_fraction": 0.5,
        "init_infectious": 1,
        "max_attempts": 500,
        "replicates": 1,
    },
    "infer": {
        "tree": None,
        "trees": None,
        "prior": "fixed",
        "iterations": 100_000,
        "burn_in": None,
        "thin": 10,
        "chains": 1,
        "latent_sampler": "exact",
        "output_step": 0.5,
        "max_init_draws": 10_000,
    },
    "validate-fidelity": {k: v for k, v in asdict(FidelityConfig()).items()},
    "metrics": {"posterior": [], "truth": []},
    "summarize": {"posterior": [], "params": []},
}


def _versions() -> dict:
    import numba
    import scipy

    return {
        "eicoal": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def effective_config(command: str, file_config: dict, overrides: dict) -> dict:
    """Defaults, then the config file, then flags; unknown keys are an error."""
    base = dict(DEFAULTS[command])
    unknown = sorted(set(file_config) - set(base) - {"seed"})
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    base.update({k: v for k, v in file_config.items() if k != "seed"})
    base.update({k: v for k, v in overrides.items() if v is not None})
    return base


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_metadata(out: Path, seed, config: dict, extra: dict | None = None):
    meta = {"seed": seed, "config": config, "config_hash": config_hash(config), "versions": _versions()}
    if extra:
        meta.update(extra)
    _write(out / "metadata.json", canonical_json(meta) + "\n")


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------- simulate


def _scenario_config(cfg: dict) -> ScenarioConfig:
    try:
        scheme = SamplingScheme(cfg["sampling"], float(cfg["window"]), float(cfg["het_fraction"]))
        return ScenarioConfig(
            name=cfg["scenario"], N=int(cfg["N"]), gamma=float(cfg["gamma"]), nu=float(cfg["nu"]),
            t_end=float(cfg["t_end"]), t_last=float(cfg["t_last"]), n_samples=int(cfg["n_samples"]),
            scheme=scheme, init_infectious=int(cfg["init_infectious"]), max_attempts=int(cfg["max_attempts"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _simulate_one(args):
    sc, seed, out = args
    real = simulate_scenario(sc, seed)
    out = Path(out)
    _write(out / "tree.nwk", real.genealogy.tree.to_newick() + "\n")
    _write(out / "timeline.csv", real.timeline.to_csv())
    _write(out / "trajectory.csv", real.trajectory.to_csv())
    _write(out / "history.csv", real.history.to_csv())
    _write(out / "truth.csv", real.truth().to_csv())
    return real.attempts


def cmd_simulate_epidemic(cfg: dict, seed: int, out: Path, threads: int) -> dict:
    sc = _scenario_config(cfg)
    n = int(cfg["replicates"])
    if n < 1:
        raise UsageError("replicates must be at least 1")
    if n == 1:
        jobs = [(sc, seed, out)]
    else:
        jobs = [(sc, s, out / f"rep_{j:03d}") for j, s in enumerate(_child_seeds(seed, n))]
    attempts = _map(_simulate_one, jobs, threads)
    return {"attempts": attempts}


# ------------------------------------------------------------------- infer


def _prior_from(spec) -> PriorConfig:
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise UsageError(f"unknown prior preset {spec!r}; choose from {sorted(PRESETS)}")
        return PRESETS[spec]
    if isinstance(spec, dict):
        try:
            return PriorConfig.from_dict(spec)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid prior: {exc}") from exc
    raise UsageError("prior must be a preset name or an object")


def _load_timeline(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"tree file not found: {p}")
    try:
        return extract_events(read_newick(p))
    except (NewickError, TreeValidationError, TimelineError, OSError) as exc:
        raise UsageError(f"cannot use tree {p}: {exc}") from exc


def _run_chain(args):
    timeline, prior, run = args
    return run_mcmc(timeline, prior, run)


def _infer_tree(timeline, prior, cfg, seed, out: Path, threads: int, dump: bool) -> dict:
    n_chains = int(cfg["chains"])
    runs = []
    for s in _child_seeds(seed, n_chains) if n_chains > 1 else [seed]:
        runs.append(RunConfig(
            iterations=int(cfg["iterations"]), burn_in=cfg["burn_in"], thin=int(cfg["thin"]), seed=s,
            latent_sampler=cfg["latent_sampler"], output_step=float(cfg["output_step"]),
            max_init_draws=int(cfg["max_init_draws"]),
        ))
    samples = _map(_run_chain, [(timeline, prior, r) for r in runs], threads)
    for j, s in enumerate(samples):
        for which in ("params", "R", "E", "I"):
            _write(out / f"chain_{j}_{which}.csv", s.to_csv(which))
    pooled = np.vstack([s.R_u for s in samples])
    _write(out / "summary.csv", table_to_csv(posterior_summary(pooled, samples[0].output_grid, grid=samples[0].output_grid)))
    diag_rows = {"parameter": [], "ess_bulk": [], "ess_tail": [], "rhat": [], "flagged": []}
    if samples[0].n_draws >= 100:
        for col, name in enumerate(samples[0].param_names):
            d = diagnose(name, np.vstack([s.draws[:, col] for s in samples]))
            diag_rows["parameter"].append(name)
            diag_rows["ess_bulk"].append(d.ess_bulk)
            diag_rows["ess_tail"].append(d.ess_tail)
            diag_rows["rhat"].append(d.rhat)
            diag_rows["flagged"].append("yes" if d.flagged else "no")
        _write(out / "diagnostics.csv", table_to_csv(diag_rows))
    if dump:
        layout = ModelLayout(timeline, prior, float(cfg["output_step"]))
        q0 = np.zeros(layout.n_params)
        inp = layout.inputs(q0, layout.solve(q0))
        for i in range(inp.n_intervals):
            rm = build_rate_matrices(inp.context(i))
            for which in ("A", "L", "Q"):
                _write(out / "matrices" / f"interval_{i:04d}_{which}.csv", rm.to_csv(which))
    return {
        "chain_seeds": [r.seed for r in runs],
        "chain_stats": [s.stats for s in samples],
        "diagnostics_threshold": ESS_THRESHOLD,
    }


def cmd_infer(cfg: dict, seed: int, out: Path, threads: int, dump: bool = False) -> dict:
    trees = cfg["trees"] if cfg["trees"] else ([cfg["tree"]] if cfg["tree"] else [])
    if not trees:
        raise UsageError("infer needs a tree (config key 'tree' or 'trees', or --tree)")
    prior = _prior_from(cfg["prior"])
    try:
        RunConfig(iterations=int(cfg["iterations"]), burn_in=cfg["burn_in"], thin=int(cfg["thin"]),
                  latent_sampler=cfg["latent_sampler"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if int(cfg["chains"]) < 1:
        raise UsageError("chains must be at least 1")
    timelines = [_load_timeline(t) for t in trees]
    if len(trees) == 1:
        return _infer_tree(timelines[0], prior, cfg, seed, out, threads, dump)
    info = {}
    for j, (tl, s) in enumerate(zip(timelines, _child_seeds(seed, len(trees)))):
        info[f"tree_{j:03d}"] = _infer_tree(tl, prior, cfg, s, out / f"tree_{j:03d}", threads, dump)
    return info


# ------------------------------------------------------------ fidelity


def cmd_validate_fidelity(cfg: dict, seed: int, out: Path, threads: int) -> dict:
    try:
        fc = FidelityConfig(**{k: type(DEFAULTS["validate-fidelity"][k])(v) for k, v in cfg.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if fc.n_trajectories < 1 or fc.n_sampled < 2:
        raise UsageError("need at least one trajectory and two sampled individuals")
    res = run_fidelity(fc, seed)
    for arm in ARMS:
        _write(out / f"intervals_{arm}.csv", res.to_csv(arm))
    med = res.medians()
    table = {"interval": np.arange(1, fc.n_sampled)}
    table.update({arm: med[arm] for arm in ARMS})
    _write(out / "medians.csv", table_to_csv(table))
    return {"forward_attempts": res.attempts, "mean_tt_tries": {k: float(v.mean()) for k, v in res.tt_tries.items()}}


# ------------------------------------------------------------- metrics


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p.read_text()


def cmd_metrics(cfg: dict, seed, out: Path, threads: int) -> dict:
    post, truth = list(cfg["posterior"]), list(cfg["truth"])
    if not post:
        raise UsageError("no posterior files given")
    if len(post) != len(truth):
        raise UsageError("need one truth file per posterior file")
    rows = []
    try:
        for p, t in zip(post, truth):
            grid, draws = grid_draws_from_csv(_read_text(p))
            tg = TruthGrid.from_csv(_read_text(t))
            row = metrics_row(draws, tg, grid=grid)
            rows.append(row)
    except (MetricsUsageError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    table = {"simulation": np.arange(len(rows))}
    table.update({c: [r[c] for r in rows] for c in METRIC_COLUMNS})
    _write(out / "metrics.csv", table_to_csv(table))
    summ = summarize_rows(rows)
    _write(out / "summary.csv", table_to_csv({k: [v] for k, v in summ.items()}))
    return {"n_simulations": len(rows)}


def cmd_summarize(cfg: dict, seed, out: Path, threads: int) -> dict:
    post, params = list(cfg["posterior"]), list(cfg["params"])
    if not post and not params:
        raise UsageError("nothing to summarize")
    try:
        if post:
            loaded = [grid_draws_from_csv(_read_text(p)) for p in post]
            grid = loaded[0][0]
            if any(g.shape != grid.shape or np.any(g != grid) for g, _ in loaded):
                raise UsageError("posterior files use different output grids")
            pooled = np.vstack([d for _, d in loaded])
            _write(out / "posterior_summary.csv", table_to_csv(posterior_summary(pooled, grid, grid=grid)))
        if params:
            chains = [grid_draws_from_params(_read_text(p)) for p in params]
            names = chains[0][0]
            n = min(c[1].shape[0] for c in chains)
            rows = {"parameter": [], "ess_bulk": [], "ess_tail": [], "rhat": [], "flagged": []}
            for col, name in enumerate(names):
                d = diagnose(name, np.vstack([c[1][:n, col] for c in chains]))
                rows["parameter"].append(name)
                rows["ess_bulk"].append(d.ess_bulk)
                rows["ess_tail"].append(d.ess_tail)
                rows["rhat"].append(d.rhat)
                rows["flagged"].append("yes" if d.flagged else "no")
            _write(out / "diagnostics.csv", table_to_csv(rows))
    except (MetricsUsageError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return {}


def grid_draws_from_params(text: str):
    lines = text.strip().splitlines()
    if len(lines) < 2:
        raise ValueError("parameter file has no draws")
    names = lines[0].split(",")
    return names, np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])


# ------------------------------------------------------------- driver


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


COMMANDS = {
    "simulate-epidemic": cmd_simulate_epidemic,
    "infer": cmd_infer,
    "validate-fidelity": cmd_validate_fidelity,
    "metrics": cmd_metrics,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eicoal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker processes for replicates/chains")
        return p

    p = common(sub.add_parser("simulate-epidemic", help="simulate a scenario epidemic and its sampled genealogy"))
    p.add_argument("--scenario", choices=["fixed", "increase", "control"])
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--sampling", choices=["isochronous", "heterochronous"])
    p.add_argument("--replicates", type=int)

    p = common(sub.add_parser("infer", help="sample the posterior for a dated tree"))
    p.add_argument("--tree", help="Newick file")
    p.add_argument("--prior", help="prior preset name")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--dump-matrices", action="store_true",
                   help="write the rate matrices of every interval at the prior medians")

    p = common(sub.add_parser("validate-fidelity", help="compare true and approximate coalescent intervals"))
    p.add_argument("--n-trajectories", dest="n_trajectories", type=int)

    p = common(sub.add_parser("metrics", help="coverage, bias and interval width against the truth"))
    p.add_argument("--posterior", nargs="+", help="posterior R grid CSV files")
    p.add_argument("--truth", nargs="+", help="truth CSV files (same order)")

    p = common(sub.add_parser("summarize", help="posterior bands and convergence diagnostics"))
    p.add_argument("--posterior", nargs="+", help="posterior grid CSV files (pooled)")
    p.add_argument("--params", nargs="+", help="parameter CSV files, one per chain")
    return parser


_RESERVED = {"command", "config", "seed", "out", "threads", "dump_matrices"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        file_cfg = {}
        if args.config is not None:
            try:
                file_cfg = json.loads(_read_text(args.config))
            except json.JSONDecodeError as exc:
                raise UsageError(f"invalid JSON config: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise UsageError("config must be a JSON object")
        overrides = {k: v for k, v in vars(args).items() if k not in _RESERVED}
        cfg = effective_config(args.command, file_cfg, overrides)
        seed = args.seed if args.seed is not None else file_cfg.get("seed")
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % 2**64)
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise UsageError("threads must be at least 1")
        fn = COMMANDS[args.command]
        if args.command == "infer":
            extra = fn(cfg, seed, args.out, args.threads, dump=args.dump_matrices)
        else:
            extra = fn(cfg, seed, args.out, args.threads)
        _write_metadata(args.out, seed, cfg, {"command": args.command, "results": extra})
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationRejected, InferenceError, FloatingPointError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
