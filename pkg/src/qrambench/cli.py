"""Command-line entry point: ``qrambench {query,ef,bench,validate,fit}``.

Settings come from built-in defaults, then an optional JSON ``--config`` file,
then explicit flags. ``QRAMBENCH_WORKERS`` replaces the default and config
worker count; an explicit ``--workers`` flag still wins.

Exit codes: 0 success, 1 validation failure, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .error_filtration import (PauliRegisterOperation, QueryOperation, ef_bounds, ef_sweep, fit_power_law,
                               haar_state, max_feasible_n, product_state, progressive_limit, write_ef_csv)
from .noise_model import NoiseModel
from .query_engine import DataTable, build_schedule, estimate_fidelity, run_noiseless, run_noisy
from .sparse_state import SparseState, bus_fidelity, full_fidelity, normalize
from .topology import TreeShape

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
# fidelities are rounded so pruned and full runs (equal to ~1e-12) print identically
FID_DIGITS = 9
# original bound P_S >= 1 - 4 eps, refined bound P_S >= 1 - 2 eps
C_ORIGINAL, C_REFINED = 4.0, 2.0

DEFAULTS = {
    "n": 3, "k": 1, "channel": "depolarizing", "epsilon": 0.0, "gamma": 0.0, "shots": 100,
    "seed": None, "mode": "pruned", "input": "uniform", "table": None, "fidelity": "bus",
    "scope": "all-qudits", "locations": "gate", "workers": 1, "log_shots": 10, "output": None,
    # ef
    "op": "identity", "num_qubits": 1, "T": "1", "states": 10, "rare_event": False, "branches": 2,
    # bench
    "p": "1e-6,1e-5,1e-4", "branch_size": 32, "repetitions": 5, "summary": None, "base_infidelity": None,
    "base_shots": 2000,
    # fit
    "fit_input": None,
    # validate
    "quick": False,
}
CHANNELS = ("depolarizing", "damping", "heating", "qubit-depolarizing")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# parsing helpers
# --------------------------------------------------------------------------

def parse_int_list(text) -> list[int]:
    """``"6..18"``, ``"6..18:2"`` or ``"1,2,3"`` (ranges are inclusive)."""
    if isinstance(text, int):
        return [text]
    if isinstance(text, list):
        return [int(x) for x in text]
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, rest = part.split("..", 1)
            hi, _, step = rest.partition(":")
            out.extend(range(int(lo), int(hi) + 1, int(step or 1)))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError(f"empty integer list {text!r}")
    return out


def parse_float_list(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with settings (flags override it)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--workers", type=int, default=S)
    p.add_argument("--output", "-o", default=S, help="output file (default: stdout)")


def _add_noise(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--channel", choices=CHANNELS, default=S)
    p.add_argument("--epsilon", type=float, default=S)
    p.add_argument("--gamma", type=float, default=S)
    p.add_argument("--scope", choices=("address-only", "all-qudits"), default=S)
    p.add_argument("--locations", choices=("gate", "all"), default=S)
    p.add_argument("--shots", type=int, default=S)
    p.add_argument("--mode", choices=("full", "pruned"), default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="qrambench", description="Noisy bucket-brigade QRAM simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("query", help="noisy query fidelity with a fault log")
    _add_common(q)
    _add_noise(q)
    q.add_argument("--input", default=S, help="uniform | haar:COUNT | path to JSON amplitudes")
    q.add_argument("--table", default=S, help="data table (.csv or raw binary)")
    q.add_argument("--fidelity", choices=("bus", "full"), default=S)
    q.add_argument("--log-shots", dest="log_shots", type=int, default=S)

    e = sub.add_parser("ef", help="error-filtration sweep, CSV output")
    _add_common(e)
    _add_noise(e)
    e.add_argument("--op", choices=("identity", "cnot", "qram"), default=S)
    e.add_argument("--num-qubits", dest="num_qubits", type=int, default=S)
    e.add_argument("--T", default=S, help="levels, e.g. 1,2,3 or 1..4")
    e.add_argument("--states", type=int, default=S)
    e.add_argument("--branches", type=int, default=S, help="addresses per random QRAM input")
    e.add_argument("--rare-event", dest="rare_event", action="store_true", default=S)
    e.add_argument("--table", default=S)

    b = sub.add_parser("bench", help="static and dynamic cost measurements, CSV output")
    _add_common(b)
    b.add_argument("--n", default=S, help="e.g. 6..18 or 6,8,10")
    b.add_argument("--p", default=S, help="comma-separated noise strengths")
    b.add_argument("--gamma", type=float, default=S)
    b.add_argument("--channel", choices=CHANNELS[:3], default=S)
    b.add_argument("--scope", choices=("address-only", "all-qudits"), default=S)
    b.add_argument("--locations", choices=("gate", "all"), default=S)
    b.add_argument("--branch-size", dest="branch_size", type=int, default=S)
    b.add_argument("--shots", type=int, default=S)
    b.add_argument("--repetitions", type=int, default=S)
    b.add_argument("--mode", choices=("full", "pruned", "both"), default=S)
    b.add_argument("--summary", default=S, help="write the JSON summary here")
    b.add_argument("--base-infidelity", dest="base_infidelity", default=S,
                   help="also write 1 - F0 per n at --epsilon to this CSV")
    b.add_argument("--epsilon", type=float, default=S)
    b.add_argument("--base-shots", dest="base_shots", type=int, default=S)

    v = sub.add_parser("validate", help="dense-oracle and analytic checks")
    _add_common(v)
    v.add_argument("--quick", action="store_true", default=S)

    f = sub.add_parser("fit", help="power-law fit of base infidelity and progressive limits")
    _add_common(f)
    f.add_argument("--input", dest="fit_input", default=S, help="CSV with columns n and infidelity (or F0)")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    from_file = False
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
        from_file = True
    env = os.environ.get("QRAMBENCH_WORKERS")
    if env:
        try:
            cfg["workers"] = int(env)
        except ValueError:
            raise ConfigError(f"QRAMBENCH_WORKERS must be an integer, got {env!r}") from None
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if from_file and "seed" not in flags and cfg.get("seed") is None:
        raise ConfigError("config files must set a seed")
    cfg.update(flags)
    if cfg["seed"] is None:
        cfg["seed"] = secrets.randbits(31)
        cfg["seed_generated"] = True
    return cfg


def _check_ranges(cfg: dict):
    for key in ("shots", "workers", "states", "repetitions", "branch_size", "base_shots"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("epsilon", "gamma"):
        if not 0 <= float(cfg[key]) <= 1:
            raise ConfigError(f"{key} must lie in [0, 1]")


def _noise_model(cfg: dict) -> NoiseModel:
    if cfg["channel"] == "qubit-depolarizing":
        raise ConfigError("qubit-depolarizing applies only to the identity and cnot operations")
    try:
        return NoiseModel.build(cfg["channel"], float(cfg["epsilon"]), float(cfg["gamma"]),
                                scope=cfg["scope"], locations=cfg["locations"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _shape(cfg: dict) -> TreeShape:
    try:
        return TreeShape(int(cfg["n"]), int(cfg["k"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _table(cfg: dict, shape: TreeShape) -> DataTable:
    if not cfg["table"]:
        return DataTable.random(shape, seed=cfg["seed"])
    path = Path(cfg["table"])
    if not path.is_file():
        raise ConfigError(f"table file {path} not found")
    try:
        return DataTable.load(path, k=shape.k, n=shape.n)
    except ValueError as exc:
        raise ConfigError(f"table {path}: {exc}") from exc


def _input_state(cfg: dict, shape: TreeShape) -> SparseState:
    spec = str(cfg["input"])
    if spec == "uniform":
        return SparseState.uniform(shape, list(range(shape.num_cells)))
    if spec.startswith("haar:"):
        count = int(spec[5:])
        if not 1 <= count <= shape.num_cells:
            raise ConfigError(f"haar count must lie in [1, {shape.num_cells}]")
        rng = np.random.default_rng([cfg["seed"], 3])
        addrs = sorted(rng.choice(shape.num_cells, size=count, replace=False).tolist())
        return haar_state(shape, addrs, rng)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"input must be uniform, haar:COUNT or an existing JSON file, got {spec!r}")
    try:
        rows = json.loads(path.read_text())
        amps = {}
        for row in rows:
            a, d = int(row["address"]), int(row.get("data", 0))
            amps[(a, d)] = complex(float(row.get("re", 0.0)), float(row.get("im", 0.0)))
        state, _ = normalize(SparseState.from_amplitudes(shape, amps))
    except (ValueError, KeyError, TypeError, ArithmeticError) as exc:
        raise ConfigError(f"amplitude file {path}: {exc}") from exc
    return state


def _emit(text: str, cfg: dict):
    if cfg["output"]:
        Path(cfg["output"]).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _query_shot(job):
    state, table, schedule, noise, seed, mode, shot, ideal, metric = job
    out = run_noisy(state, table, schedule, noise, seed=seed, mode=mode, shot=shot, compute_fidelity=False)
    fid = bus_fidelity(out.final, ideal) if metric == "bus" else full_fidelity(out.final, ideal)
    log = [{"timestep": e.site.timestep, "layer": e.site.node.layer, "pos": e.site.node.pos,
            "register": e.site.register.value, "bit": e.site.bit, "channel": e.channel,
            "outcome": e.outcome} for e in out.faults]
    return fid, len(out.reliable), log, out.final


def _state_summary(state: SparseState, limit: int = 8) -> dict:
    items = sorted(state.branches.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
    return {
        "branches": len(state.branches),
        "norm2": round(state.norm2(), FID_DIGITS),
        "largest": [{"address": k[0], "data": k[1], "tree_entries": len(k[4]) + len(k[5]),
                     "amplitude": [round(v.real, FID_DIGITS), round(v.imag, FID_DIGITS)]}
                    for k, v in items[:limit]],
    }


def cmd_query(cfg: dict) -> int:
    _check_ranges(cfg)
    shape = _shape(cfg)
    noise = _noise_model(cfg)
    table = _table(cfg, shape)
    state = _input_state(cfg, shape)
    schedule = build_schedule(shape)
    ideal = run_noiseless(state, table)
    shots, seed = int(cfg["shots"]), int(cfg["seed"])
    jobs = [(state, table, schedule, noise, seed, cfg["mode"], i, ideal, cfg["fidelity"]) for i in range(shots)]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            res = list(pool.map(_query_shot, jobs, chunksize=max(1, shots // (4 * cfg["workers"]))))
    else:
        res = [_query_shot(j) for j in jobs]
    fids = np.array([r[0] for r in res])
    rel = np.array([r[1] for r in res], dtype=float)
    total = len(state.addresses())
    err = float(fids.std(ddof=1) / np.sqrt(shots)) if shots > 1 else 0.0
    result = {
        "schema_version": SCHEMA_VERSION,
        "command": "query",
        "config": {k: cfg[k] for k in ("n", "k", "channel", "epsilon", "gamma", "shots", "seed", "mode",
                                       "input", "table", "fidelity", "scope", "locations")},
        "fidelity": round(float(fids.mean()), FID_DIGITS),
        "fidelity_stderr": round(err, FID_DIGITS),
        "reliable_fraction": round(float(rel.mean()) / total, FID_DIGITS),
        "region": bm.classify_region(shape.n, float(cfg["epsilon"])).value,
        "final_state": _state_summary(res[0][3]),
        "fault_log": [{"shot": i, "faults": res[i][2]} for i in range(min(shots, int(cfg["log_shots"])))],
    }
    if cfg.get("seed_generated"):
        result["seed_generated"] = True
    _emit(_dump(result), cfg)
    return EXIT_OK


def cmd_ef(cfg: dict) -> int:
    _check_ranges(cfg)
    Ts = parse_int_list(cfg["T"])
    if min(Ts) < 1:
        raise ConfigError("T must be >= 1")
    eps = float(cfg["epsilon"])
    seed = int(cfg["seed"])
    if cfg["op"] in ("identity", "cnot"):
        nq = int(cfg["num_qubits"])
        try:
            op = PauliRegisterOperation(nq, cfg["op"], eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        n = 0

        def make_input(rng):
            return product_state(nq, rng)
    else:
        shape = _shape(cfg)
        noise = _noise_model(cfg)
        op = QueryOperation(_table(cfg, shape), shape, noise, mode=cfg["mode"])
        count = int(cfg["branches"])
        if not 1 <= count <= shape.num_cells:
            raise ConfigError(f"branches must lie in [1, {shape.num_cells}]")
        n = shape.n

        def make_input(rng):
            addrs = sorted(rng.choice(shape.num_cells, size=count, replace=False).tolist())
            return haar_state(shape, addrs, rng)
    rare = bool(cfg["rare_event"])
    if rare and not op.mixed_unitary:
        raise ConfigError("--rare-event needs a mixed-unitary channel")
    points = ef_sweep(make_input, op, Ts, int(cfg["states"]), int(cfg["shots"]), seed=seed,
                      rare_event=rare, n=n, epsilon=eps)
    buf = io.StringIO()
    write_ef_csv(points, buf)
    _emit(buf.getvalue(), cfg)
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    _check_ranges(cfg)
    ns = parse_int_list(cfg["n"])
    ps = parse_float_list(cfg["p"])
    if any(not 0 <= p <= 1 for p in ps):
        raise ConfigError("noise strengths must lie in [0, 1]")
    size = int(cfg["branch_size"])
    if size > 2 ** min(ns):
        raise ConfigError(f"branch size {size} exceeds 2**{min(ns)}")
    seed = int(cfg["seed"])
    modes = ("full", "pruned") if cfg["mode"] == "both" else (cfg["mode"],)
    samples = bm.measure_static(ns, [size], int(cfg["repetitions"]), seed=seed)
    base = list(samples)
    grid = [(p, float(cfg["gamma"])) for p in ps]
    by_mode = {}
    for mode in modes:
        by_mode[mode] = bm.measure_dynamic(ns, grid, size, int(cfg["shots"]), base, mode=mode, seed=seed,
                                           channel=cfg["channel"], scope=cfg["scope"],
                                           locations=cfg["locations"], workers=int(cfg["workers"]))
        samples += by_mode[mode]
    buf = io.StringIO()
    bm.write_csv(samples, stream=buf)
    _emit(buf.getvalue(), cfg)
    if cfg["summary"]:
        summary = bm.summarize(samples)
        if len(modes) == 2:
            summary["mode_ratios"] = [vars(r) for r in bm.compare_modes(by_mode["full"], by_mode["pruned"])]
        bm.write_json(summary, cfg["summary"])
    if cfg["base_infidelity"]:
        eps = float(cfg["epsilon"]) or ps[0]
        with open(cfg["base_infidelity"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "epsilon", "infidelity", "stderr"])
            for n in ns:
                shape = TreeShape(n)
                table = DataTable.random(shape, seed=seed)
                state = SparseState.uniform(shape, list(range(shape.num_cells)))
                noise = NoiseModel.build("depolarizing", eps, scope=cfg["scope"], locations=cfg["locations"])
                est = estimate_fidelity(state, table, build_schedule(shape), noise, int(cfg["base_shots"]),
                                        seed=seed, rare_event=True)
                w.writerow([n, eps, repr(float(est.infidelity)), repr(float(est.stderr))])
    return EXIT_OK


def _validation_checks(quick: bool) -> list[dict]:
    from .dense_oracle import dense_channel_fidelity, dense_trajectory, to_dense

    checks = []

    def record(name, ok, detail):
        checks.append({"name": name, "passed": bool(ok), "detail": detail})

    seeds = 3 if quick else 10
    for n in (1, 2):
        shape = TreeShape(n)
        schedule = build_schedule(shape)
        table = DataTable.random(shape, seed=5)
        rng = np.random.default_rng(n)
        amps = {(a, d): complex(*rng.normal(size=2)) for a in range(shape.num_cells) for d in range(2)}
        state, _ = normalize(SparseState.from_amplitudes(shape, amps))
        for channel in ("depolarizing", "damping", "heating"):
            noise = NoiseModel.build(channel, 0.05 if n == 1 else 0.02)
            worst = 0.0
            for seed in range(seeds):
                sparse = run_noisy(state, table, schedule, noise, seed=seed, mode="pruned").final
                dense = dense_trajectory(state, table, schedule, noise, seed=seed)
                worst = max(worst, float(np.abs(to_dense(sparse).vector() - dense.vector()).max()))
            record(f"trajectory n={n} {channel}", worst < 1e-9, {"max_abs_diff": worst})
    shape = TreeShape(1)
    schedule = build_schedule(shape)
    table = DataTable.random(shape, seed=5)
    state = SparseState.uniform(shape, [0, 1])
    shots = 1000 if quick else 4000
    for channel in ("depolarizing", "damping", "heating"):
        noise = NoiseModel.build(channel, 0.02)
        exact = dense_channel_fidelity(state, table, schedule, noise)
        est = estimate_fidelity(state, table, schedule, noise, shots, seed=11, mode="full")
        ok = abs(est.mean - exact) <= 3 * est.stderr + 1e-12
        record(f"channel fidelity n=1 {channel}", ok,
               {"exact": exact, "monte_carlo": est.mean, "stderr": est.stderr})
    record("eps_max original", progressive_limit(C_ORIGINAL) == 0.125, {"value": progressive_limit(C_ORIGINAL)})
    record("eps_max refined", progressive_limit(C_REFINED) == 0.25, {"value": progressive_limit(C_REFINED)})
    b = ef_bounds(0.01, 2)
    record("bound ordering", b.worst <= b.original <= b.refined <= b.dynamic_refined,
           {"worst": b.worst, "original": b.original, "refined": b.refined})
    op = PauliRegisterOperation(4, "identity", 0.05)
    from .error_filtration import base_fidelity
    est = base_fidelity(product_state(4, np.random.default_rng(0)), op, 2000, seed=3)
    target = (1 - 2 * 0.05 / 3) ** 4
    record("depolarizing identity fidelity", abs(est.F0 - target) <= 3 * est.F0_err,
           {"measured": est.F0, "stderr": est.F0_err, "expected": target})
    return checks


def cmd_validate(cfg: dict) -> int:
    checks = _validation_checks(bool(cfg["quick"]))
    ok = all(c["passed"] for c in checks)
    _emit(_dump({"schema_version": SCHEMA_VERSION, "command": "validate", "passed": ok, "checks": checks}), cfg)
    return EXIT_OK if ok else EXIT_VALIDATION


def _read_infidelity(path: Path) -> tuple[list[float], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no rows")
    cols = rows[0].keys()
    if "n" not in cols:
        raise ConfigError(f"{path} needs an 'n' column")
    if "infidelity" in cols:
        ys = [float(r["infidelity"]) for r in rows]
    elif "F0" in cols:
        ys = [1 - float(r["F0"]) for r in rows]
    else:
        raise ConfigError(f"{path} needs an 'infidelity' or 'F0' column")
    ns = [float(r["n"]) for r in rows]
    # ef CSVs repeat F0 once per level; keep one value per n
    pairs = dict(zip(ns, ys))
    return list(pairs), list(pairs.values())


def cmd_fit(cfg: dict) -> int:
    if not cfg["fit_input"]:
        raise ConfigError("fit needs --input")
    path = Path(cfg["fit_input"])
    if not path.is_file():
        raise ConfigError(f"input file {path} not found")
    ns, ys = _read_infidelity(path)
    try:
        fit = fit_power_law(ns, ys)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    eo, er = progressive_limit(C_ORIGINAL), progressive_limit(C_REFINED)
    result = {
        "schema_version": SCHEMA_VERSION, "command": "fit",
        "exponent": fit.exponent, "prefactor": fit.prefactor, "r2": fit.r2,
        "eps_max_original": eo, "eps_max_refined": er,
        "n_max_original": max_feasible_n(fit, eo), "n_max_refined": max_feasible_n(fit, er),
    }
    _emit(_dump(result), cfg)
    return EXIT_OK


COMMANDS = {"query": cmd_query, "ef": cmd_ef, "bench": cmd_bench, "validate": cmd_validate, "fit": cmd_fit}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
