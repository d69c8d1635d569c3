"""Command-line driver: convergence studies, gradient checks and twin experiments.

Every run reads a JSON spec, writes CSV artifacts plus ``manifest.json`` into
the output directory and exits with 0 (success), 2 (a verification check
failed) or 1 (runtime error). Output is deterministic for a given spec, seed
and tableau, independent of ``--threads``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .adjoint import AdjointSeed, adjoint_sweep
from .assimilation import (DiffusionProtocol, LinearProtocol, LorenzProtocol, fd_component,
                           gradient_rel_errors, synthesize_experiment)
from .integrator import PerturbedJacobian, integrate
from .matfun import KrylovConfig
from .models import Lorenz96, ZeroModel
from .optimize import OptimizerConfig, minimize
from .reference import fitted_slope, reference_adjoint, reference_solution
from .tableau import TableauError, load_tableau

EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2

PROTOCOLS = {"lorenz96": LorenzProtocol, "diffusion": DiffusionProtocol, "linear": LinearProtocol}
GRADCHECK_TOL = {"lorenz96": 1e-6, "diffusion": 1e-5, "linear": 1e-9}


class SpecError(ValueError):
    """The experiment spec is malformed or references missing files."""


# --------------------------------------------------------------------------
# Spec handling
# --------------------------------------------------------------------------

def bundled_specs() -> list[str]:
    """Names of the specs shipped with the package."""
    root = resources.files("epirkw").joinpath("data", "specs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_spec(path) -> dict:
    """Read a spec from ``path`` or, failing that, a bundled spec name."""
    p = Path(path)
    if p.is_file():
        text = p.read_text()
    else:
        name = p.name if p.name.endswith(".json") else p.name + ".json"
        res = resources.files("epirkw").joinpath("data", "specs", name)
        if not res.is_file():
            raise SpecError(f"spec {path!s} not found (bundled: {', '.join(bundled_specs())})")
        text = res.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec {path!s} is not valid JSON: {exc}") from None
    if not isinstance(spec, dict):
        raise SpecError("spec must be a JSON object")
    return spec


def resolve_spec(spec: dict, command: str, seed=None, tableau=None) -> dict:
    """Apply command-line overrides and defaults; validate references."""
    spec = copy.deepcopy(spec)
    if spec.setdefault("command", command) != command:
        raise SpecError(f"spec is for {spec['command']!r}, not {command!r}")
    if seed is not None:
        spec["seed"] = int(seed)
    spec["seed"] = int(spec.get("seed", 0))
    if spec["seed"] < 0:
        raise SpecError("seed must be non-negative")
    if tableau is not None:
        spec["tableau"] = str(tableau)
    spec.setdefault("tableau", "epirkw3")
    try:
        load_tableau(spec["tableau"])
    except (FileNotFoundError, TableauError):
        raise SpecError(f"tableau {spec['tableau']!r} does not exist") from None
    spec["krylov"] = asdict(_krylov(spec.get("krylov", {})))
    if command in ("gradcheck", "assimilate"):
        proto = spec.get("protocol")
        if not isinstance(proto, dict) or proto.get("name") not in PROTOCOLS:
            raise SpecError(f"protocol.name must be one of {sorted(PROTOCOLS)}")
        proto["seed"] = spec["seed"]
        _protocol(proto)
    return spec


def _krylov(doc: dict) -> KrylovConfig:
    try:
        return KrylovConfig(**doc)
    except TypeError as exc:
        raise SpecError(f"krylov: {exc}") from None


def _protocol(doc: dict):
    cls = PROTOCOLS[doc["name"]]
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known - {"name"}
    if extra:
        raise SpecError(f"protocol {doc['name']}: unknown fields {sorted(extra)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items() if k != "name"}
    return cls(**kwargs)


def _experiment(spec: dict):
    tab = load_tableau(spec["tableau"])
    return synthesize_experiment(None, tab, _protocol(spec["protocol"]), _krylov(spec["krylov"]))


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.16e}"


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(out: Path, spec: dict, outputs: list, result: dict) -> None:
    tab = load_tableau(spec["tableau"])
    doc = {
        "command": spec["command"],
        "seed": spec["seed"],
        "spec": spec,
        "tableau": {"name": tab.name, "source": spec["tableau"], "sha256": tab.checksum()},
        "outputs": outputs,
        "result": result,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _map(fn, args: list, threads: int) -> list:
    if threads <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, args))


# --------------------------------------------------------------------------
# converge
# --------------------------------------------------------------------------

def _converge_setup(spec: dict):
    """Model (with its ``T_n`` policy), initial state and terminal adjoint."""
    doc = dict(spec.get("model", {"name": "lorenz96"}))
    name = doc.pop("name", "lorenz96")
    rng_w, rng_l = (np.random.default_rng(s) for s in np.random.SeedSequence(spec["seed"]).spawn(2))
    if name == "lorenz96":
        spinup = float(doc.pop("spinup", 0.15))
        model = Lorenz96(**doc)
        y0 = 1.0 + 0.1 * np.mod(np.arange(1, model.dim + 1), 5)
        if spinup > 0:
            y0 = reference_solution(model, y0, 0.0, spinup)
    elif name == "zero":
        model = ZeroModel(int(doc.pop("dim", 4)))
        y0 = np.ones(model.dim)
    else:
        raise SpecError(f"converge: unknown model {name!r}")
    w = spec.get("w_matrix", {"kind": "exact"})
    if w.get("kind") == "perturbed":
        E = rng_w.standard_normal((model.dim, model.dim))
        E *= float(w.get("norm", 0.1)) / np.linalg.norm(E, 2)
        model = model.with_w_policy(PerturbedJacobian(E))
    elif w.get("kind") != "exact":
        raise SpecError(f"w_matrix.kind must be 'exact' or 'perturbed', got {w.get('kind')!r}")
    lam_F = rng_l.standard_normal(model.dim)
    return model, y0, lam_F


def _step_counts(spec: dict) -> list:
    t0, tF = spec.get("window", (0.0, 0.3))
    if "N" in spec:
        counts = [int(n) for n in spec["N"]]
    else:
        steps = spec.get("steps", [0.015 / 2 ** k for k in range(6)])
        counts = [int(round((tF - t0) / h)) for h in steps]
    if len(counts) < 4:
        raise SpecError("converge needs at least 4 step sizes")
    if min(counts) < 1:
        raise SpecError("step sizes must not exceed the window")
    return counts


def _converge_point(args):
    spec, N, y_ref, lam_ref = args
    model, y0, lam_F = _converge_setup(spec)
    t0, tF = spec.get("window", (0.0, 0.3))
    tab, cfg = load_tableau(spec["tableau"]), _krylov(spec["krylov"])
    tape = integrate(model, tab, y0, t0, tF, N, cfg)
    lam0 = adjoint_sweep(tape, AdjointSeed(lam_F), cfg).lambda0
    return (tF - t0) / N, float(np.linalg.norm(tape.y_final - y_ref)), float(np.linalg.norm(lam0 - lam_ref))


def run_converge(spec: dict, out: Path, threads: int = 1) -> tuple[int, dict]:
    """Forward and adjoint errors against DOP853 references, plus fitted slopes."""
    model, y0, lam_F = _converge_setup(spec)
    t0, tF = spec.setdefault("window", [0.0, 0.3])
    ref = spec.get("reference", {})
    rtol, atol = float(ref.get("rtol", 1e-12)), float(ref.get("atol", 1e-12))
    lam_ref, y_ref = reference_adjoint(model, y0, t0, tF, lam_F, rtol, atol)
    rows = _map(_converge_point, [(spec, N, y_ref, lam_ref) for N in _step_counts(spec)], threads)
    h, fe, ae = (np.array(c) for c in zip(*rows))
    slopes = [fitted_slope(h, fe), fitted_slope(h, ae)]
    slope_cells = ["undefined" if np.isnan(s) else s for s in slopes]
    write_csv(out / "converge.csv", ["h", "forward_error", "adjoint_error"],
              [*rows, ["slope", *slope_cells]])
    lo, hi = spec.get("slope_range", [2.7, 3.3])
    ok = all(np.isnan(s) or lo <= s <= hi for s in slopes)
    result = {"forward_slope": slope_cells[0], "adjoint_slope": slope_cells[1], "passed": ok}
    write_manifest(out, spec, ["converge.csv"], result)
    return (EXIT_OK if ok else EXIT_VERIFY), result


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def _check_point(spec: dict, ex) -> np.ndarray:
    at = spec.get("at", "background")
    if at == "background":
        return ex.problem.theta_b.copy()
    if at == "truth":
        return ex.theta_true / ex.scale if ex.scale is not None else ex.theta_true.copy()
    raise SpecError(f"gradcheck.at must be 'background' or 'truth', got {at!r}")


def _fd_worker(args):
    spec, comps = args
    ex = _experiment(spec)
    theta = _check_point(spec, ex)
    step = float(spec.get("rel_step", 1e-6))
    return [fd_component(ex.problem.cost, theta, i, step) for i in comps]


def run_gradcheck(spec: dict, out: Path, threads: int = 1) -> tuple[int, dict]:
    """Adjoint gradient against central differences, one row per component."""
    ex = _experiment(spec)
    theta = _check_point(spec, ex)
    g = ex.problem.grad(theta)
    n = theta.size
    chunks = [list(range(n))[k::max(1, threads)] for k in range(min(max(1, threads), n))]
    if threads <= 1:
        step = float(spec.get("rel_step", 1e-6))
        fd = np.array([fd_component(ex.problem.cost, theta, i, step) for i in range(n)])
    else:
        fd = np.empty(n)
        for comps, vals in zip(chunks, _map(_fd_worker, [(spec, c) for c in chunks], threads)):
            fd[comps] = vals
    rel = gradient_rel_errors(g, fd, float(spec.get("floor", 1e-8)))
    rows = [[i, g[i], fd[i], rel[i]] for i in range(n)]
    write_csv(out / "gradcheck.csv", ["component", "adjoint_grad", "fd_grad", "rel_err"], rows)
    outputs = ["gradcheck.csv"]
    if spec.get("dump_adjoint", False):
        lambdas = ex.problem.adjoint_trajectory(theta)
        write_csv(out / "adjoint.csv", ["step", "component", "lambda"],
                  ([k, i, lam[i]] for k, lam in enumerate(lambdas) for i in range(lam.size)))
        outputs.append("adjoint.csv")
    tol = float(spec.get("tolerance", GRADCHECK_TOL[spec["protocol"]["name"]]))
    max_rel = float(np.max(rel))
    ok = bool(max_rel <= tol)
    result = {"max_rel_err": max_rel, "tolerance": tol, "passed": ok}
    write_manifest(out, spec, outputs, result)
    return (EXIT_OK if ok else EXIT_VERIFY), result


# --------------------------------------------------------------------------
# assimilate
# --------------------------------------------------------------------------

def _optimizer(spec: dict, ex) -> OptimizerConfig:
    doc = dict(spec.get("optimizer", {}))
    if "bounds" not in doc and ex.bounds is not None:
        doc["bounds"] = ex.bounds
    elif doc.get("bounds") is not None:
        doc["bounds"] = np.asarray(doc["bounds"], dtype=float)
    try:
        return OptimizerConfig(**doc)
    except TypeError as exc:
        raise SpecError(f"optimizer: {exc}") from None


def _checks(spec: dict, trace, err0: np.ndarray, errs: list) -> dict:
    """Evaluate the verification checks requested by ``spec['checks']``."""
    checks = spec.get("checks", {"improvement": True})
    res = {}
    if checks.get("improvement", False):
        res["improvement"] = bool(np.linalg.norm(errs[-1]) < np.linalg.norm(err0))
    if "grad_inf" in checks:
        c = checks["grad_inf"]
        hit = [k for k, v in zip(trace.iteration, trace.grad_inf) if v < c["below"]]
        res["grad_inf"] = bool(hit and hit[0] <= c.get("within", trace.n_iters))
    if "cost_drop" in checks:
        c = checks["cost_drop"]
        drop = trace.cost[0] - min(trace.cost)
        k = min(int(c.get("within", 3)), trace.n_iters)
        res["cost_drop"] = bool(drop > 0 and trace.cost[0] - trace.cost[k] >= c.get("fraction", 0.9) * drop)
    if "component_reduction" in checks:
        c = checks["component_reduction"]
        i = int(c["index"])
        res["component_reduction"] = bool(abs(err0[i]) >= float(c.get("factor", 10.0)) * abs(errs[-1][i]))
    return res


def run_assimilate(spec: dict, out: Path, threads: int = 1) -> tuple[int, dict]:
    """Synthesize a twin experiment and minimize its 4D-Var cost."""
    ex = _experiment(spec)
    pr = ex.problem
    scale = np.ones(pr.theta_b.size) if ex.scale is None else np.asarray(ex.scale, dtype=float)
    truth = ex.theta_true / scale
    x, trace = minimize(pr.cost, pr.grad, pr.theta_b, _optimizer(spec, ex))

    write_csv(out / "trace.csv", ["iteration", "cost", "grad_inf", "n_cost_evals", "n_grad_evals"],
              zip(trace.iteration, trace.cost, trace.grad_inf, trace.n_cost_evals, trace.n_grad_evals))
    errs = [xk - truth for xk in trace.x]
    write_csv(out / "parameter_error.csv", ["iteration", "error_norm"],
              ([k, np.linalg.norm(e * scale)] for k, e in zip(trace.iteration, errs)))
    phys_truth = np.asarray(ex.theta_true, dtype=float)
    write_csv(out / "parameter_components.csv", ["iteration", "component", "estimate", "truth", "rel_error"],
              ([k, i, xk[i] * scale[i], phys_truth[i],
                abs(xk[i] - truth[i]) / abs(truth[i]) if truth[i] != 0 else abs(xk[i] - truth[i])]
               for k, xk in zip(trace.iteration, trace.x) for i in range(xk.size)))
    write_csv(out / "observations.csv", ["step", "component", "value", "sigma"],
              ([ob.step, i, ob.value[i], np.sqrt(ob.R.matrix[i, i])]
               for ob in ex.obs for i in range(np.size(ob.value))))
    series = {}
    for label, th in (("truth", truth), ("background", pr.theta_b), ("analysis", x)):
        series[label] = [np.atleast_1d(pr.H.apply(y)) for y in pr.forward(th).states]
    write_csv(out / "trajectory.csv", ["step", "component", "truth", "background", "analysis"],
              ([n, i, series["truth"][n][i], series["background"][n][i], series["analysis"][n][i]]
               for n in range(len(series["truth"])) for i in range(series["truth"][n].size)))

    checks = _checks(spec, trace, pr.theta_b - truth, errs)
    ok = all(checks.values())
    result = {"status": trace.status, "iterations": trace.n_iters, "final_cost": trace.cost[-1],
              "final_grad_inf": trace.grad_inf[-1],
              "background_error": float(np.linalg.norm((pr.theta_b - truth) * scale)),
              "analysis_error": float(np.linalg.norm((x - truth) * scale)),
              "checks": checks, "passed": ok}
    outputs = ["trace.csv", "parameter_error.csv", "parameter_components.csv", "observations.csv",
               "trajectory.csv"]
    write_manifest(out, spec, outputs, result)
    if trace.status == "line_search_failed":
        print(f"optimizer failure: {trace.status} after {trace.n_iters} iterations "
              f"(trace kept in {out / 'trace.csv'})", file=sys.stderr)
        return EXIT_RUNTIME, result
    return (EXIT_OK if ok else EXIT_VERIFY), result


COMMANDS = {"converge": run_converge, "gradcheck": run_gradcheck, "assimilate": run_assimilate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epirkw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--spec", required=True, help="JSON spec file or bundled spec name")
        p.add_argument("--out", help="output directory (default: spec 'out')")
        p.add_argument("--seed", type=int, help="override the spec seed")
        p.add_argument("--tableau", help="tableau file or bundled name")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = resolve_spec(load_spec(args.spec), args.command, args.seed, args.tableau)
        out = args.out or spec.get("out")
        if not out:
            raise SpecError("no output directory: pass --out or set 'out' in the spec")
        spec["out"] = str(out)
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        code, result = COMMANDS[args.command](spec, out, max(1, args.threads))
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return code


if __name__ == "__main__":
    sys.exit(main())
