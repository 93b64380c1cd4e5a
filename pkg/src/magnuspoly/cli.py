"""Command-line front end.

Usage::

    magnuspoly [--threads N] COMMAND [--config FILE.toml] [--set section.key=value ...]

Commands: ``gen-coeffs``, ``simulate``, ``error-scan``, ``optimize``, ``info``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 file or
artifact error.  All randomness derives from ``simulate.seed``; sample ``j``
at grid point ``i`` draws from ``default_rng([seed, i, j])``.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .coeffs import ENTRY_TOL, build_coefficients, model_digest, read_artifact, save_artifact
from .control import OptimizerTrace, build_problem, minimize
from .errors import ArtifactError, ConfigError, MagnusError, ValidationError
from .evaluate import assemble, eval_coeffs, propagate, truncation_error
from .lie import compute_structure_constants
from .models import (
    LOCAL_DIM,
    build_model,
    ckp_gate,
    computational_state,
    haar_state,
    rz_generator,
    symmetric_basis_states,
)
from .spline import cosine_pulse, read_spline, spline_from_function, write_spline
from .verify import error_scan, ode_reference, quadrature_oracle, sample_rng

DEFAULTS = {
    "model": {"name": "sparse", "n": 2},
    "expansion": {"k_M": 4, "Gamma": 6, "m": 2, "eps_L": 1e-5},
    "simulate": {
        "t_grid": [0.1, 0.2, 0.4],
        "samples": 5,
        "seed": 0,
        "k_M": [],
        "d": [],
    },
    "optimize": {
        "L": 1,
        "S_init": 21,
        "T_init": 9.0,
        "T_min": 4.0,
        "T_max": 18.0,
        "lambda_T": 0.0,
        "eps_star": 1e-6,
        "max_iter": 1000,
        "J_target": 0.0,
        "theta0": 0.0,
        "init_amplitude": 0.1,
        "init_period": 3.0,
        "states": "symmetric",
        "target": {"kind": "ckp", "phi": float(np.pi)},
    },
    "io": {"artifact_path": "coeffs.mpc", "out_dir": "out"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# --------------------------------------------------------------------------- configuration

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown configuration section {dotted!r}")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown configuration key {dotted!r}")
    node[keys[-1]] = _parse_value(text.strip())


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the TOML file, then ``--set`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        cfg = _merge(cfg, data)
    for assignment in overrides:
        _apply_set(cfg, assignment)
    validate_config(cfg)
    return cfg


def _int(cfg, sec, key, lo=None, hi=None):
    v = cfg[sec][key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{sec}.{key} must be an integer")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(f"{sec}.{key}={v} outside [{lo}, {hi}]")
    return v


def _float(cfg, sec, key, lo=None, hi=None, strict_lo=False):
    v = cfg[sec][key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{sec}.{key} must be a finite number")
    v = float(v)
    if lo is not None and (v < lo or (strict_lo and v == lo)):
        raise ConfigError(f"{sec}.{key}={v} below its minimum {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{sec}.{key}={v} above its maximum {hi}")
    return v


def validate_config(cfg: dict) -> None:
    if cfg["model"]["name"] not in LOCAL_DIM:
        raise ConfigError(f"model.name must be one of {sorted(LOCAL_DIM)}")
    _int(cfg, "model", "n", 1, 10)
    k_M = _int(cfg, "expansion", "k_M", 1, 16)
    _int(cfg, "expansion", "Gamma", k_M, 64)
    _int(cfg, "expansion", "m", 0, 9)
    _float(cfg, "expansion", "eps_L", 0.0, 1.0, strict_lo=True)
    sim = cfg["simulate"]
    grid = sim["t_grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(t, (int, float)) and t > 0 for t in grid):
        raise ConfigError("simulate.t_grid must be a non-empty list of positive numbers")
    _int(cfg, "simulate", "samples", 1, 10_000)
    _int(cfg, "simulate", "seed", 0)
    ks = sim["k_M"] if isinstance(sim["k_M"], list) else [sim["k_M"]]
    if not all(isinstance(k, int) and 1 <= k <= k_M for k in ks):
        raise ConfigError(f"simulate.k_M entries must lie in 1..{k_M}")
    if not isinstance(sim["d"], list) or len(sim["d"]) > cfg["expansion"]["m"] + 1:
        raise ConfigError("simulate.d must be a list of at most m + 1 numbers")
    opt = cfg["optimize"]
    _int(cfg, "optimize", "L", 0, 4)
    _int(cfg, "optimize", "S_init", 1, 512)
    T_min = _float(cfg, "optimize", "T_min", 0.0, strict_lo=True)
    T_max = _float(cfg, "optimize", "T_max", T_min)
    _float(cfg, "optimize", "T_init", T_min, T_max)
    _float(cfg, "optimize", "lambda_T", 0.0)
    _float(cfg, "optimize", "eps_star", 0.0, strict_lo=True)
    _int(cfg, "optimize", "max_iter", 0)
    _float(cfg, "optimize", "J_target", 0.0)
    _float(cfg, "optimize", "theta0")
    _float(cfg, "optimize", "init_amplitude")
    _float(cfg, "optimize", "init_period", 0.0, strict_lo=True)
    if opt["states"] not in ("symmetric", "computational"):
        raise ConfigError("optimize.states must be 'symmetric' or 'computational'")
    target = opt["target"]
    if target.get("kind") not in ("ckp", "identity"):
        raise ConfigError("optimize.target.kind must be 'ckp' or 'identity'")
    if not isinstance(target.get("phi"), (int, float)):
        raise ConfigError("optimize.target.phi must be a number")
    for key in ("artifact_path", "out_dir"):
        if not isinstance(cfg["io"][key], str) or not cfg["io"][key]:
            raise ConfigError(f"io.{key} must be a non-empty path")


# --------------------------------------------------------------------------- helpers

def _generators(cfg):
    return build_model(cfg["model"]["name"], cfg["model"]["n"])


def _expansion(cfg):
    e = cfg["expansion"]
    return e["k_M"], e["Gamma"], e["m"], float(e["eps_L"])


def _obtain_coefficients(cfg, threads: int, out=print):
    """Load the configured artifact if it matches the configuration, else build it in memory."""
    A, B = _generators(cfg)
    k_M, Gamma, m, eps_L = _expansion(cfg)
    path = Path(cfg["io"]["artifact_path"])
    if path.exists():
        art = read_artifact(path)
        if art.tensor.model_digest != model_digest(A, B, eps_L, k_M, Gamma, m):
            raise ConfigError(f"artifact {path} does not match the configured model/expansion; rerun gen-coeffs")
        sc = compute_structure_constants(art.basis)
        return A, B, art.tensor, art.basis, sc
    out(f"# no artifact at {path}; building coefficients in memory")
    ct, basis, sc = build_coefficients(A, B, k_M, Gamma, m, eps_L, workers=threads)
    return A, B, ct, basis, sc


def _self_check(A, B, ct, basis, out) -> float:
    """Compare the order-3 truncation against the nested-quadrature oracle at five random points."""
    if ct.k_M < 3:
        raise ConfigError("--self-check needs k_M >= 3")
    k3 = ct.restricted(3)
    # below the full time degree 3(1 + m), shrink t so the dropped monomials stay under 1e-9 relative
    t_max = 0.4 if ct.Gamma >= 3 * (1 + ct.m) else min(0.4, 1e-9 ** (1.0 / ct.Gamma))
    worst = 0.0
    for j in range(5):
        rng = sample_rng(12345, j)
        t = float(rng.uniform(0.5, 1.0) * t_max)
        d = rng.uniform(-1.0, 1.0, ct.m + 1)
        M = assemble(basis, eval_coeffs(k3, t, d), t).operator
        ref = quadrature_oracle(A, B, d, t, 3)
        worst = max(worst, float(np.linalg.norm(M - ref) / np.linalg.norm(ref)))
    out(f"self-check: max relative error vs quadrature oracle {worst:.3e}")
    if worst > 1e-7:
        raise ValidationError(f"self-check failed: relative error {worst:.3e} > 1e-7")
    return worst


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------- commands

def cmd_gen_coeffs(cfg, threads: int = 1, self_check: bool = False, out=print) -> int:
    A, B = _generators(cfg)
    k_M, Gamma, m, eps_L = _expansion(cfg)
    t0 = time.perf_counter()
    ct, basis, _ = build_coefficients(A, B, k_M, Gamma, m, eps_L, workers=threads)
    elapsed = time.perf_counter() - t0
    path = Path(cfg["io"]["artifact_path"])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_artifact(ct, basis, path, A, B)
    except OSError as exc:
        raise ArtifactError(f"cannot write artifact {path}: {exc}") from exc
    out(f"wrote {path}: model={cfg['model']['name']} n={cfg['model']['n']} k_M={k_M} Gamma={Gamma} m={m} "
        f"dim_g={ct.dim_g} entries={len(ct.entries)} closed={basis.closed} time={elapsed:.2f}s")
    out(f"digest {ct.model_digest.hex()}")
    if self_check:
        _self_check(A, B, ct, basis, out)
    return 0


def cmd_simulate(cfg, threads: int = 1, out=print) -> int:
    """Propagate seeded Haar states with the compiled expansion and the ODE reference."""
    A, B, ct, basis, _ = _obtain_coefficients(cfg, threads, out)
    sim = cfg["simulate"]
    fixed_d = np.asarray(sim["d"], float) if sim["d"] else None
    rows = ["t,sample_id,eps_me,eps_trunc,norm_dev"]
    for i, t in enumerate(sim["t_grid"]):
        for j in range(sim["samples"]):
            rng = sample_rng(sim["seed"], i, j)
            psi0 = haar_state(A.shape[0], rng)
            d = fixed_d if fixed_d is not None else rng.uniform(-1.0, 1.0, ct.m + 1)
            a = eval_coeffs(ct, float(t), d)
            psi = propagate(assemble(basis, a, float(t)), psi0)
            ref = ode_reference(A, B, d, float(t), psi0)
            rows.append(f"{float(t)!r},{j},{float(np.linalg.norm(psi - ref))!r},"
                        f"{truncation_error(a[-1], basis.l1_norms)!r},{abs(float(np.linalg.norm(psi)) - 1.0)!r}")
    path = Path(cfg["io"]["out_dir"]) / "simulate.csv"
    _write(path, "\n".join(rows) + "\n")
    out(f"wrote {path} ({len(rows) - 1} rows)")
    return 0


def cmd_error_scan(cfg, threads: int = 1, out=print) -> int:
    A, B, ct, basis, _ = _obtain_coefficients(cfg, threads, out)
    sim = cfg["simulate"]
    ks = sim["k_M"] if isinstance(sim["k_M"], list) else [sim["k_M"]]
    ks = ks or [ct.k_M]
    out_dir = Path(cfg["io"]["out_dir"])
    summary = []
    for k in ks:
        res = error_scan(ct, basis, A, B, sim["t_grid"], n_samples=sim["samples"], seed=sim["seed"], k_M=k)
        path = out_dir / f"scan_k{k}.csv"
        _write(path, res.summary() + "\n" + res.to_csv())
        summary.append(res.summary())
        out(f"{res.summary()}  -> {path}")
    _write(out_dir / "scan_summary.txt", "\n".join(summary) + "\n")
    return 0


def _problem_from_config(cfg, threads: int, out):
    opt = cfg["optimize"]
    name, n = cfg["model"]["name"], cfg["model"]["n"]
    if 2 * opt["L"] + 1 > cfg["expansion"]["m"]:
        raise ConfigError(f"expansion.m must be at least 2L + 1 = {2 * opt['L'] + 1}")
    A, B, ct, basis, sc = _obtain_coefficients(cfg, threads, out)
    local = LOCAL_DIM[name]
    if opt["states"] == "symmetric":
        states = symmetric_basis_states(n, local)
    else:
        states = [computational_state([(i >> (n - 1 - j)) & 1 for j in range(n)], local) for i in range(2 ** n)]
    target = opt["target"]
    if target["kind"] == "ckp":
        if n < 2:
            raise ConfigError("a C_kP target needs n >= 2")
        gate = ckp_gate(n, float(target["phi"]), local)
    else:
        gate = np.eye(local ** n)
    return build_problem(A, B, ct, basis, sc, gate, states, rz_generator(n, local), opt["T_min"], opt["T_max"],
                         opt["lambda_T"], opt["eps_star"])


def cmd_optimize(cfg, threads: int = 1, resume: str | None = None, out=print) -> int:
    opt = cfg["optimize"]
    problem = _problem_from_config(cfg, threads, out)
    out_dir = Path(cfg["io"]["out_dir"])
    trace = None
    if resume:
        try:
            h, theta = read_spline(resume)
        except OSError as exc:
            raise ArtifactError(f"cannot read pulse {resume}: {exc}") from exc
        theta = float(opt["theta0"]) if theta is None else theta
        trace_path = out_dir / "trace.csv"
        if trace_path.exists():
            trace = OptimizerTrace.from_csv(trace_path.read_text())
        if h.L != opt["L"]:
            raise ConfigError(f"resumed pulse has L={h.L}, configuration has L={opt['L']}")
    else:
        h = spline_from_function(cosine_pulse(opt["init_amplitude"], opt["init_period"]), opt["T_init"],
                                 opt["S_init"], opt["L"])
        theta = float(opt["theta0"])
    J_target = float(opt["J_target"]) or None
    h, theta, trace = minimize(problem, h, theta, max_iter=opt["max_iter"], J_target=J_target, trace=trace, log=out)
    final = trace.final
    _write(out_dir / "pulse.txt", write_spline(h, theta=theta))
    _write(out_dir / "trace.csv", trace.to_csv())
    result = {
        "status": trace.status,
        "J": final.J,
        "J_T": final.J_T,
        "T": h.T,
        "S": h.S,
        "dim_h": h.n_params + 1,
        "theta": theta,
        "sum_eps": final.sum_eps,
        "iterations": final.iteration,
        "wall_time_s": round(trace.wall_time, 3),
    }
    _write(out_dir / "result.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    out(f"status={trace.status} J={final.J:.6e} T={h.T:.6f} S={h.S} -> {out_dir}")
    return 0


def cmd_info(path, out=print) -> int:
    art = read_artifact(path)
    ct, basis = art.tensor, art.basis
    out(f"artifact {path}")
    out(f"version {art.version}")
    out(f"k_M {ct.k_M}")
    out(f"Gamma {ct.Gamma}")
    out(f"m {ct.m}")
    out(f"dim_g {ct.dim_g}")
    out(f"dim_H {basis.dim_h}")
    out(f"closed {basis.closed}")
    out(f"entries {len(ct.entries)}")
    out(f"eps_L {ct.eps_L!r}")
    out(f"entry_tol {ENTRY_TOL!r}")
    out(f"digest {ct.model_digest.hex()}")
    return 0


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magnuspoly", description="Compiled Magnus expansion toolkit")
    parser.add_argument("--threads", type=int, default=1, help="worker cap for coefficient generation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration value (repeatable)")

    p = sub.add_parser("gen-coeffs", help="build and save the coefficient artifact")
    common(p)
    p.add_argument("--self-check", action="store_true", help="validate order 3 against the quadrature oracle")
    common(sub.add_parser("simulate", help="compare compiled propagation with the ODE reference"))
    common(sub.add_parser("error-scan", help="truncation-error scan with power-law fit"))
    p = sub.add_parser("optimize", help="spline pulse optimisation")
    common(p)
    p.add_argument("--resume", metavar="PULSE", help="continue from a saved pulse (and out_dir/trace.csv)")
    p = sub.add_parser("info", help="print an artifact header")
    p.add_argument("artifact")
    return parser


def main(argv=None, out=print) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "info":
            return cmd_info(args.artifact, out)
        cfg = load_config(args.config, args.set)
        if args.command == "gen-coeffs":
            return cmd_gen_coeffs(cfg, args.threads, args.self_check, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.threads, out)
        if args.command == "error-scan":
            return cmd_error_scan(cfg, args.threads, out)
        return cmd_optimize(cfg, args.threads, args.resume, out)
    except MagnusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
