"""Batch driver: subcommands, config handling, report emission, solution cache.

Subcommands: constants, optimize, spectrum, stability, flow, scattering.
Shared flags: --d --lambda --p --chi --mass --rmax --n --grading --out
--config --seed.  Config files are flat key=value text (same keys as the long
flags); command-line flags win.  Exit codes: 0 success, 2 precondition
violation, 3 numerical non-convergence.

Every emitted file is listed in manifest.json with its sha256.  Optimizer
solutions are cached under <out>/cache keyed by a content hash of
(d, lambda, p, N, R_max, grading, tol); cache hits are logged.  Identical
configs produce byte-identical outputs (all randomness is seeded).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from .errors import ConvergenceError, KernelQuadratureError, ParameterWindowError
from .radial_core import (
    Params,
    RadialProfile,
    load_profile_csv,
    make_grid,
    profile_csv_text,
    save_profile_csv,
)
from .optimizer import (
    OptimizerSolution,
    SolveOptions,
    derived_constants,
    exterior_potential,
    solve_optimizer,
)
from . import free_energy_flow as flow_mod
from . import hessian_spec as hess_mod
from . import scattering_diag as scat_mod
from . import stability_lab as stab_mod

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_NONCONVERGENCE = 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- config ------------------------------------------------------------------

_FLOAT_KEYS = {"lambda", "p", "chi", "mass", "rmax", "tol", "sigma", "dt",
               "stop_tol", "eps_min", "eps_max"}
_INT_KEYS = {"d", "n", "seed", "m_max", "k", "directions", "max_iter",
             "max_steps", "stop_window", "t_slices", "n_eps"}


def read_config(path: str) -> dict:
    """Flat key=value lines; blank lines and #-comments ignored."""
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key in _INT_KEYS:
                out[key] = int(val)
            else:
                out[key] = val
    return out


def _merged(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config:
        cfg.update(read_config(args.config))
    for key, val in vars(args).items():
        if key in ("command", "config"):
            continue
        name = "lambda" if key == "lam" else key
        if val is not None:
            cfg[name] = val
    return cfg


def _params(cfg: dict) -> Params:
    missing = [k for k in ("d", "lambda", "p") if k not in cfg]
    if missing:
        raise ParameterWindowError(f"missing required parameter(s): {', '.join(missing)}")
    return Params(d=int(cfg["d"]), lam=float(cfg["lambda"]), p=float(cfg["p"]),
                  chi=float(cfg.get("chi", 1.0)), M=float(cfg.get("mass", 1.0)))


# -- output directory, manifest, lock ----------------------------------------

class OutputDir:
    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self._lock = os.path.join(path, ".lock")
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise ParameterWindowError(
                f"output directory {path} is locked by another run "
                f"(remove {self._lock} if stale)"
            )
        self.files: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> None:
        full = os.path.join(self.path, name)
        os.makedirs(os.path.dirname(full) or self.path, exist_ok=True)
        data = text.encode("ascii")
        with open(full, "wb") as fh:
            fh.write(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, config_echo: dict) -> None:
        manifest = {"files": dict(sorted(self.files.items())), "config": config_echo}
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        with open(os.path.join(self.path, "manifest.json"), "wb") as fh:
            fh.write(text.encode("ascii"))
        os.unlink(self._lock)

    def abort(self) -> None:
        if os.path.exists(self._lock):
            os.unlink(self._lock)


# -- solution cache -----------------------------------------------------------

def _solve_key(params: Params, n: int, rmax: float, grading: str, tol: float) -> str:
    text = (f"d={params.d}|lam={params.lam!r}|p={params.p!r}|N={n}|"
            f"Rmax={rmax!r}|grading={grading}|tol={tol!r}")
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def obtain_solution(cfg: dict, params: Params, out_root: str) -> OptimizerSolution:
    n = int(cfg.get("n", 800))
    rmax = float(cfg.get("rmax", 4.0))
    grading = cfg.get("grading", "uniform")
    tol = float(cfg.get("tol", 1e-5))
    key = _solve_key(params, n, rmax, grading, tol)
    cache_dir = os.path.join(out_root, "cache", key)
    prof_path = os.path.join(cache_dir, "profile.csv")
    json_path = os.path.join(cache_dir, "solution.json")
    if os.path.exists(prof_path) and os.path.exists(json_path):
        _log(f"cache hit: solution {key}")
        with open(json_path) as fh:
            meta = json.load(fh)
        ell = load_profile_csv(prof_path, d=params.d, grading=grading)
        return OptimizerSolution(
            ell=ell, a=meta["a"], mu=meta["mu"],
            support_radius=meta["support_radius"], residual=meta["residual"],
            params=params, grid=ell.grid,
        )
    _log(f"cache miss: solving optimizer ({key})")
    grid = make_grid(rmax, n, grading, d=params.d)
    sol = solve_optimizer(params, grid,
                          SolveOptions(max_iter=int(cfg.get("max_iter", 600)), tol=tol))
    os.makedirs(cache_dir, exist_ok=True)
    from .optimizer import save_solution_bundle
    save_solution_bundle(sol, prof_path, json_path)
    return sol


# -- subcommands ---------------------------------------------------------------

def cmd_constants(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    params.require_stability_window()
    sol = obtain_solution(cfg, params, out.path)
    report = {"a": sol.a, **derived_constants(params, sol.a)}
    tv = flow_mod.theory_values(params, sol.a)
    report.update({
        "alpha_exp": tv.alpha_exp,
        "F_M": tv.F_M if math.isfinite(tv.F_M) else "-inf",
        "M_c": tv.M_c,
        "P_M": tv.P_M,
    })
    out.write_json("constants.json", report)


def cmd_optimize(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    params.require_stability_window()
    sol = obtain_solution(cfg, params, out.path)
    out.write_text("profile.csv", profile_csv_text(sol.ell))
    out.write_json("solution.json", {
        "d": params.d, "lambda": params.lam, "p": params.p,
        "a": sol.a, "mu": sol.mu, "support_radius": sol.support_radius,
        "residual": sol.residual, "N": sol.grid.n, "R_max": sol.grid.R_max,
    })
    vext = exterior_potential(sol)
    out.write_text("exterior_potential.csv", profile_csv_text(vext))


def cmd_spectrum(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    params.require_stability_window()
    sol = obtain_solution(cfg, params, out.path)
    ctx = hess_mod.build_hessian_context(sol)
    m_max = int(cfg.get("m_max", 4))
    for m in range(m_max + 1):
        rep = hess_mod.channel_spectrum(ctx, m, k=int(cfg.get("k", 8)))
        out.write_json(f"spectrum_m{m}.json", rep.to_dict())
    out.write_json("identities.json", verify_serializable(ctx))
    out.write_json("nondegeneracy.json", {
        "kappa": hess_mod.gap_estimate(ctx, max(m_max, 2)),
        "qhq_top": hess_mod.qhq_top_eigenvalue(ctx),
        "bs_margin": hess_mod.bs_triviality_check(ctx),
        "threshold": ctx.threshold,
    })


def verify_serializable(ctx) -> dict:
    return {k: float(v) for k, v in hess_mod.verify_identities(ctx).items()}


def cmd_stability(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    params.require_stability_window()
    sol = obtain_solution(cfg, params, out.path)
    ctx = hess_mod.build_hessian_context(sol)
    count = int(cfg.get("directions", 10))
    seed = int(cfg.get("seed", 0))
    dirs = stab_mod.seeded_directions(sol, count, seed)
    rows = ["direction,epsilon,deficit,distance_sq,kappa_star,quotient,flagged"]
    summary = []
    for i, v in enumerate(dirs):
        spec = stab_mod.PerturbationSpec(direction=v,
                                         epsilons=(1e-2, 10**-2.5, 1e-3, 10**-3.5))
        reports, extrap, pred = stab_mod.quotient_curve(sol, spec, ctx)
        for rep in reports:
            rows.append(f"{i},{rep.epsilon:.17g},{rep.deficit:.17g},"
                        f"{rep.distance_sq:.17g},{rep.kappa_star:.17g},"
                        f"{rep.quotient:.17g},{int(rep.flagged)}")
        summary.append({"direction": i, "extrapolated_quotient": extrap,
                        "hessian_prediction": pred})
    # one deliberate zero-mode (dilation) row battery, flagged by contract
    dell = np.gradient(sol.ell.values, sol.grid.nodes, edge_order=2)
    zmode = sol.ell.with_values(params.d * sol.ell.values + sol.grid.nodes * dell)
    spec = stab_mod.PerturbationSpec(direction=zmode, epsilons=(1e-2, 1e-3))
    reports, _, _ = stab_mod.quotient_curve(sol, spec)
    for rep in reports:
        rows.append(f"zero_mode,{rep.epsilon:.17g},{rep.deficit:.17g},"
                    f"{rep.distance_sq:.17g},{rep.kappa_star:.17g},"
                    f"{rep.quotient:.17g},{int(rep.flagged)}")
    out.write_text("stability.csv", "\n".join(rows) + "\n")
    out.write_json("stability.json", {"battery": summary, "seed": seed})


def cmd_flow(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    n = int(cfg.get("n", 400))
    rmax = float(cfg.get("rmax", 6.0))
    grid = make_grid(rmax, n, cfg.get("grading", "uniform"), d=params.d)
    sigma = float(cfg.get("sigma", 0.25 * rmax))
    g = np.exp(-grid.nodes**2 / (2.0 * sigma**2))
    g *= params.M / float(grid.weights @ g)
    state = flow_mod.flow_state_from_profile(RadialProfile(grid, g), params,
                                             dt=float(cfg.get("dt", 1e-6)))
    stop = flow_mod.StopRule(tol=float(cfg.get("stop_tol", 1e-12)),
                             window=int(cfg.get("stop_window", 60)),
                             max_steps=int(cfg.get("max_steps", 100_000)))
    trace = flow_mod.run_flow(state, params, stop)
    out.write_text("trace.csv", flow_mod.flow_trace_csv(trace))
    out.write_text("final_profile.csv", profile_csv_text(trace.final.rho))
    report = {
        "status": trace.status,
        "t_final": trace.final.t,
        "energy_final": trace.final.energy,
        "mass_drift": trace.mass_drift,
        "accepted_steps": sum(1 for r in trace.rows if r[4]),
        "sigma": sigma,
    }
    alpha = params.lam / (params.d * (params.p - 1.0))
    if alpha < 1.0 and params.p <= 2.0 and params.lam >= params.d - 2 \
            and params.p > params.p_c:
        sol = obtain_solution(cfg, params, out.path)
        tv = flow_mod.theory_values(params, sol.a)
        int_p = float(grid.weights @ trace.final.rho.values**params.p)
        report["P_M"] = tv.P_M
        report["F_M"] = tv.F_M
        report["int_rho_p_final"] = int_p
    out.write_json("flow.json", report)


def cmd_scattering(cfg: dict, out: OutputDir) -> None:
    params = _params(cfg)
    params.require_stability_window()
    sol = obtain_solution(cfg, params, out.path)
    prob = scat_mod.scattering_problem_from(sol)
    f = scat_mod.solve_scattering(prob, sol.grid)
    out.write_text("f.csv", profile_csv_text(f))
    residual = scat_mod.scattering_residual(prob, f)
    report = {
        "s": prob.s,
        "tau": prob.tau,
        "f_at_0": float(f.values[0]),
        "origin_margin": abs(float(f.values[0]) - prob.tau) / abs(prob.tau),
        "residual": residual,
    }
    if prob.s == 1.0:
        ham = scat_mod.local_hamiltonian(f, prob.V, prob.tau)
        out.write_text("H_local.csv", profile_csv_text(ham.H))
    else:
        tg = scat_mod.default_t_grid(sol.support_radius, int(cfg.get("t_slices", 160)))
        ext = scat_mod.poisson_extension(f, prob.s, tg)
        ham = scat_mod.fractional_hamiltonian(ext, f, prob.V, prob.tau, prob.s)
        out.write_text("H_fractional.csv", profile_csv_text(ham.H))
        report["end_fraction"] = ham.diagnostics["end_fraction"]
    report["max_monotonicity_violation"] = scat_mod.monotonicity_report(ham)
    out.write_json("scattering.json", report)


COMMANDS = {
    "constants": cmd_constants,
    "optimize": cmd_optimize,
    "spectrum": cmd_spectrum,
    "stability": cmd_stability,
    "flow": cmd_flow,
    "scattering": cmd_scattering,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rieszlab",
        description="Numerical laboratory for the sharp interaction inequality "
                    "and its stability theory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--d", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--p", type=float)
        sp.add_argument("--chi", type=float)
        sp.add_argument("--mass", type=float)
        sp.add_argument("--rmax", type=float)
        sp.add_argument("--n", type=int)
        sp.add_argument("--grading", choices=("uniform", "geometric"))
        sp.add_argument("--out", type=str)
        sp.add_argument("--config", type=str)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-iter", dest="max_iter", type=int)
        if name == "spectrum":
            sp.add_argument("--m-max", dest="m_max", type=int)
            sp.add_argument("--k", type=int)
        if name == "stability":
            sp.add_argument("--directions", type=int)
        if name == "flow":
            sp.add_argument("--sigma", type=float)
            sp.add_argument("--dt", type=float)
            sp.add_argument("--stop-tol", dest="stop_tol", type=float)
            sp.add_argument("--stop-window", dest="stop_window", type=int)
            sp.add_argument("--max-steps", dest="max_steps", type=int)
        if name == "scattering":
            sp.add_argument("--t-slices", dest="t_slices", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _merged(args)
    except (OSError, ValueError) as exc:
        _log(f"config error: {exc}")
        return EXIT_PRECONDITION
    out_path = cfg.get("out")
    if not out_path:
        _log("an output directory is required (--out)")
        return EXIT_PRECONDITION
    try:
        out = OutputDir(out_path)
    except ParameterWindowError as exc:
        _log(str(exc))
        return EXIT_PRECONDITION
    try:
        COMMANDS[args.command](cfg, out)
        out.finish({k: v for k, v in sorted(cfg.items())})
        return EXIT_OK
    except ParameterWindowError as exc:
        out.abort()
        _log(f"precondition violation: {exc}")
        return EXIT_PRECONDITION
    except (ConvergenceError, KernelQuadratureError) as exc:
        out.abort()
        _log(f"numerical failure: {exc}")
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
