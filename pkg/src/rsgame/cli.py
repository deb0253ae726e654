"""``rsgame`` command line: validate, solve, verify and simulate from model files.

Each command prints one JSON run report (also written to ``--out``).  The
report echoes the command and every resolved option, so rerunning the echo
reproduces the numeric fields exactly; only ``timings`` varies.

Exit codes: 0 pass, 1 parse or I/O error, 2 gate failure, 3 solver did not
converge, 4 a verification check failed.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
import warnings
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import (
    CertificateViolated,
    GateFailed,
    ModelError,
    NegativeCost,
    NegativeOffDiagonal,
    NonConservativeRow,
    RSGameError,
    SchemaError,
    SolverError,
)
from .model_io import SCHEMA_VERSION, dumps, file_sha256, load_document, load_model, write_json

EXIT_OK, EXIT_IO, EXIT_GATE, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3, 4


def _check(value: float, tol: float, ok: Optional[bool] = None, **extra) -> dict:
    """One numeric result with the tolerance it was held to."""
    value = float(value)
    return {"value": value, "tol": float(tol), "ok": bool(value <= tol if ok is None else ok), **extra}


def exit_code(report: dict) -> int:
    """Exit status as a function of the report alone."""
    err = report.get("error")
    if err:
        codes = {"io": EXIT_IO, "gate": EXIT_GATE, "solver": EXIT_SOLVER, "verification": EXIT_VERIFY}
        return codes.get(err["category"], EXIT_IO)
    if any(not c["ok"] for c in report.get("checks", {}).values()):
        return EXIT_VERIFY
    return EXIT_OK


_GATE_ERRORS = (GateFailed, NegativeOffDiagonal, NonConservativeRow, NegativeCost, CertificateViolated)


def _category(exc: Exception) -> str:
    if isinstance(exc, _GATE_ERRORS):
        return "gate"
    if isinstance(exc, SolverError):
        return "solver"
    if isinstance(exc, (OSError, ValueError, ModelError)):
        return "io"
    # lab failures (reducibility, divergent series, infinite moments)
    return "verification"


# -- commands -----------------------------------------------------------------


def cmd_validate(args, report: dict) -> None:
    from .model import check_lyapunov, check_small_cost, validate

    model, cert = load_model(args.model)
    val = validate(model, raise_on_error=False)
    report["results"] = {"n_states": model.n_states, "n_actions": list(model.n_actions),
                         "max_exit_rate": val.max_exit_rate, "cost_sup": val.cost_sup,
                         "repaired_rows": val.repaired_rows, "invariants": val.checks}
    gates = {"model": {"ok": val.ok, "failures": [str(f) for f in val.failures]}}
    if cert is not None and val.ok:
        lyap = check_lyapunov(val.model, cert, raise_on_error=False)
        small = check_small_cost(val.model, cert, theta=args.theta)
        gates["lyapunov"] = {"ok": lyap.ok, "worst_slack": lyap.worst_slack,
                             "worst_actions": lyap.worst_actions,
                             "ref_state_admissible": lyap.ref_state_admissible}
        gates["small_cost"] = {"ok": small.ok, "cost_sup": small.cost_sup, "delta": small.delta,
                               "theta": small.theta, "theta_max": small.theta_max}
    report["gates"] = gates
    failed = [k for k, g in gates.items() if not g["ok"]]
    if failed:
        raise GateFailed(",".join(failed))


def cmd_solve_discounted(args, report: dict) -> None:
    from .discounted import discounted_residual, extract_markov_policy, refine_epsilon
    from .model import validate
    from .model_io import discounted_solution_to_dict, profile_to_dict

    model, _ = load_model(args.model)
    model = validate(model).model
    theta = model.theta_cap if args.theta is None else args.theta
    sol = refine_epsilon(model, theta, args.tol, epsilon0=args.epsilon)
    res = discounted_residual(model, sol)
    scale = float(np.abs(sol.psi).max())
    horizon = args.horizon
    pol = extract_markov_policy(sol, theta, horizon, args.policy_dt)
    bound = np.exp(sol.theta[:, None] * model.cost_sup / model.alpha)
    report["results"] = {
        "theta": theta,
        "epsilon": sol.epsilon,
        "psi": sol.psi[-1],
        "n_nodes": len(sol.theta),
        "refinement": sol.diagnostics.get("refinement"),
        "policy": {"dt": pol.dt, "times": pol.times, "v1": pol.v1, "v2": pol.v2,
                   "truncated": pol.truncated, "t_epsilon": pol.t_epsilon},
    }
    report["checks"] = {
        "hji_residual": _check(res.max() if res.size else 0.0, 1e-6 * scale),
        "sandwich": _check(max(float((1.0 - sol.psi).max()), float((sol.psi - bound).max())), 0.0),
    }
    if args.solution_out:
        write_json(args.solution_out, discounted_solution_to_dict(sol))
    if args.profile_out:
        write_json(args.profile_out, profile_to_dict(pol.profile))


def cmd_solve_ergodic(args, report: dict) -> None:
    from .ergodic import perron_value, solve_ergodic
    from .model_io import ergodic_solution_to_dict

    model, cert = load_model(args.model)
    levels = [int(x) for x in args.levels.split(",")] if args.levels else None
    sol = solve_ergodic(model, cert, levels, T_max=args.tmax, dt=args.dt, tol=args.tol,
                        residual_tol=args.residual_tol, override_gates=args.override_gates)
    report["gates"] = sol.diagnostics.get("gates")
    d = sol.diagnostics
    report["results"] = {
        "rho": sol.rho,
        "psi_hat": sol.psi_hat,
        "v1": sol.v1,
        "v2": sol.v2,
        "truncation_level": sol.truncation_level,
        "ladder": d.get("ladder"),
        "march_time": d.get("march_time"),
        "steps": d.get("steps"),
        "dt": d.get("dt"),
    }
    pf = perron_value(model, sol.v1, sol.v2)
    scale = max(1.0, abs(sol.rho))
    report["checks"] = {
        "ergodic_residual": _check(d["residual"], args.residual_tol * scale),
        "perron_value": _check(abs(sol.rho - pf.lam), 1e-6, lam=pf.lam),
        "perron_vector": _check(float(np.abs(sol.psi_hat - pf.vec).max() / np.abs(pf.vec).max()), 1e-6),
    }
    if cert is not None:
        report["checks"]["w_bound"] = _check(float((sol.psi_hat - cert.W).max()), 0.0)
    if args.solution_out:
        write_json(args.solution_out, ergodic_solution_to_dict(sol))


VERIFY_CHECKS = ("residual", "perron", "saddle", "w_bound", "d_rho", "hitting", "tkep", "dpp", "mc")


def cmd_verify(args, report: dict) -> None:
    from .ctmc import (
        D_of_rho,
        build_twisted_chain,
        estimate_ergodic_growth,
        exp_hitting_moment,
        feynman_kac,
        multiplicative_dpp_check,
        tkep_check,
    )
    from .ergodic import ergodic_residual, march_finite_horizon, perron_value, verify_saddle
    from .model import random_mixed, validate

    model, cert = load_model(args.model)
    model = validate(model).model
    kind, sol = load_document(args.solution)
    if kind != "ergodic_solution":
        raise SchemaError(f"{args.solution}: expected an ergodic_solution document, got {kind}")
    if sol.psi_hat.shape != (model.n_states,):
        raise SchemaError("solution does not match the model's state space")
    skip = set(args.skip or ())
    rng = np.random.default_rng(args.seed)
    i0 = model.ref_state
    N = model.n_states
    scale = max(1.0, abs(sol.rho))
    checks, results = {}, {}

    if "residual" not in skip:
        checks["ergodic_residual"] = _check(ergodic_residual(model, sol.rho, sol.psi_hat), 1e-6 * scale)
    if "perron" not in skip:
        pf = perron_value(model, sol.v1, sol.v2)
        checks["perron_value"] = _check(abs(sol.rho - pf.lam), 1e-6, lam=pf.lam)
        checks["perron_vector"] = _check(
            float(np.abs(sol.psi_hat - pf.vec).max() / np.abs(pf.vec).max()), 1e-6)
    if "saddle" not in skip:
        sr = verify_saddle(model, sol, n_mixed=args.n_mixed, seed=args.seed)
        checks["saddle_player1"] = _check(sr.margin1, sr.tol, checked=sr.checked["player1"])
        checks["saddle_player2"] = _check(sr.margin2, sr.tol, checked=sr.checked["player2"])
    if cert is not None and "w_bound" not in skip:
        checks["w_bound"] = _check(float((sol.psi_hat - cert.W).max()), 0.0)
    if "d_rho" not in skip:
        worst, values = -math.inf, []
        deviations = [sol.v2] + [random_mixed(rng, (N, model.n_actions[1])) for _ in range(args.deviations)]
        for v2 in deviations:
            D = D_of_rho(build_twisted_chain(model, sol.v1, v2), sol.rho, i0, seed=args.seed)
            values.append(D)
            worst = max(worst, D - 1.0)
        results["D_of_rho"] = values
        checks["D_of_rho"] = _check(worst, 1e-6)
    if cert is not None and "hitting" not in skip:
        u = exp_hitting_moment(model, sol.v1, sol.v2, i0, cert.delta)
        results["hitting_moment"] = u
        checks["hitting_moment"] = _check(float((u - cert.W).max()), 0.0)
    if cert is not None and "tkep" not in skip:
        tk = tkep_check(build_twisted_chain(model, sol.v1, sol.v2), cert, strict=False)
        results["tkep"] = {"c0": list(tk.c0), "moments": tk.moments, "bounds": tk.bounds}
        # value is the largest bound excess; an empty C0 passes vacuously
        excess = max((-m for m in tk.margins.values()), default=0.0)
        checks["tkep"] = _check(excess, 1e-9, c0_size=len(tk.c0))
    if "dpp" not in skip:
        history, _ = march_finite_horizon(model, T_max=args.tmax, min_time=args.dpp_t)
        start = N - 1
        sets = []
        for S in ([], [i0], list(range((N + 1) // 2))):
            if S not in sets:
                sets.append(S)
        for k, S in enumerate(sets):
            r = multiplicative_dpp_check(model, history, S, args.dpp_t, start, args.paths, args.seed + k)
            checks[f"dpp_{k}"] = _check(abs(r.z), 3.0, stop_set=list(r.stop_set), t=r.t,
                                        value_psi=r.value, mean=r.mean, stderr=r.stderr)
    if "mc" not in skip:
        T = args.T
        est = estimate_ergodic_growth(model, sol.profile, i0, T, args.paths, args.seed)
        exact = math.log(feynman_kac(model, sol.profile, T).sum(axis=1)[i0]) / T
        # degenerate samples (deterministic cost) leave only rounding differences
        scale = max(est.stderr, 1e-12 * max(1.0, abs(exact)))
        z = (est.mean - exact) / scale
        checks["mc_growth"] = _check(abs(z), 3.0, estimate=est.mean, stderr=est.stderr,
                                     finite_horizon=exact, rho=sol.rho)
    report["results"] = results
    report["checks"] = checks


def cmd_simulate(args, report: dict) -> None:
    from .ctmc import estimate_discounted, estimate_ergodic_growth
    from .model import validate

    model, _ = load_model(args.model)
    model = validate(model).model
    kind, profile = load_document(args.profile)
    if kind != "profile":
        raise SchemaError(f"{args.profile}: expected a profile document, got {kind}")
    states = range(model.n_states) if args.state is None else [args.state]
    out = {}
    for i in states:
        row = {}
        if args.criterion in ("discounted", "both"):
            e = estimate_discounted(model, profile, args.theta, i, args.T, args.paths, args.seed)
            row["discounted"] = {"mean": e.mean, "stderr": e.stderr, "tail_factor": e.tail_factor}
        if args.criterion in ("ergodic", "both"):
            e = estimate_ergodic_growth(model, profile, i, args.T, args.paths, args.seed)
            row["ergodic_growth"] = {"mean": e.mean, "stderr": e.stderr}
        out[str(i)] = row
    report["results"] = {"estimates": out, "T": args.T, "n_paths": args.paths, "theta": args.theta}


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsgame", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"rsgame {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="also write the report here")
    common.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (default: $RSGAME_THREADS or library default)")
    common.add_argument("--quiet", action="store_true", help="do not print the report")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check model invariants and gates")
    s.add_argument("model")
    s.add_argument("--theta", type=float, default=1.0, help="risk level for the small-cost gate")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve-discounted", parents=[common], help="discounted HJI solve")
    s.add_argument("model")
    s.add_argument("--theta", type=float, default=None, help="default: the model's theta_cap")
    s.add_argument("--epsilon", type=float, default=None, help="starting epsilon (default 1e-3*theta_cap)")
    s.add_argument("--tol", type=float, default=1e-6, help="epsilon refinement tolerance")
    s.add_argument("--horizon", type=float, default=10.0, help="policy table horizon")
    s.add_argument("--policy-dt", type=float, default=0.05)
    s.add_argument("--solution-out")
    s.add_argument("--profile-out")
    s.set_defaults(func=cmd_solve_discounted)

    s = sub.add_parser("solve-ergodic", parents=[common], help="ergodic value by normalized marching")
    s.add_argument("model")
    s.add_argument("--levels", help="comma separated truncation levels, increasing")
    s.add_argument("--tmax", type=float, default=500.0)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--residual-tol", type=float, default=1e-6)
    s.add_argument("--override-gates", action="store_true")
    s.add_argument("--solution-out")
    s.set_defaults(func=cmd_solve_ergodic)

    s = sub.add_parser("verify", parents=[common], help="verification suite for an ergodic solution")
    s.add_argument("model")
    s.add_argument("--solution", "--solution_path", dest="solution", required=True)
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-mixed", type=int, default=100)
    s.add_argument("--deviations", type=int, default=10)
    s.add_argument("--T", type=float, default=20.0, help="horizon of the Monte Carlo growth check")
    s.add_argument("--dpp-t", type=float, default=2.0)
    s.add_argument("--tmax", type=float, default=500.0)
    s.add_argument("--skip", action="append", choices=VERIFY_CHECKS)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo estimators under a profile")
    s.add_argument("model")
    s.add_argument("--profile", "--profile_path", dest="profile", required=True)
    s.add_argument("--T", type=float, default=20.0)
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--state", type=int, default=None)
    s.add_argument("--theta", type=float, default=1.0)
    s.add_argument("--criterion", choices=("discounted", "ergodic", "both"), default="both")
    s.set_defaults(func=cmd_simulate)
    return p


def _limit_threads(n: Optional[int]):
    if n is None:
        return None
    import numba
    from threadpoolctl import threadpool_limits

    with warnings.catch_warnings():
        # an outdated TBB only makes numba pick another threading layer
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> tuple[int, dict, argparse.Namespace]:
    """Parse ``argv`` and run the command; returns ``(exit code, report, args)``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.threads is None and os.environ.get("RSGAME_THREADS"):
        args.threads = int(os.environ["RSGAME_THREADS"])
    config = {k: v for k, v in vars(args).items() if k not in ("func", "quiet", "out")}
    report = {"schema": SCHEMA_VERSION, "kind": "run_report", "version": __version__,
              "command": ["rsgame"] + argv, "config": config}
    try:
        report["model_sha256"] = file_sha256(args.model)
    except OSError:
        report["model_sha256"] = None
    t0 = time.perf_counter()
    limiter = _limit_threads(args.threads)
    try:
        args.func(args, report)
    except (RSGameError, OSError, ValueError) as exc:
        report["error"] = {"category": _category(exc), "type": type(exc).__name__, "message": str(exc)}
    finally:
        if limiter is not None:
            limiter.unregister()
    report["timings"] = {"wall_s": time.perf_counter() - t0}
    code = exit_code(report)
    report["exit_code"] = code
    return code, report, args


def main(argv: Optional[Sequence[str]] = None) -> int:
    code, report, args = run(argv)
    text = dumps(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    if not args.quiet:
        print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
