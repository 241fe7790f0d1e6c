"""Config-driven experiment runner.

Subcommands ``propagate``, ``converge``, ``scaling`` and ``turning-point`` read
a YAML (or JSON) run config and write CSV files whose comment preamble holds
the full effective config, so any output can be fed back as ``--config``.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import math
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import analysis
from .analysis import ConvergenceStudy, Method, power_fit, two_stage_turning_points
from .dynamics import DynamicsKind
from .hamiltonians import (
    FrozenHamiltonian,
    MatrixHamiltonian,
    NlseHamiltonian,
    ProblemConfig,
    ToyHamiltonian,
)
from .integrators import IntegratorConfig, Scheme, StepFailure, propagate
from .reference import GapClosedError, eig_hermitian, fine_reference, gl2_reference
from .solvers import AndersonConfig

log = logging.getLogger("ptgauge")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "problem": {"type": "toy"},
    "epsilon": 0.01,
    "T": 1.0,
    "anderson": {"alpha": 1.0, "mixing_dim": 20, "tol": 1e-8, "max_iter": 200, "precondition": False},
    "reference": {"method": "auto"},
    "initial_state": "ground",
    "stride": 1,
    "seed": 0,
    "timing": False,
}

PROBLEM_DEFAULTS = {
    "toy": {"t0": 0.5, "delta": 1.0, "N": 1, "frozen_t": None},
    "synthetic": {"d": 4, "coupling": 0.3, "seed": 7, "omega": math.pi, "N": 2, "frozen_t": None},
    "nlse": {"L": 50.0, "hx": 0.025, "g": 2.5, "normalization": "l2", "potential": True, "N": 1},
}


class UsageError(Exception):
    """Invalid command line or config."""


# ---------------------------------------------------------------------------
# config


def _read_config_text(path: Path) -> dict:
    text = path.read_text()
    lines = text.splitlines()
    if lines and lines[0].startswith("#"):
        # CSV written by this tool: the preamble is a commented YAML document
        pre = []
        for ln in lines:
            if not ln.startswith("#"):
                break
            pre.append(ln[2:] if ln.startswith("# ") else ln[1:])
        try:
            doc = yaml.safe_load("\n".join(pre))
        except yaml.YAMLError:
            doc = None
        if isinstance(doc, dict) and "config" in doc:
            return doc["config"]
        # otherwise a YAML file that starts with ordinary comments
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return doc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _sweep_values(sweep: dict, eps: Optional[float]) -> list[float]:
    """Geometric sweep ``h_max * 2^(-k / per_octave)`` down to the minimum.

    The minimum is ``min`` or, with ``min_eps_power``, ``min_eps_coef * eps**min_eps_power``.
    """
    hmax = float(sweep["max"])
    per = int(sweep.get("per_octave", 1))
    if sweep.get("min_eps_power") is not None:
        if eps is None:
            raise UsageError("eps-dependent sweep minimum needs an epsilon")
        hmin = float(sweep.get("min_eps_coef", 1.0)) * eps ** float(sweep["min_eps_power"])
    else:
        hmin = float(sweep["min"])
    out, k = [], 0
    while True:
        h = hmax * 2.0 ** (-k / per)
        if h < hmin * (1 - 1e-12):
            break
        out.append(h)
        k += 1
    return out


def h_values_for(cfg: dict, eps: Optional[float]) -> list[float]:
    if "h_values" in cfg:
        return sorted((float(h) for h in cfg["h_values"]), reverse=True)
    if "h_sweep" in cfg:
        return _sweep_values(cfg["h_sweep"], eps)
    if "h" in cfg:
        return [float(cfg["h"])]
    raise UsageError("config needs one of h, h_values or h_sweep")


def resolve_config(raw: dict, command: str) -> dict:
    """Fill defaults so that every effective value is explicit."""
    cfg = _merge(DEFAULTS, raw)
    ptype = cfg["problem"].get("type", "toy")
    if ptype not in PROBLEM_DEFAULTS:
        raise UsageError(f"unknown problem type {ptype!r}; valid: {', '.join(PROBLEM_DEFAULTS)}")
    cfg["problem"] = _merge(PROBLEM_DEFAULTS[ptype], cfg["problem"])
    cfg["problem"]["type"] = ptype
    known_anderson = {"alpha", "mixing_dim", "tol", "max_iter", "precondition"}
    extra = set(cfg["anderson"]) - known_anderson
    if extra:
        raise UsageError(f"unknown anderson settings {sorted(extra)}; valid: {sorted(known_anderson)}")
    if ptype == "nlse" and "precondition" not in raw.get("anderson", {}):
        cfg["anderson"]["precondition"] = True

    labels = []
    if command == "propagate":
        if "method" not in cfg:
            raise UsageError("propagate needs 'method' (e.g. PT-GL2)")
        labels = [cfg["method"]]
    else:
        if "methods" not in cfg:
            raise UsageError(f"{command} needs 'methods'")
        labels = list(cfg["methods"])
    for lab in labels:
        _parse_method(lab)

    ref = cfg["reference"]
    method = ref.get("method", "auto")
    if method == "auto":
        method = "gl2" if ptype == "nlse" else "magnus"
    if method not in ("magnus", "gl2"):
        raise UsageError(f"unknown reference method {method!r}; valid: auto, magnus, gl2")
    ref["method"] = method
    if method == "gl2":
        ref.setdefault("h", 1e-5)
        ref.setdefault("base", "PT")
        ref.setdefault("richardson", True)
    else:
        ref.setdefault("h", None)
    if command in ("scaling", "turning-point") or "eps_values" in cfg:
        cfg.setdefault("eps_values", [cfg["epsilon"]])
    if command == "scaling":
        cfg.setdefault("scaling", {})
        cfg["scaling"].setdefault("mode", "fixed_h")
        if cfg["scaling"]["mode"] not in ("fixed_h", "turning"):
            raise UsageError("scaling.mode must be fixed_h or turning")
    return cfg


def _parse_method(label: str) -> Method:
    try:
        return Method.parse(label)
    except ValueError:
        kinds = ", ".join(k.value for k in DynamicsKind if k is not DynamicsKind.VON_NEUMANN)
        schemes = ", ".join(s.value for s in Scheme)
        raise UsageError(f"invalid method {label!r}; use KIND-SCHEME with KIND in {{{kinds}}} and SCHEME in {{{schemes}}}")


# ---------------------------------------------------------------------------
# construction


def build_problem(cfg: dict, eps: float) -> ProblemConfig:
    p = cfg["problem"]
    if p["type"] == "toy":
        ham = ToyHamiltonian(float(p["t0"]), float(p["delta"]))
    elif p["type"] == "synthetic":
        ham = MatrixHamiltonian.synthetic(int(p["d"]), float(p["coupling"]), int(p["seed"]))
        ham = MatrixHamiltonian(ham.A, ham.B, float(p["omega"]))
    else:
        d = int(round(float(p["L"]) / float(p["hx"])))
        ham = NlseHamiltonian(float(p["L"]), d, float(p["g"]), p["normalization"], bool(p["potential"]))
    if p.get("frozen_t") is not None:
        ham = FrozenHamiltonian(ham, float(p["frozen_t"]))
    return ProblemConfig(float(eps), float(cfg["T"]), ham, int(p["N"]))


def initial_state(cfg: dict, problem: ProblemConfig) -> np.ndarray:
    if cfg["initial_state"] != "ground":
        raise UsageError("initial_state must be 'ground'")
    ham = problem.hamiltonian
    if isinstance(ham, NlseHamiltonian):
        return ham.ground_state(0.0, problem.N)
    return eig_hermitian(ham.matrix(0.0), problem.N).eigenvectors[:, : problem.N].astype(complex)


def anderson_config(cfg: dict) -> AndersonConfig:
    a = cfg["anderson"]
    return AndersonConfig(float(a["alpha"]), int(a["mixing_dim"]), float(a["tol"]), int(a["max_iter"]))


def _sample_dt(h_values: list[float], h_ref: float) -> float:
    """Largest grid that contains every sweep time and is a multiple of 4 h_ref."""
    hmin = min(h_values)
    for k in range(1, 1000):
        s = hmin / k
        m = s / h_ref
        if abs(m - round(m)) < 1e-6 and round(m) % 4 == 0 and all(
            abs(h / s - round(h / s)) < 1e-6 for h in h_values
        ):
            return s
    raise UsageError("cannot find a reference sample grid for these step sizes; adjust reference.h")


def build_reference(cfg: dict, problem: ProblemConfig, phi0, h_values: list[float]):
    ref = cfg["reference"]
    if ref["method"] == "magnus":
        if isinstance(problem.hamiltonian, NlseHamiltonian):
            raise UsageError("the Magnus reference needs a dense linear Hamiltonian")
        h_ref = ref["h"] if ref["h"] is not None else min(1e-4, problem.epsilon / 100.0)
        return fine_reference(problem, float(h_ref), phi0)
    h_ref = float(ref["h"])
    return gl2_reference(
        problem,
        h_ref,
        _sample_dt(h_values, h_ref),
        phi0,
        base=ref["base"],
        richardson=bool(ref["richardson"]),
        solver=AndersonConfig(tol=1e-12, max_iter=int(cfg["anderson"]["max_iter"])),
        precondition=bool(cfg["anderson"]["precondition"]),
    )


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if not np.isfinite(x) else f"{float(x):.17g}"
    return str(x)


def preamble(command: str, cfg: dict) -> str:
    doc = yaml.safe_dump({"command": command, "config": cfg}, sort_keys=True, default_flow_style=False)
    return "".join(f"# {ln}\n" for ln in doc.splitlines())


def write_csv(path: Optional[str], command: str, cfg: dict, header: list[str], rows, trailer: Optional[str] = None):
    buf = io.StringIO()
    buf.write(preamble(command, cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    if trailer:
        buf.write(f"# error: {trailer}\n")
    text = buf.getvalue()
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _companion(path: Optional[str], suffix: str) -> Optional[str]:
    if path is None or path == "-":
        return None
    p = Path(path)
    return str(p.with_name(f"{p.stem}_{suffix}{p.suffix or '.csv'}"))


# ---------------------------------------------------------------------------
# commands


def cmd_propagate(cfg: dict, args) -> int:
    problem = build_problem(cfg, cfg["epsilon"])
    meth = _parse_method(cfg["method"])
    phi0 = initial_state(cfg, problem)
    integ = IntegratorConfig(
        meth.scheme, float(cfg["h"]), anderson_config(cfg), bool(cfg.get("retry_halve", False)), bool(cfg["anderson"]["precondition"])
    )
    traj = propagate(problem, meth.kind, integ, phi0, stride=int(cfg["stride"]))
    obs = analysis.observables(traj, problem)
    d, N = traj.states.shape[1:]
    header = ["t"]
    if not args.observables_only:
        def name(k, j):
            return f"{k}" if N == 1 else f"{k}_{j}"
        header += [f"re_phi_{name(k, j)}" for j in range(N) for k in range(d)]
        header += [f"im_phi_{name(k, j)}" for j in range(N) for k in range(d)]
    header += ["norm", "energy"]
    if obs.x_center is not None:
        header.append("x_center")
    header.append("anderson_iters")

    # iterations accumulated between stored samples
    cum = np.concatenate([[0], np.cumsum(traj.iterations)])
    grid = integ.time_grid(problem.T)
    step_index = np.rint(np.interp(traj.times, grid, np.arange(len(grid)))).astype(int)
    step_index = np.clip(step_index, 0, len(cum) - 1)
    per_sample = np.diff(np.concatenate([[0], cum[step_index]]))

    rows = []
    for i, t in enumerate(traj.times):
        row = [t]
        if not args.observables_only:
            u = traj.states[i]
            row += list(u.real.T.reshape(-1)) + list(u.imag.T.reshape(-1))
        row += [obs.norm[i], obs.energy[i]]
        if obs.x_center is not None:
            row.append(obs.x_center[i])
        row.append(int(per_sample[i]))
        rows.append(row)
    write_csv(args.out, "propagate", cfg, header, rows, traj.error if traj.failed else None)
    if traj.failed:
        log.error("propagation failed: %s", traj.error)
        return EXIT_NUMERIC
    return EXIT_OK


def _studies(cfg: dict, args, eps: float) -> list[ConvergenceStudy]:
    problem = build_problem(cfg, eps)
    phi0 = initial_state(cfg, problem)
    hs = h_values_for(cfg, eps)
    ref = build_reference(cfg, problem, phi0, hs)
    out = []
    for lab in cfg["methods"]:
        st = analysis.convergence_study(
            problem,
            _parse_method(lab),
            hs,
            ref,
            phi0,
            anderson_config(cfg),
            bool(cfg.get("retry_halve", False)),
            jobs=args.jobs,
            precondition=bool(cfg["anderson"]["precondition"]),
        )
        out.append(st)
    return out


def cmd_converge(cfg: dict, args) -> int:
    eps_list = cfg.get("eps_values", [cfg["epsilon"]])
    rows = []
    for eps in eps_list:
        for st in _studies(cfg, args, float(eps)):
            for k, h in enumerate(st.h_values):
                wall = st.wall_seconds[k] if cfg["timing"] else 0.0
                rows.append([st.method, eps, h, st.errors[k], st.diverged[k], st.iterations[k], wall])
    header = ["method", "eps", "h", "error", "diverged", "total_anderson_iters", "wall_seconds"]
    write_csv(args.out, "converge", cfg, header, rows)
    return EXIT_OK


def _turning_table(cfg: dict, args) -> list[tuple[str, float, analysis.TurningPoints]]:
    table = []
    for eps in cfg["eps_values"]:
        for st in _studies(cfg, args, float(eps)):
            if Method.parse(st.method).kind is DynamicsKind.SCHRODINGER:
                tp = analysis.TurningPoints(h_T=analysis.turning_point(st, sustain=2))
            else:
                tp = two_stage_turning_points(st)
            table.append((st.method, float(eps), tp))
    return table


def cmd_turning_point(cfg: dict, args) -> int:
    rows = [[m, eps, tp.h_T, tp.h_T1, tp.plateau, tp.h_T2] for m, eps, tp in _turning_table(cfg, args)]
    write_csv(args.out, "turning-point", cfg, ["method", "eps", "h_T", "h_T1", "plateau", "h_T2"], rows)
    return EXIT_OK


def cmd_scaling(cfg: dict, args) -> int:
    eps_values = [float(e) for e in cfg["eps_values"]]
    points = []  # (method, stage, eps, value)
    if cfg["scaling"]["mode"] == "fixed_h":
        h = float(cfg["h"])
        stage = f"h={fmt(h)}"
        for eps in eps_values:
            problem = build_problem(cfg, eps)
            phi0 = initial_state(cfg, problem)
            ref = build_reference(cfg, problem, phi0, [h])
            for lab in cfg["methods"]:
                r = analysis.run_point(
                    problem, _parse_method(lab), h, ref, phi0, anderson_config(cfg),
                    bool(cfg.get("retry_halve", False)), bool(cfg["anderson"]["precondition"]),
                )
                points.append((lab, stage, eps, r.error))
    else:
        for m, eps, tp in _turning_table(cfg, args):
            for stage in ("h_T", "h_T1", "plateau", "h_T2"):
                v = getattr(tp, stage)
                if v is not None:
                    points.append((m, stage, eps, v))
    rows = []
    keys = []
    for m, stage, _, _ in points:
        if (m, stage) not in keys:
            keys.append((m, stage))
    for m, stage in keys:
        xs = [e for mm, s, e, v in points if (mm, s) == (m, stage) and np.isfinite(v) and v > 0]
        ys = [v for mm, s, e, v in points if (mm, s) == (m, stage) and np.isfinite(v) and v > 0]
        if len(xs) >= 2:
            fit = power_fit(xs, ys)
            rows.append([m, stage, fit.slope, fit.r2])
        else:
            rows.append([m, stage, float("nan"), float("nan")])
    write_csv(args.out, "scaling", cfg, ["method", "fixed_h_or_stage", "slope", "r2"], rows)
    pts_path = _companion(args.out, "points")
    if pts_path is not None:
        write_csv(pts_path, "scaling", cfg, ["method", "fixed_h_or_stage", "eps", "value"], [list(p) for p in points])
    return EXIT_OK


COMMANDS = {
    "propagate": cmd_propagate,
    "converge": cmd_converge,
    "scaling": cmd_scaling,
    "turning-point": cmd_turning_point,
}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptgauge", description="Parallel-transport gauge propagation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML/JSON run config, or a CSV written by this tool")
        sp.add_argument("--out", default=None, help="output CSV path (stdout if omitted)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
        sp.add_argument("--retry-halve", action="store_true", help="halve h on failed implicit steps")
        sp.add_argument("--observables-only", action="store_true", help="omit orbital columns (propagate)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            raw = _read_config_text(path)
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {path}: {exc}")
        if args.retry_halve:
            raw = dict(raw, retry_halve=True)
        cfg = resolve_config(raw, args.command)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"ptgauge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, KeyError) as exc:
        print(f"ptgauge: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepFailure, GapClosedError, RuntimeError, FloatingPointError) as exc:
        print(f"ptgauge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
