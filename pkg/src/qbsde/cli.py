"""Command-line front end.

    qbsde list
    qbsde preset NAME [--seed N] [--out DIR] [--dump]
    qbsde run CONFIG.json [--out DIR]

Outputs in DIR/<scenario>/:
    solution.csv   columns: path_id, t, Y, Z   (Z empty at t = T)
    reports.jsonl  one CheckReport per line
    summary.txt    human-readable table

Exit status: 0 all checks pass, 1 some check fails, 2 invalid config.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import os
import re
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import bsde, verify
from .generator import DominatingParams, GeneratorSpec, builtin
from .reference import STEP_IDENTITY_Y0
from .qpde import cole_hopf_check, mc_fd_check, step_fixture
from .stochastic import TimeGrid, sample_brownian
from .transform import build_u

SCHEMA_VERSION = 1
CSV_PATHS_DEFAULT = 20

_GENERATOR = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "builtin": {"enum": ["H1", "H2", "H3", "step", "zero"]},
        "params": {"type": "object", "additionalProperties": {"type": "number"}},
        "pieces": {"type": "array", "items": {"type": "object"}},
        "point_values": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    },
}
_TERMINAL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": ["identity", "shift", "square", "positive_part", "abs", "constant"]},
        "params": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}
_EQUATION = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type"],
    "properties": {
        "type": {"enum": ["zero", "pure", "abc", "dominated", "pde"]},
        "a": {"type": "number", "minimum": 0},
        "b": {"type": "number", "minimum": 0},
        "c": {"type": "number", "minimum": 0},
        "sign": {"enum": [-1, 1]},
        "H": {"enum": ["zero", "H1", "g", "quadratic"]},
        "dominating_f": _GENERATOR,
    },
}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "scenario", "seed", "generator", "terminal", "solver", "checks"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "scenario": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "generator": _GENERATOR,
        "terminal": _TERMINAL,
        "equation": _EQUATION,
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_paths", "n_steps"],
            "properties": {
                "n_paths": {"type": "integer", "minimum": 1},
                "n_steps": {"type": "integer", "minimum": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "method": {"enum": ["quadrature", "regression"]},
                "basis_degree": {"type": "integer", "minimum": 0, "maximum": 8},
                "basis": {"enum": ["poly", "spline"]},
                "order": {"type": "integer", "minimum": 5, "maximum": 200},
                "picard_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {
                        "enum": [
                            "y0_reference", "ito_krylov", "residual_decay", "krylov_bound", "occupation",
                            "comparison", "ae_uniqueness", "sandwich", "square_integrability",
                            "cole_hopf", "mc_fd",
                        ]
                    }
                },
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"csv_paths": {"type": "integer", "minimum": 0}},
        },
    },
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------- validation
def _line_of(text: str, path) -> int:
    """Best-effort line number of the JSON node at ``path``."""
    dec = json.JSONDecoder()
    ws = re.compile(r"[\s,]*")
    pos = 0
    for key in path:
        if isinstance(key, str):
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
            if m is None:
                break
            pos = m.start()
        else:
            m = re.compile(r"\[").search(text, pos)
            if m is None:
                break
            pos = ws.match(text, m.end()).end()
            try:
                for _ in range(key):
                    pos = ws.match(text, dec.raw_decode(text, pos)[1]).end()
            except ValueError:
                break
    return text.count("\n", 0, pos) + 1


def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        extra = re.search(r"'([^']+)' (?:was|were) unexpected", err.message)
        line = _line_of(text, path + [extra.group(1)] if extra else path)
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ConfigError(f"{source}:{line}: {where}: {err.message}")
    return cfg


# --------------------------------------------------------------- building
def make_generator(desc: dict) -> GeneratorSpec:
    if "builtin" in desc:
        spec = builtin(desc["builtin"], **desc.get("params", {}))
    elif "pieces" in desc:
        spec = GeneratorSpec.from_json({"pieces": desc["pieces"]})
    else:
        spec = builtin("zero")
    pv = desc.get("point_values")
    if pv:
        spec = GeneratorSpec(spec.pieces, tuple(tuple(p) for p in pv), spec.eta_bound, spec.name)
    return spec


def make_terminal(desc: dict) -> bsde.TerminalCondition:
    return bsde.terminal(desc["name"], **desc.get("params", {}))


class Experiment:
    """Lazily solved scenario shared by the checks."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        s = cfg["solver"]
        self.T = float(s.get("T", 1.0))
        self.n_steps = int(s["n_steps"])
        self.n_paths = int(s["n_paths"])
        self.method = s.get("method", "quadrature")
        self.order = int(s.get("order", 96))
        self.degree = int(s.get("basis_degree", 4))
        self.basis = s.get("basis", "poly")
        self.picard_tol = float(s.get("picard_tol", bsde.PICARD_TOL))
        self.seed = int(cfg["seed"])
        self.f = make_generator(cfg["generator"])
        self.xi = make_terminal(cfg["terminal"])
        self.eq = cfg.get("equation", {"type": "pure"})
        self._cache: dict = {}

    def ensemble(self, refine: int = 1):
        key = ("ens", refine)
        if key not in self._cache:
            fine = sample_brownian(TimeGrid(self.T, self.n_steps * refine), self.n_paths, self.seed)
            self._cache[key] = fine
        return self._cache[key]

    def coupled(self, factor: int):
        """(coarse, fine) ensembles built from the same Brownian paths."""
        fine = self.ensemble(factor)
        return fine.coarsen(factor), fine

    def params(self, f: GeneratorSpec | None = None) -> DominatingParams:
        e = self.eq
        f = self.f if f is None else f
        return DominatingParams(float(e.get("a", 0.0)), float(e.get("b", 0.0)), float(e.get("c", 0.0)), f)

    def solve(self, ens=None, f: GeneratorSpec | None = None, xi=None, eq: dict | None = None):
        ens = self.ensemble() if ens is None else ens
        f = self.f if f is None else f
        xi = self.xi if xi is None else xi
        eq = self.eq if eq is None else eq
        kind = eq["type"]
        kw = dict(order=self.order, basis_degree=self.degree, basis=self.basis)
        if kind == "zero":
            return bsde.solve_zero_generator(xi, ens, self.method, **kw)
        if kind in ("pure", "pde"):
            return bsde.solve_qbsde_pure(f, xi, ens, self.method, **kw)
        p = DominatingParams(float(eq.get("a", 0.0)), float(eq.get("b", 0.0)), float(eq.get("c", 0.0)), f)
        if kind == "abc":
            return bsde.solve_qbsde_abc(p, xi, ens, self.method, float(eq.get("sign", 1)), **kw)
        return self.solve_dominated(ens, xi, eq)[0]

    def dominating(self, eq: dict | None = None) -> DominatingParams:
        eq = self.eq if eq is None else eq
        fd = make_generator(eq["dominating_f"]) if "dominating_f" in eq else self.f
        return DominatingParams(float(eq.get("a", 0.0)), float(eq.get("b", 0.0)), float(eq.get("c", 0.0)), fd)

    def driver_H(self, eq: dict | None = None) -> bsde.Driver:
        eq = self.eq if eq is None else eq
        name = eq.get("H", "zero")
        if name == "zero":
            return bsde.Driver.zero()
        if name == "H1":
            return bsde.Driver.quadratic(builtin("H1"))
        if name == "quadratic":
            return bsde.Driver.quadratic(self.f)
        return bsde.Driver.abc(self.dominating(eq), 1.0, symmetric=True)

    def solve_dominated(self, ens=None, xi=None, eq=None, enforce: bool = True):
        ens = self.ensemble() if ens is None else ens
        xi = self.xi if xi is None else xi
        eq = self.eq if eq is None else eq
        key = ("dom", id(ens), id(xi), json.dumps(eq, sort_keys=True), enforce)
        if key not in self._cache:
            self._cache[key] = bsde.solve_dominated(
                self.driver_H(eq), self.dominating(eq), xi, ens, self.method,
                enforce_sandwich=enforce, order=self.order, basis_degree=self.degree, basis=self.basis,
            )
        return self._cache[key]

    @property
    def solution(self):
        if "main" not in self._cache:
            self._cache["main"] = self.solve()
        return self._cache["main"]


# ----------------------------------------------------------------- checks
def _psi(name: str):
    if name == "inverse_quadratic":
        return lambda x: 1.0 / (1.0 + np.asarray(x) ** 2)
    if name == "one":
        return lambda x: np.ones_like(np.asarray(x, dtype=float))
    if name == "zero":
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    raise ConfigError(f"unknown psi {name!r}")


def _phi(name: str, exp: Experiment) -> verify.TestFunction:
    if name == "identity":
        return verify.TestFunction.identity()
    if name == "square":
        return verify.TestFunction.square()
    if name == "u":
        return verify.TestFunction.from_transform(build_u(exp.f))
    raise ConfigError(f"unknown phi {name!r}")


def run_check(exp: Experiment, chk: dict) -> verify.CheckReport:
    name = chk["name"]
    if name == "y0_reference":
        sol = exp.solution
        target = float(chk["value"])
        tol = float(chk.get("tol", 1e-6))
        se = sol.Y0_se
        allowed = tol + 3.0 * se
        err = abs(sol.Y0 - target)
        return verify.CheckReport("y0_reference", sol.Y0, target, se, allowed, "pass" if err <= allowed else "fail",
                                  {"n_paths": sol.n_paths, "n_steps": sol.grid.n_steps, "seed": exp.seed})
    if name == "ito_krylov":
        phi = _phi(chk.get("phi", "square"), exp)
        factor = int(chk.get("refine", 4))
        if factor <= 1:
            return verify.check_ito_krylov(exp.solution, phi)
        c, f = exp.coupled(factor)
        return verify.check_ito_krylov(exp.solve(c), phi, exp.solve(f))
    if name == "residual_decay":
        factor = int(chk.get("refine", 4))
        c, f = exp.coupled(factor)
        return verify.check_residual_decay(exp.solve(c), exp.solve(f))
    if name == "krylov_bound":
        return verify.check_krylov_bound(
            exp.solution, _psi(chk.get("psi", "inverse_quadratic")), float(chk.get("R", 1.0)), exp.f,
            bound_scale=float(chk.get("bound_scale", 1.0)),
        )
    if name == "occupation":
        return verify.check_occupation(exp.solution, _psi(chk.get("psi", "inverse_quadratic")))
    if name == "comparison":
        other_f = make_generator(chk["generator"]) if "generator" in chk else exp.f
        other_xi = make_terminal(chk["terminal"]) if "terminal" in chk else exp.xi
        other = exp.solve(f=other_f, xi=other_xi)
        mode = chk.get("mode", "pathwise_strict" if exp.method == "quadrature" else "statistical")
        a, b = (exp.solution, other) if chk.get("order", "self_below") == "self_below" else (other, exp.solution)
        return verify.check_comparison(a, b, mode)
    if name == "ae_uniqueness":
        pv = chk.get("point_values", [[0.5, 7.0], [0.0, -3.0]])
        spec = GeneratorSpec(exp.f.pieces, tuple(tuple(p) for p in pv), exp.f.eta_bound, exp.f.name)
        return verify.check_ae_uniqueness(exp.solution, exp.solve(f=spec))
    if name == "sandwich":
        sol, pair = exp.solve_dominated(enforce=False)
        tol = chk.get("tol", 1e-6 if exp.method == "quadrature" else None)
        return verify.check_sandwich(pair, sol, tol)
    if name == "square_integrability":
        return verify.check_square_integrability(exp.solution)
    if name == "cole_hopf":
        n = int(chk.get("n_x", 401))
        return cole_hopf_check(step_fixture(exp.f), n, int(chk.get("n_t", n - 1)))
    if name == "mc_fd":
        probes = [tuple(p) for p in chk.get("probes", [[0, 0], [0, 0.5], [0, -0.5], [0.5, 0], [0.5, 1.0]])]
        return mc_fd_check(step_fixture(exp.f), probes, n_paths=exp.n_paths, n_steps=exp.n_steps, seed=exp.seed)
    raise ConfigError(f"unknown check {name!r}")


# -------------------------------------------------------------------- run
def run_config(cfg: dict, out_root: Path) -> int:
    exp = Experiment(cfg)
    out = Path(out_root) / cfg["scenario"]
    out.mkdir(parents=True, exist_ok=True)
    saved, bsde.PICARD_TOL = bsde.PICARD_TOL, exp.picard_tol
    try:
        reports = [run_check(exp, chk) for chk in cfg["checks"]]
        sol = exp.solution if exp.eq["type"] != "pde" else None
    finally:
        bsde.PICARD_TOL = saved
    n_csv = int(cfg.get("output", {}).get("csv_paths", CSV_PATHS_DEFAULT))
    if sol is not None:
        _write_solution(out / "solution.csv", sol, n_csv)
    with open(out / "reports.jsonl", "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    header = [f"scenario: {cfg['scenario']}", f"seed: {exp.seed}"]
    if sol is not None:
        header.append(f"Y0: {sol.Y0:.12g}  (se {sol.Y0_se:.3g}, method {sol.method})")
    summary = "\n".join(header) + "\n\n" + verify.format_table(reports) + "\n"
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)
    return 0 if all(r.passed for r in reports) else 1


def _write_solution(path: Path, sol, n_paths: int) -> None:
    t = sol.grid.nodes
    n = sol.grid.n_steps
    with open(path, "w") as fh:
        fh.write("path_id,t,Y,Z\n")
        for j in range(min(n_paths, sol.n_paths)):
            for k in range(n + 1):
                z = "" if k == n else "%.17g" % sol.Z[j, k]
                fh.write("%d,%.17g,%.17g,%s\n" % (j, t[k], sol.Y[j, k], z))


# ---------------------------------------------------------------- presets
def _base(scenario: str, description: str, generator: dict, terminal: dict, solver: dict, checks: list, equation=None) -> dict:
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "description": description,
        "seed": 20240611,
        "generator": generator,
        "terminal": terminal,
        "solver": {"T": 1.0, "method": "quadrature", **solver},
        "checks": checks,
    }
    if equation is not None:
        cfg["equation"] = equation
    return cfg


PRESETS = {
    "identity": lambda: _base(
        "identity", "f = 0, xi = W_T; checks ito_krylov (phi = x), y0_reference",
        {"builtin": "zero"}, {"name": "identity"}, {"n_paths": 200, "n_steps": 20},
        [{"name": "ito_krylov", "phi": "identity", "refine": 1}, {"name": "y0_reference", "value": 0.0, "tol": 1e-12}],
        {"type": "zero"},
    ),
    "step-qbsde": lambda: _base(
        "step-qbsde", "f = 1_[0,1], xi = W_1; checks y0_reference, residual_decay",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 1000, "n_steps": 25},
        [{"name": "y0_reference", "value": STEP_IDENTITY_Y0, "tol": 1e-6}, {"name": "residual_decay", "refine": 4}],
        {"type": "pure"},
    ),
    "h1": lambda: _base(
        "h1", "H1 = sin(y)|z|^2 on [-pi, pi/2], xi = W_1; checks square_integrability, residual_decay",
        {"builtin": "H1"}, {"name": "identity"}, {"n_paths": 1000, "n_steps": 25},
        [{"name": "square_integrability"}, {"name": "residual_decay", "refine": 4}],
        {"type": "pure"},
    ),
    "h2": lambda: _base(
        "h2", "H2 = (1_[0,1] - 1_[2,3])|z|^2, xi = W_1 + 1; checks square_integrability, residual_decay",
        {"builtin": "H2"}, {"name": "shift", "params": {"s": 1.0}}, {"n_paths": 1000, "n_steps": 25},
        [{"name": "square_integrability"}, {"name": "residual_decay", "refine": 4}],
        {"type": "pure"},
    ),
    "h3": lambda: _base(
        "h3", "H3 = |z|^2 / ((1+y^2) sqrt|y|), xi = W_1; checks square_integrability, krylov_bound",
        {"builtin": "H3"}, {"name": "identity"}, {"n_paths": 1000, "n_steps": 25},
        [{"name": "square_integrability"}, {"name": "krylov_bound", "R": 1.0}],
        {"type": "pure"},
    ),
    "abc": lambda: _base(
        "abc", "1 + |y| + f(y)|z|^2 with f = 1_[0,1], xi = W_1; checks square_integrability, comparison",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 500, "n_steps": 25},
        [{"name": "square_integrability"},
         {"name": "comparison", "terminal": {"name": "shift", "params": {"s": 1.0}}}],
        {"type": "abc", "a": 1.0, "b": 1.0, "c": 0.0},
    ),
    "dominated": lambda: _base(
        "dominated", "H = H1 dominated by 0.5 + 0.5|y| + 0.5|z| + |sin y||z|^2, xi = |W_1|; checks sandwich",
        {"builtin": "H1"}, {"name": "abs"}, {"n_paths": 300, "n_steps": 25},
        [{"name": "sandwich"}],
        {"type": "dominated", "a": 0.5, "b": 0.5, "c": 0.5, "H": "H1",
         "dominating_f": {"pieces": [{"lo": 0.0, "hi": math.pi, "kind": "sin", "coeffs": [1.0, 1.0, 0.0]}]}},
    ),
    "krylov-step": lambda: _base(
        "krylov-step", "f = 1_[0,1], xi = W_1, psi = 1/(1+x^2), R = 1; checks krylov_bound, occupation",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 2000, "n_steps": 50},
        [{"name": "krylov_bound", "psi": "inverse_quadratic", "R": 1.0}, {"name": "occupation"}],
        {"type": "pure"},
    ),
    "ito-krylov": lambda: _base(
        "ito-krylov", "f = 1_[0,1], xi = W_1; checks ito_krylov with phi = x^2 and phi = u",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 2000, "n_steps": 25},
        [{"name": "ito_krylov", "phi": "square", "refine": 4}, {"name": "ito_krylov", "phi": "u", "refine": 4}],
        {"type": "pure"},
    ),
    "comparison": lambda: _base(
        "comparison", "xi1 = W_1 - 1, f = 0 below xi2 = W_1, g = 1_[0,1]; checks comparison",
        {"builtin": "zero"}, {"name": "shift", "params": {"s": -1.0}}, {"n_paths": 1000, "n_steps": 25},
        [{"name": "comparison", "generator": {"builtin": "step"}, "terminal": {"name": "identity"}}],
        {"type": "pure"},
    ),
    "ae-uniqueness": lambda: _base(
        "ae-uniqueness", "f = 1_[0,1] against a copy altered at two points; checks ae_uniqueness",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 500, "n_steps": 25},
        [{"name": "ae_uniqueness", "point_values": [[0.5, 7.0], [0.0, -3.0]]}],
        {"type": "pure"},
    ),
    "pde-crosscheck": lambda: _base(
        "pde-crosscheck", "f = 1_[0,1], psi = max(x,0); checks cole_hopf, mc_fd",
        {"builtin": "step"}, {"name": "positive_part"}, {"n_paths": 40000, "n_steps": 20},
        [{"name": "cole_hopf", "n_x": 401, "n_t": 400}, {"name": "mc_fd"}],
        {"type": "pde"},
    ),
    "regression-step": lambda: _base(
        "regression-step", "f = 1_[0,1], xi = W_1 by least squares; checks y0_reference, comparison",
        {"builtin": "step"}, {"name": "identity"}, {"n_paths": 20000, "n_steps": 20, "method": "regression", "basis": "spline"},
        [{"name": "y0_reference", "value": STEP_IDENTITY_Y0, "tol": 0.0},
         {"name": "comparison", "terminal": {"name": "shift", "params": {"s": 0.5}}}],
        {"type": "pure"},
    ),
}


def preset_config(name: str, seed: int | None = None) -> dict:
    if name not in PRESETS:
        raise KeyError(name)
    cfg = copy.deepcopy(PRESETS[name]())
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def list_presets() -> list[tuple[str, str]]:
    return [(name, PRESETS[name]()["description"]) for name in PRESETS]


# -------------------------------------------------------------------- main
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qbsde",
        description="Quadratic BSDE experiments.",
        epilog=(
            "CSV columns: solution.csv = path_id,t,Y,Z (Z empty at t=T); "
            "path dumps = path_id,t,W,X; PDE grids = t,x,v; transform tables = x,u,du. "
            "Environment: QBSDE_OUT default output directory, QBSDE_SEED default preset seed."
        ),
    )
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment config (JSON)")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    pr = sub.add_parser("preset", help="run a named preset")
    pr.add_argument("name")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--out", default=None)
    pr.add_argument("--dump", action="store_true", help="print the preset config and exit")
    sub.add_parser("list", help="list presets")
    return p


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("QBSDE_OUT", "qbsde_out"))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.cmd == "list":
        for name, desc in list_presets():
            print(f"{name:<16} {desc}")
        return 0
    if args.cmd == "preset":
        seed = args.seed
        if seed is None and os.environ.get("QBSDE_SEED"):
            seed = int(os.environ["QBSDE_SEED"])
        try:
            cfg = preset_config(args.name, seed)
        except KeyError:
            print(f"unknown preset {args.name!r}; see 'qbsde list'", file=sys.stderr)
            return 2
        if args.dump:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        return run_config(cfg, _out_dir(args.out))
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"{args.config}:0: cannot read config: {exc.strerror}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text, args.config)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return run_config(cfg, _out_dir(args.out))


if __name__ == "__main__":
    sys.exit(main())
