"""Command-line front end: ``gpccopf <command> [--config FILE] [flags]``.

Every command reads one YAML/JSON config, applies flag overrides, echoes
the effective config into the output directory and writes deterministic
files there. Wall-clock times are printed, never written, so reruns with
the same config produce byte-identical outputs.

Exit codes: 0 success, 1 module error, 2 usage or config error, 3 output
written but the solver or a baseline did not converge.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .baselines import (ScenarioOptions, ScenarioSet, base_case, full_recourse, mc_validate,
                        propagated_mean_rmse, rmse_report, scenario_cc_opf)
from .ccopf import CcOpfProblem, CcOpfSolution, solve
from .dataset import Dataset, SamplingConfig, build_dataset
from .errors import GpCcOpfError, ValidationError
from .gp import FitOptions, MultiGpModel, fit_multi
from .grid import OutputSpec, load_case, save_case
from .grid.io import parse_matpower
from .opf import reference_point
from .propagation import METHODS

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_UNCONVERGED = 0, 1, 2, 3

DEFAULTS = {
    "case": "ieee9",
    "out_dir": "run",
    "n_train": 75,
    "n_val": 25,
    "output_spec": None,
    "sampling": SamplingConfig().to_dict(),
    "train": {"restarts": 5, "max_iter": 300, "seed": 0},
    "eps_u": 0.001,
    "eps_y": 0.025,
    "load_sigma": 0.15,
    "res_sigma": 0.30,
    "method": "ta1",
    "balance_losses": True,
    "solver": {"tol": 1e-9, "max_iter": 200},
    "validate": {"n_samples": 1000, "seed": 7},
    "compare": {"methods": ["ta1", "ta2", "em"], "baselines": ["A", "B"],
                "scenarios": [20, 50, 100], "scenario_seeds": [0], "mean_rmse_samples": 200},
}


class ConfigError(Exception):
    pass


# --- configuration -----------------------------------------------------------
def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg, key, value):
    node = cfg
    parts = key.split(".")
    if parts[0] not in DEFAULTS:
        raise ConfigError(f"unknown config key {parts[0]!r}")
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def build(cls, path=None, overrides=()):
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} not found")
            loaded = yaml.safe_load(p.read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError("config must be a mapping")
            unknown = set(loaded) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            data = _merge(data, loaded)
        for key, value in overrides:
            _set_dotted(data, key, value)
        cfg = cls(data)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def validate(self):
        d = self.data
        for name in ("eps_u", "eps_y"):
            if not 0.0 < float(d[name]) < 0.5:
                raise ConfigError(f"{name} must lie in (0, 0.5)")
        if d["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if int(d["n_train"]) < 1 or int(d["n_val"]) < 0:
            raise ConfigError("n_train must be >= 1 and n_val >= 0")
        if float(d["load_sigma"]) < 0 or float(d["res_sigma"]) < 0:
            raise ConfigError("sigma multipliers must be nonnegative")
        try:
            SamplingConfig.from_dict(d["sampling"])
        except (TypeError, ValidationError) as exc:
            raise ConfigError(f"sampling: {exc}") from exc

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def case(self):
        try:
            return load_case(self.data["case"])
        except FileNotFoundError as exc:
            raise ConfigError(f"case {self.data['case']!r} not found") from exc

    def spec(self, case):
        s = self.data["output_spec"]
        return OutputSpec.default(case) if s is None else OutputSpec.from_dict(s)

    def sampling(self):
        return SamplingConfig.from_dict(self.data["sampling"])

    def sigma_w(self, case):
        return np.concatenate([float(self.data["load_sigma"]) * case.load_p_ref,
                               float(self.data["res_sigma"]) * case.res_p_ref])

    def echo(self, command):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.data, indent=1, sort_keys=True) + "\n"
        (self.out_dir / f"config-{command}.json").write_text(text)


# --- helpers -----------------------------------------------------------------
def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _dataset(cfg):
    path = cfg.out_dir / "dataset.csv"
    if not path.exists():
        raise ConfigError(f"{path} missing; run gen-data first")
    data = Dataset.load(path)
    n_train = int(cfg["n_train"])
    if n_train > len(data):
        raise ConfigError(f"n_train={n_train} exceeds the {len(data)} dataset rows")
    return data.split(n_train)


def _model(cfg):
    path = cfg.out_dir / "model.json"
    if not path.exists():
        raise ConfigError(f"{path} missing; run train first")
    return MultiGpModel.load(path)


def _problem(cfg, case, model, method):
    return CcOpfProblem.from_case(case, model, cfg.spec(case), eps_u=float(cfg["eps_u"]),
                                  eps_y=float(cfg["eps_y"]), method=method,
                                  sigma_w=cfg.sigma_w(case),
                                  balance_losses=bool(cfg["balance_losses"]))


def _solution_path(cfg, method):
    return cfg.out_dir / f"solution-{method}.json"


def _timed(label, fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    print(f"{label}: {time.perf_counter() - t:.2f} s")
    return out


# --- commands ----------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig) -> int:
    case = cfg.case()
    n = int(cfg["n_train"]) + int(cfg["n_val"])
    data = _timed("gen-data", build_dataset, case, cfg.sampling(), n, cfg.spec(case))
    data.save(cfg.out_dir / "dataset.csv")
    print(f"wrote {len(data)} rows ({data.X.shape[1]} inputs, {data.Y.shape[1]} outputs); "
          f"power-flow failures resampled: {data.failures}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    train, val = _dataset(cfg)
    t = cfg["train"]
    opts = FitOptions(restarts=int(t["restarts"]), max_iter=int(t["max_iter"]), seed=int(t["seed"]))
    model = _timed("train", fit_multi, train.X, train.Y, opts, train.x_labels, train.y_labels)
    model.save(cfg.out_dir / "model.json")
    if len(val):
        report = rmse_report(model, val.X, val.Y, val.y_labels)
        _write(cfg.out_dir / "rmse.csv", report.to_csv())
        print(f"validation RMSE (average over outputs): {report.average:.3e} p.u.")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    case = cfg.case()
    model = _model(cfg)
    method = cfg["method"]
    problem = _problem(cfg, case, model, method)
    s = cfg["solver"]
    sol = _timed(f"solve ({method})", solve, problem, tol=float(s["tol"]),
                 max_iter=int(s["max_iter"]))
    _write(_solution_path(cfg, method), sol.to_text())
    _write(cfg.out_dir / f"solution-{method}-log.csv", sol.log_csv())
    print(f"{method}: status={sol.status} cost={sol.cost:.6g} iterations={sol.iterations} "
          f"max_violation={sol.max_violation:.3g}")
    if sol.binding:
        print("binding: " + ", ".join(sol.binding))
    return EXIT_OK if sol.converged else EXIT_UNCONVERGED


def _load_solution(cfg, method):
    path = _solution_path(cfg, method)
    if not path.exists():
        return None
    return CcOpfSolution.from_text(path.read_text())


def cmd_validate(cfg: RunConfig) -> int:
    case = cfg.case()
    model = _model(cfg)
    method = cfg["method"]
    sol = _load_solution(cfg, method)
    if sol is None:
        raise ConfigError(f"{_solution_path(cfg, method)} missing; run solve first")
    v = cfg["validate"]
    report = _timed("validate", mc_validate, case, sol.u, sol.alpha, int(v["n_samples"]),
                    int(v["seed"]), cfg.spec(case), model, {method: 3.0 * sol.sigma_y},
                    cfg.sigma_w(case), sol.cost)
    _write(cfg.out_dir / f"validation-{method}.csv", report.to_csv())
    _write(cfg.out_dir / f"validation-{method}.json", report.summary_text())
    print(f"{method}: joint violation {report.joint_violation:.4f} over {report.n_samples} "
          f"samples ({report.failures} power-flow failures)")
    return EXIT_OK if sol.converged else EXIT_UNCONVERGED


def cmd_compare(cfg: RunConfig) -> int:
    """Cost and violation of GP solutions against the model-based baselines."""
    case = cfg.case()
    spec = cfg.spec(case)
    model = _model(cfg)
    _, val = _dataset(cfg)
    c = cfg["compare"]
    v = cfg["validate"]
    n_mc, seed = int(v["n_samples"]), int(v["seed"])
    sigma = cfg.sigma_w(case)
    rows, methods_rows, analytic = [], [], {}
    ok = True
    spread = None

    def validate(u, alpha, cost, **kw):
        return mc_validate(case, u, alpha, n_mc, seed, spec, sigma=sigma, cost=cost, **kw)

    for method in c["methods"]:
        sol = _load_solution(cfg, method)
        if sol is None:
            print(f"skipping {method}: no solution file")
            ok = False
            continue
        analytic[method] = 3.0 * sol.sigma_y
        rep = validate(sol.u, sol.alpha, sol.cost, model=model)
        spread = spread or rep
        rows.append([f"GP CC-OPF ({method})", sol.cost, rep.joint_violation, rep.max_violation,
                     rep.failures, sol.status])
        methods_rows.append([method, sol.iterations, sol.status, sol.cost])
        ok &= sol.converged
    baselines = [str(b).upper() for b in c.get("baselines", [])]
    if "B" in baselines:
        try:
            b = base_case(case, spec)
            rep = validate(b.u, b.alpha, b.cost)
            rows.append(["B (base case)", b.cost, rep.joint_violation, rep.max_violation,
                         rep.failures, "converged"])
        except GpCcOpfError as exc:
            print(f"base case failed: {exc}")
            rows.append(["B (base case)", float("nan"), float("nan"), float("nan"), 0, "failed"])
            ok = False
    if "A" in baselines:
        sc = ScenarioSet.sample(case, n_mc, seed, stream=1, sigma=sigma)
        a = _timed("full recourse", full_recourse, case, sc, spec)
        rows.append(["A (full recourse)", a.mean_cost, 0.0, 0.0, a.failures,
                     "converged" if a.failures == 0 else f"{a.failures} failed"])
        ok &= a.failures == 0
    for S in c.get("scenarios", []):
        for sseed in c.get("scenario_seeds", [0]):
            label = f"{S} CC-OPF (seed {sseed})"
            try:
                res = scenario_cc_opf(case, ScenarioSet.sample(case, int(S), int(sseed), stream=2,
                                                               sigma=sigma), spec=spec)
            except GpCcOpfError as exc:
                print(f"{label} failed: {exc}")
                rows.append([label, float("nan"), float("nan"), float("nan"), 0, "failed"])
                ok = False
                continue
            rep = validate(res.u, res.alpha, res.cost)
            rows.append([label, res.cost, rep.joint_violation, rep.max_violation, rep.failures,
                         res.status])
            ok &= res.converged
    _write(cfg.out_dir / "comparison.csv",
           _table(["approach", "cost", "joint_violation", "max_constraint_violation",
                   "mc_failures", "status"], rows))
    if methods_rows and len(val):
        mean_rmse = propagated_mean_rmse(case, model, val.X, None, [r[0] for r in methods_rows],
                                         int(c.get("mean_rmse_samples", 200)), seed, spec, sigma)
        for r in methods_rows:
            r.append(mean_rmse[r[0]])
        _write(cfg.out_dir / "methods.csv",
               _table(["method", "iterations", "status", "cost", "mean_rmse"], methods_rows))
    if spread is not None:
        spread.analytic = analytic
        _write(cfg.out_dir / "spread.csv", spread.to_csv())
    for r in rows:
        print(f"{r[0]:<28} cost={r[1]:.6g} joint_violation={r[2]:.4f} status={r[5]}")
    return EXIT_OK if ok else EXIT_UNCONVERGED


def _table(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def cmd_convert_case(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"{src} not found")
    if src.suffix == ".m":
        res = []
        for item in args.renewable or []:
            bus, _, mw = item.partition(":")
            try:
                res.append((int(bus), float(mw)))
            except ValueError as exc:
                raise ConfigError(f"bad --renewable {item!r}; expected BUS:MW") from exc
        case = parse_matpower(src.read_text(), renewables=res, res_gamma=args.res_gamma,
                              load_sigma=args.load_sigma, res_sigma=args.res_sigma,
                              name=args.name)
    else:
        case = load_case(src)
    if args.reference_opf:
        case = reference_point(case, voltage_margin=args.voltage_margin,
                               fraction=args.limit_fraction)
    save_case(case, args.output)
    print(f"wrote {args.output}: {len(case.buses)} buses, {len(case.generators)} generators, "
          f"{len(case.loads)} loads, {len(case.renewables)} renewables, "
          f"loss factor {case.loss_factor:.6f}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------
FLAG_KEYS = {
    "case": "case", "out_dir": "out_dir", "n_train": "n_train", "n_val": "n_val",
    "seed": "sampling.seed", "noise": "sampling.noise", "eps_u": "eps_u", "eps_y": "eps_y",
    "method": "method", "restarts": "train.restarts", "train_seed": "train.seed",
    "n_samples": "validate.n_samples", "mc_seed": "validate.seed",
    "load_sigma": "load_sigma", "res_sigma": "res_sigma",
}


def _parse_set(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, yaml.safe_load(value)


def build_parser():
    parser = argparse.ArgumentParser(prog="gpccopf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--case", help="bundled case name or case file")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--n-train", dest="n_train", type=int)
    common.add_argument("--n-val", dest="n_val", type=int)
    common.add_argument("--seed", type=int, help="sampling seed")
    common.add_argument("--noise", type=float, help="output noise standard deviation")
    common.add_argument("--eps-u", dest="eps_u", type=float)
    common.add_argument("--eps-y", dest="eps_y", type=float)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--restarts", type=int)
    common.add_argument("--train-seed", dest="train_seed", type=int)
    common.add_argument("--n-samples", dest="n_samples", type=int, help="Monte-Carlo samples")
    common.add_argument("--mc-seed", dest="mc_seed", type=int)
    common.add_argument("--load-sigma", dest="load_sigma", type=float)
    common.add_argument("--res-sigma", dest="res_sigma", type=float)
    common.add_argument("--balance-no-losses", dest="balance_no_losses", action="store_true",
                        help="balance generation against the plain forecast net load")
    common.add_argument("--set", dest="overrides", action="append", type=_parse_set, default=[],
                        metavar="KEY=VALUE", help="override any config key (dotted path)")
    for name, text in [("gen-data", "sample and label a dataset"),
                       ("train", "fit the GP surrogate"),
                       ("solve", "solve the GP chance-constrained OPF"),
                       ("validate", "Monte-Carlo validation of a solution"),
                       ("compare", "compare GP solutions with the baselines")]:
        sub.add_parser(name, parents=[common], help=text)
    conv = sub.add_parser("convert-case", help="convert a MATPOWER or native case")
    conv.add_argument("input")
    conv.add_argument("output")
    conv.add_argument("--renewable", action="append", metavar="BUS:MW")
    conv.add_argument("--res-gamma", dest="res_gamma", type=float, default=0.3)
    conv.add_argument("--load-sigma", dest="load_sigma", type=float, default=0.15)
    conv.add_argument("--res-sigma", dest="res_sigma", type=float, default=0.30)
    conv.add_argument("--name")
    conv.add_argument("--reference-opf", dest="reference_opf", action="store_true",
                      help="replace reference dispatch and voltages by an AC-OPF")
    conv.add_argument("--voltage-margin", dest="voltage_margin", type=float, default=0.02)
    conv.add_argument("--limit-fraction", dest="limit_fraction", type=float, default=0.05)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "solve": cmd_solve,
            "validate": cmd_validate, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert-case":
            return cmd_convert_case(args)
        overrides = [(key, getattr(args, flag)) for flag, key in FLAG_KEYS.items()
                     if getattr(args, flag) is not None]
        if args.balance_no_losses:
            overrides.append(("balance_losses", False))
        cfg = RunConfig.build(args.config, overrides + list(args.overrides))
        cfg.echo(args.command)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GpCcOpfError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
