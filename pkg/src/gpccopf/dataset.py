"""Synthetic training data: sampled injections labelled by AC power flow.

Each row draws correlated and local log-normal factors for loads and
renewables, derives reactive powers from the fixed power ratios, samples a
balanced dispatch and records the monitored outputs plus Gaussian noise.
Every row uses its own random stream derived from ``(seed, row, attempt)``,
so rows can be produced in any order with identical results.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCase, GpCcOpfError, TooManyFailures, ValidationError
from .grid.case import GridCase
from .grid.powerflow import Injections, OutputSpec, extract_outputs, solve_ac_pf

MAX_FAILURE_RATE = 0.2


@dataclass(frozen=True)
class SamplingConfig:
    """Parameters of the injection and dispatch sampler.

    The ``(mu, sigma)`` pairs parametrize the normal distribution underlying
    each log-normal factor. With the defaults the correlated and local
    location parameters cancel (``-1 + 1``), so loads and renewables both
    have their reference values as median.
    """

    load_corr: tuple = (-1.0, 0.1)
    load_local: tuple = (1.0, 0.05)
    res_corr: tuple = (-1.0, 0.4)
    res_local: tuple = (1.0, 0.3)
    psi: tuple = (0.8, 1.2)
    loss_factor: float | None = None
    noise: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("load_corr", "load_local", "res_corr", "res_local", "psi"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        lo, hi = self.psi
        if not hi >= lo > 0:
            raise ValidationError("psi range must satisfy hi >= lo > 0")
        for name in ("load_corr", "load_local", "res_corr", "res_local"):
            if getattr(self, name)[1] < 0:
                raise ValidationError(f"{name}: negative sigma")
        if self.noise < 0:
            raise ValidationError("noise must be nonnegative")
        if self.loss_factor is not None and self.loss_factor < 1:
            raise ValidationError("loss_factor must be >= 1")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def row_rng(seed: int, row: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(row), int(attempt)])


def _lognormal(rng, mu_sigma, size=None):
    mu, sigma = mu_sigma
    return rng.lognormal(mu, sigma, size)


def _draw_injections(case, cfg, rng):
    n_l, n_r = len(case.loads), len(case.renewables)
    eta = _lognormal(rng, cfg.load_corr) * _lognormal(rng, cfg.load_local, n_l)
    nu = _lognormal(rng, cfg.res_corr) * _lognormal(rng, cfg.res_local, n_r)
    return eta * case.load_p_ref, nu * case.res_p_ref


def sample_injections(case: GridCase, cfg: SamplingConfig, n: int, start: int = 0) -> np.ndarray:
    """Active powers of loads then renewables, one row per sample.

    Returns
    -------
    ndarray, shape (n, n_loads + n_renewables)
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = [np.concatenate(_draw_injections(case, cfg, row_rng(cfg.seed, start + i)))
            for i in range(n)]
    return np.array(rows)


def _loss_factor(case, cfg):
    return case.loss_factor if cfg.loss_factor is None else cfg.loss_factor


def balanced_dispatch(case: GridCase, cfg: SamplingConfig, load_row, res_row, psi) -> np.ndarray:
    """Two-step dispatch for given jitter factors ``psi`` (one per controllable unit)."""
    rho = _loss_factor(case, cfg)
    ctrl = case.controllable
    ref = case.gen_p_ref[ctrl]
    total_load = float(np.sum(load_row))
    fixed = float(np.sum(np.delete(case.gen_p_ref, ctrl)))
    if np.sum(ref) == 0:
        raise DegenerateCase("controllable reference dispatch sums to zero")
    first = np.asarray(psi) * rho * total_load / np.sum(ref) * ref
    if np.sum(first) == 0:
        raise DegenerateCase("first-step dispatch sums to zero")
    target = rho * total_load - float(np.sum(res_row)) - fixed
    return first * (target / np.sum(first))


def sample_generation(case: GridCase, cfg: SamplingConfig, load_row, res_row,
                      rng: np.random.Generator) -> np.ndarray:
    """Balanced controllable dispatch with independent uniform jitter per unit."""
    psi = rng.uniform(cfg.psi[0], cfg.psi[1], case.n_u)
    return balanced_dispatch(case, cfg, load_row, res_row, psi)


def input_labels(case: GridCase):
    labels = [f"u:g{k}@{case.generators[k].bus}" for k in case.controllable]
    labels += [f"pl:{l.bus}" for l in case.loads]
    labels += [f"prs:{r.bus}" for r in case.renewables]
    return labels


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    x_labels: list
    y_labels: list
    seed: int
    case_fingerprint: str
    config: dict = field(default_factory=dict)
    failures: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValidationError("X and Y row counts differ")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.Y[rows], list(self.x_labels), list(self.y_labels),
                       self.seed, self.case_fingerprint, dict(self.config), self.failures)

    def split(self, n_train: int):
        """First ``n_train`` rows and the remainder (rows are already i.i.d.)."""
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    @property
    def fingerprint(self):
        h = hashlib.sha256(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Y).tobytes())
        return h.hexdigest()[:16]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.x_labels + self.y_labels)
        for x, y in zip(self.X, self.Y):
            w.writerow([repr(float(v)) for v in np.concatenate([x, y])])
        return buf.getvalue()

    def metadata(self):
        return {"seed": self.seed, "case_fingerprint": self.case_fingerprint,
                "n_inputs": len(self.x_labels), "n_outputs": len(self.y_labels),
                "rows": len(self), "failures": self.failures, "config": self.config}

    def save(self, path):
        """Write ``<path>`` (CSV) and ``<path>.json`` (metadata)."""
        path = Path(path)
        path.write_text(self.to_csv())
        Path(str(path) + ".json").write_text(json.dumps(self.metadata(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        nx = meta["n_inputs"]
        return cls(body[:, :nx], body[:, nx:], header[:nx], header[nx:], meta["seed"],
                   meta["case_fingerprint"], meta.get("config", {}), meta.get("failures", 0))


def build_dataset(case: GridCase, cfg: SamplingConfig, n: int, spec: OutputSpec | None = None,
                  noise: float | None = None, max_attempts: int = 50) -> Dataset:
    """Sample ``n`` labelled operating points.

    Parameters
    ----------
    case : GridCase
    cfg : SamplingConfig
    n : int
        Number of rows.
    spec : OutputSpec, optional
        Monitored outputs; :meth:`OutputSpec.default` when omitted.
    noise : float, optional
        Output noise standard deviation; ``cfg.noise`` when omitted.
    max_attempts : int
        Resampling cap per row.

    Raises
    ------
    TooManyFailures
        More than 20% of the attempted samples failed to solve.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = OutputSpec.default(case) if spec is None else spec
    spec.check(case)
    noise = cfg.noise if noise is None else noise
    X, Y = [], []
    failures = attempts = 0
    for row in range(n):
        for attempt in range(max_attempts):
            attempts += 1
            rng = row_rng(cfg.seed, row, attempt)
            load_p, res_p = _draw_injections(case, cfg, rng)
            u = sample_generation(case, cfg, load_p, res_p, rng)
            gen_p = case.gen_p_ref.copy()
            gen_p[case.controllable] = u
            try:
                sol = solve_ac_pf(case, Injections.from_dispatch(case, gen_p, load_p, res_p))
            except GpCcOpfError:
                failures += 1
                continue
            y = extract_outputs(case, sol, spec)
            if noise > 0:
                y = y + rng.normal(0.0, noise, y.size)
            X.append(np.concatenate([u, load_p, res_p]))
            Y.append(y)
            break
        else:
            raise TooManyFailures(f"row {row}: {max_attempts} consecutive power-flow failures")
    if failures > MAX_FAILURE_RATE * attempts:
        raise TooManyFailures(f"{failures} of {attempts} samples failed the power flow")
    config = cfg.to_dict()
    config["noise"] = noise
    config["output_spec"] = spec.to_dict()
    return Dataset(np.array(X), np.array(Y), input_labels(case), spec.labels(case), cfg.seed,
                   case.fingerprint, config, failures)


__all__ = ["SamplingConfig", "Dataset", "sample_injections", "sample_generation",
           "balanced_dispatch", "build_dataset", "input_labels", "row_rng"]
