"""Static network description and its derived matrices.

All quantities are per unit on ``base_mva``. ``Line.g + 1j * Line.b`` is the
series admittance ``1 / (r + jx)``, so an inductive line has ``b < 0``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np

from ..errors import ValidationError

BUS_KINDS = ("slack", "pv", "pq")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_min: float = 0.9
    v_max: float = 1.1
    v_set: float | None = None
    gs: float = 0.0
    bs: float = 0.0

    def validate(self):
        if self.kind not in BUS_KINDS:
            raise ValidationError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.v_min < self.v_max:
            raise ValidationError(f"bus {self.id}: v_min must be < v_max")
        if self.kind != "pq":
            if self.v_set is None:
                raise ValidationError(f"bus {self.id}: {self.kind} bus needs v_set")
            if not self.v_min <= self.v_set <= self.v_max:
                raise ValidationError(f"bus {self.id}: v_set outside [v_min, v_max]")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    g: float
    b: float
    s_max: float = float("inf")
    b_sh: float = 0.0
    tap: float = 1.0
    monitored: bool = True

    def validate(self):
        if not self.s_max > 0:
            raise ValidationError(f"line {self.from_bus}-{self.to_bus}: s_max must be > 0")
        if self.g == 0 and self.b == 0:
            raise ValidationError(f"line {self.from_bus}-{self.to_bus}: zero admittance")
        if not self.tap > 0:
            raise ValidationError(f"line {self.from_bus}-{self.to_bus}: tap must be > 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0
    controllable: bool = True
    p_ref: float = 0.0

    def validate(self):
        if min(self.c2, self.c1, self.c0) < 0:
            raise ValidationError(f"generator at bus {self.bus}: negative cost coefficient")
        if not self.p_min <= self.p_max:
            raise ValidationError(f"generator at bus {self.bus}: p_min > p_max")
        if not self.q_min <= self.q_max:
            raise ValidationError(f"generator at bus {self.bus}: q_min > q_max")
        if not self.p_min - 1e-9 <= self.p_ref <= self.p_max + 1e-9:
            raise ValidationError(f"generator at bus {self.bus}: p_ref outside limits")


@dataclass(frozen=True)
class Load:
    """Uncertain injection with constant power ratio ``q = gamma * p``.

    Used for both loads (consumption) and renewables (production).
    """

    bus: int
    p_ref: float
    q_ref: float = 0.0
    gamma: float | None = None
    sigma: float = 0.0

    def __post_init__(self):
        if self.gamma is None:
            gamma = self.q_ref / self.p_ref if self.p_ref != 0 else 0.0
            object.__setattr__(self, "gamma", gamma)

    def validate(self):
        if self.sigma < 0:
            raise ValidationError(f"injection at bus {self.bus}: negative sigma")
        if self.p_ref != 0 and not np.isclose(self.gamma, self.q_ref / self.p_ref, rtol=1e-9, atol=1e-12):
            raise ValidationError(f"injection at bus {self.bus}: gamma != q_ref / p_ref")


Renewable = Load


@dataclass(frozen=True)
class GridCase:
    buses: tuple
    lines: tuple
    generators: tuple
    loads: tuple = ()
    renewables: tuple = ()
    base_mva: float = 100.0
    loss_factor: float | None = None
    name: str = "case"

    def __post_init__(self):
        for name in ("buses", "lines", "generators", "loads", "renewables"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()
        if self.loss_factor is None:
            object.__setattr__(self, "loss_factor", self.reference_loss_factor())

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus id")
        for bus in self.buses:
            bus.validate()
        if sum(b.kind == "slack" for b in self.buses) != 1:
            raise ValidationError("exactly one slack bus required")
        known = set(ids)
        for line in self.lines:
            if line.from_bus not in known or line.to_bus not in known:
                raise ValidationError(f"line {line.from_bus}-{line.to_bus} references unknown bus")
            line.validate()
        for element in (*self.generators, *self.loads, *self.renewables):
            if element.bus not in known:
                raise ValidationError(f"element references unknown bus {element.bus}")
            element.validate()
        if not self.generators:
            raise ValidationError("case has no generators")
        slack = self.buses[self.slack].id
        if not any(g.bus == slack for g in self.generators):
            raise ValidationError("slack bus carries no generator")
        if self.loss_factor is not None and not 1.0 <= self.loss_factor <= 1.2:
            raise ValidationError("loss_factor outside [1.0, 1.2]")

    def reference_loss_factor(self):
        """Reference generation over net reference demand, clipped to [1, 1.2]."""
        net = sum(l.p_ref for l in self.loads) - sum(r.p_ref for r in self.renewables)
        gen = sum(g.p_ref for g in self.generators)
        if net <= 0 or gen <= 0:
            return 1.0
        return float(np.clip(gen / net, 1.0, 1.2))

    def with_changes(self, **changes):
        return replace(self, **changes)

    # --- indexing -------------------------------------------------------
    @property
    def n_bus(self):
        return len(self.buses)

    @cached_property
    def bus_index(self):
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self):
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @cached_property
    def pv(self):
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pv"], dtype=np.intp)

    @cached_property
    def pq(self):
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pq"], dtype=np.intp)

    @cached_property
    def gen_bus(self):
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.intp)

    @cached_property
    def load_bus(self):
        return np.array([self.bus_index[l.bus] for l in self.loads], dtype=np.intp)

    @cached_property
    def res_bus(self):
        return np.array([self.bus_index[r.bus] for r in self.renewables], dtype=np.intp)

    @cached_property
    def controllable(self):
        """Indices of controllable generators (the decision vector ``u``)."""
        return np.array([k for k, g in enumerate(self.generators) if g.controllable], dtype=np.intp)

    @cached_property
    def slack_generators(self):
        return np.array([k for k, g in enumerate(self.generators) if self.bus_index[g.bus] == self.slack],
                        dtype=np.intp)

    @property
    def n_u(self):
        return len(self.controllable)

    @property
    def n_d(self):
        return len(self.loads) + len(self.renewables)

    # --- reference vectors ---------------------------------------------
    @cached_property
    def v_set(self):
        return np.array([b.v_set if b.v_set is not None else 1.0 for b in self.buses])

    @cached_property
    def gen_p_ref(self):
        return np.array([g.p_ref for g in self.generators])

    @cached_property
    def load_p_ref(self):
        return np.array([l.p_ref for l in self.loads])

    @cached_property
    def res_p_ref(self):
        return np.array([r.p_ref for r in self.renewables])

    @cached_property
    def load_gamma(self):
        return np.array([l.gamma for l in self.loads])

    @cached_property
    def res_gamma(self):
        return np.array([r.gamma for r in self.renewables])

    @cached_property
    def injection_sigma(self):
        """Standard deviations of the uncertain injections, loads first."""
        return np.array([l.sigma for l in self.loads] + [r.sigma for r in self.renewables])

    # --- admittance ------------------------------------------------------
    @cached_property
    def branch_matrices(self):
        """Per-branch two-port admittances ``(Yff, Yft, Ytf, Ytt)`` (complex arrays)."""
        y_ser = np.array([complex(l.g, l.b) for l in self.lines])
        tap = np.array([l.tap for l in self.lines])
        half_sh = 1j * np.array([l.b_sh for l in self.lines]) / 2
        yff = (y_ser + half_sh) / tap**2
        yft = -y_ser / tap
        ytf = -y_ser / tap
        ytt = y_ser + half_sh
        return yff, yft, ytf, ytt

    @cached_property
    def line_ends(self):
        f = np.array([self.bus_index[l.from_bus] for l in self.lines], dtype=np.intp)
        t = np.array([self.bus_index[l.to_bus] for l in self.lines], dtype=np.intp)
        return f, t

    @cached_property
    def ybus(self):
        n = self.n_bus
        y = np.zeros((n, n), dtype=complex)
        yff, yft, ytf, ytt = self.branch_matrices
        f, t = self.line_ends
        np.add.at(y, (f, f), yff)
        np.add.at(y, (f, t), yft)
        np.add.at(y, (t, f), ytf)
        np.add.at(y, (t, t), ytt)
        y[np.diag_indices(n)] += np.array([complex(b.gs, b.bs) for b in self.buses])
        y.setflags(write=False)
        return y

    @cached_property
    def g_matrix(self):
        return np.ascontiguousarray(self.ybus.real)

    @cached_property
    def b_matrix(self):
        return np.ascontiguousarray(self.ybus.imag)

    # --- identity ----------------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "loss_factor": self.loss_factor,
            "buses": [asdict(b) for b in self.buses],
            "lines": [asdict(l) for l in self.lines],
            "generators": [asdict(g) for g in self.generators],
            "loads": [asdict(l) for l in self.loads],
            "renewables": [asdict(r) for r in self.renewables],
        }

    @cached_property
    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_json_float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_float(x):
    if isinstance(x, float) and np.isinf(x):
        return "inf"
    raise TypeError(type(x))


def case_from_dict(data):
    """Build a :class:`GridCase` from the dict produced by :meth:`GridCase.to_dict`."""
    def num(v):
        return float("inf") if v in ("inf", "Infinity") else v

    try:
        buses = [Bus(**b) for b in data["buses"]]
        lines = [Line(**{k: num(v) for k, v in l.items()}) for l in data["lines"]]
        gens = [Generator(**g) for g in data["generators"]]
        loads = [Load(**l) for l in data.get("loads", [])]
        res = [Load(**r) for r in data.get("renewables", [])]
    except TypeError as exc:
        raise ValidationError(f"bad case field: {exc}") from exc
    return GridCase(buses=buses, lines=lines, generators=gens, loads=loads, renewables=res,
                    base_mva=data.get("base_mva", 100.0), loss_factor=data.get("loss_factor"),
                    name=data.get("name", "case"))


__all__ = ["Bus", "Line", "Generator", "Load", "Renewable", "GridCase", "case_from_dict"]
