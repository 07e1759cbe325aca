"""Reading and writing grid cases.

Two formats are understood: the native JSON document produced by
:func:`dump_case`, and MATPOWER-style ``.m`` files (``bus``, ``gen``,
``branch`` and ``gencost`` tables).
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .case import Bus, Generator, GridCase, Line, Load, case_from_dict

DATA_DIR = Path(__file__).parent / "data"

_BUS_KIND = {1: "pq", 2: "pv", 3: "slack"}
_MATRIX_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^;\[]+);")


def dump_case(case: GridCase) -> str:
    """Serialize to the native format (deterministic key order)."""
    def default(x):
        if isinstance(x, float) and np.isinf(x):
            return "inf"
        raise TypeError(type(x))

    data = case.to_dict()
    for line in data["lines"]:
        if np.isinf(line["s_max"]):
            line["s_max"] = "inf"
    return json.dumps(data, indent=1, sort_keys=True, default=default) + "\n"


def parse_native(text: str) -> GridCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid case document: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("case document must be an object", line=1)
    for section in ("buses", "lines", "generators"):
        if section not in data:
            raise ParseError("missing section", field=section)
    return case_from_dict(data)


def _read_tables(text):
    """Collect ``mpc.<name>`` scalars and numeric tables with source line numbers."""
    scalars, tables = {}, {}
    current, rows = None, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("%", 1)[0]
        if current is None:
            m = _MATRIX_RE.match(line)
            if m:
                current, rows = m.group(1), []
                line = line[m.end():]
            else:
                m = _SCALAR_RE.match(line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip().strip("'\"")
                continue
        closing = "]" in line
        body = line.split("]", 1)[0]
        for chunk in body.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append((lineno, [float(t) for t in tokens]))
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise ParseError(f"non-numeric entry {bad!r} in mpc.{current}", line=lineno,
                                 field=current) from None
        if closing:
            tables[current] = rows
            current = None
    if current is not None:
        raise ParseError(f"unterminated table mpc.{current}", field=current)
    return scalars, tables


def _is_number(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _table(tables, name, min_cols):
    if name not in tables:
        raise ParseError("missing table", field=name)
    rows = tables[name]
    for lineno, row in rows:
        if len(row) < min_cols:
            raise ParseError(f"expected at least {min_cols} columns, got {len(row)}", line=lineno,
                             field=name)
    return rows


def parse_matpower(text: str, renewables=(), res_gamma: float = 0.3, load_sigma: float = 0.15,
                   res_sigma: float = 0.30, name: str | None = None) -> GridCase:
    """Import a MATPOWER-style case.

    Parameters
    ----------
    text : str
        Contents of the ``.m`` file.
    renewables : sequence of (bus_id, mw)
        Renewable sources to attach; MATPOWER has no such table.
    res_gamma : float
        Reactive-to-active ratio of the renewables.
    load_sigma, res_sigma : float
        Fluctuation standard deviation as a fraction of the reference power.
    name : str, optional
        Case name; defaults to the ``function mpc = ...`` name.

    Notes
    -----
    Every bus with nonzero demand yields one load. Branches that are out of
    service are skipped; ``rateA = 0`` means unlimited. Generator voltage
    set-points are clipped into the bus voltage band. A branch is monitored
    when it has resistance and a nominal tap, which leaves pure
    transformers out of the output vector.
    """
    scalars, tables = _read_tables(text)
    if name is None:
        m = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
        name = m.group(1) if m else "case"
    try:
        base = float(scalars.get("baseMVA", 100.0))
    except ValueError:
        raise ParseError("baseMVA is not numeric", field="baseMVA") from None

    gen_rows = _table(tables, "gen", 10)
    vg = {}
    for lineno, row in gen_rows:
        if row[7] > 0:
            vg.setdefault(int(row[0]), row[5])

    buses, loads = [], []
    for lineno, row in _table(tables, "bus", 13):
        bid, kind = int(row[0]), int(row[1])
        if kind not in _BUS_KIND:
            raise ParseError(f"unsupported bus type {kind}", line=lineno, field="bus")
        kind = _BUS_KIND[kind]
        v_set = None
        if kind != "pq":
            # a few stock cases set generator voltages marginally outside the bus band
            v_set = float(np.clip(vg.get(bid, row[7]), row[12], row[11]))
        buses.append(Bus(id=bid, kind=kind, v_min=row[12], v_max=row[11], v_set=v_set,
                         gs=row[4] / base, bs=row[5] / base))
        if row[2] != 0 or row[3] != 0:
            p, q = row[2] / base, row[3] / base
            loads.append(Load(bus=bid, p_ref=p, q_ref=q, sigma=load_sigma * abs(p)))

    lines = []
    for lineno, row in _table(tables, "branch", 11):
        if row[10] <= 0:
            continue
        r, x, bsh, rate, ratio, angle = row[2], row[3], row[4], row[5], row[8], row[9]
        if angle != 0:
            raise ParseError("phase shifters are not supported", line=lineno, field="branch")
        if r == 0 and x == 0:
            raise ParseError("zero branch impedance", line=lineno, field="branch")
        ys = 1.0 / complex(r, x)
        tap = ratio if ratio != 0 else 1.0
        lines.append(Line(from_bus=int(row[0]), to_bus=int(row[1]), g=ys.real, b=ys.imag,
                          s_max=rate / base if rate > 0 else float("inf"), b_sh=bsh, tap=tap,
                          monitored=bool(r > 0 and tap == 1.0)))

    costs = tables.get("gencost", [])
    gens = []
    for k, (lineno, row) in enumerate(gen_rows):
        if row[7] <= 0:
            continue
        c2 = c1 = c0 = 0.0
        if costs:
            if k >= len(costs):
                raise ParseError("gencost has fewer rows than gen", field="gencost")
            cl, crow = costs[k]
            if int(crow[0]) != 2:
                raise ParseError("only polynomial costs are supported", line=cl, field="gencost")
            n = int(crow[3])
            coef = crow[4:4 + n]
            if len(coef) != n or n > 3:
                raise ParseError("polynomial cost must have at most 3 coefficients", line=cl,
                                 field="gencost")
            coef = [0.0] * (3 - n) + list(coef)
            c2, c1, c0 = coef[0] * base**2, coef[1] * base, coef[2]
        p_min, p_max = row[9] / base, row[8] / base
        gens.append(Generator(bus=int(row[0]), p_min=p_min, p_max=p_max, q_min=row[4] / base,
                              q_max=row[3] / base, c2=c2, c1=c1, c0=c0,
                              p_ref=float(np.clip(row[1] / base, p_min, p_max))))

    res = [Load(bus=int(b), p_ref=mw / base, q_ref=res_gamma * mw / base, gamma=res_gamma,
                sigma=res_sigma * mw / base) for b, mw in renewables]
    return GridCase(buses=buses, lines=lines, generators=gens, loads=loads, renewables=res,
                    base_mva=base, name=name)


def parse_case(text: str, format: str = "native", **options) -> GridCase:
    """Parse case text in ``native`` or ``matpower`` format."""
    if format == "native":
        return parse_native(text)
    if format == "matpower":
        return parse_matpower(text, **options)
    raise ValueError(f"unknown case format {format!r}")


def load_case(path, **options) -> GridCase:
    """Load a case from disk, choosing the format by file suffix.

    Bare names such as ``"ieee9"`` resolve to the bundled cases.
    """
    p = Path(path)
    if not p.exists() and (DATA_DIR / f"{p.name}.json").exists():
        p = DATA_DIR / f"{p.name}.json"
    text = p.read_text()
    fmt = "matpower" if p.suffix == ".m" else "native"
    return parse_case(text, fmt, **options)


def save_case(case: GridCase, path) -> None:
    Path(path).write_text(dump_case(case))


__all__ = ["dump_case", "parse_case", "parse_native", "parse_matpower", "load_case",
           "save_case", "DATA_DIR"]
