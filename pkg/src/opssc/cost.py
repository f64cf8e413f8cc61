"""Operational cost estimator: manual coordination vs OpsSC-driven execution.

All costs are man-minutes (MM). Reporting converts to man-hours at 60 MM/h.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Optional

CONVENTIONAL = "conventional"
PROPOSED = "proposed"
METHODS = (CONVENTIONAL, PROPOSED)

MODEL1 = "model1_pairwise"
MODEL2 = "model2_proposer_approver"
MODELS = (MODEL1, MODEL2)

MINUTES_PER_HOUR = 60.0


class CostParamError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    n: int = 4
    N_org: int = 7
    N_node: int = 2
    C_plc_prop_unit: float = 79.0
    C_plc_appr_unit: float = 5.6
    C_ops_prop_unit: float = 13.0
    C_ops_appr_unit: float = 2.4
    C_exec_unit: float = 6.7
    C_trigger_unit: float = 0.8
    C_dev_sc: float = 32.9
    a: float = 0.95
    # pairwise adjustment units, only used by model1 (not measured values)
    C_plc_pair_unit: Optional[float] = None
    C_ops_pair_unit: Optional[float] = None

    def __post_init__(self) -> None:
        if not isinstance(self.n, int) or self.n < 0:
            raise CostParamError(f"n must be a non-negative integer, got {self.n!r}")
        if self.N_org < 1:
            raise CostParamError(f"N_org must be >= 1, got {self.N_org}")
        if self.N_node < 1:
            raise CostParamError(f"N_node must be >= 1, got {self.N_node}")
        if not 0 < self.a <= 1:
            raise CostParamError(f"a must be in (0, 1], got {self.a}")
        for f in fields(self):
            if f.name.startswith("C_"):
                v = getattr(self, f.name)
                if v is not None and (v < 0 or math.isnan(v)):
                    raise CostParamError(f"{f.name} must be >= 0, got {v}")

    def with_(self, **changes) -> "CostParams":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, d: Mapping) -> "CostParams":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise CostParamError(f"unknown cost parameters: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if v is None:
                kw[k] = None
            elif k in ("n", "N_org", "N_node"):
                if isinstance(v, bool) or float(v) != int(v):
                    raise CostParamError(f"{k} must be an integer, got {v!r}")
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


DEFAULT_PARAMS = CostParams()


def _pairs(n_org: int) -> int:
    return n_org * (n_org - 1) // 2


def c_plc_adj(p: CostParams, model: str = MODEL2) -> float:
    """Cost of agreeing the operational policy once."""
    if model == MODEL2:
        return p.C_plc_prop_unit + (p.N_org - 1) * p.C_plc_appr_unit
    if model == MODEL1:
        if p.C_plc_pair_unit is None:
            raise CostParamError("model1 needs C_plc_pair_unit")
        return _pairs(p.N_org) * p.C_plc_pair_unit
    raise CostParamError(f"unknown adjustment model {model!r}")


def c_ops_adj(p: CostParams, model: str = MODEL2) -> float:
    """Per-execution timing/parameter adjustment (manual method only)."""
    if model == MODEL2:
        return p.C_ops_prop_unit + (p.N_org - 1) * p.C_ops_appr_unit
    if model == MODEL1:
        if p.C_ops_pair_unit is None:
            raise CostParamError("model1 needs C_ops_pair_unit")
        return _pairs(p.N_org) * p.C_ops_pair_unit
    raise CostParamError(f"unknown adjustment model {model!r}")


def c_ops(p: CostParams, method: str) -> float:
    if method == CONVENTIONAL:
        return p.N_org * p.N_node * p.C_exec_unit
    if method == PROPOSED:
        return p.C_trigger_unit
    raise CostParamError(f"unknown method {method!r}")


def learning_sum(a: float, n: int) -> float:
    """sum_{k=1..n} a^(k-1), accumulated term by term."""
    total, term = 0.0, 1.0
    for _ in range(n):
        total += term
        term *= a
    return total


def learning_sum_closed(a: float, n: int) -> float:
    return float(n) if a == 1 else (1.0 - a ** n) / (1.0 - a)


def per_execution_cost(p: CostParams, method: str, model: str = MODEL2) -> float:
    if method == CONVENTIONAL:
        return c_ops_adj(p, model) + c_ops(p, CONVENTIONAL)
    return c_ops(p, method)


def initial_cost(p: CostParams, method: str, model: str = MODEL2) -> float:
    base = c_plc_adj(p, model)
    if method == PROPOSED:
        base += p.C_dev_sc
    elif method != CONVENTIONAL:
        raise CostParamError(f"unknown method {method!r}")
    return base


def total_cost(p: CostParams, method: str, model: str = MODEL2) -> float:
    return initial_cost(p, method, model) + per_execution_cost(p, method, model) * learning_sum(p.a, p.n)


def reduction_ratio(p: CostParams, model: str = MODEL2) -> float:
    conv = total_cost(p, CONVENTIONAL, model)
    if conv == 0:
        return 0.0
    return 1.0 - total_cost(p, PROPOSED, model) / conv


def round_half_up(value: float, places: int = 1) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP)


def to_hours(mm: float) -> float:
    return mm / MINUTES_PER_HOUR


@dataclass(frozen=True)
class SweepRow:
    n: int
    conventional_mm: float
    proposed_mm: float
    reduction: float

    @property
    def conventional_h(self) -> Decimal:
        return round_half_up(to_hours(self.conventional_mm))

    @property
    def proposed_h(self) -> Decimal:
        return round_half_up(to_hours(self.proposed_mm))

    @property
    def reduction_pct(self) -> Decimal:
        return round_half_up(self.reduction * 100, 0)


def sweep(p: CostParams, n_range: Iterable[int], model: str = MODEL2) -> list[SweepRow]:
    rows = []
    for n in n_range:
        q = p.with_(n=n)
        rows.append(SweepRow(n, total_cost(q, CONVENTIONAL, model),
                             total_cost(q, PROPOSED, model), reduction_ratio(q, model)))
    return rows


CSV_COLUMNS = ("n", "conventional_mm", "proposed_mm", "conventional_h", "proposed_h",
               "reduction", "reduction_pct")


def rows_to_csv(rows: Iterable[SweepRow], methods: Iterable[str] = METHODS) -> str:
    methods = set(methods)
    cols = [c for c in CSV_COLUMNS
            if not (c.startswith(CONVENTIONAL) and CONVENTIONAL not in methods)
            and not (c.startswith(PROPOSED) and PROPOSED not in methods)
            and not (c.startswith("reduction") and len(methods) < 2)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        values = {
            "n": r.n,
            "conventional_mm": f"{r.conventional_mm:.4f}",
            "proposed_mm": f"{r.proposed_mm:.4f}",
            "conventional_h": str(r.conventional_h),
            "proposed_h": str(r.proposed_h),
            "reduction": f"{r.reduction:.6f}",
            "reduction_pct": str(r.reduction_pct),
        }
        w.writerow([values[c] for c in cols])
    return buf.getvalue()


def headline(p: CostParams, model: str = MODEL2) -> str:
    row = sweep(p, [p.n], model)[0]
    return (f"n={row.n}: conventional {row.conventional_h} man-hours, "
            f"proposed {row.proposed_h} man-hours, reduction {row.reduction_pct}%")
