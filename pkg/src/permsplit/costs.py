"""Closed-form communication-cost evaluators for the four strategies, the
comparator against measured traffic ledgers, and the published-cost-table
report generator.

Per client over R rounds (element counts; 2x marks both-way transfers):

    T_fl     = (2R/n) (P_h + P_b + P_t)
    T_sl     = 2BR (F + G)
    T_festa  = 2BR (F + G) + (2R/n) (P_h + P_t)
    T_pfesta = D F + BR (F + G) + 2R P_t / n

F and G are one-way per-sample per-hop element counts (F = G here); the
cached-upload strategy pays the feature hop once per sample and never ships
anything head-bound afterwards, so its per-round term loses the factor 2.
"M" in reports means 1e6 scalar elements, not bytes.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

from .transport import CATEGORIES, TrafficLedger

__all__ = [
    "CostParams", "CostError", "STRATEGY_NAMES", "cost_closed_form",
    "cost_breakdown", "verify_ledger", "VerifyReport", "LedgerCheck",
    "load_constants", "table5_report", "Table5Report",
    "default_constants_path",
]

STRATEGY_NAMES = {"fl": "FL", "sl": "SL", "festa": "FeSTA",
                  "pfesta": "p-FeSTA"}

_TASKS = ("classification", "severity", "segmentation")


class CostError(ValueError):
    """Unknown strategy or missing/invalid constants."""


@dataclass(frozen=True)
class CostParams:
    D: float = 0.0      # samples per client
    B: float = 0.0      # batch size
    R: float = 0.0      # rounds
    n: float = 1.0      # unifying interval
    F: float = 0.0      # feature elements per sample per hop
    G: float = 0.0      # gradient elements per sample per hop
    P_h: float = 0.0    # head parameter elements
    P_b: float = 0.0    # body parameter elements
    P_t: float = 0.0    # tail parameter elements

    def __post_init__(self):
        for name in ("D", "B", "R", "F", "G", "P_h", "P_b", "P_t"):
            if getattr(self, name) < 0:
                raise CostError(f"{name} must be nonnegative")
        if self.n <= 0:
            raise CostError("n must be positive")


def _strategy(value) -> str:
    key = str(getattr(value, "value", value)).lower()
    if key not in STRATEGY_NAMES:
        raise CostError(f"unknown strategy {value!r}")
    return key


def cost_breakdown(strategy, p: CostParams) -> dict[str, float]:
    """Per-category element counts for one client."""
    s = _strategy(strategy)
    agg = 2.0 * p.R / p.n
    if s == "fl":
        return {"features": 0.0, "gradients": 0.0,
                "parameters": agg * (p.P_h + p.P_b + p.P_t)}
    if s == "sl":
        return {"features": 2.0 * p.B * p.R * p.F,
                "gradients": 2.0 * p.B * p.R * p.G,
                "parameters": 0.0}
    if s == "festa":
        return {"features": 2.0 * p.B * p.R * p.F,
                "gradients": 2.0 * p.B * p.R * p.G,
                "parameters": agg * (p.P_h + p.P_t)}
    # pfesta: one-time upload, then one-way body outputs / tail gradients
    return {"features": p.D * p.F + p.B * p.R * p.F,
            "gradients": p.B * p.R * p.G,
            "parameters": agg * p.P_t}


def cost_closed_form(strategy, p: CostParams) -> float:
    """Total transmitted elements for one client over R rounds."""
    return sum(cost_breakdown(strategy, p).values())


# ---------------------------------------------------------------------------
# ledger verification


@dataclass(frozen=True)
class LedgerCheck:
    client_id: int
    category: str           # features / gradients / parameters / total
    expected: float
    measured: int

    @property
    def ok(self) -> bool:
        return self.expected == self.measured


@dataclass
class VerifyReport:
    strategy: str
    checks: list[LedgerCheck]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def text(self) -> str:
        lines = [f"ledger verification [{STRATEGY_NAMES[self.strategy]}]: "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            mark = "ok" if c.ok else "MISMATCH"
            lines.append(f"  client {c.client_id:>3} {c.category:<10} "
                         f"expected {c.expected:>16.1f}  measured "
                         f"{c.measured:>14d}  {mark}")
        return "\n".join(lines)


def verify_ledger(strategy, params_by_client: dict[int, CostParams],
                  ledger: TrafficLedger) -> VerifyReport:
    """Compare closed-form element counts against a measured ledger,
    per client and per category, at zero tolerance."""
    s = _strategy(strategy)
    checks: list[LedgerCheck] = []
    for cid in sorted(params_by_client):
        p = params_by_client[cid]
        expected = cost_breakdown(s, p)
        for cat in CATEGORIES:
            checks.append(LedgerCheck(cid, cat, expected[cat],
                                      ledger.elements(client_id=cid,
                                                      category=cat)))
        checks.append(LedgerCheck(cid, "total", sum(expected.values()),
                                  ledger.elements(client_id=cid)))
    return VerifyReport(s, checks)


# ---------------------------------------------------------------------------
# constants file: "key = value" lines with provenance comments


def default_constants_path() -> str:
    return str(importlib.resources.files("permsplit").joinpath(
        "data/cost_constants.txt"))


def load_constants(path) -> tuple[dict[str, float], dict[str, str]]:
    """Parse key = value lines; returns (values, provenance comments)."""
    values: dict[str, float] = {}
    provenance: dict[str, str] = {}
    pending: list[str] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                pending = []
                continue
            if line.startswith("#"):
                pending.append(line.lstrip("# "))
                continue
            if "=" not in line:
                raise CostError(f"bad constants line: {raw.rstrip()}")
            key_part, _, rest = line.partition("=")
            value_part, _, inline = rest.partition("#")
            key = key_part.strip()
            try:
                values[key] = float(value_part.strip())
            except ValueError as exc:
                raise CostError(f"bad value for {key}: {value_part!r}") from exc
            notes = pending + ([inline.strip()] if inline.strip() else [])
            provenance[key] = " ".join(notes)
            pending = []
    return values, provenance


_REQUIRED = ("B", "R", "n", "F", "G", "P_h", "P_b",
             "D_classification", "D_severity", "D_segmentation",
             "P_t_classification", "P_t_severity", "P_t_segmentation")


@dataclass
class Table5Report:
    cells: dict[tuple[str, str], dict[str, float]]   # (task, strategy) -> M units
    provenance: dict[str, str]
    constants: dict[str, float]

    def text(self) -> str:
        lines = ["communication costs (M = 1e6 elements)",
                 f"{'':<16}{'Total':>12} {'Feat/grad':>12} {'Params':>12}"]
        for task in _TASKS:
            lines.append(task.capitalize())
            for strat in ("fl", "sl", "festa", "pfesta"):
                c = self.cells[(task, strat)]
                lines.append(
                    f"  {STRATEGY_NAMES[strat]:<14}{c['total']:>12.3f} "
                    f"{c['features_gradients']:>12.3f} {c['parameters']:>12.3f}")
        lines.append("")
        lines.append("constant provenance:")
        for key in _REQUIRED:
            note = self.provenance.get(key, "")
            lines.append(f"  {key} = {self.constants[key]:g}"
                         + (f"  [{note}]" if note else ""))
        return "\n".join(lines)

    def csv_rows(self) -> list[tuple]:
        rows = [("task", "strategy", "total_M", "features_gradients_M",
                 "parameters_M")]
        for (task, strat), c in sorted(self.cells.items()):
            rows.append((task, strat, f"{c['total']:.3f}",
                         f"{c['features_gradients']:.3f}",
                         f"{c['parameters']:.3f}"))
        return rows


def table5_report(constants: dict[str, float],
                  provenance: dict[str, str] | None = None) -> Table5Report:
    """All strategy x task cost cells in M units from a constants mapping."""
    missing = [k for k in _REQUIRED if k not in constants]
    if missing:
        raise CostError(f"missing constants: {', '.join(missing)}")
    cells = {}
    for task in _TASKS:
        p = CostParams(D=constants[f"D_{task}"], B=constants["B"],
                       R=constants["R"], n=constants["n"],
                       F=constants["F"], G=constants["G"],
                       P_h=constants["P_h"], P_b=constants["P_b"],
                       P_t=constants[f"P_t_{task}"])
        for strat in STRATEGY_NAMES:
            b = cost_breakdown(strat, p)
            cells[(task, strat)] = {
                "total": sum(b.values()) / 1e6,
                "features_gradients": (b["features"] + b["gradients"]) / 1e6,
                "parameters": b["parameters"] / 1e6,
            }
    return Table5Report(cells, provenance or {}, dict(constants))
