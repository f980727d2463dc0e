"""Exact per-datapoint privacy accounting.

Every release charges an inclusive interval of stream indices with an exact
rational epsilon. Per-point totals and maxima are computed with Fraction
arithmetic by an interval sweep, so the geometric-series budget assertions
are exact rather than float-tolerant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

SUBSYSTEMS = ("multires", "continual", "sliding", "baseline")


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class Charge:
    a: int
    b: int
    eps: Fraction
    subsystem: str
    time: int
    mechanism: str

    def __post_init__(self):
        if self.a > self.b:
            raise LedgerError(f"interval [{self.a}, {self.b}] is malformed")
        if self.eps <= 0:
            raise LedgerError(f"charge must be positive, got {self.eps}")
        if self.subsystem not in SUBSYSTEMS:
            raise LedgerError(f"unknown subsystem {self.subsystem!r}")


@dataclass(frozen=True)
class BudgetEntry:
    subsystem: str
    budget: Fraction
    max_eps: Fraction
    witness: int | None
    ok: bool


@dataclass(frozen=True)
class BudgetReport:
    entries: tuple[BudgetEntry, ...]

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)


@dataclass
class Ledger:
    """Append-only charge log with per-subsystem rational budgets."""

    budgets: dict[str, Fraction] = field(default_factory=dict)
    charges: list[Charge] = field(default_factory=list)

    def charge(self, interval, eps: Fraction, subsystem: str, time: int, mechanism: str):
        a, b = interval
        self.charges.append(Charge(a, b, Fraction(eps), subsystem, time, mechanism))

    def point_loss(self, index: int, subsystems=None) -> Fraction:
        total = Fraction(0)
        for c in self._selected(subsystems):
            if c.a <= index <= c.b:
                total += c.eps
        return total

    def _selected(self, subsystems):
        if subsystems is None:
            return self.charges
        if isinstance(subsystems, str):
            subsystems = (subsystems,)
        return [c for c in self.charges if c.subsystem in subsystems]

    def max_point_loss(self, subsystems=None) -> tuple[int | None, Fraction]:
        """Maximum cumulative charge over all touched indices, by interval sweep.

        Returns (witness index, exact total); (None, 0) for no charges.
        """
        deltas: dict[int, Fraction] = {}
        for c in self._selected(subsystems):
            deltas[c.a] = deltas.get(c.a, Fraction(0)) + c.eps
            deltas[c.b + 1] = deltas.get(c.b + 1, Fraction(0)) - c.eps
        if not deltas:
            return None, Fraction(0)
        best_idx, best = None, Fraction(0)
        running = Fraction(0)
        for x in sorted(deltas):
            running += deltas[x]
            if running > best:
                best, best_idx = running, x
        return best_idx, best

    def assert_budget(self) -> BudgetReport:
        """Per-subsystem pass/fail with the witness point of maximal loss."""
        entries = []
        present = {c.subsystem for c in self.charges}
        for sub in SUBSYSTEMS:
            if sub not in present and sub not in self.budgets:
                continue
            budget = self.budgets.get(sub)
            witness, mx = self.max_point_loss(sub)
            ok = budget is None or mx <= budget
            entries.append(BudgetEntry(sub, budget, mx, witness, ok))
        if "continual" in present and "multires" in present:
            budget = self.budgets.get("continual")
            witness, mx = self.max_point_loss(("continual", "multires"))
            if budget is not None:
                entries.append(
                    BudgetEntry("continual+multires", 2 * budget, mx, witness, mx <= 2 * budget)
                )
        return BudgetReport(tuple(entries))

    def export_jsonl(self, path):
        with open(path, "w") as fh:
            for c in self.charges:
                fh.write(
                    json.dumps(
                        {
                            "t": c.time,
                            "a": c.a,
                            "b": c.b,
                            "eps_num": c.eps.numerator,
                            "eps_den": c.eps.denominator,
                            "subsystem": c.subsystem,
                            "mechanism": c.mechanism,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path, budgets=None) -> "Ledger":
        ledger = cls(budgets=dict(budgets or {}))
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    ledger.charge(
                        (rec["a"], rec["b"]),
                        Fraction(rec["eps_num"], rec["eps_den"]),
                        rec["subsystem"],
                        rec["t"],
                        rec["mechanism"],
                    )
                except (KeyError, ValueError, TypeError) as exc:
                    raise LedgerError(f"malformed charge at line {lineno}: {exc}") from exc
        return ledger
