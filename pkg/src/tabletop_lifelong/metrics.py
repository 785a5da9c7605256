"""Lifelong-learning metrics (FWT / NBT / AUC) over a checkpoint success tensor.

Indices are 0-based throughout: ``c[i][j][e]`` is the success rate on task
``j`` after ``e`` epochs of training on task ``i``.  Diagonal entries exist
for every eval epoch; an off-diagonal entry ``(i, j)`` with ``j < i`` is
stored once, at the epoch ``e*_i`` of the checkpoint it was evaluated from.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

DEFAULT_EVAL_EPOCHS = tuple(range(0, 51, 5))
NBT_MODES = ("include_last", "exclude_last")
METRIC_NAMES = ("FWT", "NBT", "AUC")


class MissingEntry(KeyError):
    def __init__(self, i: int, j: int, e: Optional[int]):
        super().__init__(f"missing success rate c[{i}][{j}] at epoch {e}")
        self.i, self.j, self.e = i, j, e


@dataclass
class EvalMatrix:
    K: int
    eval_epochs: tuple[int, ...] = DEFAULT_EVAL_EPOCHS
    entries: dict[tuple[int, int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.eval_epochs = tuple(int(e) for e in self.eval_epochs)
        if list(self.eval_epochs) != sorted(set(self.eval_epochs)) or not self.eval_epochs:
            raise ValueError("eval_epochs must be non-empty and strictly increasing")

    def set(self, i: int, j: int, e: int, rate: float) -> None:
        if not (0 <= j <= i < self.K):
            raise ValueError(f"entry ({i},{j}) outside the seen-task triangle for K={self.K}")
        if e not in self.eval_epochs:
            raise ValueError(f"epoch {e} not in eval grid")
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"rate {rate} outside [0, 1]")
        self.entries[(i, j, e)] = float(rate)

    def get(self, i: int, j: int, e: int) -> float:
        try:
            return self.entries[(i, j, e)]
        except KeyError:
            raise MissingEntry(i, j, e) from None

    def diagonal(self, k: int) -> list[float]:
        return [self.get(k, k, e) for e in self.eval_epochs]

    def off_diagonal(self, i: int, j: int) -> float:
        """The single stored backward evaluation ``c[i][j]`` (``j < i``)."""
        found = [r for (a, b, _), r in self.entries.items() if a == i and b == j]
        if len(found) != 1:
            raise MissingEntry(i, j, None)
        return found[0]

    def to_json(self) -> str:
        rows = [{"i": i, "j": j, "e": e, "rate": r} for (i, j, e), r in sorted(self.entries.items())]
        return json.dumps({"K": self.K, "eval_epochs": list(self.eval_epochs), "entries": rows}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalMatrix":
        d = json.loads(text)
        m = cls(int(d["K"]), tuple(d["eval_epochs"]))
        for row in d["entries"]:
            m.set(int(row["i"]), int(row["j"]), int(row["e"]), float(row["rate"]))
        return m


def best_checkpoint(diag: Sequence[float], epochs: Optional[Sequence[int]] = None) -> tuple[float, int]:
    """Best rate and the earliest epoch attaining it."""
    if len(diag) == 0:
        raise ValueError("empty diagonal")
    epochs = list(epochs) if epochs is not None else list(DEFAULT_EVAL_EPOCHS[: len(diag)])
    best = max(diag)
    for e, r in zip(epochs, diag):
        if r == best:
            return best, e
    raise AssertionError("unreachable")


@dataclass
class MetricReport:
    FWT: float
    NBT: float
    AUC: float
    per_task: dict[str, list[float]]
    e_star: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["FWT"], d["NBT"], d["AUC"], {k: list(v) for k, v in d["per_task"].items()}, list(d["e_star"]))

    def csv_row(self) -> list[str]:
        return [repr(getattr(self, m)) for m in METRIC_NAMES]


def compute_metrics(m: EvalMatrix, nbt_mode: str = "include_last") -> MetricReport:
    if nbt_mode not in NBT_MODES:
        raise ValueError(f"nbt_mode must be one of {NBT_MODES}")
    K, epochs = m.K, m.eval_epochs
    fwt, nbt, auc, e_star = [], [], [], []
    for k in range(K):
        diag = m.diagonal(k)
        best, es = best_checkpoint(diag, epochs)
        e_star.append(es)
        # learning stops at e*: later epochs count as the best rate
        frozen = [r if e < es else best for e, r in zip(epochs, diag)]
        f = sum(frozen) / len(epochs)
        later = [m.off_diagonal(tau, k) for tau in range(k + 1, K)]
        fwt.append(f)
        nbt.append(sum(best - c for c in later) / len(later) if later else 0.0)
        auc.append((f + sum(later)) / (len(later) + 1))
    nbt_pool = nbt if nbt_mode == "include_last" or K == 1 else nbt[:-1]
    return MetricReport(
        FWT=sum(fwt) / K,
        NBT=sum(nbt_pool) / len(nbt_pool),
        AUC=sum(auc) / K,
        per_task={"FWT": fwt, "NBT": nbt, "AUC": auc},
        e_star=e_star,
    )


@dataclass(frozen=True)
class MeanSE:
    mean: float
    se: float


def aggregate_seeds(reports: Sequence[MetricReport]) -> dict[str, MeanSE]:
    """Mean and standard error (sample std / sqrt(n); 0 for one seed) per metric."""
    if not reports:
        raise ValueError("need at least one report")
    out = {}
    for name in METRIC_NAMES:
        xs = sorted(getattr(r, name) for r in reports)
        n = len(xs)
        mean = math.fsum(xs) / n
        se = 0.0 if n == 1 else math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1)) / math.sqrt(n)
        out[name] = MeanSE(mean, se)
    return out


TABLE_HEADER = ["regime", "suite", "FWT", "FWT_se", "NBT", "NBT_se", "AUC", "AUC_se"]


def table_csv(rows: Iterable[tuple[str, str, dict[str, MeanSE]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for regime, suite, agg in rows:
        cells = []
        for name in METRIC_NAMES:
            cells += [repr(agg[name].mean), repr(agg[name].se)]
        w.writerow([regime, suite, *cells])
    return buf.getvalue()
