"""Macro-F1, fold-level confidence intervals, paired t-tests, and result tables.

The t-distribution CDF and quantile are implemented here via the regularized
incomplete beta function (continued-fraction evaluation), so the statistics
carry no runtime dependency beyond the standard library and numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .ontology import Ontology

REPORT_FORMATS = ("text", "csv")
AVERAGE_ROW_LABEL = "Average (All Tasks)"


class EvaluationError(ValueError):
    """Invalid metric inputs or an incomplete result grid."""


# ---------------------------------------------------------------------------
# Macro F1


def macro_f1(
    golds: Sequence[str],
    preds: Sequence[str],
    classes: Sequence[str],
) -> float:
    """Unweighted mean of per-class F1 over classes present in golds or preds.

    Classes from ``classes`` that appear in neither the gold nor the predicted
    labels are excluded from the average, so an untouched rare class never
    contributes a spurious zero.
    """
    if len(golds) != len(preds):
        raise EvaluationError(
            f"golds and preds differ in length ({len(golds)} vs {len(preds)})"
        )
    if not golds:
        raise EvaluationError("cannot score an empty evaluation")
    allowed = set(classes)
    if len(allowed) != len(classes):
        raise EvaluationError("class list contains duplicates")
    for label in golds:
        if label not in allowed:
            raise EvaluationError(f"gold label {label!r} is not in the class list")
    for label in preds:
        if label not in allowed:
            raise EvaluationError(f"predicted label {label!r} is not in the class list")
    present = set(golds) | set(preds)
    scored = [c for c in classes if c in present]
    total = 0.0
    for cls in scored:
        tp = sum(1 for g, p in zip(golds, preds) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(golds, preds) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(golds, preds) if g == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        total += (
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return total / len(scored)


# ---------------------------------------------------------------------------
# Student-t distribution (regularized incomplete beta)


def _beta_cont_fraction(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    max_iterations = 300
    eps = 3e-16
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise EvaluationError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise EvaluationError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_fraction(a, b, x) / a
    return 1.0 - front * _beta_cont_fraction(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: int) -> float:
    """P(T <= t) for a Student-t variable with ``dof`` degrees of freedom."""
    if dof < 1:
        raise EvaluationError("degrees of freedom must be at least 1")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = dof / (dof + t * t)
    tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_quantile(q: float, dof: int) -> float:
    """Inverse of ``t_cdf`` by bisection (monotone, machine-precision)."""
    if not 0.0 < q < 1.0:
        raise EvaluationError("quantile level must lie strictly between 0 and 1")
    if dof < 1:
        raise EvaluationError("degrees of freedom must be at least 1")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_quantile(1.0 - q, dof)
    hi = 1.0
    while t_cdf(hi, dof) < q:
        hi *= 2.0
        if hi > 1e12:
            break
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, dof) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Interval and paired test


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Sample mean with a two-sided t-interval: mean ± t(n-1)·sd/√n."""
    n = len(values)
    if n < 2:
        raise EvaluationError("confidence interval needs at least 2 values")
    if not 0.0 < level < 1.0:
        raise EvaluationError("confidence level must lie strictly between 0 and 1")
    mean = sum(values) / n
    variance = sum((v - mean) ** 2 for v in values) / (n - 1)
    sd = math.sqrt(variance)
    half = t_quantile(0.5 + level / 2.0, n - 1) * sd / math.sqrt(n)
    return mean, mean - half, mean + half


@dataclass(frozen=True)
class PairedTestResult:
    """Two-sided paired t-test outcome."""

    t: float
    dof: int
    p: float


def paired_t(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """Paired t-test on matched samples: t = mean(d) / (sd(d)/√n), dof = n-1.

    Identical samples give t=0, p=1.  Zero-variance differences with a nonzero
    mean are degenerate: reported as t=±inf, p=0 rather than dividing by zero.
    """
    if len(a) != len(b):
        raise EvaluationError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise EvaluationError("paired test needs at least 2 pairs")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    variance = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    dof = n - 1
    if variance == 0.0:
        if mean == 0.0:
            return PairedTestResult(t=0.0, dof=dof, p=1.0)
        return PairedTestResult(t=math.copysign(math.inf, mean), dof=dof, p=0.0)
    t = mean / math.sqrt(variance / n)
    p = 2.0 * (1.0 - t_cdf(abs(t), dof))
    return PairedTestResult(t=t, dof=dof, p=min(max(p, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Result tables


@dataclass(frozen=True)
class TaskResult:
    """Per-fold scores for one task under one mode."""

    task: str
    mode: str
    fold_scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.fold_scores:
            raise EvaluationError("a task result needs at least one fold score")


def format_score(value: float) -> str:
    """Two-decimal Table-style number: 0.84 -> ".84", 1.0 -> "1.0"."""
    sign = "-" if value < 0 else ""
    text = f"{abs(value):.2f}"
    if text.startswith("0."):
        text = text[1:]
    if text == "1.00":
        text = "1.0"
    return sign + text


def format_interval_cell(mean: float, lo: float, hi: float) -> str:
    return f"{format_score(mean)} ({format_score(lo)},{format_score(hi)})"


ResultGrid = Mapping[str, Mapping[str, Sequence[float]]]


def _validated_grid(
    results: ResultGrid,
) -> tuple[list[str], list[str], dict[str, dict[str, list[float]]], int]:
    if not results:
        raise EvaluationError("empty result set")
    tasks = list(results.keys())
    modes = list(results[tasks[0]].keys())
    if not modes:
        raise EvaluationError(f"task {tasks[0]!r} has no mode results")
    n_folds = None
    grid: dict[str, dict[str, list[float]]] = {}
    for task in tasks:
        row = results[task]
        for mode in modes:
            if mode not in row:
                raise EvaluationError(f"missing result for task {task!r} mode {mode!r}")
        extra = [mode for mode in row if mode not in modes]
        if extra:
            raise EvaluationError(
                f"task {task!r} has modes {extra} absent from the first row"
            )
        grid[task] = {}
        for mode in modes:
            scores = [float(v) for v in row[mode]]
            if n_folds is None:
                n_folds = len(scores)
            if len(scores) != n_folds:
                raise EvaluationError(
                    f"task {task!r} mode {mode!r} has {len(scores)} folds, expected {n_folds}"
                )
            if len(scores) < 2:
                raise EvaluationError("result cells need at least 2 fold scores")
            grid[task][mode] = scores
    assert n_folds is not None
    return tasks, modes, grid, n_folds


def _ordered_rows(
    tasks: list[str], ontology: Ontology | None
) -> list[tuple[str, str, str]]:
    """Rows as (group title, row label, task id), grouped when an ontology is given."""
    if ontology is None:
        return [("", task, task) for task in sorted(tasks)]
    known = [t for t in ontology.task_list if t.id in set(tasks)]
    unknown = sorted(set(tasks) - {t.id for t in known})
    rows = [(t.group, f"{t.display} (K={t.n_classes})", t.id) for t in known]
    rows.extend(("Other", task, task) for task in unknown)
    return rows


def render_report(
    results: ResultGrid,
    fmt: str = "text",
    ontology: Ontology | None = None,
) -> str:
    """Result table: one row per task plus an all-task average row.

    ``results`` maps task id -> mode name -> per-fold scores.  Every task must
    cover the same modes with the same fold count.  Cells show
    ``mean (lo,hi)`` with a 95% t-interval across folds.  With an ontology the
    rows follow its canonical task order, grouped under attribute headings.
    """
    if fmt not in REPORT_FORMATS:
        raise EvaluationError(f"unknown report format {fmt!r}")
    tasks, modes, grid, n_folds = _validated_grid(results)
    rows = _ordered_rows(tasks, ontology)

    cells: dict[tuple[str, str], str] = {}
    for task in tasks:
        for mode in modes:
            cells[(task, mode)] = format_interval_cell(*mean_ci(grid[task][mode]))
    average_cells: dict[str, str] = {}
    for mode in modes:
        per_fold = [
            sum(grid[task][mode][fold] for task in tasks) / len(tasks)
            for fold in range(n_folds)
        ]
        average_cells[mode] = format_interval_cell(*mean_ci(per_fold))

    if fmt == "csv":
        import csv as _csv
        import io

        out = io.StringIO()
        writer = _csv.writer(out, lineterminator="\n")
        writer.writerow(["Group", "Task"] + list(modes))
        for group, label, task in rows:
            writer.writerow([group, label] + [cells[(task, mode)] for mode in modes])
        writer.writerow(["", AVERAGE_ROW_LABEL] + [average_cells[m] for m in modes])
        return out.getvalue()

    label_width = max(
        [len(label) for _, label, _ in rows] + [len(AVERAGE_ROW_LABEL), len("Task")]
    )
    col_widths = {
        mode: max(
            [len(mode)]
            + [len(cells[(task, mode)]) for task in tasks]
            + [len(average_cells[mode])]
        )
        for mode in modes
    }
    lines = []
    header = "Task".ljust(label_width) + "".join(
        "  " + mode.rjust(col_widths[mode]) for mode in modes
    )
    lines.append(header)
    lines.append("-" * len(header))
    last_group = None
    for group, label, task in rows:
        if ontology is not None and group != last_group:
            lines.append(f"[{group}]")
            last_group = group
        lines.append(
            label.ljust(label_width)
            + "".join(
                "  " + cells[(task, mode)].rjust(col_widths[mode]) for mode in modes
            )
        )
    lines.append("-" * len(header))
    lines.append(
        AVERAGE_ROW_LABEL.ljust(label_width)
        + "".join("  " + average_cells[mode].rjust(col_widths[mode]) for mode in modes)
    )
    return "\n".join(lines) + "\n"
