"""Correlation metrics, per-group reports, macro-averages and sweep tables.

Spearman's rho is the Pearson correlation of average (fractional) ranks. Pearson's r
uses the population convention. Both refuse constant inputs rather than returning a
misleading zero. Domain averages are unweighted means over the language pairs that
have a value; unavailable pairs are NA and never imputed.
"""

import csv
import io
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from src.adapters import RANK_ALPHA_GRID
from src.data import Domain, LangPair, QeRecord
from src.errors import MetricError, ReportError
from src.table_writer import SectionWriter, join_sections

logger = logging.getLogger(__name__)

METRICS = ("spearman", "pearson")
SWEEP_LAYERS = (-1, -7, -9, -11)
NA = "NA"
BEST_CELL_MARK = "*"
BEST_AVERAGE_MARK = "†"
METRIC_CSV_COLUMNS = (
    "domain",
    "lang_pair",
    "method",
    "rank",
    "alpha",
    "layer",
    "spearman",
    "pearson",
    "n",
)


def _pair_arrays(pred: Sequence[float], gold: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(gold, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise MetricError(f"length mismatch: {x.size} predictions vs {y.size} gold scores")
    if x.size < 2:
        raise MetricError(f"correlation needs at least 2 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("correlation inputs must be finite")
    return x, y


def pearson(pred: Sequence[float], gold: Sequence[float]) -> float:
    """Covariance over the product of standard deviations (population convention).

    Raises:
        MetricError: On length < 2, unequal lengths, or a constant argument.
    """
    x, y = _pair_arrays(pred, gold)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.mean(dx * dx))
    sy = np.sqrt(np.mean(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise MetricError("correlation is undefined for a constant input")
    r = float(np.mean(dx * dy) / (sx * sy))
    return max(-1.0, min(1.0, r))


def spearman(pred: Sequence[float], gold: Sequence[float]) -> float:
    """Pearson correlation of average ranks; ties share the mean of their ranks."""
    x, y = _pair_arrays(pred, gold)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def macro_average(values: Iterable[float]) -> float:
    """Unweighted mean of the available values (NA entries excluded by the caller)."""
    array = np.asarray(list(values), dtype=np.float64)
    if array.size == 0:
        raise MetricError("macro average of an empty list")
    return float(np.mean(array))


# ============================================================================
# Reports
# ============================================================================


@dataclass(frozen=True, order=True)
class ConfigKey:
    """Identifies one system: adapter method with (rank, alpha, layer) or a prompt kind."""

    method: str
    rank: int | None = None
    alpha: float | None = None
    layer: int | None = None

    @property
    def label(self) -> str:
        parts = [self.method]
        if self.rank is not None:
            parts.append(f"R={self.rank}")
        if self.alpha is not None:
            parts.append(f"a={self.alpha:g}")
        if self.layer is not None:
            parts.append(f"L={self.layer}")
        return " ".join(parts)


@dataclass(frozen=True)
class MetricEntry:
    spearman: float
    pearson: float
    n: int

    def value(self, metric: str) -> float:
        if metric not in METRICS:
            raise ReportError(f"unknown metric '{metric}' (expected one of {', '.join(METRICS)})")
        return self.spearman if metric == "spearman" else self.pearson


EntryKey = tuple[Domain, LangPair, ConfigKey]


@dataclass
class MetricReport:
    """Per-(domain, lang_pair, config) correlations, with the source each came from."""

    entries: dict[EntryKey, MetricEntry] = field(default_factory=dict)
    sources: dict[EntryKey, str] = field(default_factory=dict)

    def add(
        self,
        domain: Domain,
        lang_pair: LangPair,
        key: ConfigKey,
        entry: MetricEntry,
        source: str = "",
    ) -> None:
        """Record one entry.

        Raises:
            ReportError: If the same (domain, lang_pair, config) is already present.
        """
        entry_key = (domain, lang_pair, key)
        if entry_key in self.entries:
            previous = self.sources.get(entry_key, "")
            raise ReportError(
                f"duplicate result for {domain.value}/{lang_pair.value}/{key.label}: "
                f"'{previous}' and '{source}'"
            )
        self.entries[entry_key] = entry
        self.sources[entry_key] = source

    def merge(self, other: "MetricReport") -> None:
        for entry_key, entry in other.entries.items():
            self.add(*entry_key, entry, other.sources.get(entry_key, ""))

    def get(self, domain: Domain, lang_pair: LangPair, key: ConfigKey) -> MetricEntry | None:
        return self.entries.get((domain, lang_pair, key))

    def domains(self) -> list[Domain]:
        present = {domain for domain, _, _ in self.entries}
        return [d for d in Domain if d in present]

    def configs(self, domain: Domain | None = None) -> list[ConfigKey]:
        keys = {key for d, _, key in self.entries if domain is None or d is domain}
        return sorted(keys, key=_config_sort_key)

    def domain_averages(self, metric: str = "spearman") -> dict[tuple[Domain, ConfigKey], float]:
        """Macro-average over the language pairs present for each (domain, config)."""
        grouped: dict[tuple[Domain, ConfigKey], list[float]] = {}
        for (domain, _, key), entry in self.entries.items():
            grouped.setdefault((domain, key), []).append(entry.value(metric))
        return {group: macro_average(values) for group, values in grouped.items()}


def _config_sort_key(key: ConfigKey) -> tuple:
    return (
        key.method,
        key.rank if key.rank is not None else -1,
        key.alpha if key.alpha is not None else -1.0,
        -(key.layer if key.layer is not None else 0),
    )


def compute_report(
    records: Sequence[QeRecord],
    predictions: Sequence[float],
    key: ConfigKey,
    report: MetricReport | None = None,
    source: str = "",
) -> MetricReport:
    """Correlate predictions with gold scores per (domain, lang_pair).

    Groups where a correlation is undefined (fewer than 2 records, constant values)
    stay NA and are logged.
    """
    if len(records) != len(predictions):
        raise ReportError(f"{len(records)} records but {len(predictions)} predictions")
    report = report if report is not None else MetricReport()
    groups: dict[tuple[Domain, LangPair], list[int]] = {}
    for i, record in enumerate(records):
        groups.setdefault((record.domain, record.lang_pair), []).append(i)
    for (domain, lang_pair), group in groups.items():
        pred = [predictions[i] for i in group]
        gold = [records[i].da_score for i in group]
        try:
            entry = MetricEntry(spearman(pred, gold), pearson(pred, gold), len(group))
        except MetricError as exc:
            logger.info("%s/%s %s: NA (%s)", domain.value, lang_pair.value, key.label, exc)
            continue
        report.add(domain, lang_pair, key, entry, source)
    return report


def _entry_order(item: tuple[EntryKey, MetricEntry]) -> tuple:
    (domain, lang_pair, key), _ = item
    return (list(Domain).index(domain), list(LangPair).index(lang_pair), _config_sort_key(key))


def _format_optional(value: float | int | None) -> str:
    return "" if value is None else repr(value)


def write_metrics_csv(report: MetricReport, path: str | Path) -> Path:
    """Long format, one row per entry; floats are written with repr (exact)."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRIC_CSV_COLUMNS)
        for (domain, lang_pair, key), entry in sorted(report.entries.items(), key=_entry_order):
            writer.writerow(
                [
                    domain.value,
                    lang_pair.value,
                    key.method,
                    _format_optional(key.rank),
                    _format_optional(key.alpha),
                    _format_optional(key.layer),
                    repr(entry.spearman),
                    repr(entry.pearson),
                    entry.n,
                ]
            )
    return out


def read_metrics_csv(path: str | Path) -> MetricReport:
    """Inverse of write_metrics_csv; entries are tagged with the file path as source.

    Raises:
        ReportError: If the file is missing or malformed.
    """
    source = Path(path)
    report = MetricReport()
    try:
        with source.open(encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != METRIC_CSV_COLUMNS:
                raise ReportError(f"{source}: unexpected columns {reader.fieldnames}")
            for row in reader:
                key = ConfigKey(
                    method=row["method"],
                    rank=int(row["rank"]) if row["rank"] else None,
                    alpha=float(row["alpha"]) if row["alpha"] else None,
                    layer=int(row["layer"]) if row["layer"] else None,
                )
                entry = MetricEntry(float(row["spearman"]), float(row["pearson"]), int(row["n"]))
                domain, pair = Domain(row["domain"]), LangPair(row["lang_pair"])
                report.add(domain, pair, key, entry, str(source))
    except OSError as exc:
        raise ReportError(f"cannot read metrics file '{source}': {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise ReportError(f"{source}: malformed metrics row: {exc}") from exc
    return report


# ============================================================================
# Sweep tables
# ============================================================================


@dataclass
class SweepRow:
    layer: int
    cells: dict[LangPair, float | None]
    average: float | None


@dataclass
class SweepSection:
    domain: Domain
    rank: int
    alpha: float
    rows: list[SweepRow]


def _row_average(cells: Mapping[LangPair, float | None]) -> float | None:
    present = [v for v in cells.values() if v is not None]
    return macro_average(present) if present else None


def _best(values: Iterable[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return max(present) if present else None


def _csv_value(value: float | None) -> str:
    return NA if value is None else repr(value)


def _cell_text(value: float | None, best: float | None, mark: str) -> str:
    if value is None:
        return NA
    return f"{value:.3f}{mark if best is not None and value == best else ''}"


@dataclass
class SweepTable:
    """Layer × language-pair grid per (domain, rank, alpha) section."""

    metric: str
    method: str
    sections: list[SweepSection]

    @property
    def csv_columns(self) -> list[str]:
        head = ["metric", "method", "domain", "rank", "alpha", "layer"]
        return head + [p.value for p in LangPair] + ["avg"]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.csv_columns)
        for section in self.sections:
            for row in section.rows:
                prefix = [self.metric, self.method, section.domain.value]
                writer.writerow(
                    prefix
                    + [section.rank, repr(section.alpha), row.layer]
                    + [_csv_value(row.cells[p]) for p in LangPair]
                    + [_csv_value(row.average)]
                )
        return buffer.getvalue()

    def to_text(self) -> str:
        """Aligned text; per domain the best cell of each column is marked * and the
        best Avg is marked †.
        """
        writers = []
        for domain in dict.fromkeys(s.domain for s in self.sections):
            sections = [s for s in self.sections if s.domain is domain]
            rows = [row for s in sections for row in s.rows]
            best_cell = {p: _best(row.cells[p] for row in rows) for p in LangPair}
            best_avg = _best(row.average for row in rows)
            for section in sections:
                writer = SectionWriter(
                    f"{domain.value.title()} | {self.method} R={section.rank} "
                    f"alpha={section.alpha:g} | {self.metric}"
                )
                writer.emit("Layer", *(p.value.title() for p in LangPair), "Avg")
                writer.emit_rule()
                for row in section.rows:
                    writer.emit(
                        f"L {row.layer}",
                        *(_cell_text(row.cells[p], best_cell[p], BEST_CELL_MARK) for p in LangPair),
                        _cell_text(row.average, best_avg, BEST_AVERAGE_MARK),
                    )
                writers.append(writer)
        return join_sections(writers)


def emit_sweep_table(
    report: MetricReport,
    *,
    metric: str = "spearman",
    method: str = "lora",
    domains: Sequence[Domain] | None = None,
    layers: Sequence[int] = SWEEP_LAYERS,
    rank_alpha: Sequence[tuple[int, float]] = RANK_ALPHA_GRID,
) -> SweepTable:
    """Arrange report entries of one method as a layer × language-pair sweep table.

    Cells missing from the report, including pairs a domain does not cover, are NA
    and excluded from the row average. With explicit `domains` every section is
    emitted even when all of its cells are NA.

    Raises:
        ReportError: If no domains are given and the report holds no entry for the method.
    """
    if metric not in METRICS:
        raise ReportError(f"unknown metric '{metric}' (expected one of {', '.join(METRICS)})")
    if domains is None and not any(key.method == method for _, _, key in report.entries):
        raise ReportError(f"report has no '{method}' results to tabulate")
    chosen = list(domains) if domains is not None else [
        d for d in report.domains() if any(k.method == method for k in report.configs(d))
    ]
    sections = []
    for domain in chosen:
        for rank, alpha in rank_alpha:
            rows = []
            for layer in layers:
                key = ConfigKey(method=method, rank=rank, alpha=float(alpha), layer=layer)
                cells: dict[LangPair, float | None] = {}
                for pair in LangPair:
                    entry = report.get(domain, pair, key)
                    cells[pair] = None if entry is None else entry.value(metric)
                rows.append(SweepRow(layer=layer, cells=cells, average=_row_average(cells)))
            sections.append(SweepSection(domain=domain, rank=rank, alpha=float(alpha), rows=rows))
    return SweepTable(metric=metric, method=method, sections=sections)


def parse_sweep_csv(text: str) -> SweepTable:
    """Inverse of SweepTable.to_csv.

    Raises:
        ReportError: On a malformed table.
    """
    reader = csv.DictReader(io.StringIO(text))
    metric = method = ""
    sections: dict[tuple[Domain, int, float], SweepSection] = {}
    try:
        for row in reader:
            metric, method = row["metric"], row["method"]
            domain = Domain(row["domain"])
            rank, alpha = int(row["rank"]), float(row["alpha"])
            cells = {p: None if row[p.value] == NA else float(row[p.value]) for p in LangPair}
            average = None if row["avg"] == NA else float(row["avg"])
            section = sections.setdefault(
                (domain, rank, alpha), SweepSection(domain=domain, rank=rank, alpha=alpha, rows=[])
            )
            section.rows.append(SweepRow(layer=int(row["layer"]), cells=cells, average=average))
    except (KeyError, ValueError, TypeError) as exc:
        raise ReportError(f"malformed sweep table: {exc}") from exc
    if not sections:
        raise ReportError("sweep table has no rows")
    return SweepTable(metric=metric, method=method, sections=list(sections.values()))


def verify_sweep_table(
    table: SweepTable, report: MetricReport | None = None, tolerance: float = 1e-12
) -> None:
    """Re-check every Avg cell (and, given a report, every value cell).

    Raises:
        ReportError: On the first inconsistency found.
    """
    for section in table.sections:
        where = f"{section.domain.value} R={section.rank} alpha={section.alpha:g}"
        for row in section.rows:
            expected = _row_average(row.cells)
            if (expected is None) != (row.average is None) or (
                expected is not None
                and row.average is not None
                and abs(expected - row.average) > tolerance
            ):
                raise ReportError(
                    f"{where} L{row.layer}: Avg {row.average} != macro average {expected}"
                )
            if report is None:
                continue
            key = ConfigKey(table.method, section.rank, section.alpha, row.layer)
            for pair, value in row.cells.items():
                entry = report.get(section.domain, pair, key)
                actual = None if entry is None else entry.value(table.metric)
                if actual != value:
                    raise ReportError(
                        f"{where} L{row.layer} {pair.value}: table has {value}, report {actual}"
                    )


# ============================================================================
# Comparison table
# ============================================================================


@dataclass
class ComparisonRow:
    domain: Domain
    system: str
    cells: dict[LangPair, float | None]
    average: float | None


@dataclass
class ComparisonTable:
    """One row per (domain, system) across all merged runs."""

    metric: str
    rows: list[ComparisonRow]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["metric", "domain", "system"] + [p.value for p in LangPair] + ["avg"])
        for row in self.rows:
            writer.writerow(
                [self.metric, row.domain.value, row.system]
                + [_csv_value(row.cells[p]) for p in LangPair]
                + [_csv_value(row.average)]
            )
        return buffer.getvalue()

    def to_text(self) -> str:
        writers = []
        for domain in dict.fromkeys(row.domain for row in self.rows):
            rows = [row for row in self.rows if row.domain is domain]
            best_cell = {p: _best(row.cells[p] for row in rows) for p in LangPair}
            best_avg = _best(row.average for row in rows)
            writer = SectionWriter(f"{domain.value.title()} | {self.metric}")
            writer.emit("System", *(p.value.title() for p in LangPair), "Avg")
            writer.emit_rule()
            for row in rows:
                writer.emit(
                    row.system,
                    *(_cell_text(row.cells[p], best_cell[p], BEST_CELL_MARK) for p in LangPair),
                    _cell_text(row.average, best_avg, BEST_AVERAGE_MARK),
                )
            writers.append(writer)
        return join_sections(writers)


def comparison_table(reports: Sequence[MetricReport], metric: str = "spearman") -> ComparisonTable:
    """Merge run reports into one table.

    Raises:
        ReportError: If no report has entries, or two runs report the same
            (domain, lang_pair, config); the message names both sources.
    """
    merged = MetricReport()
    for report in reports:
        merged.merge(report)
    if not merged.entries:
        raise ReportError("no results to compare")
    rows = []
    for domain in merged.domains():
        for key in merged.configs(domain):
            cells: dict[LangPair, float | None] = {}
            for pair in LangPair:
                entry = merged.get(domain, pair, key)
                cells[pair] = None if entry is None else entry.value(metric)
            average = _row_average(cells)
            rows.append(
                ComparisonRow(domain=domain, system=key.label, cells=cells, average=average)
            )
    return ComparisonTable(metric=metric, rows=rows)
