"""QE dataset schema, ingestion and synthetic generators.

A dataset lives in a directory holding one file per split, `train.<ext>` and
`test.<ext>`, in JSONL (canonical) or TSV. Every line becomes a QeRecord or an
IngestIssue with its line number; nothing is dropped silently.

JSONL: one object per line with keys id, source, translation, lang_pair, domain,
da_score and optional annotator_scores (list). TSV: a header line, then columns
id, source, translation, lang_pair, domain, annotator_scores (semicolon-joined, may
be empty), da_score.
"""

import csv
import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from src.errors import DataError, IngestError, IngestIssue

logger = logging.getLogger(__name__)

SCORE_MIN = 0.0
SCORE_MAX = 100.0
MIN_ANNOTATORS = 3
DA_TOLERANCE = 1e-6
SPLITS = ("train", "test")
TSV_COLUMNS = (
    "id",
    "source",
    "translation",
    "lang_pair",
    "domain",
    "annotator_scores",
    "da_score",
)


class LangPair(str, Enum):
    EN_HI = "en-hi"
    EN_MR = "en-mr"
    EN_TA = "en-ta"
    EN_TE = "en-te"
    EN_GU = "en-gu"

    @property
    def source_code(self) -> str:
        return self.value.split("-")[0]

    @property
    def target_code(self) -> str:
        return self.value.split("-")[1]


class Domain(str, Enum):
    HEALTHCARE = "healthcare"
    LEGAL = "legal"
    TOURISM = "tourism"
    GENERAL = "general"


class FileFormat(str, Enum):
    JSONL = "jsonl"
    TSV = "tsv"


LANGUAGE_NAMES = {
    "en": "English",
    "hi": "Hindi",
    "mr": "Marathi",
    "ta": "Tamil",
    "te": "Telugu",
    "gu": "Gujarati",
}

# Language pairs released for each domain
DOMAIN_CATALOG: dict[Domain, tuple[LangPair, ...]] = {
    Domain.HEALTHCARE: (LangPair.EN_HI, LangPair.EN_MR, LangPair.EN_TA, LangPair.EN_GU),
    Domain.LEGAL: (LangPair.EN_TA, LangPair.EN_TE, LangPair.EN_GU),
    Domain.TOURISM: (LangPair.EN_HI, LangPair.EN_MR, LangPair.EN_TE),
    Domain.GENERAL: (
        LangPair.EN_HI,
        LangPair.EN_MR,
        LangPair.EN_TA,
        LangPair.EN_TE,
        LangPair.EN_GU,
    ),
}


def in_catalog(domain: Domain, lang_pair: LangPair) -> bool:
    return lang_pair in DOMAIN_CATALOG[domain]


def average_annotators(scores: Sequence[float]) -> float:
    """Arithmetic mean of three or more annotator scores in [0, 100].

    Raises:
        DataError: If fewer than three scores are given or one is out of range.
    """
    if len(scores) < MIN_ANNOTATORS:
        raise DataError(
            f"a DA score needs at least {MIN_ANNOTATORS} annotator scores, got {len(scores)}"
        )
    for score in scores:
        _check_score("annotator score", score)
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


def _check_score(name: str, value: float) -> None:
    if not np.isfinite(value) or not SCORE_MIN <= value <= SCORE_MAX:
        raise DataError(f"{name} {value} outside [{SCORE_MIN:g}, {SCORE_MAX:g}]")


@dataclass(frozen=True)
class QeRecord:
    """One source/translation pair with its gold DA score.

    Construction validates every field except catalog membership, which is only a
    warning at ingestion time.
    """

    id: str
    source: str
    translation: str
    lang_pair: LangPair
    domain: Domain
    da_score: float
    annotator_scores: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        for name in ("id", "source", "translation"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise DataError(f"field '{name}' must be a non-empty string")
        _check_score("da_score", self.da_score)
        if self.annotator_scores:
            mean = average_annotators(self.annotator_scores)
            if abs(mean - self.da_score) > DA_TOLERANCE:
                raise DataError(
                    f"da_score {self.da_score} differs from annotator mean {mean:.6f}"
                )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "translation": self.translation,
            "lang_pair": self.lang_pair.value,
            "domain": self.domain.value,
            "annotator_scores": list(self.annotator_scores),
            "da_score": self.da_score,
        }


@dataclass(frozen=True)
class IngestReport:
    issues: tuple[IngestIssue, ...] = ()

    @property
    def errors(self) -> list[IngestIssue]:
        return [issue for issue in self.issues if issue.severity == "error"]

    @property
    def warnings(self) -> list[IngestIssue]:
        return [issue for issue in self.issues if issue.severity == "warning"]


@dataclass(frozen=True)
class DatasetSplit:
    """Train and test records; no id may appear in both."""

    train: tuple[QeRecord, ...]
    test: tuple[QeRecord, ...]
    report: IngestReport = field(default_factory=IngestReport, compare=False)

    def __post_init__(self) -> None:
        shared = {r.id for r in self.train} & {r.id for r in self.test}
        if shared:
            raise DataError(f"record id(s) in both splits: {', '.join(sorted(shared)[:5])}")

    def split(self, name: str) -> tuple[QeRecord, ...]:
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}' (expected one of {', '.join(SPLITS)})")
        return self.train if name == "train" else self.test


# ============================================================================
# Reading
# ============================================================================


def _parse_float(value: object, name: str) -> float:
    if isinstance(value, bool):
        raise DataError(f"field '{name}' must be a number")
    try:
        return float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError) as exc:
        raise DataError(f"field '{name}' must be a number, got {value!r}") from exc


def record_from_fields(fields: dict) -> QeRecord:
    """Build a validated record from decoded JSON or TSV fields.

    A missing da_score is derived from the annotator scores.
    """
    for name in ("id", "source", "translation", "lang_pair", "domain"):
        if fields.get(name) in (None, ""):
            raise DataError(f"missing field '{name}'")
    try:
        lang_pair = LangPair(fields["lang_pair"])
    except ValueError as exc:
        raise DataError(f"unknown lang_pair '{fields['lang_pair']}'") from exc
    try:
        domain = Domain(fields["domain"])
    except ValueError as exc:
        raise DataError(f"unknown domain '{fields['domain']}'") from exc

    raw_scores = fields.get("annotator_scores") or []
    if not isinstance(raw_scores, list):
        raise DataError("field 'annotator_scores' must be a list")
    annotator_scores = tuple(_parse_float(s, "annotator_scores") for s in raw_scores)

    if fields.get("da_score") in (None, ""):
        if not annotator_scores:
            raise DataError("missing field 'da_score' and no annotator scores to derive it")
        da_score = average_annotators(annotator_scores)
    else:
        da_score = _parse_float(fields["da_score"], "da_score")

    return QeRecord(
        id=str(fields["id"]),
        source=str(fields["source"]),
        translation=str(fields["translation"]),
        lang_pair=lang_pair,
        domain=domain,
        da_score=da_score,
        annotator_scores=annotator_scores,
    )


def _jsonl_rows(path: Path) -> Iterator[tuple[int, dict | str]]:
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                yield line_no, f"invalid JSON: {exc.msg}"
                continue
            yield line_no, row if isinstance(row, dict) else "line is not a JSON object"


def _tsv_rows(path: Path) -> Iterator[tuple[int, dict | str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        missing = set(TSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            yield 1, f"header lacks column(s): {', '.join(sorted(missing))}"
            return
        for row in reader:
            fields: dict = dict(row)
            scores = (fields.get("annotator_scores") or "").strip()
            fields["annotator_scores"] = [s for s in scores.split(";") if s.strip()]
            yield reader.line_num, fields


def _read_split(
    path: Path, fmt: FileFormat
) -> tuple[list[tuple[int, QeRecord]], list[IngestIssue]]:
    """Read one split file as (line number, record) pairs plus the issues found."""
    if not path.is_file():
        raise DataError(f"dataset file '{path}' not found")
    rows = _jsonl_rows(path) if fmt is FileFormat.JSONL else _tsv_rows(path)
    records: list[tuple[int, QeRecord]] = []
    issues: list[IngestIssue] = []
    seen: set[str] = set()
    try:
        for line_no, row in rows:
            if isinstance(row, str):
                issues.append(IngestIssue(str(path), line_no, row))
                continue
            try:
                record = record_from_fields(row)
            except DataError as exc:
                issues.append(IngestIssue(str(path), line_no, str(exc)))
                continue
            if record.id in seen:
                issues.append(IngestIssue(str(path), line_no, f"duplicate id '{record.id}'"))
                continue
            seen.add(record.id)
            if not in_catalog(record.domain, record.lang_pair):
                issues.append(
                    IngestIssue(
                        str(path),
                        line_no,
                        f"({record.domain.value}, {record.lang_pair.value}) is not in the "
                        "domain catalog",
                        severity="warning",
                    )
                )
            records.append((line_no, record))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"cannot read '{path}': {exc}") from exc
    return records, issues


def infer_format(directory: Path) -> FileFormat:
    for fmt in FileFormat:
        if (directory / f"train.{fmt.value}").is_file():
            return fmt
    raise DataError(f"no train.jsonl or train.tsv in '{directory}'")


def load_dataset(
    path: str | Path, fmt: FileFormat | str | None = None, *, strict: bool = True
) -> DatasetSplit:
    """Load a split directory, validating every record.

    Args:
        path: Directory holding train.<ext> and test.<ext>.
        fmt: File format; inferred from the files present when None.
        strict: Raise on any malformed line instead of skipping it.

    Returns:
        The split, with an IngestReport listing every issue found.

    Raises:
        DataError: If the directory or a split file is missing or unreadable.
        IngestError: In strict mode, if any line was malformed.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise DataError(f"dataset directory '{directory}' not found")
    file_format = infer_format(directory) if fmt is None else FileFormat(fmt)

    paths = {name: directory / f"{name}.{file_format.value}" for name in SPLITS}
    train_rows, issues = _read_split(paths["train"], file_format)
    test_rows, test_issues = _read_split(paths["test"], file_format)
    issues.extend(test_issues)

    train = [record for _, record in train_rows]
    train_ids = {record.id for record in train}
    kept_test = []
    for line_no, record in test_rows:
        if record.id in train_ids:
            message = f"id '{record.id}' also appears in the train split"
            issues.append(IngestIssue(str(paths["test"]), line_no, message))
            continue
        kept_test.append(record)

    report = IngestReport(tuple(issues))
    if report.errors and strict:
        raise IngestError(report.errors)
    if report.issues:
        logger.warning(
            "%s: %d error(s) skipped, %d catalog warning(s)",
            directory,
            len(report.errors),
            len(report.warnings),
        )
    logger.info(
        "loaded %d train / %d test records from %s", len(train), len(kept_test), directory
    )
    return DatasetSplit(train=tuple(train), test=tuple(kept_test), report=report)


# ============================================================================
# Writing
# ============================================================================


def write_records(records: Iterable[QeRecord], path: Path, fmt: FileFormat) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt is FileFormat.JSONL:
        with path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
        return
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(TSV_COLUMNS)
        for record in records:
            writer.writerow(
                [
                    record.id,
                    record.source,
                    record.translation,
                    record.lang_pair.value,
                    record.domain.value,
                    ";".join(repr(s) for s in record.annotator_scores),
                    repr(record.da_score),
                ]
            )


def write_dataset(
    split: DatasetSplit, directory: str | Path, fmt: FileFormat | str = FileFormat.JSONL
) -> list[Path]:
    """Write both splits as train.<ext> and test.<ext>; returns the paths written."""
    file_format = FileFormat(fmt)
    out = Path(directory)
    paths = []
    for name in SPLITS:
        path = out / f"{name}.{file_format.value}"
        write_records(split.split(name), path, file_format)
        paths.append(path)
    return paths


def group_by(records: Iterable[QeRecord]) -> dict[tuple[Domain, LangPair], list[QeRecord]]:
    """Partition records by (domain, lang_pair), keeping input order inside each group."""
    groups: dict[tuple[Domain, LangPair], list[QeRecord]] = {}
    for record in records:
        groups.setdefault((record.domain, record.lang_pair), []).append(record)
    return groups


# ============================================================================
# Synthetic data
# ============================================================================

# Words of one vocabulary are anagrams of each other, so the byte histogram of a pair
# depends on its word counts only and the planted feature survives mean pooling.
SOURCE_WORDS = ("stop", "spot", "pots", "tops", "post", "opts")

TARGET_WORDS: dict[str, tuple[str, ...]] = {
    "hi": ("मन", "नम"),
    "mr": ("वन", "नव"),
    "ta": ("நம", "மந"),
    "te": ("మన", "నమ"),
    "gu": ("વન", "નવ"),
}


@dataclass(frozen=True)
class PlantedSignal:
    """DA = intercept + slope * (translation words / source words) + N(0, noise_std).

    Translations have between 1 and `max_ratio` times as many words as their source,
    so with the defaults the noiseless score spans roughly [16.7, 90].
    """

    slope: float = 40.0
    intercept: float = 10.0
    noise_std: float = 2.0
    source_words: tuple[int, int] = (3, 6)
    max_ratio: int = 2

    def __post_init__(self) -> None:
        low, high = self.source_words
        if not 1 <= low <= high:
            raise DataError(f"source_words range {self.source_words} is invalid")
        if self.max_ratio < 1 or self.noise_std < 0:
            raise DataError("max_ratio must be >= 1 and noise_std >= 0")


def planted_feature(record: QeRecord) -> float:
    """Word-count ratio of translation to source: the surface feature scores follow."""
    return len(record.translation.split()) / len(record.source.split())


def _synthetic_record(
    index: int,
    rng: np.random.Generator,
    signal: PlantedSignal,
    domain: Domain,
    lang_pair: LangPair,
    prefix: str,
) -> QeRecord:
    low, high = signal.source_words
    n_source = int(rng.integers(low, high + 1))
    n_translation = int(rng.integers(1, signal.max_ratio * n_source + 1))
    words = TARGET_WORDS[lang_pair.target_code]
    source = " ".join(SOURCE_WORDS[i] for i in rng.integers(0, len(SOURCE_WORDS), n_source))
    translation = " ".join(words[i] for i in rng.integers(0, len(words), n_translation))
    score = signal.intercept + signal.slope * n_translation / n_source
    if signal.noise_std > 0:
        score += float(rng.normal(0.0, signal.noise_std))
    return QeRecord(
        id=f"{prefix}-{index:06d}",
        source=source,
        translation=translation,
        lang_pair=lang_pair,
        domain=domain,
        da_score=float(np.clip(score, SCORE_MIN, SCORE_MAX)),
    )


def make_synthetic_dataset(
    n: int,
    seed: int = 0,
    signal: PlantedSignal | None = None,
    *,
    domain: Domain = Domain.GENERAL,
    lang_pairs: Sequence[LangPair] = (LangPair.EN_HI,),
) -> DatasetSplit:
    """Deterministic records with a planted, learnable score signal.

    Records cycle through `lang_pairs`; the first 90% go to train and the rest
    (at least one) to test.

    Raises:
        DataError: If n < 2 or no language pair is given.
    """
    if n < 2:
        raise DataError(f"a synthetic dataset needs n >= 2, got {n}")
    if not lang_pairs:
        raise DataError("make_synthetic_dataset needs at least one language pair")
    signal = signal or PlantedSignal()
    rng = np.random.default_rng(seed)
    records = [
        _synthetic_record(i, rng, signal, domain, lang_pairs[i % len(lang_pairs)], "syn")
        for i in range(n)
    ]
    n_test = max(1, n // 10)
    return DatasetSplit(train=tuple(records[: n - n_test]), test=tuple(records[n - n_test :]))


# ============================================================================
# Manifest
# ============================================================================


@dataclass(frozen=True)
class DatasetManifest:
    """Expected record counts per (domain, split), aggregated over language pairs."""

    counts: dict[Domain, dict[str, int]]

    @classmethod
    def from_json(cls, payload: dict) -> "DatasetManifest":
        try:
            counts = {
                Domain(domain): {split: int(splits[split]) for split in SPLITS}
                for domain, splits in payload.items()
            }
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        return cls(counts)

    def to_json(self) -> dict:
        return {domain.value: dict(splits) for domain, splits in self.counts.items()}


DOMAIN_MANIFEST = DatasetManifest(
    {
        Domain.HEALTHCARE: {"train": 13_280, "test": 1_660},
        Domain.LEGAL: {"train": 6_160, "test": 770},
        Domain.TOURISM: {"train": 13_840, "test": 1_730},
        Domain.GENERAL: {"train": 18_880, "test": 2_360},
    }
)


def validate_manifest(split: DatasetSplit, manifest: DatasetManifest) -> list[str]:
    """Compare per-domain split sizes against a manifest.

    Returns:
        One message per mismatching (domain, split); empty when the dataset matches.
    """
    problems = []
    for domain, expected in manifest.counts.items():
        for name in SPLITS:
            actual = sum(1 for r in split.split(name) if r.domain is domain)
            if actual != expected[name]:
                problems.append(
                    f"{domain.value}/{name}: expected {expected[name]} records, found {actual}"
                )
    undeclared = {r.domain for r in split.train + split.test} - set(manifest.counts)
    problems.extend(f"{d.value}: domain not declared in manifest" for d in sorted(undeclared))
    return problems


def make_catalog_dataset(
    manifest: DatasetManifest, seed: int = 0, signal: PlantedSignal | None = None
) -> DatasetSplit:
    """Synthetic records matching a manifest exactly, spread over each domain's pairs."""
    signal = signal or PlantedSignal()
    rng = np.random.default_rng(seed)
    splits: dict[str, list[QeRecord]] = {name: [] for name in SPLITS}
    for domain, expected in manifest.counts.items():
        pairs = DOMAIN_CATALOG[domain]
        for name in SPLITS:
            prefix = f"{domain.value}-{name}"
            splits[name].extend(
                _synthetic_record(i, rng, signal, domain, pairs[i % len(pairs)], prefix)
                for i in range(expected[name])
            )
    return DatasetSplit(train=tuple(splits["train"]), test=tuple(splits["test"]))
