"""Prompt-only quality estimation: templates, exemplars, scorer clients, score parsing.

Three protocols are supported. zero_shot gives only the task instruction; few_shot
adds 1-5 scored exemplars drawn from the train split; few_shot_guidelines also adds
a scoring rubric. Templates are UTF-8 files under src/templates/ with {{name}}
placeholders, parsed by src.template_parser.

Scoring is pluggable: anything with a `send(ScoreRequest) -> str` method works.
Responses are parsed for the first number, clamped to [0, 100] and flagged when
clamping was needed. Records that fail are reported, never imputed.
"""

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from src.data import LANGUAGE_NAMES, SCORE_MAX, SCORE_MIN, DatasetSplit, Domain, LangPair, QeRecord
from src.errors import (
    CredentialsError,
    DataError,
    PromptError,
    ScoreParseError,
    ScorerError,
    ScorerUnavailableError,
)
from src.qe_head import Prediction
from src.template_parser import ParsedTemplate, TemplateParser
from src.transformer import normalize_text

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).with_name("templates")
GUIDELINES_FILE = "guidelines.txt"
KNOWN_PLACEHOLDERS = frozenset(
    {"source", "translation", "exemplars", "guidelines", "source_language", "target_language"}
)
MIN_EXEMPLARS = 1
MAX_EXEMPLARS = 5
API_KEY_ENV = "QE_SCORER_API_KEY"
DEFAULT_CONCURRENCY = 4

SCORE_PATTERN = re.compile(r"[-+]?\d+(?:\.\d+)?")


class PromptKind(str, Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    FEW_SHOT_GUIDELINES = "few_shot_guidelines"

    @property
    def uses_exemplars(self) -> bool:
        return self is not PromptKind.ZERO_SHOT

    @property
    def uses_guidelines(self) -> bool:
        return self is PromptKind.FEW_SHOT_GUIDELINES


# ============================================================================
# Templates
# ============================================================================


@dataclass(frozen=True)
class PromptTemplate:
    """A parsed template of one kind, plus the rubric text for the guidelines kind.

    Construction checks the slots: source and translation are always required,
    {{exemplars}} is required exactly for the few-shot kinds and {{guidelines}}
    exactly for few_shot_guidelines.
    """

    kind: PromptKind
    body: ParsedTemplate
    guidelines_text: str | None = None

    def __post_init__(self) -> None:
        names = self.body.placeholder_names
        where = self.body.filename or self.kind.value
        for required in ("source", "translation"):
            if required not in names:
                raise PromptError(f"{where}: template lacks the {{{{{required}}}}} slot")
        for slot, wanted in (
            ("exemplars", self.kind.uses_exemplars),
            ("guidelines", self.kind.uses_guidelines),
        ):
            if wanted and slot not in names:
                raise PromptError(f"{where}: {self.kind.value} needs a {{{{{slot}}}}} slot")
            if not wanted and slot in names:
                raise PromptError(f"{where}: {self.kind.value} must not use {{{{{slot}}}}}")
        if self.kind.uses_guidelines != (self.guidelines_text is not None):
            raise PromptError(f"{where}: guidelines text is required only for few_shot_guidelines")


@lru_cache(maxsize=1)
def _template_parser() -> TemplateParser:
    return TemplateParser()


def parse_template(
    kind: PromptKind, text: str, guidelines_text: str | None = None, filename: str | None = None
) -> PromptTemplate:
    body = _template_parser().parse(text, filename, allowed=KNOWN_PLACEHOLDERS)
    return PromptTemplate(kind=kind, body=body, guidelines_text=guidelines_text)


def load_template(kind: PromptKind, template_dir: str | Path | None = None) -> PromptTemplate:
    """Load `<kind>.tmpl` (and guidelines.txt for the guidelines kind) from a directory.

    Raises:
        PromptError: A file is missing or the template is invalid for its kind.
    """
    directory = Path(template_dir) if template_dir is not None else TEMPLATE_DIR
    path = directory / f"{kind.value}.tmpl"
    try:
        text = path.read_text(encoding="utf-8")
        guidelines = None
        if kind.uses_guidelines:
            guidelines = (directory / GUIDELINES_FILE).read_text(encoding="utf-8").strip("\n")
    except OSError as e:
        raise PromptError(f"cannot read template files for {kind.value}: {e}") from e
    return parse_template(kind, text, guidelines, filename=str(path))


# ============================================================================
# Exemplars and rendering
# ============================================================================


@dataclass(frozen=True)
class Exemplar:
    source: str
    translation: str
    gold_da: float
    record_id: str = ""

    @classmethod
    def from_record(cls, record: QeRecord) -> "Exemplar":
        return cls(record.source, record.translation, record.da_score, record.id)


def format_exemplars(exemplars: Sequence[Exemplar]) -> str:
    return "\n\n".join(
        f"Example {i}\nSource: {normalize_text(e.source)}\n"
        f"Translation: {normalize_text(e.translation)}\nScore: {e.gold_da:.1f}"
        for i, e in enumerate(exemplars, start=1)
    )


def render_prompt(
    template: PromptTemplate,
    source: str,
    translation: str,
    exemplars: Sequence[Exemplar] = (),
    *,
    lang_pair: LangPair = LangPair.EN_HI,
) -> str:
    """Fill a template for one source/translation pair.

    Raises:
        PromptError: Exemplar count does not fit the kind (0 for zero_shot, 1-5
            otherwise), an exemplar score is outside [0, 100], or a text is empty.
    """
    n = len(exemplars)
    if not template.kind.uses_exemplars and n:
        raise PromptError(f"zero_shot prompts take no exemplars, got {n}")
    if template.kind.uses_exemplars and not MIN_EXEMPLARS <= n <= MAX_EXEMPLARS:
        raise PromptError(
            f"{template.kind.value} prompts take {MIN_EXEMPLARS}-{MAX_EXEMPLARS} exemplars, got {n}"
        )
    for e in exemplars:
        if not np.isfinite(e.gold_da) or not SCORE_MIN <= e.gold_da <= SCORE_MAX:
            raise PromptError(
                f"exemplar {e.record_id or '?'} has gold score {e.gold_da} out of range"
            )
    source, translation = normalize_text(source), normalize_text(translation)
    if not source or not translation:
        raise PromptError("source and translation must be non-empty")
    values = {
        "source": source,
        "translation": translation,
        "source_language": LANGUAGE_NAMES[lang_pair.source_code],
        "target_language": LANGUAGE_NAMES[lang_pair.target_code],
        "exemplars": format_exemplars(exemplars),
        "guidelines": template.guidelines_text or "",
    }
    return template.body.substitute(values)


def score_band(da: float) -> int:
    """0 for low, 1 for mid and 2 for high scores (thirds of the 0-100 scale)."""
    if da < SCORE_MAX / 3:
        return 0
    return 1 if da < 2 * SCORE_MAX / 3 else 2


def select_exemplars(
    train: Sequence[QeRecord],
    k: int,
    lang_pair: LangPair,
    domain: Domain,
    seed: int = 0,
) -> list[Exemplar]:
    """Seeded, score-band stratified sample of k in-domain, in-language train records.

    Bands are shuffled independently and drawn round-robin low, mid, high, so a
    sample covers as much of the scale as the pool allows.

    Raises:
        PromptError: k outside 1-5 or fewer than k matching records.
    """
    if not MIN_EXEMPLARS <= k <= MAX_EXEMPLARS:
        raise PromptError(f"k must be in [{MIN_EXEMPLARS}, {MAX_EXEMPLARS}], got {k}")
    pool = [r for r in train if r.lang_pair is lang_pair and r.domain is domain]
    if len(pool) < k:
        raise PromptError(
            f"insufficient exemplars for {domain.value}/{lang_pair.value}: "
            f"need {k}, have {len(pool)}"
        )
    rng = np.random.default_rng(seed)
    bands: list[list[QeRecord]] = [[], [], []]
    for record in pool:
        bands[score_band(record.da_score)].append(record)
    queues = [[band[i] for i in rng.permutation(len(band))] for band in bands]
    chosen: list[QeRecord] = []
    while len(chosen) < k:
        for queue in queues:
            if queue and len(chosen) < k:
                chosen.append(queue.pop(0))
    return [Exemplar.from_record(r) for r in chosen]


@dataclass(frozen=True)
class ExemplarPolicy:
    """How exemplars are picked per (domain, lang_pair) group of the scored split."""

    k: int = 3
    seed: int = 0


@dataclass(frozen=True)
class RenderedPrompt:
    record: QeRecord
    prompt: str
    exemplar_ids: tuple[str, ...] = ()


def render_split(
    template: PromptTemplate,
    split: DatasetSplit,
    policy: ExemplarPolicy | None = None,
) -> list[RenderedPrompt]:
    """Render one prompt per test record, with exemplars taken from the train split.

    Raises:
        DataError: The test split is empty.
        PromptError: Exemplar selection fails or an exemplar id is a test id.
    """
    if not split.test:
        raise DataError("nothing to score: the test split is empty")
    policy = policy or ExemplarPolicy()
    test_ids = {r.id for r in split.test}
    cache: dict[tuple[Domain, LangPair], list[Exemplar]] = {}
    rendered = []
    for record in split.test:
        exemplars: list[Exemplar] = []
        if template.kind.uses_exemplars:
            group = (record.domain, record.lang_pair)
            if group not in cache:
                cache[group] = select_exemplars(
                    split.train, policy.k, record.lang_pair, record.domain, policy.seed
                )
            exemplars = cache[group]
        leaked = test_ids.intersection(e.record_id for e in exemplars)
        if leaked:
            raise PromptError(f"exemplars drawn from the test split: {sorted(leaked)}")
        prompt = render_prompt(
            template, record.source, record.translation, exemplars, lang_pair=record.lang_pair
        )
        rendered.append(RenderedPrompt(record, prompt, tuple(e.record_id for e in exemplars)))
    return rendered


def prompt_filename(index: int, record_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", record_id)
    return f"{index:05d}-{safe}.txt"


# ============================================================================
# Score parsing
# ============================================================================


@dataclass(frozen=True)
class ParsedScore:
    value: float
    clamped: bool
    raw_text: str


def parse_score(text: str) -> ParsedScore:
    """Take the first decimal number in a response as the DA score.

    Values outside [0, 100] are clamped and flagged.

    Raises:
        ScoreParseError: The text contains no number.
    """
    match = SCORE_PATTERN.search(text)
    if match is None:
        raise ScoreParseError(f"no numeric score in response {text[:80]!r}")
    value = float(match.group())
    clipped = min(max(value, SCORE_MIN), SCORE_MAX)
    return ParsedScore(value=clipped, clamped=clipped != value, raw_text=text)


# ============================================================================
# Scorer clients
# ============================================================================


@dataclass(frozen=True)
class ScoreRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 16
    record_id: str = ""


class ScorerClient(Protocol):
    name: str

    def send(self, request: ScoreRequest) -> str: ...


@dataclass
class FixedResponseClient:
    """Answers every request with the same text; ids in `fail_ids` raise ScorerError."""

    response: str = "Score: 50"
    fail_ids: frozenset[str] = frozenset()
    name: str = "fixed"

    def send(self, request: ScoreRequest) -> str:
        if request.record_id in self.fail_ids:
            raise ScorerError(f"simulated failure for {request.record_id}")
        return self.response


@dataclass
class EchoGoldClient:
    """Answers with the gold score of the requested record."""

    gold: Mapping[str, float]
    name: str = "echo-gold"

    def send(self, request: ScoreRequest) -> str:
        if request.record_id not in self.gold:
            raise ScorerError(f"no gold score for record {request.record_id!r}")
        return f"Score: {self.gold[request.record_id]:.10f}"


@dataclass
class HashScoreClient:
    """Deterministic pseudo-score from a hash of the prompt text."""

    salt: str = ""
    name: str = "hash"

    def send(self, request: ScoreRequest) -> str:
        digest = hashlib.sha256((self.salt + request.prompt).encode("utf-8")).hexdigest()
        return f"Score: {int(digest[:8], 16) % 10001 / 100:.2f}"


def _response_text(payload: object) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        choices = payload.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            first = choices[0]
            if isinstance(first.get("text"), str):
                return first["text"]
            message = first.get("message")
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                return message["content"]
    raise ScorerError("scorer response has no text field")


@dataclass
class HttpScorerClient:
    """POSTs {model, prompt, temperature, max_tokens} as JSON and reads back the text.

    401/403 answers mean the scorer will refuse every request and raise
    ScorerUnavailableError; other failures are per-request ScorerErrors.
    """

    endpoint: str
    model: str
    api_key: str = field(repr=False)
    timeout: float = 30.0
    name: str = "http"

    @classmethod
    def from_env(cls, endpoint: str, model: str, timeout: float = 30.0) -> "HttpScorerClient":
        """Build a client with the key from QE_SCORER_API_KEY.

        Raises:
            CredentialsError: The variable is unset or empty.
        """
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise CredentialsError(f"{API_KEY_ENV} is not set; the HTTP scorer needs an API key")
        return cls(endpoint=endpoint, model=model, api_key=key, timeout=timeout)

    def send(self, request: ScoreRequest) -> str:
        body = json.dumps(
            {
                "model": self.model,
                "prompt": request.prompt,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            }
        ).encode("utf-8")
        http_request = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.api_key}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as e:
            if e.code in (401, 403):
                raise ScorerUnavailableError(f"scorer refused the request (HTTP {e.code})") from e
            raise ScorerError(f"scorer returned HTTP {e.code}") from e
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as e:
            raise ScorerError(f"scorer request failed: {e}") from e
        return _response_text(payload)


# ============================================================================
# Dataset scoring
# ============================================================================


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retries with exponential backoff and seeded jitter."""

    attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0
    jitter: float = 0.25
    seed: int = 0
    sleep: Callable[[float], None] = field(default=time.sleep, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.attempts < 1 or self.base_delay < 0 or self.jitter < 0:
            raise PromptError("retry policy needs attempts >= 1 and non-negative delays")

    def delay(self, attempt: int, rng: np.random.Generator) -> float:
        backoff = min(self.max_delay, self.base_delay * 2 ** (attempt - 1))
        return backoff * (1.0 + self.jitter * float(rng.random()))


def send_with_retry(
    client: ScorerClient, request: ScoreRequest, policy: RetryPolicy, rng: np.random.Generator
) -> str:
    """Send a request, retrying ScorerErrors; ScorerUnavailableError is never retried."""
    for attempt in range(1, policy.attempts + 1):
        try:
            return client.send(request)
        except ScorerUnavailableError:
            raise
        except ScorerError as e:
            if attempt == policy.attempts:
                raise
            wait = policy.delay(attempt, rng)
            logger.warning(
                "record %s: attempt %d/%d failed (%s), retrying in %.2fs",
                request.record_id,
                attempt,
                policy.attempts,
                e,
                wait,
            )
            policy.sleep(wait)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ScoreFailure:
    record_id: str
    stage: str
    message: str


@dataclass
class ScoringResult:
    """Parsed predictions for the records that succeeded, and a report of the rest."""

    records: list[QeRecord] = field(default_factory=list)
    predictions: list[Prediction] = field(default_factory=list)
    failures: list[ScoreFailure] = field(default_factory=list)
    n_clamped: int = 0

    @property
    def values(self) -> list[float]:
        return [p.prediction for p in self.predictions]


def score_dataset(
    client: ScorerClient,
    template: PromptTemplate,
    split: DatasetSplit,
    policy: ExemplarPolicy | None = None,
    *,
    concurrency: int = DEFAULT_CONCURRENCY,
    retry: RetryPolicy | None = None,
    temperature: float = 0.0,
    max_tokens: int = 16,
) -> ScoringResult:
    """Score every test record of a split with a prompt template.

    At most `concurrency` requests are in flight; results are assembled in input
    order. Failed requests and unparseable responses become failure entries.

    Raises:
        ScorerUnavailableError: The client refuses service or every request failed in
            transport. Unparseable responses are returned as failures, never raised.
    """
    if concurrency < 1:
        raise PromptError(f"concurrency must be >= 1, got {concurrency}")
    retry = retry or RetryPolicy()
    rendered = render_split(template, split, policy)

    def score_one(index: int) -> ParsedScore | ScoreFailure:
        item = rendered[index]
        request = ScoreRequest(item.prompt, temperature, max_tokens, item.record.id)
        rng = np.random.default_rng([retry.seed, index])
        try:
            text = send_with_retry(client, request, retry, rng)
        except ScorerUnavailableError:
            raise
        except ScorerError as e:
            logger.info("record %s: request failed: %s", item.record.id, e)
            return ScoreFailure(item.record.id, "request", str(e))
        try:
            return parse_score(text)
        except ScoreParseError as e:
            logger.info("record %s: %s", item.record.id, e)
            return ScoreFailure(item.record.id, "parse", str(e))

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        outcomes = list(pool.map(score_one, range(len(rendered))))

    result = ScoringResult()
    for item, outcome in zip(rendered, outcomes, strict=True):
        if isinstance(outcome, ScoreFailure):
            result.failures.append(outcome)
            continue
        result.records.append(item.record)
        result.predictions.append(Prediction(item.record.id, outcome.value, item.record.da_score))
        result.n_clamped += outcome.clamped
    transport_failures = sum(1 for f in result.failures if f.stage == "request")
    if rendered and transport_failures == len(rendered):
        raise ScorerUnavailableError(f"all {len(rendered)} scoring requests failed")
    logger.info(
        "scored %d/%d records with %s (%d clamped)",
        len(result.predictions),
        len(rendered),
        client.name,
        result.n_clamped,
    )
    return result


def write_failures_jsonl(path: str | Path, failures: Sequence[ScoreFailure]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for failure in failures:
            row = {"id": failure.record_id, "stage": failure.stage, "message": failure.message}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path
