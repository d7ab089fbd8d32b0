"""Tests for prompt templates, exemplar selection, score parsing and scoring."""

import io
import json
import urllib.error
import urllib.request
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.data import Domain, LangPair, QeRecord, make_synthetic_dataset
from src.errors import (
    CredentialsError,
    DataError,
    PromptError,
    ScoreParseError,
    ScorerError,
    ScorerUnavailableError,
)
from src.metrics import spearman
from src.prompting import (
    API_KEY_ENV,
    EchoGoldClient,
    Exemplar,
    ExemplarPolicy,
    FixedResponseClient,
    HashScoreClient,
    HttpScorerClient,
    PromptKind,
    RetryPolicy,
    ScoreFailure,
    ScoreRequest,
    load_template,
    parse_score,
    parse_template,
    prompt_filename,
    render_prompt,
    render_split,
    score_dataset,
    select_exemplars,
    send_with_retry,
    write_failures_jsonl,
)

GOLDEN_DIR = Path(__file__).with_name("golden")
SOURCE = "The patient should take the medicine every morning."
TRANSLATION = "मरीज को हर सुबह दवा लेनी चाहिए।"
EXEMPLARS = (
    Exemplar("Visit the museum before noon.", "दोपहर से पहले संग्रहालय जाएँ।", 86.0, "x1"),
    Exemplar("The court notice", "नदी", 12.5, "x2"),
)
NO_WAIT = RetryPolicy(sleep=lambda seconds: None)


def record(record_id: str, da: float, pair=LangPair.EN_HI, domain=Domain.HEALTHCARE):
    """A train record with a given gold score."""
    return QeRecord(record_id, f"source {record_id}", f"target {record_id}", pair, domain, da)


@pytest.fixture
def split():
    """Ninety train and ten test records."""
    return make_synthetic_dataset(100, seed=3)


class TestTemplates:
    """Tests for loading and validating templates."""

    @pytest.mark.parametrize("kind", list(PromptKind))
    def test_golden(self, kind):
        """Test that each bundled template renders byte-identical to its golden file."""
        exemplars = EXEMPLARS if kind.uses_exemplars else ()
        prompt = render_prompt(load_template(kind), SOURCE, TRANSLATION, exemplars)
        expected = (GOLDEN_DIR / f"{kind.value}.txt").read_text(encoding="utf-8")
        assert prompt == expected

    def test_deterministic(self):
        """Test that rendering twice gives the same text."""
        template = load_template(PromptKind.FEW_SHOT)
        first = render_prompt(template, SOURCE, TRANSLATION, EXEMPLARS)
        assert render_prompt(template, SOURCE, TRANSLATION, EXEMPLARS) == first

    def test_language_names(self):
        """Test that language names follow the pair."""
        template = load_template(PromptKind.ZERO_SHOT)
        prompt = render_prompt(template, "x", "y", lang_pair=LangPair.EN_TA)
        assert "from English into Tamil" in prompt
        assert "Tamil translation: y" in prompt

    @pytest.mark.parametrize(
        ("kind", "text", "message"),
        [
            (PromptKind.ZERO_SHOT, "{{translation}}", "lacks the {{source}} slot"),
            (PromptKind.ZERO_SHOT, "{{source}} {{translation}} {{exemplars}}", "must not use"),
            (PromptKind.FEW_SHOT, "{{source}} {{translation}}", "needs a {{exemplars}} slot"),
            (PromptKind.FEW_SHOT, "{{source}} {{translation}} {{rubric}}", "unknown placeholder"),
        ],
    )
    def test_invalid_slots(self, kind, text, message):
        """Test slot requirements per kind and unknown placeholder names."""
        with pytest.raises(PromptError, match=message):
            parse_template(kind, text)

    def test_guidelines_text_required(self):
        """Test that the guidelines kind cannot be built without rubric text."""
        text = "{{guidelines}} {{exemplars}} {{source}} {{translation}}"
        with pytest.raises(PromptError, match="guidelines text"):
            parse_template(PromptKind.FEW_SHOT_GUIDELINES, text)

    def test_custom_directory(self, tmp_path):
        """Test loading from another directory, and a missing file."""
        (tmp_path / "zero_shot.tmpl").write_text("Rate: {{source}} => {{translation}}\n")
        template = load_template(PromptKind.ZERO_SHOT, tmp_path)
        assert render_prompt(template, "a", "b") == "Rate: a => b\n"
        with pytest.raises(PromptError, match="cannot read"):
            load_template(PromptKind.FEW_SHOT, tmp_path)


class TestRender:
    """Tests for render_prompt contracts."""

    def test_zero_shot_rejects_exemplars(self):
        """Test that zero_shot takes no exemplars."""
        with pytest.raises(PromptError):
            render_prompt(load_template(PromptKind.ZERO_SHOT), "a", "b", EXEMPLARS[:1])

    @pytest.mark.parametrize("n", [0, 6])
    def test_few_shot_bounds(self, n):
        """Test that few-shot prompts take between 1 and 5 exemplars."""
        exemplars = [EXEMPLARS[0]] * n
        with pytest.raises(PromptError, match="1-5"):
            render_prompt(load_template(PromptKind.FEW_SHOT), "a", "b", exemplars)

    def test_exemplar_score_range(self):
        """Test that exemplar scores must lie in [0, 100]."""
        bad = [Exemplar("s", "t", 101.0, "bad")]
        with pytest.raises(PromptError, match="out of range"):
            render_prompt(load_template(PromptKind.FEW_SHOT), "a", "b", bad)

    def test_empty_text(self):
        """Test that empty source or translation is rejected."""
        with pytest.raises(PromptError):
            render_prompt(load_template(PromptKind.ZERO_SHOT), "a", "  ")


class TestExemplars:
    """Tests for stratified exemplar selection."""

    def test_one_per_band(self):
        """Test that k=3 from scores {10, 50, 90, 95} covers low, mid and high."""
        pool = [record("a", 10.0), record("b", 50.0), record("c", 90.0), record("d", 95.0)]
        chosen = select_exemplars(pool, 3, LangPair.EN_HI, Domain.HEALTHCARE, seed=1)
        assert [e.gold_da for e in chosen[:2]] == [10.0, 50.0]
        assert chosen[2].gold_da in (90.0, 95.0)

    def test_seeded(self):
        """Test that the same seed picks the same exemplars."""
        pool = [record(str(i), float(i)) for i in range(0, 100, 7)]
        first = select_exemplars(pool, 5, LangPair.EN_HI, Domain.HEALTHCARE, seed=4)
        assert select_exemplars(pool, 5, LangPair.EN_HI, Domain.HEALTHCARE, seed=4) == first

    def test_filters_group(self):
        """Test that only same-pair, same-domain records are candidates."""
        pool = [
            record("hi", 40.0),
            record("ta", 40.0, pair=LangPair.EN_TA),
            record("legal", 40.0, domain=Domain.LEGAL),
        ]
        chosen = select_exemplars(pool, 1, LangPair.EN_HI, Domain.HEALTHCARE)
        assert [e.record_id for e in chosen] == ["hi"]

    def test_insufficient_pool(self):
        """Test that a pool smaller than k is an error."""
        pool = [record("a", 10.0), record("b", 20.0)]
        with pytest.raises(PromptError, match="insufficient exemplars"):
            select_exemplars(pool, 3, LangPair.EN_HI, Domain.HEALTHCARE)

    @pytest.mark.parametrize("k", [0, 6])
    def test_k_range(self, k):
        """Test that k must be between 1 and 5."""
        with pytest.raises(PromptError):
            select_exemplars([record("a", 10.0)] * 6, k, LangPair.EN_HI, Domain.HEALTHCARE)


class TestRenderSplit:
    """Tests for rendering a whole test split."""

    def test_zero_shot(self, split):
        """Test one prompt per test record, in order."""
        rendered = render_split(load_template(PromptKind.ZERO_SHOT), split)
        assert [r.record.id for r in rendered] == [r.id for r in split.test]
        assert all(r.exemplar_ids == () for r in rendered)

    def test_few_shot_uses_train(self, split):
        """Test that exemplars come from the train split only."""
        template = load_template(PromptKind.FEW_SHOT)
        rendered = render_split(template, split, ExemplarPolicy(k=2, seed=5))
        train_ids = {r.id for r in split.train}
        assert all(len(r.exemplar_ids) == 2 for r in rendered)
        assert all(set(r.exemplar_ids) <= train_ids for r in rendered)

    def test_empty_test_split(self, split):
        """Test that there must be something to score."""
        with pytest.raises(DataError):
            render_split(load_template(PromptKind.ZERO_SHOT), replace(split, test=()))

    def test_prompt_filename(self):
        """Test zero-padded, filesystem-safe prompt names."""
        assert prompt_filename(3, "syn-000007") == "00003-syn-000007.txt"
        assert prompt_filename(12, "a/b c") == "00012-a_b_c.txt"


class TestParseScore:
    """Tests for extracting scores from responses."""

    @pytest.mark.parametrize(
        ("text", "value", "clamped"),
        [
            ("Score: 87", 87.0, False),
            ("87.5/100", 87.5, False),
            ("  42\n", 42.0, False),
            ("120", 100.0, True),
            ("Score: -5", 0.0, True),
        ],
    )
    def test_values(self, text, value, clamped):
        """Test plain, fractional and out-of-range answers."""
        parsed = parse_score(text)
        assert parsed.value == value
        assert parsed.clamped is clamped
        assert parsed.raw_text == text

    def test_no_number(self):
        """Test that a response without a number is a parse error."""
        with pytest.raises(ScoreParseError):
            parse_score("excellent translation")


class TestClients:
    """Tests for the scorer clients."""

    def test_hash_client(self):
        """Test that the hash client is deterministic and in range."""
        client = HashScoreClient(salt="s")
        request = ScoreRequest("prompt text")
        assert client.send(request) == client.send(request)
        assert 0.0 <= parse_score(client.send(request)).value <= 100.0

    def test_echo_client_unknown_id(self):
        """Test that the echo client fails for ids it has no gold for."""
        with pytest.raises(ScorerError):
            EchoGoldClient({}).send(ScoreRequest("p", record_id="x"))

    def test_http_needs_key(self, monkeypatch):
        """Test that a missing API key is a credentials error."""
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        with pytest.raises(CredentialsError):
            HttpScorerClient.from_env("http://localhost:9", "m")

    def test_http_round_trip(self, monkeypatch):
        """Test the request body, auth header and chat-style response parsing."""
        sent = {}

        def fake_urlopen(request, timeout):
            sent["body"] = json.loads(request.data)
            sent["auth"] = request.get_header("Authorization")
            reply = {"choices": [{"message": {"content": "Score: 73"}}]}
            return io.BytesIO(json.dumps(reply).encode())

        monkeypatch.setattr(urllib.request, "urlopen", fake_urlopen)
        monkeypatch.setenv(API_KEY_ENV, "secret")
        client = HttpScorerClient.from_env("http://scorer.test/v1", "qe-model")
        assert client.send(ScoreRequest("rate this", max_tokens=8)) == "Score: 73"
        assert sent["body"] == {
            "model": "qe-model",
            "prompt": "rate this",
            "temperature": 0.0,
            "max_tokens": 8,
        }
        assert sent["auth"] == "Bearer secret"

    @pytest.mark.parametrize(("code", "error"), [(401, ScorerUnavailableError), (500, ScorerError)])
    def test_http_errors(self, monkeypatch, code, error):
        """Test that refusals and server errors map to scorer errors."""

        def fake_urlopen(request, timeout):
            raise urllib.error.HTTPError(request.full_url, code, "error", {}, None)

        monkeypatch.setattr(urllib.request, "urlopen", fake_urlopen)
        client = HttpScorerClient("http://scorer.test", "m", api_key="k")
        with pytest.raises(error):
            client.send(ScoreRequest("p"))


class FlakyClient:
    """Fails a fixed number of times before answering."""

    name = "flaky"

    def __init__(self, failures: int, error: type[ScorerError] = ScorerError):
        self.failures = failures
        self.error = error
        self.calls = 0

    def send(self, request: ScoreRequest) -> str:
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error("temporary")
        return "Score: 64"


class TestRetry:
    """Tests for bounded retries."""

    def test_backoff(self):
        """Test exponential delays capped at max_delay, without jitter."""
        policy = RetryPolicy(base_delay=0.5, max_delay=3.0, jitter=0.0)
        rng = np.random.default_rng(0)
        assert [policy.delay(a, rng) for a in (1, 2, 3, 4)] == [0.5, 1.0, 2.0, 3.0]

    def test_recovers(self):
        """Test that a request succeeding on the last attempt is returned."""
        waits: list[float] = []
        policy = RetryPolicy(attempts=3, jitter=0.0, sleep=waits.append)
        client = FlakyClient(failures=2)
        assert send_with_retry(client, ScoreRequest("p"), policy, np.random.default_rng(0)) == (
            "Score: 64"
        )
        assert client.calls == 3
        assert waits == [0.5, 1.0]

    def test_gives_up(self):
        """Test that the last error is raised after all attempts."""
        client = FlakyClient(failures=5)
        with pytest.raises(ScorerError):
            send_with_retry(client, ScoreRequest("p"), NO_WAIT, np.random.default_rng(0))
        assert client.calls == 3

    def test_unavailable_not_retried(self):
        """Test that a refusal stops at the first attempt."""
        client = FlakyClient(failures=5, error=ScorerUnavailableError)
        with pytest.raises(ScorerUnavailableError):
            send_with_retry(client, ScoreRequest("p"), NO_WAIT, np.random.default_rng(0))
        assert client.calls == 1

    def test_invalid_policy(self):
        """Test that at least one attempt is required."""
        with pytest.raises(PromptError):
            RetryPolicy(attempts=0)


class TestScoreDataset:
    """Tests for scoring a split end to end."""

    def test_fixed_response(self, split):
        """Test that a fixed answer gives that score everywhere."""
        template = load_template(PromptKind.ZERO_SHOT)
        result = score_dataset(FixedResponseClient("Score: 50"), template, split, retry=NO_WAIT)
        assert result.values == [50.0] * 10
        assert result.failures == []

    def test_failure_is_reported(self, split):
        """Test that one failing record is reported and not imputed."""
        failing = split.test[4].id
        client = FixedResponseClient(fail_ids=frozenset({failing}))
        template = load_template(PromptKind.ZERO_SHOT)
        result = score_dataset(client, template, split, retry=NO_WAIT, concurrency=3)
        assert len(result.predictions) == 9
        assert result.failures == [
            ScoreFailure(failing, "request", f"simulated failure for {failing}")
        ]
        assert failing not in [r.id for r in result.records]

    def test_echo_gold_is_perfect(self, split):
        """Test that echoing gold scores yields a rank correlation of 1."""
        gold = {r.id: r.da_score for r in split.test}
        template = load_template(PromptKind.FEW_SHOT_GUIDELINES)
        result = score_dataset(EchoGoldClient(gold), template, split, retry=NO_WAIT)
        gold_values = [r.da_score for r in result.records]
        assert spearman(result.values, gold_values) == pytest.approx(1.0)

    def test_unparseable_everywhere(self, split):
        """Test that answers without a number are reported as parse failures."""
        client = FixedResponseClient("no number")
        result = score_dataset(client, load_template(PromptKind.ZERO_SHOT), split, retry=NO_WAIT)
        assert result.predictions == []
        assert [f.record_id for f in result.failures] == [r.id for r in split.test]
        assert {f.stage for f in result.failures} == {"parse"}

    def test_every_request_fails(self, split):
        """Test that a scorer failing every request is unavailable."""
        client = FixedResponseClient(fail_ids=frozenset(r.id for r in split.test))
        with pytest.raises(ScorerUnavailableError, match="all 10"):
            score_dataset(client, load_template(PromptKind.ZERO_SHOT), split, retry=NO_WAIT)

    def test_mixed_failures_are_returned(self, split):
        """Test that request failures plus parse failures on the rest do not raise."""
        failing = frozenset(r.id for r in split.test[:4])
        client = FixedResponseClient("no number", fail_ids=failing)
        result = score_dataset(client, load_template(PromptKind.ZERO_SHOT), split, retry=NO_WAIT)
        stages = [f.stage for f in result.failures]
        assert stages.count("request") == 4
        assert stages.count("parse") == 6

    def test_clamped_count(self, split):
        """Test that clamped answers are counted."""
        client = FixedResponseClient("Score: 150")
        result = score_dataset(client, load_template(PromptKind.ZERO_SHOT), split, retry=NO_WAIT)
        assert result.n_clamped == 10
        assert result.values == [100.0] * 10

    def test_write_failures(self, tmp_path):
        """Test the failures JSONL layout."""
        path = write_failures_jsonl(tmp_path / "failures.jsonl", [ScoreFailure("r1", "parse", "x")])
        assert json.loads(path.read_text()) == {"id": "r1", "stage": "parse", "message": "x"}
