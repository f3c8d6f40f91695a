import threading
import time

import numpy as np
import pytest

from kare.errors import BackendError, TemplateError
from kare.gateway import (
    ChatRequest,
    EchoChat,
    FlakyChat,
    Gateway,
    MockEmbedding,
    PromptTemplate,
    RecordingChat,
    ResponseCache,
    ScriptedChat,
    load_template,
    parse_bracketed_triples,
)


class TestTemplates:
    def test_assets_load_and_declare_placeholders(self):
        template = load_template("triples_from_text")
        assert template.required == {"text", "concepts"}

    def test_unknown_asset(self):
        with pytest.raises(TemplateError):
            load_template("no_such_template")

    def test_render_fails_on_unbound_placeholder(self):
        template = PromptTemplate.from_text("t", "hello {name} from {place}")
        with pytest.raises(TemplateError, match="place"):
            template.render({"name": "x"})

    def test_render_leaves_no_placeholders(self):
        template = PromptTemplate.from_text("t", "a {x} b")
        assert template.render({"x": "1"}) == "a 1 b"

    def test_unresolved_placeholder_in_value_detected(self):
        template = PromptTemplate.from_text("t", "a {x} b")
        with pytest.raises(TemplateError, match="unresolved"):
            template.render({"x": "{y}"})


def make_gateway(chat, **kwargs):
    return Gateway(chat, MockEmbedding(dimension=32, seed=0), **kwargs)


def simple_request(payload="hi"):
    return ChatRequest("probe", {"payload": payload})


def register_probe(gateway):
    gateway.register_template(PromptTemplate.from_text("probe", "PAYLOAD={payload}"))


class TestComplete:
    def test_echo_contains_rendered_payload(self):
        gateway = make_gateway(EchoChat())
        register_probe(gateway)
        response = gateway.complete(simple_request("xyzzy"))
        assert "PAYLOAD=xyzzy" in response.text

    def test_second_identical_request_served_from_cache(self):
        scripted = ScriptedChat(["only answer"])
        gateway = make_gateway(scripted)
        register_probe(gateway)
        first = gateway.complete(simple_request())
        second = gateway.complete(simple_request())
        assert scripted.calls == 1
        assert not first.cached and second.cached
        assert first.text == second.text

    def test_scripted_responses_arrive_in_order(self):
        scripted = ScriptedChat(["one", "two", "three"])
        gateway = make_gateway(scripted)
        register_probe(gateway)
        texts = [gateway.complete(simple_request(str(i))).text for i in range(3)]
        assert texts == ["one", "two", "three"]

    def test_cache_round_trip_is_byte_identical_across_gateways(self, tmp_path):
        cache = ResponseCache(tmp_path / "cache")
        first = make_gateway(ScriptedChat(["payload é"]), cache=cache)
        register_probe(first)
        text1 = first.complete(simple_request()).text
        # Same backend id, fresh gateway, same persistent cache: no backend call.
        second = make_gateway(ScriptedChat([]), cache=ResponseCache(tmp_path / "cache"))
        register_probe(second)
        text2 = second.complete(simple_request()).text
        assert text1 == text2

    def test_retry_then_success(self):
        flaky = FlakyChat(EchoChat(), failures=2)
        gateway = make_gateway(flaky, max_attempts=3, backoff_base=0.0)
        register_probe(gateway)
        assert "PAYLOAD" in gateway.complete(simple_request()).text
        assert flaky.attempts == 3

    def test_exhausted_retries_raise_with_status(self):
        flaky = FlakyChat(EchoChat(), failures=5)
        gateway = make_gateway(flaky, max_attempts=2, backoff_base=0.0)
        register_probe(gateway)
        with pytest.raises(BackendError) as err:
            gateway.complete(simple_request())
        assert err.value.status == 503

    def test_determinism_knob_distinguishes_cache_entries(self):
        scripted = ScriptedChat(["a", "b"])
        gateway = make_gateway(scripted)
        register_probe(gateway)
        r0 = ChatRequest("probe", {"payload": "x"}, determinism=0.0)
        r1 = ChatRequest("probe", {"payload": "x"}, determinism=1.0)
        assert gateway.complete(r0).text != gateway.complete(r1).text


class TestEmbeddings:
    def test_same_text_embeds_identically(self, gateway):
        a = gateway.embed(["hello world"])
        b = gateway.embed(["hello world"])
        assert np.array_equal(a, b)

    def test_unit_norm(self, gateway):
        matrix = gateway.embed([f"text {i}" for i in range(10)])
        norms = np.linalg.norm(matrix, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-6)

    def test_distinct_texts_near_orthogonal(self, gateway):
        matrix = gateway.embed([f"term number {i}" for i in range(100)]).astype(np.float64)
        sims = matrix @ matrix.T
        off_diag = np.abs(sims[~np.eye(100, dtype=bool)])
        assert off_diag.mean() < 0.2

    def test_row_count_matches_input(self, gateway):
        assert gateway.embed(["a", "b", "a"]).shape[0] == 3

    def test_empty_batch_rejected(self, gateway):
        with pytest.raises(BackendError):
            gateway.embed([])


class CountingChat:
    """Tracks the maximum number of concurrent in-flight calls."""

    backend_id = "counting"

    def __init__(self):
        self._lock = threading.Lock()
        self.active = 0
        self.max_active = 0

    def complete(self, request, prompt):
        with self._lock:
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        time.sleep(0.01)
        with self._lock:
            self.active -= 1
        return "ok"


class TestConcurrencyBudget:
    def test_in_flight_budget_respected(self):
        counting = CountingChat()
        gateway = make_gateway(counting, max_in_flight=3)
        register_probe(gateway)

        def worker(i):
            gateway.complete(simple_request(f"req {i}"))

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(12)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert counting.max_active <= 3


class TestRecordingChat:
    def test_transcript_counts_by_template(self):
        recorder = RecordingChat(EchoChat())
        gateway = make_gateway(recorder)
        register_probe(gateway)
        gateway.complete(simple_request("a"))
        gateway.complete(simple_request("b"))
        assert recorder.calls_for("probe") == 2


class TestHttpBackends:
    def test_chat_posts_prompt_and_reads_text(self, monkeypatch):
        import io
        import json as jsonlib

        from kare.gateway import HttpChat

        captured = {}

        class FakeResponse(io.BytesIO):
            def __enter__(self):
                return self

            def __exit__(self, *args):
                return False

        def fake_urlopen(req, timeout=None):
            captured["url"] = req.full_url
            captured["body"] = jsonlib.loads(req.data.decode("utf-8"))
            captured["auth"] = req.headers.get("Authorization")
            return FakeResponse(jsonlib.dumps({"text": "backend says hi"}).encode())

        monkeypatch.setattr("urllib.request.urlopen", fake_urlopen)
        backend = HttpChat("http://llm.internal/v1/", api_key="sekrit")
        request = ChatRequest("probe", {"payload": "x"}, max_tokens=128, determinism=0.5)
        text = backend.complete(request, "rendered prompt")
        assert text == "backend says hi"
        assert captured["url"] == "http://llm.internal/v1/chat"
        assert captured["body"] == {
            "prompt": "rendered prompt", "max_tokens": 128, "temperature": 0.5,
        }
        assert captured["auth"] == "Bearer sekrit"

    def test_chat_failure_becomes_backend_error(self, monkeypatch):
        from kare.gateway import HttpChat

        def fake_urlopen(req, timeout=None):
            raise OSError("connection refused")

        monkeypatch.setattr("urllib.request.urlopen", fake_urlopen)
        backend = HttpChat("http://llm.internal")
        with pytest.raises(BackendError, match="connection refused"):
            backend.complete(simple_request(), "p")

    def test_embed_row_count_validated(self, monkeypatch):
        import io
        import json as jsonlib

        from kare.gateway import HttpEmbedding

        class FakeResponse(io.BytesIO):
            def __enter__(self):
                return self

            def __exit__(self, *args):
                return False

        def fake_urlopen(req, timeout=None):
            return FakeResponse(jsonlib.dumps({"vectors": [[1.0, 0.0]]}).encode())

        monkeypatch.setattr("urllib.request.urlopen", fake_urlopen)
        backend = HttpEmbedding("http://embed.internal")
        matrix = backend.embed(["one"])
        assert matrix.shape == (1, 2)
        with pytest.raises(BackendError, match="row count"):
            backend.embed(["one", "two"])


class TestParseBracketedTriples:
    def test_minimal_parse(self):
        assert parse_bracketed_triples("[[a, r, b]]") == [("a", "r", "b")]

    def test_arity_violation_dropped(self):
        assert parse_bracketed_triples("[[a, r]]") == []

    def test_mixed_fixture_matches_hand_labeled_oracle(self):
        # 20 items; the expected list below was labeled by hand.
        items = [
            "[a1, r1, b1]", "[a2, r2]", "[a3, r3, b3]", "[a4, r4, b4, c4]",
            "[ , r5, b5]", "[a6, r6, b6]", "[a7,, b7]", "[a8, r8, b8]",
            "[a9, r9, ]", "[a10, r10, b10]", "[]", "[a12, r12, b12]",
            "[a13]", "[a14, r14, b14]", "[a15, r15, b15]", "[ a16 , r16 , b16 ]",
            "[a17, r17, b17, d17, e17]", "[a18, r18, b18]", "[a19 r19 b19]",
            "[a20, r20, b20]",
        ]
        text = "[" + ", ".join(items) + "]"
        expected = [
            ("a1", "r1", "b1"), ("a3", "r3", "b3"), ("a6", "r6", "b6"),
            ("a8", "r8", "b8"), ("a10", "r10", "b10"), ("a12", "r12", "b12"),
            ("a14", "r14", "b14"), ("a15", "r15", "b15"), ("a16", "r16", "b16"),
            ("a18", "r18", "b18"), ("a20", "r20", "b20"),
        ]
        assert parse_bracketed_triples(text) == expected

    def test_garbage_degrades_to_empty(self):
        assert parse_bracketed_triples("no brackets here") == []
