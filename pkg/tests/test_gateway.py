"""Generation clients: scripted, HTTP retry behavior, record/replay."""

import json

import pytest

from searchgain.gateway import (
    EndpointConfig,
    GatewayTimeout,
    GenerationRequest,
    GenerationResponse,
    HttpClient,
    MalformedResponse,
    RecordingClient,
    ReplayClient,
    ScriptExhausted,
    ScriptedClient,
    TokenUsage,
    UnreachableError,
    UnseenRequest,
    request_fingerprint,
    truncate_at_stop,
)


def _req(prompt="hello", **kwargs):
    return GenerationRequest(prompt=prompt, **kwargs)


class TestGenerationRequest:
    def test_validation(self):
        with pytest.raises(ValueError):
            GenerationRequest("p", max_new_tokens=0)
        with pytest.raises(ValueError):
            GenerationRequest("p", temperature=-0.1)

    def test_stop_sequences_coerced_to_tuple(self):
        req = GenerationRequest("p", stop_sequences=["a", "b"])
        assert req.stop_sequences == ("a", "b")

    def test_to_dict_round_trips_through_json(self):
        req = GenerationRequest("p", max_new_tokens=7, temperature=0.5, stop_sequences=("x",))
        assert json.loads(json.dumps(req.to_dict())) == req.to_dict()


class TestTruncateAtStop:
    def test_earliest_stop_wins(self):
        assert truncate_at_stop("abc STOP def END", ("END", "STOP")) == "abc "

    def test_no_stop_present(self):
        assert truncate_at_stop("abc", ("zzz",)) == "abc"

    def test_empty_stop_ignored(self):
        assert truncate_at_stop("abc", ("",)) == "abc"


class TestRequestFingerprint:
    def test_stable_across_calls(self):
        assert request_fingerprint(_req()) == request_fingerprint(_req())

    def test_sensitive_to_every_field(self):
        base = request_fingerprint(_req())
        assert request_fingerprint(_req(prompt="other")) != base
        assert request_fingerprint(_req(max_new_tokens=7)) != base
        assert request_fingerprint(_req(temperature=1.0)) != base
        assert request_fingerprint(_req(stop_sequences=("s",))) != base

    def test_known_shape(self):
        digest = request_fingerprint(_req())
        assert len(digest) == 64
        assert all(c in "0123456789abcdef" for c in digest)


class TestScriptedClient:
    def test_queue_in_order_then_exhausts(self):
        client = ScriptedClient(responses=["one", "two"])
        assert client.generate(_req()).text == "one"
        assert client.generate(_req()).text == "two"
        with pytest.raises(ScriptExhausted):
            client.generate(_req())
        assert client.call_count == 3  # the failing call is still logged

    def test_by_prompt_substring_match(self):
        client = ScriptedClient(by_prompt={"weather": "sunny", "time": "noon"})
        assert client.generate(_req("what is the weather like")).text == "sunny"
        assert client.generate(_req("the time please")).text == "noon"

    def test_by_prompt_insertion_order_breaks_ties(self):
        client = ScriptedClient(by_prompt={"a": "first", "ab": "second"})
        assert client.generate(_req("ab")).text == "first"

    def test_default_fallback(self):
        client = ScriptedClient(by_prompt={"x": "mapped"}, default="fallback")
        assert client.generate(_req("nothing matches")).text == "fallback"

    def test_no_match_no_default_raises(self):
        client = ScriptedClient(by_prompt={"x": "mapped"})
        with pytest.raises(ScriptExhausted):
            client.generate(_req("nothing"))

    def test_stop_truncation_applies(self):
        client = ScriptedClient(responses=["keep THIS not this"])
        response = client.generate(_req(stop_sequences=("THIS",)))
        assert response.text == "keep "

    def test_identity_and_request_log(self):
        client = ScriptedClient(default="ok", label="my-label")
        client.generate(_req("p1"))
        client.generate(_req("p2"))
        assert client.identity == "my-label"
        assert [r.prompt for r in client.requests] == ["p1", "p2"]

    def test_usage_is_word_counts(self):
        client = ScriptedClient(default="two words")
        response = client.generate(_req("three word prompt"))
        assert response.usage == TokenUsage(prompt_tokens=3, completion_tokens=2)


class _FakeTransport:
    """Scripted (status, body) outcomes; records calls."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def __call__(self, url, payload, headers, timeout):
        self.calls.append({"url": url, "payload": payload, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def _ok_body(text="answer"):
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 2},
    }


def _config(**kwargs):
    defaults = dict(base_url="http://svc", model="m1", retries=3, backoff_s=0.5)
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


def _transport_error(message="conn reset", timed_out=False):
    from searchgain.gateway import _TransportError

    return _TransportError(message, timed_out=timed_out)


class TestHttpClient:
    def test_success_first_try(self):
        transport = _FakeTransport([(200, _ok_body("hi"))])
        sleeps = []
        client = HttpClient(_config(), transport=transport, sleep=sleeps.append)
        response = client.generate(_req("question"))
        assert response.text == "hi"
        assert response.usage == TokenUsage(5, 2)
        assert sleeps == []
        call = transport.calls[0]
        assert call["url"] == "http://svc/v1/chat/completions"
        assert call["payload"]["messages"] == [{"role": "user", "content": "question"}]
        assert call["payload"]["max_tokens"] == 256
        assert call["payload"]["temperature"] == 0.0

    def test_retries_with_exponential_backoff(self):
        transport = _FakeTransport([_transport_error(), (500, None), (200, _ok_body())])
        sleeps = []
        client = HttpClient(_config(), transport=transport, sleep=sleeps.append)
        assert client.generate(_req()).text == "answer"
        assert sleeps == [0.5, 1.0]
        assert len(transport.calls) == 3

    def test_4xx_fails_immediately_without_retry(self):
        transport = _FakeTransport([(401, None)])
        sleeps = []
        client = HttpClient(_config(), transport=transport, sleep=sleeps.append)
        with pytest.raises(UnreachableError) as err:
            client.generate(_req())
        assert err.value.attempts == 1
        assert sleeps == []
        assert len(transport.calls) == 1

    def test_exhausted_5xx_raises_unreachable(self):
        transport = _FakeTransport([(503, None)] * 3)
        client = HttpClient(_config(), transport=transport, sleep=lambda s: None)
        with pytest.raises(UnreachableError) as err:
            client.generate(_req())
        assert err.value.attempts == 3

    def test_timeouts_raise_gateway_timeout(self):
        transport = _FakeTransport([_transport_error("slow", timed_out=True)] * 3)
        client = HttpClient(_config(), transport=transport, sleep=lambda s: None)
        with pytest.raises(GatewayTimeout):
            client.generate(_req())

    def test_malformed_body_raises(self):
        transport = _FakeTransport([(200, {"unexpected": True})])
        client = HttpClient(_config(), transport=transport, sleep=lambda s: None)
        with pytest.raises(MalformedResponse):
            client.generate(_req())

    def test_stop_sequences_forwarded_and_applied(self):
        transport = _FakeTransport([(200, _ok_body("text STOP tail"))])
        client = HttpClient(_config(), transport=transport, sleep=lambda s: None)
        response = client.generate(_req(stop_sequences=("STOP",)))
        assert transport.calls[0]["payload"]["stop"] == ["STOP"]
        assert response.text == "text "

    def test_api_key_header_from_env(self, monkeypatch):
        monkeypatch.setenv("TEST_SVC_KEY", "sekret")
        transport = _FakeTransport([(200, _ok_body())])
        client = HttpClient(_config(api_key_env="TEST_SVC_KEY"), transport=transport)
        client.generate(_req())
        assert transport.calls[0]["headers"]["Authorization"] == "Bearer sekret"

    def test_no_auth_header_without_key(self):
        transport = _FakeTransport([(200, _ok_body())])
        client = HttpClient(_config(), transport=transport)
        client.generate(_req())
        assert "Authorization" not in transport.calls[0]["headers"]

    def test_identity(self):
        client = HttpClient(_config(), transport=_FakeTransport([]))
        assert client.identity == "m1@http://svc"


class TestRecordReplay:
    def test_round_trip(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        live = ScriptedClient(responses=["first", "second"], label="live")
        recorder = RecordingClient(live, tape)
        r1 = recorder.generate(_req("alpha"))
        r2 = recorder.generate(_req("beta"))
        assert recorder.identity == "live"

        replay = ReplayClient(tape)
        assert replay.generate(_req("alpha")).text == r1.text
        assert replay.generate(_req("beta")).text == r2.text
        assert live.call_count == 2  # replay never touched the live client

    def test_fifo_per_identical_request(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        recorder = RecordingClient(ScriptedClient(responses=["one", "two"]), tape)
        recorder.generate(_req("same"))
        recorder.generate(_req("same"))
        replay = ReplayClient(tape)
        assert replay.generate(_req("same")).text == "one"
        assert replay.generate(_req("same")).text == "two"
        with pytest.raises(UnseenRequest):
            replay.generate(_req("same"))

    def test_unseen_request_raises(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        RecordingClient(ScriptedClient(default="x"), tape).generate(_req("recorded"))
        replay = ReplayClient(tape)
        with pytest.raises(UnseenRequest):
            replay.generate(_req("never recorded"))

    def test_usage_survives_replay(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        RecordingClient(ScriptedClient(default="two words"), tape).generate(_req("a b c"))
        response = ReplayClient(tape).generate(_req("a b c"))
        assert response.usage == TokenUsage(3, 2)

    def test_tape_lines_are_json_with_hash(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        request = _req("inspect me")
        RecordingClient(ScriptedClient(default="ok"), tape).generate(request)
        lines = tape.read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["hash"] == request_fingerprint(request)
        assert record["request"]["prompt"] == "inspect me"
        assert record["response"]["text"] == "ok"

    def test_replay_identity_names_tape(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        tape.write_text("")
        assert ReplayClient(tape).identity == "replay:tape.jsonl"

    def test_replay_skips_blank_lines(self, tmp_path):
        tape = tmp_path / "tape.jsonl"
        RecordingClient(ScriptedClient(default="ok"), tape).generate(_req("p"))
        tape.write_text(tape.read_text() + "\n\n")
        assert ReplayClient(tape).generate(_req("p")).text == "ok"
