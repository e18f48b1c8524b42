import json
import threading
import math

import pytest
from PIL import Image

from iqa_agent.gateway import (
    LEVEL_CANDIDATES,
    BackendUnsupportedError,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    RecordBackend,
    ReplayBackend,
    ReplayMissError,
    VlmGateway,
    build_gateway,
    level_logprobs,
    request_digest,
)
from iqa_agent.images import ImageRef
from iqa_agent.model import QUALITY_LEVELS

from tests.helpers import seeded_rgb


class QueueBackend:
    """Hands out canned responses in order and remembers the requests."""

    def __init__(self, responses):
        self.id = "queue"
        self.responses = list(responses)
        self.requests = []

    def chat(self, request):
        self.requests.append(request)
        if not self.responses:
            raise AssertionError("queue backend ran dry")
        item = self.responses.pop(0)
        if isinstance(item, ChatResponse):
            return item
        text, logprobs = item
        return ChatResponse(text=text, logprobs=logprobs, backend_id=self.id)


def simple_request(text="hello", images=()):
    return ChatRequest(
        messages=(
            ChatMessage(role="system", text="be brief"),
            ChatMessage(role="user", text=text, images=tuple(images)),
        )
    )


class TestMessageShapes:
    def test_roles_restricted(self):
        with pytest.raises(ValueError):
            ChatMessage(role="assistant", text="hi")

    def test_images_only_on_user_messages(self):
        img = ImageRef.from_array(seeded_rgb(1, 16, 16))
        with pytest.raises(ValueError):
            ChatMessage(role="system", text="hi", images=(img,))

    def test_request_needs_a_user_message(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage(role="system", text="hi"),))

    def test_summary_counts_images(self):
        img = ImageRef.from_array(seeded_rgb(2, 16, 16))
        request = simple_request("look at this", images=(img,))
        assert "look at this" in request.summary()
        assert "+1 image(s)" in request.summary()


class TestRequestDigest:
    def test_digest_survives_reencoding(self, tmp_path):
        pixels = seeded_rgb(3, 24, 24)
        png = tmp_path / "img.png"
        bmp = tmp_path / "img.bmp"
        Image.fromarray(pixels).save(png, compress_level=9)
        Image.fromarray(pixels).save(bmp)
        d1 = request_digest(simple_request(images=(ImageRef.from_path(str(png)),)))
        d2 = request_digest(simple_request(images=(ImageRef.from_path(str(bmp)),)))
        assert d1 == d2

    def test_digest_changes_with_pixels(self):
        a = ImageRef.from_array(seeded_rgb(4, 24, 24))
        b = ImageRef.from_array(seeded_rgb(5, 24, 24))
        assert request_digest(simple_request(images=(a,))) != request_digest(
            simple_request(images=(b,))
        )

    def test_digest_changes_with_text_and_knobs(self):
        base = request_digest(simple_request("one"))
        assert request_digest(simple_request("two")) != base
        hot = ChatRequest(
            messages=(ChatMessage(role="user", text="one"),), temperature=0.5
        )
        cold = ChatRequest(messages=(ChatMessage(role="user", text="one"),))
        assert request_digest(hot) != request_digest(cold)
        wide = ChatRequest(
            messages=(ChatMessage(role="user", text="one"),), max_tokens=9
        )
        assert request_digest(wide) != request_digest(cold)
        probed = ChatRequest(
            messages=(ChatMessage(role="user", text="one"),),
            want_logprobs_for=LEVEL_CANDIDATES,
        )
        assert request_digest(probed) != request_digest(cold)

    def test_digest_stable_across_processes_in_spirit(self):
        # Same content, fresh objects: the digest is a pure content function.
        assert request_digest(simple_request("x")) == request_digest(
            simple_request("x")
        )


class TestReplayBackend:
    def test_round_trip(self, tmp_path):
        request = simple_request("replay me")
        cassette = tmp_path / "c.json"
        cassette.write_text(
            json.dumps(
                [
                    {
                        "digest": request_digest(request),
                        "request_summary": request.summary(),
                        "response_text": "stored answer",
                        "logprobs": {"excellent": -1},
                    }
                ]
            )
        )
        backend = ReplayBackend(str(cassette))
        response = backend.chat(request)
        assert response.text == "stored answer"
        assert response.logprobs == {"excellent": -1.0}
        assert isinstance(response.logprobs["excellent"], float)

    def test_miss_raises(self, tmp_path):
        cassette = tmp_path / "c.json"
        cassette.write_text("[]")
        backend = ReplayBackend(str(cassette))
        with pytest.raises(ReplayMissError):
            backend.chat(simple_request("never recorded"))

    def test_cassette_must_be_an_array(self, tmp_path):
        cassette = tmp_path / "c.json"
        cassette.write_text("{}")
        with pytest.raises(ValueError):
            ReplayBackend(str(cassette))


class TestRecordBackend:
    def test_record_then_replay(self, tmp_path):
        cassette = tmp_path / "c.json"
        inner = QueueBackend([("first", None), ("second", None)])
        recorder = RecordBackend(inner, str(cassette))
        assert recorder.id == "record(queue)"

        r1 = recorder.chat(simple_request("alpha"))
        assert r1.text == "first"
        # Identical request is served from the store, not the inner backend.
        r1_again = recorder.chat(simple_request("alpha"))
        assert r1_again.text == "first"
        assert len(inner.requests) == 1

        r2 = recorder.chat(simple_request("beta"))
        assert r2.text == "second"

        entries = json.loads(cassette.read_text())
        assert [e["response_text"] for e in entries] == ["first", "second"]

        replay = ReplayBackend(str(cassette))
        assert replay.chat(simple_request("alpha")).text == "first"
        assert replay.chat(simple_request("beta")).text == "second"

    def test_existing_cassette_is_loaded(self, tmp_path):
        cassette = tmp_path / "c.json"
        inner = QueueBackend([("only", None)])
        RecordBackend(inner, str(cassette)).chat(simple_request("alpha"))

        # A fresh recorder over the same file never consults its backend.
        dry = QueueBackend([])
        recorder = RecordBackend(dry, str(cassette))
        assert recorder.chat(simple_request("alpha")).text == "only"
        assert dry.requests == []


class TestGatewayWrapper:
    def test_call_count(self):
        gateway = VlmGateway(QueueBackend([("a", None), ("b", None)]))
        assert gateway.call_count == 0
        gateway.chat(simple_request("one"))
        gateway.chat(simple_request("two"))
        assert gateway.call_count == 2

    def test_thread_call_count_isolates_concurrent_callers(self):
        replies = [(f"r{i}", None) for i in range(12)]
        gateway = VlmGateway(QueueBackend(replies))
        per_thread = {}

        def worker(name, calls):
            for i in range(calls):
                gateway.chat(simple_request(f"{name}-{i}"))
            per_thread[name] = gateway.thread_call_count

        threads = [
            threading.Thread(target=worker, args=("a", 3)),
            threading.Thread(target=worker, args=("b", 4)),
            threading.Thread(target=worker, args=("c", 5)),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert per_thread == {"a": 3, "b": 4, "c": 5}
        assert gateway.call_count == 12
        assert gateway.thread_call_count == 0  # this thread made no calls

    def test_build_gateway_replay(self, tmp_path):
        cassette = tmp_path / "c.json"
        cassette.write_text("[]")
        gateway = build_gateway("replay", cassette_path=str(cassette))
        assert isinstance(gateway.backend, ReplayBackend)

    @pytest.mark.parametrize(
        "kind,kwargs",
        [
            ("replay", {}),
            ("remote", {}),
            ("remote", {"endpoint": "http://x"}),
            ("record", {"endpoint": "http://x", "model": "m"}),
            ("teleport", {}),
        ],
    )
    def test_build_gateway_rejects_incomplete_configs(self, kind, kwargs):
        with pytest.raises(ValueError):
            build_gateway(kind, **kwargs)


class TestLevelLogprobs:
    def messages(self):
        return (
            ChatMessage(role="system", text="rate it"),
            ChatMessage(role="user", text="how good?"),
        )

    def test_direct_path_maps_candidates_to_levels(self):
        table = {
            " Excellent ": -0.5,
            "good": -1.5,
            "FAIR": -2.5,
            "poor": -3.5,
            "bad": -4.5,
        }
        gateway = VlmGateway(QueueBackend([("ignored", table)]))
        out = level_logprobs(gateway, self.messages())
        assert set(out) == set(QUALITY_LEVELS)
        by_value = {level.value: lp for level, lp in out.items()}
        assert by_value == {5: -0.5, 4: -1.5, 3: -2.5, 2: -3.5, 1: -4.5}
        sent = gateway.backend.requests[0]
        assert sent.want_logprobs_for == LEVEL_CANDIDATES

    def test_partial_candidate_table_is_unsupported(self):
        table = {"excellent": -0.5, "good": -1.5}
        gateway = VlmGateway(QueueBackend([("ignored", table)]))
        with pytest.raises(BackendUnsupportedError):
            level_logprobs(gateway, self.messages())

    def test_fallback_builds_smoothed_one_hot(self):
        gateway = VlmGateway(QueueBackend([("B. Good", None)]))
        out = level_logprobs(gateway, self.messages(), epsilon=0.01)
        assert gateway.call_count == 1
        by_value = {level.value: lp for level, lp in out.items()}
        assert by_value[4] == pytest.approx(math.log(1.0 - 0.04))
        for other in (1, 2, 3, 5):
            assert by_value[other] == pytest.approx(math.log(0.01))

    def test_fallback_retries_once_with_plain_completion(self):
        gateway = VlmGateway(
            QueueBackend([("thinking about it", None), ("(C)", None)])
        )
        out = level_logprobs(gateway, self.messages())
        assert gateway.call_count == 2
        by_value = {level.value: lp for level, lp in out.items()}
        assert max(by_value, key=by_value.get) == 3

    def test_two_unparseable_replies_give_up(self):
        gateway = VlmGateway(QueueBackend([("mumble", None), ("mumble", None)]))
        with pytest.raises(BackendUnsupportedError):
            level_logprobs(gateway, self.messages())

    @pytest.mark.parametrize("epsilon", [0.0, 0.25, -1.0, 0.5])
    def test_epsilon_range_enforced(self, epsilon):
        gateway = VlmGateway(QueueBackend([("A. Excellent", None)]))
        with pytest.raises(ValueError):
            level_logprobs(gateway, self.messages(), epsilon=epsilon)

    def test_distribution_normalizes(self):
        gateway = VlmGateway(QueueBackend([("E. Bad", None)]))
        out = level_logprobs(gateway, self.messages(), epsilon=0.05)
        assert sum(math.exp(v) for v in out.values()) == pytest.approx(1.0, abs=1e-12)
