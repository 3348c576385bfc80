import base64
import json

import pytest

from failforge.backends import BackendConfig, ChatClient, HttpTransport, text_part, user_message
from failforge.mocks import (
    MockServer,
    ScriptError,
    ScriptedTransport,
    UnmatchedRequestError,
    default_embedding,
    load_script,
)


def _chat_body(text):
    return {
        "model": "m",
        "messages": [{"role": "user", "content": [{"type": "text", "text": text}]}],
        "temperature": 0.0,
        "max_tokens": 8,
    }


def test_load_script_from_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps([{"match": {"contains": "ping"}, "responses": ["pong"]}]))
    script = load_script(path)
    status, payload = script.handle("/v1/chat/completions", _chat_body("ping"))
    assert status == 200
    assert payload["choices"][0]["message"]["content"] == "pong"


def test_overlapping_rules_rejected_at_load():
    rules = [
        {"match": {"contains": "Step"}, "responses": ["a"]},
        {"match": {"contains": "Step 5"}, "responses": ["b"]},
    ]
    with pytest.raises(ScriptError, match="nested"):
        load_script(rules)


def test_disjoint_rules_double_match_errors_at_dispatch():
    rules = [
        {"match": {"contains": "alpha"}, "responses": ["a"]},
        {"match": {"contains": "beta"}, "responses": ["b"]},
    ]
    script = load_script(rules)
    with pytest.raises(ScriptError, match="ambiguous"):
        script.handle("/v1/chat/completions", _chat_body("alpha and beta"))


def test_response_sequence_cycles_with_repeat():
    rules = [{"match": {"contains": "rate"}, "responses": ["3", "1", "3", "2"], "repeat": True}]
    script = load_script(rules)
    out = []
    for _ in range(6):
        _, payload = script.handle("/v1/chat/completions", _chat_body("rate this"))
        out.append(payload["choices"][0]["message"]["content"])
    assert out == ["3", "1", "3", "2", "3", "1"]


def test_response_sequence_holds_last_without_repeat():
    rules = [{"match": {"contains": "x"}, "responses": ["first", "last"]}]
    script = load_script(rules)
    out = []
    for _ in range(4):
        _, payload = script.handle("/v1/chat/completions", _chat_body("x"))
        out.append(payload["choices"][0]["message"]["content"])
    assert out == ["first", "last", "last", "last"]


def test_unmatched_error_policy():
    script = load_script([], default="error")
    with pytest.raises(UnmatchedRequestError):
        script.handle("/v1/chat/completions", _chat_body("anything"))


def test_unmatched_canned_is_deterministic():
    script = load_script([], default="canned")
    _, a = script.handle("/v1/chat/completions", _chat_body("anything"))
    _, b = script.handle("/v1/chat/completions", _chat_body("anything"))
    assert a == b
    assert a["choices"][0]["message"]["content"].startswith("canned:")


def test_default_embedding_deterministic_unit():
    a = default_embedding("hello")
    b = default_embedding("hello")
    c = default_embedding("other")
    assert a == b != c
    assert abs(sum(v * v for v in a) - 1.0) < 1e-9


def test_digest_match_rule():
    from failforge.backends import cache_key

    body = _chat_body("exact")
    key = cache_key("chat", body)
    script = load_script([{"match": {"digest": key}, "responses": ["matched"]}])
    _, payload = script.handle("/v1/chat/completions", body)
    assert payload["choices"][0]["message"]["content"] == "matched"


def test_match_must_have_exactly_one_selector():
    with pytest.raises(ScriptError):
        load_script([{"match": {}, "responses": ["x"]}])
    with pytest.raises(ScriptError):
        load_script([{"match": {"contains": "a", "digest": "b"}, "responses": ["x"]}])


def test_replay_determinism_bit_for_bit():
    rules = [{"match": {"contains": "q"}, "responses": ["r1", "r2"], "repeat": True}]
    inputs = [_chat_body(f"q {i}") for i in range(4)]

    def run():
        script = load_script(json.loads(json.dumps(rules)))
        return [script.handle("/v1/chat/completions", body) for body in inputs]

    assert run() == run()


def test_mock_server_serves_wire_schema(cache, ledger):
    rules = [
        {"match": {"contains": "over http"}, "responses": [{"content": "served", "prompt_tokens": 3, "completion_tokens": 1}]},
    ]
    script = load_script(rules, default="canned")
    with MockServer(script) as server:
        cfg = BackendConfig(name="frontier", base_url=server.url, model_id="m", backoff_base=0.001)
        client = ChatClient(cfg, cache, ledger, transport=HttpTransport())
        response = client.chat(client.request([user_message(text_part("over http please"))]))
        assert response.content == "served"
        assert response.prompt_tokens == 3
        # embeddings and images run over the same server
        import requests

        r = requests.post(server.url + "/v1/embeddings", json={"input": ["abc"]}, timeout=5)
        assert len(r.json()["data"][0]["embedding"]) == 32
        r = requests.post(
            server.url + "/v1/images/generations",
            json={"prompt": "p", "width": 1024, "height": 1024, "seed": 1, "guidance_scale": 3.0},
            timeout=5,
        )
        assert base64.b64decode(r.json()["b64"]).startswith(b"MOCKIMG:")
    assert script.network_calls == 3


def test_scripted_error_status_over_server(cache, ledger):
    rules = [{"match": {"contains": "boom"}, "responses": [{"error": {"status": 500}}, "recovered"]}]
    script = load_script(rules)
    with MockServer(script) as server:
        cfg = BackendConfig(name="frontier", base_url=server.url, model_id="m", retries=3, backoff_base=0.001)
        client = ChatClient(cfg, cache, ledger, transport=HttpTransport())
        response = client.chat(client.request([user_message(text_part("boom then ok"))]))
        assert response.content == "recovered"
        assert response.attempts == 2
