import json
import re
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from afretriever._http import ProviderError
from afretriever.llm import (BudgetExceeded, ChatProvider, PromptTemplate, ScriptedProvider, UnmatchedPrompt,
                             derive_cypher, derive_target_type, estimate_tokens, load_templates,
                             preference_responder, render_cypher_prompt)


@pytest.mark.parametrize("text,expected", [("", 0), ("abc", 1), ("abcd", 1), ("abcde", 2), ("x" * 400, 100)])
def test_token_estimate(text, expected):
    assert estimate_tokens(text) == expected


class TestTemplates:
    def test_packaged_templates_load(self):
        tpl = load_templates()
        assert set(tpl) == {"target_type", "cypher", "pointwise", "listwise", "pairwise"}
        assert tpl["pairwise"].placeholders == {"node1_id", "node_type_1", "doc_info_1", "node2_id",
                                                "node_type_2", "doc_info_2", "query"}

    def test_missing_value(self):
        with pytest.raises(KeyError):
            PromptTemplate("t", "{a} {b}").render(a=1)

    def test_override_dir(self, tmp_path):
        for name, tpl in load_templates().items():
            (tmp_path / f"{name}.txt").write_text(("Custom. " if name == "pointwise" else "") + tpl.body)
        assert load_templates(tmp_path)["pointwise"].body.startswith("Custom. ")


class TestScripted:
    def test_exact_and_regex(self):
        p = ScriptedProvider([("hello", "hi"), (re.compile(r"name is (\w+)"), r"bye \1")])
        assert p.complete("hello") == "hi"
        assert p.complete("my name is Ada") == "bye Ada"
        assert p.usage.prompts == 2 and len(p.transcript) == 2

    def test_unmatched(self):
        with pytest.raises(UnmatchedPrompt):
            ScriptedProvider().complete("anything")

    def test_budget_checked_before_call(self):
        p = ScriptedProvider([("x" * 40, "ok")], token_budget=5)
        with pytest.raises(BudgetExceeded) as err:
            p.complete("x" * 40)
        assert err.value.tokens == 10 and p.transcript == []

    @pytest.mark.parametrize("record", [{"response": "x"}, {"match": "a"}])
    def test_bad_records(self, record):
        with pytest.raises(ValueError):
            ScriptedProvider.from_records([record])

    def test_from_file(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps([{"regex": "^q", "response": "yes"}]))
        assert ScriptedProvider.from_file(path).complete("question") == "yes"


class TestPreferenceResponder:
    def test_orders_numbered_elements(self):
        prompt = ("1, paper, type: paper; title: B\nmore. 2, paper, type: paper; title: A\n"
                  "3, paper, type: paper; title: C")
        assert preference_responder(["A", "B"])(prompt) == "2, 1, 3"

    @pytest.mark.parametrize("title,score", [("A", "1.000"), ("B", "0.667"), ("Z", "0.0")])
    def test_scores_single_description(self, title, score):
        respond = preference_responder(["A", "B"])
        assert respond(f"Describe\ntype: paper; title: {title}\nwhatever") == score


class TestSteps:
    def test_target_type_validated(self):
        p = ScriptedProvider([(re.compile("query: Q"), " Field of Study.\n")])
        tt = derive_target_type("Q", ["paper", "field_of_study"], p)
        assert tt.valid and tt.type == "field_of_study"

    def test_invalid_type(self):
        p = ScriptedProvider([(re.compile("query"), "journal")])
        assert not derive_target_type("Q", ["paper"], p).valid

    def test_cypher_prompt_target_line(self):
        with_type = render_cypher_prompt("Q", ["paper"], ["cites"], "paper")
        assert "- Target Node Label: paper" in with_type
        assert "Target Node Label" not in render_cypher_prompt("Q", ["paper"], ["cites"], None)

    def test_raw_cypher_returned(self):
        p = ScriptedProvider([(re.compile("Query Q: Q"), "```MATCH (p:paper) RETURN p```")])
        assert derive_cypher("Q", ["paper"], [], None, p) == "```MATCH (p:paper) RETURN p```"


# ------------------------------------------------------------------ http
class _ChatHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        server = self.server
        server.requests.append((body, self.headers.get("Authorization")))
        status, payload = server.replies.pop(0) if server.replies else (200, None)
        if payload is None:
            payload = {"choices": [{"message": {"content": "echo: " + body["messages"][0]["content"]}}]}
        raw = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    server.requests, server.replies = [], []
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield server
    server.shutdown()


class TestChatProvider:
    def provider(self, server, **kw):
        return ChatProvider(f"http://127.0.0.1:{server.server_port}/v1/chat/completions", "m", backoff=0.01, **kw)

    def test_roundtrip(self, chat_server, monkeypatch):
        monkeypatch.setenv("AFR_API_KEY", "secret")
        p = self.provider(chat_server, reasoning_effort="low")
        assert p.complete("hi") == "echo: hi"
        body, auth = chat_server.requests[0]
        assert body["model"] == "m" and body["reasoning_effort"] == "low"
        assert auth == "Bearer secret"
        assert p.usage.snapshot() == (1, 1, 2)

    def test_retry_then_success(self, chat_server):
        chat_server.replies = [(500, {}), (502, {})]
        assert self.provider(chat_server, max_retries=2).complete("x") == "echo: x"
        assert len(chat_server.requests) == 3

    def test_client_error_not_retried(self, chat_server):
        chat_server.replies = [(400, {"error": "bad"})]
        with pytest.raises(ProviderError, match="HTTP 400"):
            self.provider(chat_server).complete("x")
        assert len(chat_server.requests) == 1

    def test_malformed(self, chat_server):
        chat_server.replies = [(200, {"nothing": 1})]
        with pytest.raises(ProviderError, match="malformed"):
            self.provider(chat_server).complete("x")

    def test_budget_overflow_sends_nothing(self, chat_server):
        with pytest.raises(BudgetExceeded):
            self.provider(chat_server, token_budget=2).complete("x" * 20)
        assert chat_server.requests == []

    def test_unreachable(self):
        p = ChatProvider("http://127.0.0.1:9/none", "m", max_retries=0, timeout=1)
        with pytest.raises(ProviderError):
            p.complete("x")

    @pytest.mark.parametrize("kw", [{"token_budget": 0}, {"max_retries": -1}, {"reasoning_effort": "max"}])
    def test_invalid_settings(self, kw):
        with pytest.raises(ValueError):
            ChatProvider("http://x", "m", **kw)
