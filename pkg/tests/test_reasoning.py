import json
from pathlib import Path

import httpx
import numpy as np
import pytest

from nutrirec.errors import ConfigError, GatewayError
from nutrirec.reasoning import (
    GatewayConfig,
    PromptOptions,
    ReasoningRun,
    SalientTag,
    build_prompt,
    explain,
    explain_batch,
    matched_tags,
    offline_explanation,
    refined_candidates,
    request_body,
    salient_conditions,
)
from nutrirec.tagging import sign_matrix

SNAPSHOT = Path(__file__).parent / "snapshots" / "prompt_u03_f07.txt"


def reverse_scores(bundle):
    return np.arange(bundle.n_foods, dtype=float)[::-1]


@pytest.fixture
def prompt(toy):
    bundle, _ = toy
    return build_prompt(bundle, 3, 7, refined_candidates(None, bundle, 3, 4, scores=reverse_scores(bundle)))


class TestCandidates:
    def test_healthy_first_by_score(self, toy):
        bundle, _ = toy
        scores = reverse_scores(bundle)
        cands = refined_candidates(None, bundle, 3, bundle.n_foods, scores=scores)
        signs = sign_matrix(bundle.user_tags[3:4], bundle.food_tags)[0]
        n_healthy = int((signs > 0).sum())
        assert [c.healthy for c in cands] == [True] * n_healthy + [False] * (bundle.n_foods - n_healthy)
        head = [c.score for c in cands[:n_healthy]]
        assert head == sorted(head, reverse=True)
        tail = [c.jaccard for c in cands[n_healthy:]]
        assert tail == sorted(tail, reverse=True)

    def test_filler_when_few_healthy(self, toy):
        bundle, _ = toy
        signs = sign_matrix(bundle.user_tags, bundle.food_tags)
        user = int(np.argmin((signs > 0).sum(1)))
        k = int((signs[user] > 0).sum()) + 2
        cands = refined_candidates(None, bundle, user, k, scores=np.zeros(bundle.n_foods))
        assert sum(c.filler for c in cands) == 2

    def test_zero(self, toy):
        assert refined_candidates(None, toy[0], 0, 0, scores=np.zeros(30)) == []


class TestSalience:
    def test_order(self, table):
        ut = table.vector(["low_sodium", "high_protein", "low_sugar"])
        ft = table.vector(["high_sodium", "high_protein"])
        got = salient_conditions(ut, ft, table)
        assert got == [SalientTag("low_sodium", "conflict"), SalientTag("high_protein", "match"),
                       SalientTag("low_sugar", "other")]

    def test_matched_tags(self, table):
        ut = table.vector(["low_sodium", "high_protein"])
        ft = table.vector(["low_sodium", "low_protein"])
        assert matched_tags(ut, ft, table) == ["low_sodium"]


class TestPrompt:
    def test_snapshot(self, prompt):
        assert prompt.text() == SNAPSHOT.read_text()

    def test_stable_hash(self, toy, prompt):
        bundle, _ = toy
        again = build_prompt(bundle, 3, 7, refined_candidates(None, bundle, 3, 4, scores=reverse_scores(bundle)))
        assert again.hash == prompt.hash and again.text() == prompt.text()

    def test_sections_and_provenance(self, prompt):
        text = prompt.text()
        assert text.index("INSTRUCTION:") < text.index("CONTEXT:") < text.index("NOTES:")
        p = prompt.provenance
        assert p["user_id"] == "u03" and p["food_id"] == "f07"
        assert all(kind in ("healthy", "jaccard_filler") for _, kind in p["candidates"])
        json.dumps(p)

    def test_options_off(self, toy):
        bundle, _ = toy
        p = build_prompt(bundle, 3, 7, [], options=PromptOptions(False, False))
        assert p.context == "Is food f07 healthy for user u03?"
        assert p.provenance["candidates"] == [] and p.provenance["salient"] == []

    def test_candidates_only(self, toy):
        bundle, _ = toy
        c = refined_candidates(None, bundle, 3, 2, scores=reverse_scores(bundle))
        p = build_prompt(bundle, 3, 7, c, options=PromptOptions(True, False))
        assert "health needs" not in p.context and c[0].food_id in p.context

    def test_word_budget(self, toy):
        p = build_prompt(toy[0], 0, 0, [], options=PromptOptions(max_words=50))
        assert "at most 50 words" in p.notes


class TestOffline:
    def test_sodium_conflict(self, table):
        text, verdict = offline_explanation("u", "f", ["low_sodium"], ["high_sodium"], table=table)
        assert verdict == "unhealthy" and "sodium" in text and "UNHEALTHY" in text

    def test_match(self, table):
        text, verdict = offline_explanation("u", "f", ["low_sodium"], ["low_sodium"], table=table)
        assert verdict == "healthy" and "matching" in text

    def test_no_relation(self, table):
        text, verdict = offline_explanation("u", "f", [], [], table=table)
        assert verdict == "unhealthy" and "None of the food" in text

    def test_suggests_alternatives(self, table):
        text, _ = offline_explanation("u", "f", ["low_sodium"], ["high_sodium"],
                                      [["g", "healthy"], ["h", "jaccard_filler"]], table)
        assert "Healthier options for this user: g." in text

    def test_grid_agrees_with_signs(self, toy):
        bundle, _ = toy
        signs = sign_matrix(bundle.user_tags, bundle.food_tags)
        for u in range(bundle.n_users):
            for f in range(20):
                e = explain(build_prompt(bundle, u, f, []), table=bundle.thresholds)
                assert e.verdict == ("healthy" if signs[u, f] > 0 else "unhealthy")
                assert e.source == "offline-template"


def transport(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def ok(request):
    body = json.loads(request.content)
    return httpx.Response(200, json={"choices": [{"message": {"content": "echo " + body["model"]}}]})


REMOTE = GatewayConfig(endpoint="http://llm.test/v1", model="m", offline=False, backoff=0.01)


class TestRemote:
    def test_config_requires_endpoint(self):
        with pytest.raises(ConfigError):
            GatewayConfig(offline=False)

    def test_success_and_request_shape(self, prompt, monkeypatch):
        monkeypatch.setenv("NUTRIREC_API_TOKEN", "secret")
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return ok(request)
        e = explain(prompt, REMOTE, transport(handler))
        assert e.text == "echo m" and e.source == "remote"
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["auth"] == "Bearer secret"
        assert seen["body"] == request_body(prompt, REMOTE)
        assert seen["body"]["messages"][0]["content"] == prompt.text()

    def test_retries_then_succeeds(self, prompt):
        calls, sleeps = [], []

        def handler(request):
            calls.append(1)
            return httpx.Response(503) if len(calls) < 3 else ok(request)
        e = explain(prompt, REMOTE, transport(handler), sleep=sleeps.append)
        assert e.text == "echo m" and len(calls) == 3
        assert sleeps == [0.01, 0.02]

    def test_retries_exhausted(self, prompt):
        with pytest.raises(GatewayError) as info:
            explain(prompt, REMOTE, transport(lambda r: httpx.Response(429)), sleep=lambda s: None)
        assert info.value.status == 429

    def test_transport_error_retried(self, prompt):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) == 1:
                raise httpx.ConnectError("down")
            return ok(request)
        assert explain(prompt, REMOTE, transport(handler), sleep=lambda s: None).text == "echo m"

    def test_client_error_not_retried(self, prompt):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(401)
        with pytest.raises(GatewayError) as info:
            explain(prompt, REMOTE, transport(handler), sleep=lambda s: None)
        assert info.value.status == 401 and len(calls) == 1

    def test_malformed_response(self, prompt):
        with pytest.raises(GatewayError, match="malformed"):
            explain(prompt, REMOTE, transport(lambda r: httpx.Response(200, json={"x": 1})))

    def test_batch_preserves_order(self, toy):
        bundle, _ = toy
        prompts = [build_prompt(bundle, u, 0, []) for u in range(8)]
        def handler(request):
            content = json.loads(request.content)["messages"][0]["content"]
            uid = content.split("User ")[1].split(" ")[0]
            return httpx.Response(200, json={"choices": [{"message": {"content": uid}}]})
        out = explain_batch(prompts, REMOTE, transport(handler))
        assert [e.text for e in out] == [bundle.users[u].user_id for u in range(8)]
        assert [e.index for e in out] == list(range(8))

    def test_run_records(self, toy, prompt):
        run = ReasoningRun([prompt], [explain(prompt, table=toy[0].thresholds)])
        rec = run.to_records()[0]
        assert rec["prompt_hash"] == prompt.hash and rec["verdict"] == "unhealthy"
