"""Knowledge-infused prompts and explanations for (user, food) pairs.

A prompt has three labelled sections. Two optional strategies enrich the
context: candidates drawn from the trained model ("refined candidates") and an
ordering of the user's conditions by relevance to the target food. The
offline explainer renders the matched-tag ground truth directly, so it needs
no network and is fully deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx
import numpy as np

from .errors import ConfigError, GatewayError
from .graphdata import GraphBundle, SplitBundle
from .structlearn import GraphContext, embeddings
from .tagging import ThresholdTable, jaccard_matrix, match_counts, sign_edge, sign_matrix

INSTRUCTION = (
    "You are a nutrition assistant. Assess the healthiness of the target food for this user "
    "and explain your assessment using the user's health conditions and the food's nutrients."
)

RETRY_STATUSES = frozenset({408, 425, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class Candidate:
    food_id: str
    index: int
    score: float
    healthy: bool
    jaccard: float

    @property
    def filler(self) -> bool:
        return not self.healthy


@dataclass(frozen=True)
class SalientTag:
    tag: str
    relation: str  # "conflict", "match" or "other"


@dataclass(frozen=True)
class PromptOptions:
    refined_candidates: bool = True
    attention_on_conditions: bool = True
    max_words: int = 120


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    context: str
    notes: str
    provenance: dict

    def __post_init__(self):
        for name in ("instruction", "context", "notes"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt section {name} is empty")

    def text(self) -> str:
        return (f"INSTRUCTION:\n{self.instruction}\n\nCONTEXT:\n{self.context}\n\n"
                f"NOTES:\n{self.notes}\n")

    def dump(self) -> str:
        return self.text()

    @property
    def hash(self) -> str:
        payload = self.text() + json.dumps(self.provenance, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class Explanation:
    text: str
    source: str  # "remote" or "offline-template"
    prompt_hash: str
    verdict: str | None = None
    index: int | None = None


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str | None = None
    model: str | None = None
    token_env: str = "NUTRIREC_API_TOKEN"
    max_tokens: int = 256
    temperature: float = 0.0
    offline: bool = True
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    concurrency: int = 4

    def __post_init__(self):
        if not self.offline and (not self.endpoint or not self.model):
            raise ConfigError("remote gateway needs both endpoint and model")
        if self.retries < 1 or self.concurrency < 1:
            raise ConfigError("retries and concurrency must be >= 1")


# -- candidate selection and salience -------------------------------------------

def pretty(name: str) -> str:
    return name.replace("_", " ")


def _split_tag(tag: str) -> tuple[str, str]:
    direction, _, nutrient = tag.partition("_")
    return direction, nutrient


def refined_candidates(checkpoint, bundle: GraphBundle, user: int, n: int,
                       split: SplitBundle | None = None, scores: np.ndarray | None = None) -> list[Candidate]:
    """Top-n foods by trained score among foods signed healthy for the user.

    Missing slots are filled from the other foods ranked by Jaccard to the
    user's tags, then by score. Ties fall to the lower food index.
    """
    if n <= 0:
        return []
    if scores is None:
        scores = user_scores(checkpoint, bundle, split)[user]
    scores = np.asarray(scores, dtype=np.float64)
    signs = sign_matrix(bundle.user_tags[user:user + 1], bundle.food_tags)[0]
    jac = jaccard_matrix(bundle.user_tags[user:user + 1], bundle.food_tags)[0]
    idx = np.arange(bundle.n_foods)
    healthy = idx[signs > 0]
    rest = idx[signs <= 0]
    first = healthy[np.lexsort((healthy, -scores[healthy]))]
    filler = rest[np.lexsort((rest, -scores[rest], -jac[rest]))]
    ranked = np.concatenate([first, filler])[:n]
    return [Candidate(bundle.foods[f].food_id, int(f), float(scores[f]), bool(signs[f] > 0), float(jac[f]))
            for f in ranked]


def user_scores(checkpoint, bundle: GraphBundle, split: SplitBundle | None = None) -> np.ndarray:
    ctx = GraphContext.from_bundle(bundle, None if split is None else split.train)
    checkpoint.check_compatible(ctx)
    Eu, Ef = embeddings(checkpoint.store, ctx, checkpoint.config.model, checkpoint.config.baseline)
    return Eu @ Ef.T


def salient_conditions(user_tags: np.ndarray, food_tags: np.ndarray, thresholds: ThresholdTable) -> list[SalientTag]:
    """User tags ordered: conflicts with the food first, then matches, then the rest."""
    names = thresholds.tag_names
    user_tags = np.asarray(user_tags, dtype=bool)
    food_tags = np.asarray(food_tags, dtype=bool)
    buckets = {"conflict": [], "match": [], "other": []}
    for i in np.flatnonzero(user_tags):
        partner = i + 1 if i % 2 == 0 else i - 1
        if food_tags[partner]:
            buckets["conflict"].append(SalientTag(names[i], "conflict"))
        elif food_tags[i]:
            buckets["match"].append(SalientTag(names[i], "match"))
        else:
            buckets["other"].append(SalientTag(names[i], "other"))
    return buckets["conflict"] + buckets["match"] + buckets["other"]


# -- prompt construction ---------------------------------------------------------

def _fmt_value(x: float) -> str:
    return f"{x:.4g}"


def _unit(column: str) -> str:
    return column.rsplit("_", 1)[-1] if "_" in column else ""


def build_prompt(bundle: GraphBundle, user: int, food: int, candidates: list[Candidate] = (),
                 salient: list[SalientTag] | None = None, options: PromptOptions = PromptOptions()) -> PromptBundle:
    thresholds = bundle.thresholds
    u, f = bundle.users[user], bundle.foods[food]
    if salient is None:
        salient = salient_conditions(u.tags, f.tags, thresholds)
    notes = (f"Answer in at most {options.max_words} words. Begin with a one-word verdict, "
             "HEALTHY or UNHEALTHY, then justify it nutrient by nutrient. "
             "Mention only nutrients listed in the context.")
    provenance = {
        "user_id": u.user_id,
        "food_id": f.food_id,
        "user_tags": thresholds.tags_of(u.tags),
        "food_tags": thresholds.tags_of(f.tags),
        "salient": [[s.tag, s.relation] for s in salient] if options.attention_on_conditions else [],
        "candidates": [[c.food_id, "healthy" if c.healthy else "jaccard_filler"] for c in candidates]
        if options.refined_candidates else [],
        "options": {"refined_candidates": options.refined_candidates,
                    "attention_on_conditions": options.attention_on_conditions,
                    "max_words": options.max_words},
    }
    if not options.refined_candidates and not options.attention_on_conditions:
        context = f"Is food {f.food_id} healthy for user {u.user_id}?"
        return PromptBundle(INSTRUCTION, context, notes, provenance)

    paras = []
    if options.attention_on_conditions:
        lines = [f"User {u.user_id} health needs, most relevant to food {f.food_id} first:"]
        if not salient:
            lines.append("- none recorded")
        for s in salient:
            direction, nutrient = _split_tag(s.tag)
            note = {"conflict": "the food conflicts", "match": "the food matches", "other": "not affected"}[s.relation]
            lines.append(f"- needs {direction} {pretty(nutrient)} ({note})")
        paras.append("\n".join(lines))
        shown = []
        for s in salient:
            nutrient = _split_tag(s.tag)[1]
            if nutrient not in shown:
                shown.append(nutrient)
        if shown:
            values = [f"Nutrients of food {f.food_id} per 100 g:"]
            for name in shown:
                nut = thresholds.nutrient(name)
                v = f.nutrients[thresholds.names.index(name)]
                values.append(f"- {pretty(name)}: {_fmt_value(v)} {_unit(nut.column)} "
                              f"(low at or below {_fmt_value(nut.low)}, high at or above {_fmt_value(nut.high)})")
            paras.append("\n".join(values))
    else:
        paras.append(f"Target food: {f.food_id}. User: {u.user_id}.")
    if options.refined_candidates and candidates:
        lines = [f"Foods the trained recommender selects for user {u.user_id}:"]
        for c in candidates:
            label = "healthy for this user" if c.healthy else "closest tag match"
            lines.append(f"- {c.food_id} ({label})")
        paras.append("\n".join(lines))
    return PromptBundle(INSTRUCTION, "\n\n".join(paras), notes, provenance)


def prompt_for(checkpoint, bundle: GraphBundle, user: int, food: int, n_candidates: int = 5,
               options: PromptOptions = PromptOptions(), split: SplitBundle | None = None,
               scores: np.ndarray | None = None) -> PromptBundle:
    cands = refined_candidates(checkpoint, bundle, user, n_candidates, split, scores) \
        if options.refined_candidates else []
    return build_prompt(bundle, user, food, cands, None, options)


# -- explanation -----------------------------------------------------------------

def offline_explanation(user_id: str, food_id: str, user_tags: list[str], food_tags: list[str],
                        candidates: list = (), table: ThresholdTable | None = None) -> tuple[str, str]:
    """(text, verdict) from tag names; the verdict follows edge signing."""
    ut, ft = set(user_tags), set(food_tags)
    conflicts, matches = [], []
    for tag in user_tags:
        direction, nutrient = _split_tag(tag)
        other = ("high_" if direction == "low" else "low_") + nutrient
        if other in ft:
            conflicts.append((direction, nutrient))
        elif tag in ft:
            matches.append((direction, nutrient))
    if table is not None:
        verdict = "healthy" if sign_edge(table.vector(ut), table.vector(ft)) > 0 else "unhealthy"
    else:
        verdict = "healthy" if len(matches) > len(conflicts) else "unhealthy"
    sentences = [f"Verdict: {verdict.upper()}. Food {food_id} is {verdict} for user {user_id}."]
    for direction, nutrient in conflicts:
        opposite = "high" if direction == "low" else "low"
        sentences.append(f"The food is {opposite} in {pretty(nutrient)}, "
                         f"which conflicts with the user's need for {direction} {pretty(nutrient)}.")
    for direction, nutrient in matches:
        sentences.append(f"The food is {direction} in {pretty(nutrient)}, "
                         f"matching the user's need for {direction} {pretty(nutrient)}.")
    if not conflicts and not matches:
        sentences.append("None of the food's nutrient tags relate to the user's health needs.")
    healthy = [c[0] for c in candidates if c[1] == "healthy" and c[0] != food_id]
    if verdict == "unhealthy" and healthy:
        sentences.append("Healthier options for this user: " + ", ".join(healthy[:3]) + ".")
    return " ".join(sentences), verdict


def explain(prompt: PromptBundle, gateway: GatewayConfig = GatewayConfig(), client: httpx.Client | None = None,
            table: ThresholdTable | None = None, sleep=time.sleep, index: int | None = None) -> Explanation:
    if gateway.offline:
        p = prompt.provenance
        text, verdict = offline_explanation(p["user_id"], p["food_id"], p["user_tags"], p["food_tags"],
                                            p["candidates"], table)
        return Explanation(text, "offline-template", prompt.hash, verdict, index)
    text = _remote_completion(prompt, gateway, client, sleep)
    return Explanation(text, "remote", prompt.hash, None, index)


def request_body(prompt: PromptBundle, gateway: GatewayConfig) -> dict:
    return {"model": gateway.model, "messages": [{"role": "user", "content": prompt.text()}],
            "max_tokens": gateway.max_tokens, "temperature": gateway.temperature}


def _remote_completion(prompt, gateway, client, sleep) -> str:
    url = gateway.endpoint.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(gateway.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    own = client is None
    client = client or httpx.Client(timeout=gateway.timeout)
    status, last = None, None
    try:
        for attempt in range(gateway.retries):
            if attempt:
                sleep(gateway.backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(url, json=request_body(prompt, gateway), headers=headers)
            except httpx.HTTPError as exc:
                status, last = None, f"{type(exc).__name__}: {exc}"
                continue
            status = resp.status_code
            if resp.status_code >= 400:
                last = f"HTTP {resp.status_code}"
                if resp.status_code in RETRY_STATUSES:
                    continue
                raise GatewayError(f"gateway refused request: {last}", status)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"malformed gateway response: {exc!r}", status) from exc
    finally:
        if own:
            client.close()
    raise GatewayError(f"gateway failed after {gateway.retries} tries: {last}", status)


def explain_batch(prompts: list[PromptBundle], gateway: GatewayConfig = GatewayConfig(),
                  client: httpx.Client | None = None, table: ThresholdTable | None = None,
                  sleep=time.sleep) -> list[Explanation]:
    """One explanation per prompt, returned in input order."""
    if gateway.offline or gateway.concurrency == 1 or len(prompts) < 2:
        return [explain(p, gateway, client, table, sleep, i) for i, p in enumerate(prompts)]
    with ThreadPoolExecutor(max_workers=gateway.concurrency) as pool:
        futures = [pool.submit(explain, p, gateway, client, table, sleep, i) for i, p in enumerate(prompts)]
        return [fut.result() for fut in futures]


@dataclass
class ReasoningRun:
    """Prompts plus explanations for a list of (user, food) pairs."""

    prompts: list = field(default_factory=list)
    explanations: list = field(default_factory=list)

    def to_records(self) -> list[dict]:
        out = []
        for p, e in zip(self.prompts, self.explanations):
            out.append({"user_id": p.provenance["user_id"], "food_id": p.provenance["food_id"],
                        "prompt": p.text(), "prompt_hash": p.hash, "provenance": p.provenance,
                        "explanation": e.text, "source": e.source, "verdict": e.verdict})
        return out


def matched_tags(user_tags: np.ndarray, food_tags: np.ndarray, table: ThresholdTable) -> list[str]:
    """Same-direction tags shared by user and food (the reasoning ground truth)."""
    return table.tags_of(np.asarray(user_tags, bool) & np.asarray(food_tags, bool))


__all__ = [
    "Candidate", "SalientTag", "PromptOptions", "PromptBundle", "Explanation", "GatewayConfig",
    "refined_candidates", "salient_conditions", "build_prompt", "prompt_for", "explain",
    "explain_batch", "offline_explanation", "request_body", "matched_tags", "user_scores",
    "ReasoningRun", "match_counts",
]
