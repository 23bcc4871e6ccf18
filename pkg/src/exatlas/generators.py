"""Chat providers, prompt construction, response parsing, and the bridge loop.

The two templates under ``prompts/`` (bridge generation, conflict
reconciliation) are fixed assets; only their declared substitution slots vary
at build time. Proposed bridge experiments enter the feature pool as
hypothetical nodes with no observed effect: they can make a gap target
composable but never feed an effect prediction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .archive import Archive, Experiment
from .atlas import Conflict, isolated_ratio
from .composer import ComposerConfig, assess
from .representation import (
    EmbeddingError,
    EmbeddingProvider,
    build_feature,
    embed_text,
    embedding_texts,
)

logger = logging.getLogger(__name__)

ENV_CHAT_KEY = "EXATLAS_CHAT_KEY"
DEFAULT_MAX_ROUNDS = 3

BRIDGE_TEMPLATE_NAME = "bridge_generation"
RECONCILE_TEMPLATE_NAME = "conflict_reconciliation"
ENRICHMENT_TEMPLATE_NAME = "enrichment"

# Substitution slots, by template. Everything outside these slots is fixed.
TEMPLATE_SLOTS: dict[str, tuple[str, ...]] = {
    BRIDGE_TEMPLATE_NAME: ("{IV}", "{DV}", "{literature}", "{listofknown}"),
    RECONCILE_TEMPLATE_NAME: (
        "{Predicted result based on composition}",
        "{Results of contributing experiments}",
    ),
    ENRICHMENT_TEMPLATE_NAME: ("{treatment}", "{outcome}", "{context}"),
}


class ChatError(Exception):
    pass


class ChatTransportError(ChatError):
    """Remote chat request failed after retries."""


class MalformedResponseError(ChatError):
    """Model reply is missing a required field or is empty."""


class MissingTranscriptError(ChatError):
    def __init__(self, prompt_hash: str):
        super().__init__(f"scripted stub has no response for prompt hash {prompt_hash}")
        self.prompt_hash = prompt_hash


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def load_template(name: str) -> str:
    """Load a prompt template asset by name (without the .txt extension)."""
    return (resources.files("exatlas") / "prompts" / f"{name}.txt").read_text("utf-8")


def render_template(name: str, substitutions: Mapping[str, str]) -> str:
    """Fill a template's declared slots; any other text is left untouched."""
    text = load_template(name)
    for slot in TEMPLATE_SLOTS[name]:
        key = slot[1:-1]
        if key not in substitutions:
            raise KeyError(f"missing substitution for slot {slot}")
        text = text.replace(slot, substitutions[key])
    return text


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    temperature: float = 0.0


class ScriptedStubChat:
    """Replays a fixed transcript keyed by SHA-256 of the prompt text.

    Transcript files are line-delimited ``{"prompt_hash": ..., "response": ...}``
    records. Unknown prompts raise, which keeps offline tests honest.
    """

    kind = "scripted-stub"

    def __init__(self, transcript: Mapping[str, str]):
        self.transcript = dict(transcript)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedStubChat":
        transcript: dict[str, str] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                transcript[rec["prompt_hash"]] = rec["response"]
        return cls(transcript)

    @classmethod
    def from_pairs(cls, pairs: Mapping[str, str]) -> "ScriptedStubChat":
        """Build a stub from plain prompt -> response pairs (hashing for you)."""
        return cls({prompt_hash(p): r for p, r in pairs.items()})

    def complete(self, request: ChatRequest) -> str:
        self.calls += 1
        h = prompt_hash(request.prompt)
        if h not in self.transcript:
            raise MissingTranscriptError(h)
        return self.transcript[h]


class RemoteChatProvider:
    """Minimal chat-completions client with retries and exponential backoff.

    Wire contract: ``POST endpoint`` with ``{"model", "messages", "temperature"}``
    returning ``{"choices": [{"message": {"content": ...}}]}``. The API key is
    read from ``EXATLAS_CHAT_KEY`` unless given.
    """

    kind = "remote-service"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        transport: Callable[[str, dict, dict], dict] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_CHAT_KEY)
        self.temperature = temperature
        self.max_retries = max(0, int(max_retries))
        self.backoff = backoff
        self._transport = transport or _requests_post_json
        self._sleep = sleep

    def complete(self, request: ChatRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        for attempt in range(self.max_retries + 1):
            try:
                doc = self._transport(self.endpoint, payload, headers)
                break
            except ChatTransportError:
                if attempt == self.max_retries:
                    raise
                self._sleep(self.backoff * (2 ** attempt))
        try:
            content = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"unexpected chat response shape: {e}") from e
        if not isinstance(content, str) or not content.strip():
            raise MalformedResponseError("chat response is empty")
        return content


def _requests_post_json(endpoint: str, payload: dict, headers: dict) -> dict:
    import requests

    try:
        resp = requests.post(endpoint, json=payload, headers=headers, timeout=120)
    except requests.RequestException as e:
        raise ChatTransportError(f"chat request failed: {e}") from e
    if resp.status_code != 200:
        raise ChatTransportError(
            f"chat endpoint returned {resp.status_code}: {resp.text[:200]}"
        )
    return resp.json()


class AuditingChat:
    """Wraps a chat provider, logging every prompt/response pair to a directory."""

    def __init__(self, inner, audit_dir: str | Path):
        self.inner = inner
        self.audit_dir = Path(audit_dir)
        self.audit_dir.mkdir(parents=True, exist_ok=True)
        self._n = 0

    def complete(self, request: ChatRequest) -> str:
        self._n += 1
        stem = f"{self._n:03d}"
        (self.audit_dir / f"{stem}_prompt.txt").write_text(request.prompt, "utf-8")
        response = self.inner.complete(request)
        (self.audit_dir / f"{stem}_response.txt").write_text(response, "utf-8")
        return response


def _effect_direction(effect: float) -> str:
    if effect > 0:
        return "positive"
    if effect < 0:
        return "negative"
    return "null"


def describe_relation(exp: Experiment, with_effect: bool = False) -> str:
    """One-line statement of an experiment's causal question and its direction."""
    iv, dv, _ = embedding_texts(exp)
    if with_effect:
        return (f"How does {iv} impact {dv}? "
                f"(observed: {_effect_direction(exp.effect_size)}, "
                f"effect {exp.effect_size:+.4f})")
    return f"How does {iv} impact {dv}? (observed: {_effect_direction(exp.effect_size)})"


def build_enrichment_request(exp: Experiment) -> ChatRequest:
    """Ask for context-aware rewrites of the raw treatment and outcome texts."""
    if not exp.treatment_text or not exp.outcome_text:
        raise ValueError("enrichment needs raw treatment and outcome texts")
    prompt = render_template(ENRICHMENT_TEMPLATE_NAME, {
        "treatment": exp.treatment_text,
        "outcome": exp.outcome_text,
        "context": exp.context_text or "(no additional context)",
    })
    return ChatRequest(prompt=prompt)


_ENRICH_TREATMENT_RE = re.compile(r"^TREATMENT:\s*(.+)$", re.MULTILINE)
_ENRICH_OUTCOME_RE = re.compile(r"^OUTCOME:\s*(.+)$", re.MULTILINE)


def parse_enrichment_response(text: str) -> tuple[str, str]:
    t = _ENRICH_TREATMENT_RE.search(text)
    o = _ENRICH_OUTCOME_RE.search(text)
    if t is None:
        raise MalformedResponseError("enrichment reply is missing the TREATMENT line")
    if o is None:
        raise MalformedResponseError("enrichment reply is missing the OUTCOME line")
    return t.group(1).strip(), o.group(1).strip()


def enrich_experiment(exp: Experiment, chat) -> Experiment:
    """Return a copy of the experiment with model-enriched texts filled in."""
    response = chat.complete(build_enrichment_request(exp))
    enriched_t, enriched_o = parse_enrichment_response(response)
    from dataclasses import replace

    return replace(exp, enriched_treatment=enriched_t, enriched_outcome=enriched_o)


def build_reconciliation_prompt(conflict: Conflict, sources: Sequence[Experiment],
                                target: Experiment) -> ChatRequest:
    """Fill the reconciliation template for a composable-but-mismatched target.

    The finding slot carries the target relation with the observed direction
    and the composition's predicted direction; the literature slot carries
    each positive-weight source's relation and observed effect.
    """
    by_id = {s.id: s for s in sources}
    positive = [(cid, w) for cid, w in conflict.source_weights.items() if w > 0.0]
    missing = [cid for cid, _ in positive if cid not in by_id]
    if missing:
        raise ValueError(f"missing source experiments for ids: {missing}")
    iv, dv, _ = embedding_texts(target)
    finding = (
        f"How does {iv} impact {dv}? "
        f"My experiment observed a {_effect_direction(conflict.observed_effect)} effect "
        f"({conflict.observed_effect:+.4f}), while composing the prior experiments "
        f"predicted a {_effect_direction(conflict.composed_effect)} effect "
        f"({conflict.composed_effect:+.4f})."
    )
    ordered = sorted(positive, key=lambda kv: (-kv[1], kv[0]))
    literature = "; ".join(
        f"{describe_relation(by_id[cid], with_effect=True)} [weight {w:.3f}]"
        for cid, w in ordered
    )
    prompt = render_template(RECONCILE_TEMPLATE_NAME, {
        "Predicted result based on composition": finding,
        "Results of contributing experiments": literature,
    })
    return ChatRequest(prompt=prompt)


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_reconciliation_response(text: str) -> tuple[bool, str]:
    """Extract the consistency verdict: (reconciliation needed, full response).

    The first standalone yes/no token answers the consistency check; "No"
    means the findings do not contradict and no reconciliation is needed.
    """
    m = _YES_NO_RE.search(text)
    if m is None:
        raise MalformedResponseError("reconciliation reply has no Yes/No verdict")
    return m.group(1).lower() == "yes", text


def build_bridge_prompt(target: Experiment, literature: Sequence[Experiment],
                        known: Sequence[str]) -> ChatRequest:
    """Fill the bridge-generation template for a gap target."""
    if not literature:
        raise ValueError("bridge prompt needs at least one literature entry")
    iv, dv, _ = embedding_texts(target)
    prompt = render_template(BRIDGE_TEMPLATE_NAME, {
        "IV": iv,
        "DV": dv,
        "literature": "; ".join(describe_relation(e) for e in literature),
        "listofknown": "; ".join(known) if known else "(none)",
    })
    return ChatRequest(prompt=prompt)


@dataclass(frozen=True)
class BridgeProposal:
    """One proposed connecting experiment, split out of a model reply."""

    text: str
    round: int
    parsed_treatment: str
    parsed_outcome: str


# "Variable A positively impacts variable B." and close variants.
_RELATION_RE = re.compile(
    r"^(?P<treatment>.+?)\s+"
    r"(?:positively\s+|negatively\s+|significantly\s+|strongly\s+|weakly\s+)?"
    r"(?:impacts?|increases?|decreases?|reduces?|improves?|affects?|influences?"
    r"|boosts?|lowers?|raises?)\s+"
    r"(?P<outcome>.+?)\s*\.?\s*$",
    re.IGNORECASE,
)


def parse_bridge_response(text: str, round: int = 1) -> list[BridgeProposal]:
    """Split a bridge reply on ";" into proposals, trimming and dropping empties.

    Treatment and outcome are pulled from the "A impacts B" pattern above;
    when a fragment does not match, the whole fragment lands in both fields.
    """
    fragments = [frag.strip() for frag in text.split(";")]
    fragments = [f for f in fragments if f]
    if not fragments:
        raise MalformedResponseError("bridge reply contains no proposals")
    proposals = []
    for frag in fragments:
        m = _RELATION_RE.match(frag)
        if m:
            treatment = m.group("treatment").strip()
            outcome = m.group("outcome").strip()
        else:
            treatment = outcome = frag
        proposals.append(BridgeProposal(
            text=frag, round=round,
            parsed_treatment=treatment, parsed_outcome=outcome,
        ))
    return proposals


@dataclass(frozen=True)
class BridgeResult:
    """Outcome of the iterative gap-bridging loop for one target.

    ``isolated_ratio_trace`` has one entry per round plus the round-0
    baseline, so its length is ``rounds_run + 1``.
    """

    target_id: str
    rounds_run: int
    proposals: tuple[BridgeProposal, ...]
    final_composable: bool
    isolated_ratio_trace: tuple[float, ...]

    def to_record(self) -> dict:
        return {
            "target_id": self.target_id,
            "rounds_run": self.rounds_run,
            "final_composable": self.final_composable,
            "isolated_ratio_trace": list(self.isolated_ratio_trace),
            "proposals": [
                {"text": p.text, "round": p.round,
                 "parsed_treatment": p.parsed_treatment,
                 "parsed_outcome": p.parsed_outcome}
                for p in self.proposals
            ],
        }


def bridge_loop(target: Experiment, archive: Archive,
                features: Mapping[str, np.ndarray],
                embedder: EmbeddingProvider, chat,
                cfg: ComposerConfig,
                max_rounds: int = DEFAULT_MAX_ROUNDS,
                literature_size: int = 5) -> BridgeResult:
    """Propose, embed, and insert hypothetical experiments until the target composes.

    Each round builds a prompt from the target's nearest real neighbors and
    every earlier proposal, parses the reply into proposals, embeds them from
    their parsed texts, and reassesses the target over the augmented pool.
    Hypothetical nodes carry no observed effect; reassessments therefore have
    ``composed_effect=None`` whenever one carries weight. The trace records
    the archive-wide isolated ratio before any proposals and after each round.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    real_pool = {i: np.asarray(features[i], dtype=float)
                 for i in archive.ids() if i != target.id}
    target_x = np.asarray(features[target.id], dtype=float)
    comp = assess(target, target_x, real_pool, None, cfg)
    if comp.composable:
        raise ValueError(f"target {target.id!r} is already composable")

    hypothetical: dict[str, np.ndarray] = {}
    trace = [isolated_ratio(archive, features, cfg)]
    proposals_all: list[BridgeProposal] = []
    known: list[str] = []
    rounds_run = 0
    final_composable = False
    for rnd in range(1, max_rounds + 1):
        nearest_real = [cid for cid in comp.neighborhood.candidate_ids
                        if cid in real_pool][:literature_size]
        literature = [archive.get(cid) for cid in nearest_real]
        request = build_bridge_prompt(target, literature, known)
        response = chat.complete(request)
        proposals = parse_bridge_response(response, round=rnd)
        for k, prop in enumerate(proposals):
            try:
                t = embed_text(embedder, prop.parsed_treatment)
                o = embed_text(embedder, prop.parsed_outcome)
            except EmbeddingError as e:
                logger.warning("dropping proposal %r (round %d): %s",
                               prop.text[:60], rnd, e)
                continue
            hypothetical[f"hypothetical:{target.id}:{rnd}:{k}"] = build_feature(t, o)
        proposals_all.extend(proposals)
        known.extend(p.text for p in proposals)
        rounds_run = rnd
        comp = assess(target, target_x, {**real_pool, **hypothetical}, None, cfg)
        trace.append(isolated_ratio(archive, features, cfg,
                                    extra_features=hypothetical))
        if comp.composable:
            final_composable = True
            break
    return BridgeResult(
        target_id=target.id,
        rounds_run=rounds_run,
        proposals=tuple(proposals_all),
        final_composable=final_composable,
        isolated_ratio_trace=tuple(trace),
    )
