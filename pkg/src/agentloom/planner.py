"""Planning prompts, decision parsing with layered fallbacks, retraction.

The parser is total: any byte string yields a decision. It tries direct
JSON, then JSON inside a fenced code block, then fuzzy action matching,
and finally falls back to the guideline's declared order.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum

from .executor import ExecutionState, RollbackToken
from .workflow import (
    ActionUnit,
    Guideline,
    RenderLimits,
    StepKind,
    TaskContext,
    render_context,
)


class PlannerError(Exception):
    pass


class BudgetExhausted(PlannerError):
    pass


class UnknownTarget(PlannerError):
    pass


class ParseLayer(str, Enum):
    DIRECT_JSON = "direct_json"
    FENCED_JSON = "fenced_json"
    FUZZY = "fuzzy"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class PlanningDecision:
    action: str
    retract_to: str | None
    reason: str
    parse_layer: ParseLayer


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics."""
    return _TOKEN_RE.findall(text.lower())


class FuzzyMatcher:
    """TF-IDF cosine matcher over an action-name vocabulary.

    Term frequency is the raw count, idf = ln(N/df) with the vocabulary
    itself as the document set. Query terms absent from every vocabulary
    entry are dropped (df = 0 has no defined idf and cannot match
    anything). Ties break toward the earliest vocabulary position. Term
    iteration is in sorted order so scores are bit-reproducible.
    """

    def __init__(self, vocabulary: list[str], threshold: float = 0.35):
        if not vocabulary:
            raise ValueError("vocabulary must be non-empty")
        self.vocabulary = list(vocabulary)
        self.threshold = threshold
        docs = [tokenize(name) for name in self.vocabulary]
        n_docs = len(docs)
        df: dict[str, int] = {}
        for tokens in docs:
            for term in set(tokens):
                df[term] = df.get(term, 0) + 1
        self._idf = {term: math.log(n_docs / count) for term, count in df.items()}
        self._doc_weights: list[dict[str, float]] = []
        self._doc_norms: list[float] = []
        for tokens in docs:
            weights = self._weigh(tokens)
            self._doc_weights.append(weights)
            self._doc_norms.append(math.sqrt(sum(weights[t] ** 2 for t in sorted(weights))))

    def _weigh(self, tokens: list[str]) -> dict[str, float]:
        counts: dict[str, int] = {}
        for term in tokens:
            if term in self._idf:
                counts[term] = counts.get(term, 0) + 1
        return {term: counts[term] * self._idf[term] for term in sorted(counts)}

    def similarity(self, query: str, position: int) -> float:
        """Cosine similarity between ``query`` and vocabulary entry ``position``."""
        q = self._weigh(tokenize(query))
        q_norm = math.sqrt(sum(q[t] ** 2 for t in sorted(q)))
        d = self._doc_weights[position]
        d_norm = self._doc_norms[position]
        if q_norm == 0.0 or d_norm == 0.0:
            return 0.0
        dot = sum(q[t] * d[t] for t in sorted(q) if t in d)
        return dot / (q_norm * d_norm)

    def match(self, query: str) -> tuple[str | None, float]:
        """Best vocabulary entry for ``query``, or (None, score) below threshold."""
        best_pos = 0
        best_score = -1.0
        for pos in range(len(self.vocabulary)):
            score = self.similarity(query, pos)
            if score > best_score:
                best_score = score
                best_pos = pos
        if best_score >= self.threshold:
            return self.vocabulary[best_pos], best_score
        return None, best_score


_PLANNING_TEMPLATE = """You are {role}. Your task is to execute a multi-step workflow.
{retraction_header}
### High-level Guidelines:
{guidelines}

### Task History:
You have attempted the following actions:
{task_history}

### Next Action Selection:
Based on the task history, select the next action from:
{available_actions}

### Response Format:
Respond in JSON with the following structure:
{{
    "action": "Selected Action Unit name",{retract_field}
    "reason": "Brief explanation of your decision"
}}

Important considerations:
- Analyze all outputs and errors to understand the current state
- If critical errors prevent progress, consider alternative approaches{retract_hint}
- Select "TASK COMPLETED" only when all objectives are achieved
"""

_RETRACTION_HEADER = """
You have the option to retract to a previous step if you discover
critical issues that require revisiting earlier decisions.
Retraction remaining: {n}
"""


def build_planning_prompt(
    ctx: TaskContext,
    guideline: Guideline,
    available: list[ActionUnit],
    retract_remaining: int | None = None,
    limits: RenderLimits | None = None,
) -> str:
    """Assemble the planning prompt; the retraction section appears only
    when a positive budget remains."""
    if not available:
        raise ValueError("available action units must be non-empty")
    offer_retraction = bool(retract_remaining)
    return _PLANNING_TEMPLATE.format(
        role=guideline.role.value,
        retraction_header=(
            _RETRACTION_HEADER.format(n=retract_remaining) if offer_retraction else ""
        ),
        guidelines=guideline.text,
        task_history=render_context(ctx, "all", limits),
        available_actions="\n".join(f"- {u.name}" for u in available),
        retract_field=(
            '\n    "retract_to_action": "Action to retract to (if applicable)",'
            if offer_retraction
            else ""
        ),
        retract_hint=(
            "\n- Use retraction when fundamental issues require earlier corrections"
            if offer_retraction
            else ""
        ),
    )


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n(.*?)```", re.DOTALL)


def _try_json_object(text: str) -> dict | None:
    try:
        obj = json.loads(text.strip())
    except (json.JSONDecodeError, RecursionError):
        return None
    return obj if isinstance(obj, dict) else None


def _resolve_action(raw_action: object, matcher: FuzzyMatcher) -> tuple[str | None, bool]:
    """Resolve an action value to a vocabulary name.

    Returns (name, used_fuzzy); name is None when nothing matches.
    """
    if not isinstance(raw_action, str) or not raw_action.strip():
        return None, False
    name = raw_action.strip()
    if name in matcher.vocabulary:
        return name, False
    matched, _ = matcher.match(name)
    return matched, True


def parse_decision(
    raw: str, matcher: FuzzyMatcher, default_next: ActionUnit
) -> PlanningDecision:
    """Parse a planning response; never raises.

    Fallback chain: direct JSON, first fenced JSON block, fuzzy action
    match, then the guideline's declared next unit.
    """
    candidates: list[tuple[dict, ParseLayer]] = []
    direct = _try_json_object(raw)
    if direct is not None:
        candidates.append((direct, ParseLayer.DIRECT_JSON))
    else:
        for block in _FENCE_RE.findall(raw):
            fenced = _try_json_object(block)
            if fenced is not None:
                candidates.append((fenced, ParseLayer.FENCED_JSON))
                break

    for obj, layer in candidates:
        action, used_fuzzy = _resolve_action(obj.get("action"), matcher)
        if action is None:
            continue
        retract_to, _ = _resolve_action(obj.get("retract_to_action"), matcher)
        reason = obj.get("reason")
        return PlanningDecision(
            action=action,
            retract_to=retract_to,
            reason=reason if isinstance(reason, str) else "",
            parse_layer=ParseLayer.FUZZY if used_fuzzy else layer,
        )
    return PlanningDecision(
        action=default_next.name,
        retract_to=None,
        reason="fallback to declared order",
        parse_layer=ParseLayer.FALLBACK,
    )


def default_next_unit(ctx: TaskContext, guideline: Guideline) -> ActionUnit:
    """Next unit in declared order: the first with no non-superseded
    regular step; the terminal unit once all are done."""
    for unit in guideline.units:
        if unit.terminal:
            continue
        if ctx.last_regular_index(unit.name) is None:
            return unit
    return guideline.terminal_unit


def apply_retraction(
    ctx: TaskContext, target: str, exec_state: ExecutionState
) -> RollbackToken:
    """Supersede every step after the target's last regular occurrence.

    History is preserved (records keep their contents; only the
    ``superseded`` flag changes) and the retraction budget decreases by
    one. The returned token tells the executor which script prefix
    survives.
    """
    if ctx.retract_remaining <= 0:
        raise BudgetExhausted("no retraction budget remaining")
    anchor = ctx.last_regular_index(target)
    if anchor is None:
        raise UnknownTarget(f"action {target!r} has no non-superseded regular step")
    ctx.mark_superseded_after(anchor)
    ctx.retract_remaining -= 1
    return RollbackToken(state_id=exec_state.id, boundary_index=anchor)
