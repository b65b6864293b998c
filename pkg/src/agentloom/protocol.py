"""Typed message vocabulary and envelope shared by every agent.

The protocol layer only knows about envelopes: who sent what kind of
message to whom. Payloads are opaque UTF-8 text; structured content
(planning decisions, review verdicts) is parsed by the consuming module.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum


class ProtocolError(Exception):
    """Base class for protocol-level failures."""


class InvalidKind(ProtocolError):
    """A kind was used where a different category of kind is required."""


class ValidationError(ProtocolError):
    """A message envelope violates a structural invariant."""


class EmptyTargets(ValidationError):
    pass


class UnknownRole(ValidationError):
    pass


class Role(str, Enum):
    """The closed set of agent roles. Unknown role names are rejected."""

    PI = "PI"
    GEO_ENGINEER = "GeoEngineer"
    TCGA_ENGINEER = "TcgaEngineer"
    STATISTICIAN = "Statistician"
    CODE_REVIEWER = "CodeReviewer"
    DOMAIN_EXPERT = "DomainExpert"


class MessageKind(str, Enum):
    TASK_REQUEST = "TaskRequest"
    CODE_WRITING_REQUEST = "CodeWritingRequest"
    CODE_REVIEW_REQUEST = "CodeReviewRequest"
    CODE_REVISION_REQUEST = "CodeRevisionRequest"
    PLANNING_REQUEST = "PlanningRequest"
    TASK_RESPONSE = "TaskResponse"
    CODE_WRITING_RESPONSE = "CodeWritingResponse"
    CODE_REVIEW_RESPONSE = "CodeReviewResponse"
    CODE_REVISION_RESPONSE = "CodeRevisionResponse"
    PLANNING_RESPONSE = "PlanningResponse"
    TIMEOUT = "Timeout"


_PAIRS: dict[MessageKind, MessageKind] = {
    MessageKind.TASK_REQUEST: MessageKind.TASK_RESPONSE,
    MessageKind.CODE_WRITING_REQUEST: MessageKind.CODE_WRITING_RESPONSE,
    MessageKind.CODE_REVIEW_REQUEST: MessageKind.CODE_REVIEW_RESPONSE,
    MessageKind.CODE_REVISION_REQUEST: MessageKind.CODE_REVISION_RESPONSE,
    MessageKind.PLANNING_REQUEST: MessageKind.PLANNING_RESPONSE,
}
_INVERSE_PAIRS = {resp: req for req, resp in _PAIRS.items()}

REQUEST_KINDS = frozenset(_PAIRS)
RESPONSE_KINDS = frozenset(_PAIRS.values())


def response_kind_for(kind: MessageKind) -> MessageKind:
    """Map a request kind to its paired response kind."""
    try:
        return _PAIRS[kind]
    except KeyError:
        raise InvalidKind(f"{kind.value} is not a request kind") from None


def request_kind_for(kind: MessageKind) -> MessageKind:
    """Inverse of :func:`response_kind_for`."""
    try:
        return _INVERSE_PAIRS[kind]
    except KeyError:
        raise InvalidKind(f"{kind.value} is not a response kind") from None


@dataclass(frozen=True)
class Message:
    """Immutable message envelope.

    ``seq`` is assigned by the environment at dispatch time so that logs
    and replays are totally ordered; it is None for undelivered drafts.
    """

    sender: Role
    kind: MessageKind
    content: str
    targets: frozenset[Role]
    seq: int | None = None

    def with_seq(self, seq: int) -> Message:
        return replace(self, seq=seq)


def make_message(
    sender: Role,
    kind: MessageKind,
    content: str,
    targets: frozenset[Role] | set[Role] | tuple[Role, ...],
) -> Message:
    return Message(sender=sender, kind=kind, content=content, targets=frozenset(targets))


def validate_message(m: Message) -> None:
    """Raise EmptyTargets / UnknownRole if the envelope is malformed."""
    if not m.targets:
        raise EmptyTargets("message has no targets")
    for role in (m.sender, *m.targets):
        try:
            Role(role)
        except ValueError:
            raise UnknownRole(f"unknown role: {role!r}") from None


def encode_message(m: Message) -> str:
    """Canonical one-line JSON encoding (sorted keys, sorted targets)."""
    payload = {
        "sender": m.sender.value,
        "kind": m.kind.value,
        "content": m.content,
        "targets": sorted(t.value for t in m.targets),
        "seq": m.seq,
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def decode_message(line: str) -> Message:
    """Parse a message from its JSON encoding, rejecting unknown roles/kinds."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed message JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ValidationError("message JSON must be an object")
    try:
        sender = Role(payload["sender"])
        targets = frozenset(Role(t) for t in payload["targets"])
    except ValueError as exc:
        raise UnknownRole(str(exc)) from None
    except KeyError as exc:
        raise ValidationError(f"missing message field: {exc}") from None
    try:
        kind = MessageKind(payload["kind"])
    except ValueError as exc:
        raise InvalidKind(str(exc)) from None
    except KeyError as exc:
        raise ValidationError(f"missing message field: {exc}") from None
    m = Message(
        sender=sender,
        kind=kind,
        content=str(payload.get("content", "")),
        targets=targets,
        seq=payload.get("seq"),
    )
    validate_message(m)
    return m


def content_digest(content: str) -> str:
    return "sha256:" + hashlib.sha256(content.encode("utf-8")).hexdigest()


def log_entry(m: Message, delivered: list[Role], dropped: list[Role]) -> dict:
    """Message-log record: envelope metadata plus routing outcome.

    Full content is stored separately (keyed by digest) for size control.
    """
    return {
        "seq": m.seq,
        "sender": m.sender.value,
        "kind": m.kind.value,
        "targets": sorted(t.value for t in m.targets),
        "content_digest": content_digest(m.content),
        "delivered": sorted(r.value for r in delivered),
        "dropped": sorted(r.value for r in dropped),
    }
