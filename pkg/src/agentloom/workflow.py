"""Guideline documents, action units, and the append-only task context.

A guideline is a data file: prose that encodes the workflow's dependency
and termination logic (injected verbatim into prompts) plus an ordered
list of named action units. The engine never interprets the prose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .protocol import Role

TERMINAL_ACTION = "TASK COMPLETED"


class GuidelineError(Exception):
    pass


class SchemaError(GuidelineError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateUnitName(GuidelineError):
    pass


class MissingTerminal(GuidelineError):
    pass


class Severity(str, Enum):
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"


@dataclass(frozen=True)
class Note:
    cohort: str
    severity: Severity
    text: str

    def to_json(self) -> str:
        return json.dumps(
            {"cohort": self.cohort, "severity": self.severity.value, "text": self.text},
            ensure_ascii=False,
        )

    @staticmethod
    def from_json(line: str) -> Note:
        obj = json.loads(line)
        try:
            severity = Severity(obj["severity"])
        except ValueError as exc:
            raise SchemaError(str(exc), line=1) from None
        return Note(cohort=str(obj.get("cohort", "")), severity=severity, text=str(obj["text"]))


@dataclass(frozen=True)
class ActionUnit:
    name: str
    instruction: str
    requires_domain_expert: bool = False
    optional: bool = False
    cacheable: bool = False
    terminal: bool = False


@dataclass(frozen=True)
class Guideline:
    id: str
    role: Role
    text: str
    units: tuple[ActionUnit, ...]

    @property
    def unit_names(self) -> list[str]:
        return [u.name for u in self.units]

    @property
    def terminal_unit(self) -> ActionUnit:
        return next(u for u in self.units if u.terminal)

    def find(self, name: str) -> ActionUnit:
        for u in self.units:
            if u.name == name:
                return u
        raise KeyError(name)


_FLAG_FIELDS = {
    "domain_expert": "requires_domain_expert",
    "optional": "optional",
    "cacheable": "cacheable",
    "terminal": "terminal",
}


def load_guideline(document: str) -> Guideline:
    """Parse a guideline document.

    Format: ``id:`` / ``role:`` header lines, then a ``=== guideline``
    prose block, then one ``=== unit: <name>`` block per action unit with
    an optional ``flags:`` line followed by the instruction body.
    """
    header: dict[str, str] = {}
    prose_lines: list[str] = []
    units: list[ActionUnit] = []

    section: str | None = None  # None (header) | "guideline" | "unit"
    unit_name = ""
    unit_flags: dict[str, bool] = {}
    unit_body: list[str] = []
    unit_line = 0
    expect_flags = False

    def finish_unit(at_line: int) -> None:
        if section != "unit":
            return
        name = unit_name.strip()
        if not name:
            raise SchemaError("unit block has an empty name", unit_line)
        if any(u.name == name for u in units):
            raise DuplicateUnitName(f"duplicate unit name: {name!r} (line {at_line})")
        units.append(ActionUnit(name=name, instruction="\n".join(unit_body).strip(), **unit_flags))

    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.rstrip()
        if line.startswith("=== "):
            finish_unit(lineno)
            marker = line[4:].strip()
            if marker == "guideline":
                section = "guideline"
            elif marker.startswith("unit:"):
                section = "unit"
                unit_name = marker[len("unit:"):]
                unit_flags = {}
                unit_body = []
                unit_line = lineno
                expect_flags = True
            else:
                raise SchemaError(f"unknown block marker {marker!r}", lineno)
            continue
        if section is None:
            if not line:
                continue
            if ":" not in line:
                raise SchemaError(f"expected 'key: value' header, got {line!r}", lineno)
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()
        elif section == "guideline":
            prose_lines.append(raw)
        else:
            if expect_flags and line.startswith("flags:"):
                for token in line[len("flags:"):].split(","):
                    token = token.strip()
                    if not token:
                        continue
                    if token not in _FLAG_FIELDS:
                        raise SchemaError(f"unknown unit flag {token!r}", lineno)
                    unit_flags[_FLAG_FIELDS[token]] = True
                expect_flags = False
                continue
            expect_flags = False
            unit_body.append(raw)
    finish_unit(len(document.splitlines()))

    if "id" not in header:
        raise SchemaError("missing 'id' header", 1)
    if "role" not in header:
        raise SchemaError("missing 'role' header", 1)
    try:
        role = Role(header["role"])
    except ValueError:
        raise SchemaError(f"unknown role {header['role']!r}", 1) from None
    if sum(1 for u in units if u.terminal) != 1:
        have = [u.name for u in units if u.terminal]
        if not have:
            raise MissingTerminal("guideline declares no terminal unit")
        raise SchemaError(f"multiple terminal units: {have}", 1)
    return Guideline(
        id=header["id"], role=role, text="\n".join(prose_lines).strip(), units=tuple(units)
    )


def load_guideline_file(path: str | Path) -> Guideline:
    return load_guideline(Path(path).read_text(encoding="utf-8"))


class StepKind(str, Enum):
    REGULAR = "regular"
    DEBUG = "debug"


@dataclass
class StepRecord:
    """One attempt at an action unit.

    The first attempt for a unit is a regular step; revision attempts are
    debug steps referencing the same action. ``superseded`` is set only by
    retraction and never cleared.
    """

    index: int
    kind: StepKind
    action: str
    instruction: str
    code: str
    output: str = ""
    error_trace: str = ""
    reviews: list[str] = field(default_factory=list)
    superseded: bool = False
    wall_time: float = 0.0


@dataclass(frozen=True)
class RenderLimits:
    """Truncation caps for rendered history. Error traces are never cut."""

    code_chars: int = 4000
    output_chars: int = 2000


@dataclass
class TaskContext:
    """Append-only execution history for one task stream."""

    cohort: str
    retract_remaining: int = 2
    steps: list[StepRecord] = field(default_factory=list)
    notes: list[Note] = field(default_factory=list)

    def append_step(
        self, kind: StepKind, action: str, instruction: str, code: str
    ) -> StepRecord:
        record = StepRecord(
            index=len(self.steps), kind=kind, action=action, instruction=instruction, code=code
        )
        self.steps.append(record)
        return record

    @property
    def newest(self) -> StepRecord | None:
        return self.steps[-1] if self.steps else None

    def current_attempt_group(self) -> list[StepRecord]:
        """Trailing attempts for the newest step's action: the regular
        anchor plus its contiguous debug repairs."""
        group: list[StepRecord] = []
        for record in reversed(self.steps):
            if group and record.action != group[-1].action:
                break
            group.append(record)
            if record.kind is StepKind.REGULAR:
                break
        group.reverse()
        return group

    def last_regular_index(self, action: str) -> int | None:
        """Index of the most recent non-superseded regular step for ``action``."""
        for record in reversed(self.steps):
            if record.kind is StepKind.REGULAR and record.action == action and not record.superseded:
                return record.index
        return None

    def mark_superseded_after(self, index: int) -> list[StepRecord]:
        changed = [r for r in self.steps if r.index > index and not r.superseded]
        for r in changed:
            r.superseded = True
        return changed


def record_note(ctx: TaskContext, severity: Severity, text: str) -> TaskContext:
    ctx.notes.append(Note(cohort=ctx.cohort, severity=severity, text=text))
    return ctx


EMPTY_CONTEXT_TEXT = "No steps executed yet."


def _truncate(text: str, limit: int) -> str:
    if limit <= 0 or len(text) <= limit:
        return text
    return text[:limit] + f"\n... [truncated {len(text) - limit} chars]"


def _render_step(record: StepRecord, limits: RenderLimits, include_reviews: bool) -> str:
    tag = " (superseded)" if record.superseded else ""
    lines = [f"--- Step {record.index} [{record.kind.value}] Action: {record.action}{tag}"]
    if record.instruction:
        lines.append(f"Instruction: {record.instruction}")
    lines.append("Code:")
    lines.append(_truncate(record.code, limits.code_chars))
    if record.output:
        lines.append("Output:")
        lines.append(_truncate(record.output, limits.output_chars))
    if record.error_trace:
        # Error traces are rendered whole regardless of limits.
        lines.append("Error trace:")
        lines.append(record.error_trace)
    if include_reviews and record.reviews:
        lines.append("Reviews:")
        for i, feedback in enumerate(record.reviews, start=1):
            lines.append(f"  [round {i}] {feedback}")
    return "\n".join(lines)


def render_context(
    ctx: TaskContext, mode: str = "all", limits: RenderLimits | None = None
) -> str:
    """Render task history for prompt injection.

    ``all``  — every step with its reviews (planning and revision prompts).
    ``past`` — everything except the newest attempt; reviews belonging to
               the newest attempt's group are hidden so a reviewer never
               sees feedback from earlier rounds at the same step.
    ``last`` — only the newest attempt, no reviews.
    """
    if mode not in ("all", "past", "last"):
        raise ValueError(f"unknown render mode: {mode!r}")
    limits = limits or RenderLimits()
    if not ctx.steps:
        return EMPTY_CONTEXT_TEXT
    if mode == "last":
        return _render_step(ctx.steps[-1], limits, include_reviews=False)
    if mode == "all":
        blocks = [_render_step(r, limits, include_reviews=True) for r in ctx.steps]
        return "\n\n".join(blocks)
    group_indices = {r.index for r in ctx.current_attempt_group()}
    blocks = [
        _render_step(r, limits, include_reviews=r.index not in group_indices)
        for r in ctx.steps[:-1]
    ]
    return "\n\n".join(blocks) if blocks else EMPTY_CONTEXT_TEXT


def write_notes(notes: list[Note], path: str | Path, append: bool = True) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for note in notes:
            fh.write(note.to_json() + "\n")


def read_notes(path: str | Path) -> list[Note]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Note.from_json(line))
    return out
