"""Rendering interaction histories into tagged instruction text, and back.

The rendered form is the contract between data preparation and training:
a fixed instruction preamble, a ``<history>`` block with one tagged line
per prior interaction, a ``<target>`` block for the exercise being
predicted, and a final outcome literal after ``</target>:``. Character
spans of every outcome literal are tracked at render time so the training
loss can be restricted to exactly those tokens.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, Exercise, Interaction
from .errors import DataIntegrityError, GrammarError

FULL_TEXT = "full_text"
CONCEPT_ONLY = "concept_only"
ID_ONLY = "id_only"
REPRESENTATIONS = (FULL_TEXT, CONCEPT_ONLY, ID_ONLY)

TAGS = (
    "<history>",
    "</history>",
    "<Q>",
    "</Q>",
    "<options>",
    "</options>",
    "<QID>",
    "</QID>",
    "<C>",
    "</C>",
    "<cr>",
    "</cr>",
    "<target>",
    "</target>",
)

CORRECT = "Correct"
INCORRECT = "Incorrect"

_PREAMBLE = (
    "Given the following student question and answer history, predict whether "
    "the student will answer the target question correctly or incorrectly. "
    "The target question is enclosed in <target> </target> tags and the "
    'options are enclosed in <options> </options> tags. Respond with "Correct" '
    'if you think they will answer correctly, or "Incorrect" if you think they '
    "will answer incorrectly."
)

_TARGET_LEAD = "What do you predict they will answer for the target question: "

# any XML-ish tag token; used both to reject stray tags in content fields
# and to drive the parser
_TAG_RE = re.compile(r"</?[A-Za-z][A-Za-z0-9_]*>")
# outcome words count only when not embedded in a longer letter run
_LITERAL_RE = re.compile(r"(?<![A-Za-z])(Incorrect|Correct)(?![A-Za-z])")


def outcome_literal(outcome: bool) -> str:
    return CORRECT if outcome else INCORRECT


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction preamble plus the fixed tag and outcome vocabulary."""

    instruction_preamble: str = _PREAMBLE
    tags: tuple[str, ...] = TAGS
    outcome_literals: tuple[str, str] = (CORRECT, INCORRECT)


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class SerializedExample:
    """Rendered text with the char spans of every outcome literal.

    Spans are ordered: one per history item, then the final answer span
    (the suffix after the ``</target>:`` marker). ``label`` is the target
    interaction's outcome.
    """

    text: str
    target_char_spans: tuple[tuple[int, int], ...]
    label: bool

    def __post_init__(self):
        for start, end in self.target_char_spans:
            if self.text[start:end] not in (CORRECT, INCORRECT):
                raise DataIntegrityError(
                    f"span ({start},{end}) covers {self.text[start:end]!r}, "
                    "not an outcome literal"
                )

    @property
    def final_span(self) -> tuple[int, int]:
        return self.target_char_spans[-1]


def _check_content(field: str, value: str) -> str:
    """Content fields must not collide with the grammar's own markers."""
    m = _TAG_RE.search(value)
    if m:
        raise DataIntegrityError(f"{field} contains tag-like text {m.group(0)!r}")
    m = _LITERAL_RE.search(value)
    if m:
        raise DataIntegrityError(
            f"{field} contains the outcome literal {m.group(0)!r}"
        )
    return value


def format_options(options: tuple[str, ...]) -> str:
    """Letter the options: ('12', '9') -> 'A) 12 B) 9'."""
    return " ".join(f"{chr(ord('A') + i)}) {opt}" for i, opt in enumerate(options))


def _exercise_fields(ex: Exercise) -> tuple[str, str, str, str]:
    q = _check_content("question_text", ex.question_text)
    opts = _check_content("options", format_options(ex.options))
    eid = _check_content("exercise_id", ex.exercise_id)
    concept = _check_content("concepts", ", ".join(ex.concepts))
    return q, opts, eid, concept


def _history_line(ex: Exercise, outcome: bool, representation: str) -> tuple[str, str]:
    """Returns (prefix up to the outcome literal, literal)."""
    q, opts, eid, concept = _exercise_fields(ex)
    if representation == FULL_TEXT:
        body = f"{q} <options>: {opts} </options> <QID>{eid}</QID> <C>{concept}</C>"
    elif representation == CONCEPT_ONLY:
        body = f"<QID>{eid}</QID> <C>{concept}</C>"
    elif representation == ID_ONLY:
        body = f"<QID>{eid}</QID>"
    else:
        raise ValueError(f"unknown representation {representation!r}")
    return f"\n    <Q>: {body} </Q><cr>", outcome_literal(outcome)


def _target_block(ex: Exercise, representation: str) -> str:
    q, opts, eid, concept = _exercise_fields(ex)
    if representation == FULL_TEXT:
        body = f"{q} <options> \n{opts}</options> <QID>{eid}</QID> <C>{concept}</C>"
    elif representation == CONCEPT_ONLY:
        body = f"<QID>{eid}</QID> <C>{concept}</C>"
    else:
        body = f"<QID>{eid}</QID>"
    return f"\n\n{_TARGET_LEAD}\n<target>{body} </target>: "


def render_example(
    history: list[Interaction],
    target: Exercise,
    exercises: dict[str, Exercise],
    outcome: bool,
    representation: str = FULL_TEXT,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    char_budget: int | None = None,
) -> SerializedExample:
    """Render one (history, target) pair into tagged instruction text.

    History must be ordered by timestep. If the result exceeds
    ``char_budget`` characters, the oldest history items are dropped until
    it fits (the target block is never truncated).
    """
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {representation!r}")
    for prev, cur in zip(history, history[1:]):
        if prev.timestep >= cur.timestep:
            raise DataIntegrityError(
                f"history not ordered by timestep at {cur.learner_id}/{cur.timestep}"
            )
    for it in history:
        if it.exercise_id not in exercises:
            raise DataIntegrityError(
                f"history references unknown exercise {it.exercise_id!r}"
            )

    kept = list(history)
    while True:
        parts = [template.instruction_preamble, "\n\n<history>:"]
        spans: list[tuple[int, int]] = []
        pos = sum(len(p) for p in parts)
        for it in kept:
            prefix, literal = _history_line(
                exercises[it.exercise_id], it.outcome, representation
            )
            parts.append(prefix)
            pos += len(prefix)
            spans.append((pos, pos + len(literal)))
            parts.append(literal)
            pos += len(literal)
            parts.append("</cr>")
            pos += len("</cr>")
        tail = "\n</history>" + _target_block(target, representation)
        parts.append(tail)
        pos += len(tail)
        final = outcome_literal(outcome)
        spans.append((pos, pos + len(final)))
        parts.append(final)
        pos += len(final)
        if char_budget is None or pos <= char_budget or not kept:
            break
        kept = kept[1:]

    return SerializedExample(
        text="".join(parts), target_char_spans=tuple(spans), label=outcome
    )


@dataclass(frozen=True)
class ParsedItem:
    question_text: str | None
    options_text: str | None
    exercise_id: str | None
    concept: str | None
    outcome: bool


@dataclass(frozen=True)
class ParsedTarget:
    question_text: str | None
    options_text: str | None
    exercise_id: str | None
    concept: str | None


@dataclass(frozen=True)
class ParsedExample:
    history: tuple[ParsedItem, ...]
    target: ParsedTarget | None
    answer: bool | None
    truncated: bool  # true when the text is a valid prefix, not a full example


def _tag_events(region: str, offset: int):
    for m in _TAG_RE.finditer(region):
        tag = m.group(0)
        if tag not in TAGS:
            raise GrammarError(f"unknown tag {tag}", position=offset + m.start())
        closing = tag.startswith("</")
        yield tag[2:-1] if closing else tag[1:-1], closing, m.start(), m.end()


def _between(region: str, lo: int, hi: int, open_tag: str, close_tag: str):
    """Content strictly between one open/close pair inside region[lo:hi]."""
    a = region.find(open_tag, lo, hi)
    if a < 0:
        return None, None, None
    b = region.find(close_tag, a, hi)
    if b < 0:
        return None, None, None
    return region[a + len(open_tag) : b], a, b


def _parse_q_body(region: str, lo: int, hi: int) -> tuple[str | None, str | None, str | None, str | None]:
    body_start = lo
    qid, qid_a, _ = _between(region, lo, hi, "<QID>", "</QID>")
    concept, _, _ = _between(region, lo, hi, "<C>", "</C>")
    opts, opts_a, opts_b = _between(region, lo, hi, "<options>", "</options>")
    question = None
    if opts is not None:
        # question text precedes the options block
        question = region[body_start : opts_a].strip() or None
        opts = opts.lstrip(": \n").rstrip()
        opts = opts or None
    elif qid_a is not None and region[body_start:qid_a].strip():
        question = region[body_start:qid_a].strip()
    return question, opts, qid, concept


def parse_example(text: str) -> ParsedExample:
    """Recover the semantic fields of a rendered example.

    Accepts complete examples and prefixes that end at an item boundary
    (after a ``</cr>`` or after ``</history>``), so budget-truncated text
    still parses. Raises GrammarError, with a character position, on
    unknown tags, unbalanced nesting, or misplaced outcome literals.
    """
    start = text.find("<history>")
    if start < 0:
        raise GrammarError("missing <history> block", position=0)
    region = text[start:]

    stack: list[tuple[str, int]] = []
    events = []
    for name, closing, a, b in _tag_events(region, start):
        if closing:
            if not stack or stack[-1][0] != name:
                got = stack[-1][0] if stack else "nothing"
                raise GrammarError(
                    f"</{name}> closes <{got}>", position=start + a
                )
            open_a = stack.pop()[1]
            events.append((name, open_a, a, b))
        else:
            stack.append((name, b))

    cr_spans = sorted((a, b) for name, a, b, _ in events if name == "cr")
    target_span = next(((a, b) for name, a, b, _ in events if name == "target"), None)
    history_span = next(
        ((a, b) for name, a, b, _ in events if name == "history"), None
    )

    truncated = False
    if stack:
        if len(stack) == 1 and stack[0][0] == "history":
            # prefix case: history block never closed; valid only if nothing
            # but whitespace follows the last complete item
            last_end = max((e for _, _, _, e in events), default=stack[0][1])
            if region[last_end:].strip():
                raise GrammarError(
                    "unclosed <history> with trailing content",
                    position=start + last_end,
                )
            truncated = True
            history_span = (stack[0][1], len(region))
        else:
            raise GrammarError(
                f"unclosed <{stack[-1][0]}>", position=start + stack[-1][1]
            )
    elif target_span is None:
        truncated = True  # history closed, target never rendered

    if history_span is None:
        raise GrammarError("missing <history> block", position=0)

    # every isolated outcome literal must sit inside a <cr> pair or after
    # the closing </target>: marker
    answer: bool | None = None
    answer_start = None
    if target_span is not None:
        marker_end = target_span[1] + len("</target>")
        rest = region[marker_end:]
        if not rest.startswith(":"):
            raise GrammarError(
                "expected ':' after </target>", position=start + marker_end
            )
        completion = rest[1:]
        m = _LITERAL_RE.search(completion)
        if m:
            if completion[: m.start()].strip() or completion[m.end() :].strip():
                raise GrammarError(
                    "unexpected content around the final answer",
                    position=start + marker_end + 1,
                )
            answer = m.group(0) == CORRECT
            answer_start = marker_end + 1 + m.start()
        elif completion.strip():
            raise GrammarError(
                "final answer is not an outcome literal",
                position=start + marker_end + 1,
            )

    for m in _LITERAL_RE.finditer(region):
        if answer_start is not None and m.start() >= answer_start:
            continue
        if any(a <= m.start() and m.end() <= b for a, b in cr_spans):
            continue
        raise GrammarError(
            f"outcome literal {m.group(0)!r} outside <cr>",
            position=start + m.start(),
        )

    items: list[ParsedItem] = []
    q_spans = [(a, b) for name, a, b, _ in events if name == "Q"]
    q_spans.sort()
    for qa, qb in q_spans:
        if target_span is not None and qa > target_span[0]:
            continue
        cr = next((c for c in cr_spans if c[0] >= qb), None)
        if cr is None:
            raise GrammarError("<Q> without a following <cr>", position=start + qa)
        literal = region[cr[0] : cr[1]].strip()
        if literal not in (CORRECT, INCORRECT):
            raise GrammarError(
                f"invalid outcome literal {literal!r}", position=start + cr[0]
            )
        body_lo = qa
        if region[body_lo : body_lo + 1] == ":":
            body_lo += 1
        question, opts, qid, concept = _parse_q_body(region, body_lo, qb)
        items.append(
            ParsedItem(
                question_text=question,
                options_text=opts,
                exercise_id=qid,
                concept=concept,
                outcome=literal == CORRECT,
            )
        )

    target = None
    if target_span is not None:
        ta, tb = target_span
        question, opts, qid, concept = _parse_q_body(region, ta, tb)
        target = ParsedTarget(
            question_text=question,
            options_text=opts,
            exercise_id=qid,
            concept=concept,
        )

    return ParsedExample(
        history=tuple(items), target=target, answer=answer, truncated=truncated
    )


def tag_balance(text: str) -> dict[str, int]:
    """open-count minus close-count for each tag name; all zero = balanced."""
    counts: dict[str, int] = {}
    for m in _TAG_RE.finditer(text):
        tag = m.group(0)
        if tag not in TAGS:
            continue
        if tag.startswith("</"):
            counts[tag[2:-1]] = counts.get(tag[2:-1], 0) - 1
        else:
            counts[tag[1:-1]] = counts.get(tag[1:-1], 0) + 1
    return counts


def prepare_dataset(
    dataset: Dataset,
    interactions: tuple[Interaction, ...] | None = None,
    representation: str = FULL_TEXT,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    char_budget: int | None = None,
) -> list[SerializedExample]:
    """One SerializedExample per interaction: its prior history plus itself."""
    if interactions is None:
        interactions = dataset.interactions
    by_learner: dict[str, list[Interaction]] = {}
    for it in interactions:
        by_learner.setdefault(it.learner_id, []).append(it)
    out: list[SerializedExample] = []
    for learner_id in sorted(by_learner):
        seq = sorted(by_learner[learner_id], key=lambda it: it.timestep)
        for t, it in enumerate(seq):
            out.append(
                render_example(
                    history=seq[:t],
                    target=dataset.exercises[it.exercise_id],
                    exercises=dataset.exercises,
                    outcome=it.outcome,
                    representation=representation,
                    template=template,
                    char_budget=char_budget,
                )
            )
    return out


def write_prepared(examples: list[SerializedExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            row = {
                "text": ex.text,
                "target_char_spans": [list(s) for s in ex.target_char_spans],
                "label": ex.label,
            }
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_prepared(path: str | Path) -> list[SerializedExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(
                SerializedExample(
                    text=row["text"],
                    target_char_spans=tuple(
                        (int(a), int(b)) for a, b in row["target_char_spans"]
                    ),
                    label=bool(row["label"]),
                )
            )
    return out
