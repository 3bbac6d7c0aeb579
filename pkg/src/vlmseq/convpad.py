"""Pad placement so short-range causal convolutions never mix contexts.

Each document in a packed sequence is preceded by kernel-1 pad slots, so no
convolution window spans a document boundary. For a conversation-masked turn,
the question is preceded by copies of the document's trailing vision tokens
(padded out to kernel-1 slots when the document has fewer vision tokens),
giving its convolution window image context without the previous turn's text.

Duplicates are convolution-only: they never appear as attention keys or
queries, and their values mirror the current activation of their source
token.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .datamodel import SequenceLayout, TokenRole
from .masking import MaskDecisions
from .packing import PackedSequence


class PaddedKind(Enum):
    PAD = "pad"
    ORIGINAL = "original"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class PaddedToken:
    kind: PaddedKind
    source: int | None  # original index for ORIGINAL and DUPLICATE entries


@dataclass(frozen=True)
class PaddedLayout:
    """Convolution-time view of a packed sequence."""

    tokens: tuple[PaddedToken, ...]
    kernel: int
    layout: SequenceLayout
    decisions: MaskDecisions

    def source_array(self) -> np.ndarray:
        """Original index per padded slot, -1 for pads."""
        return np.array(
            [-1 if t.kind is PaddedKind.PAD else t.source for t in self.tokens],
            dtype=np.int64,
        )

    def original_positions(self) -> np.ndarray:
        """Padded position of each original token."""
        pos = np.full(self.layout.total_len, -1, dtype=np.int64)
        for p, t in enumerate(self.tokens):
            if t.kind is PaddedKind.ORIGINAL:
                pos[t.source] = p
        if (pos < 0).any():
            raise ValueError("padded layout does not cover every original token")
        return pos

    @property
    def overhead(self) -> int:
        return len(self.tokens) - self.layout.total_len


def plan_conv_padding(
    packed: PackedSequence | SequenceLayout,
    kernel: int,
    decisions: MaskDecisions | None = None,
) -> PaddedLayout:
    """Insert pads and vision duplicates for a kernel-wide causal convolution."""
    if kernel < 1:
        raise ValueError("kernel width must be >= 1")
    layout = packed.combined_layout() if isinstance(packed, PackedSequence) else packed
    if decisions is None:
        decisions = MaskDecisions(masked={})

    vision_by_doc: dict[int, list[int]] = {}
    for i, t in enumerate(layout.tokens):
        if t.role is TokenRole.VISION:
            vision_by_doc.setdefault(t.document_id, []).append(i)

    out: list[PaddedToken] = []
    guard = kernel - 1
    prev_doc: int | None = None
    prev_turn: int | None = None
    for i, t in enumerate(layout.tokens):
        doc = None if t.role is TokenRole.PAD else t.document_id
        if doc is not None and doc != prev_doc:
            out.extend([PaddedToken(PaddedKind.PAD, None)] * guard)
            prev_turn = None
        turn = t.turn_id if t.role is TokenRole.TEXT else None
        if (
            doc is not None
            and turn is not None
            and turn != prev_turn
            and turn > 0
            and decisions.is_masked(doc, turn)
        ):
            dup_sources = vision_by_doc.get(doc, [])[-guard:] if guard else []
            out.extend([PaddedToken(PaddedKind.PAD, None)] * (guard - len(dup_sources)))
            out.extend(PaddedToken(PaddedKind.DUPLICATE, s) for s in dup_sources)
        out.append(PaddedToken(PaddedKind.ORIGINAL, i))
        prev_doc = doc if doc is not None else prev_doc
        if turn is not None:
            prev_turn = turn
    return PaddedLayout(tuple(out), kernel, layout, decisions)


@dataclass(frozen=True)
class IsolationViolation:
    kind: str  # "document" or "turn"
    window_end: int
    detail: str


@dataclass(frozen=True)
class IsolationReport:
    violations: tuple[IsolationViolation, ...]
    windows_scanned: int

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_isolation(padded: PaddedLayout) -> IsolationReport:
    """Scan every kernel-wide window for cross-document or cross-turn mixing.

    A window is in violation when its original tokens span two documents, or
    when it holds a conversation-masked turn's tokens together with text of
    an earlier turn of the same document.
    """
    k = padded.kernel
    layout = padded.layout
    toks = padded.tokens
    violations: list[IsolationViolation] = []
    for end in range(len(toks)):
        window = toks[max(0, end - k + 1) : end + 1]
        origs = [t.source for t in window if t.kind is PaddedKind.ORIGINAL]
        if not origs:
            continue
        docs = {layout.tokens[i].document_id for i in origs}
        if len(docs) > 1:
            violations.append(
                IsolationViolation("document", end, f"window mixes documents {sorted(docs)}")
            )
            continue
        doc = docs.pop()
        masked_turns = set()
        prior_text_turns = set()
        for i in origs:
            tok = layout.tokens[i]
            if tok.turn_id is not None and padded.decisions.is_masked(doc, tok.turn_id):
                masked_turns.add(tok.turn_id)
            if tok.role is TokenRole.TEXT and tok.turn_id is not None:
                prior_text_turns.add(tok.turn_id)
        for t in masked_turns:
            earlier = [p for p in prior_text_turns if p < t]
            if earlier:
                violations.append(
                    IsolationViolation(
                        "turn",
                        end,
                        f"masked turn {t} of document {doc} shares a window with "
                        f"text of turns {sorted(earlier)}",
                    )
                )
    return IsolationReport(tuple(violations), len(toks))
