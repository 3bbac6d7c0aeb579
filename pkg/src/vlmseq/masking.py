"""Block compiler for the hybrid bidirectional/causal attention mask.

Within one document of a packed sequence: vision tokens attend one another
bidirectionally (within and across images); text attends causally to prior
text and to prior vision; vision attends prior text causally. Cross-document
attention never happens. Text of a conversation-masked turn cannot see text
of earlier turns, while shared context (vision tokens, BOS, vision brackets)
stays visible.

`allowed` is the pairwise predicate and the ground truth; `compile_block_mask`
produces an equivalent block decomposition whose size scales with segments,
not tokens. During decoding only the prefill keeps the hybrid mask; generated
tokens use plain causal attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .datamodel import (
    PREAMBLE_TURN,
    ROLE_PAD,
    ROLE_TEXT,
    ROLE_VISION,
    SequenceLayout,
    TokenRole,
)
from .rng import split_rng

P_CONV_MASK = 0.5
P_CONV_MASK_GROUNDING = 0.7


@dataclass(frozen=True)
class MaskDecisions:
    """Per (document, turn>0) conversation-masking outcomes."""

    masked: Mapping[tuple[int, int], bool]
    seed: int = 0

    def is_masked(self, document_id: int, turn_id: int) -> bool:
        return self.masked.get((document_id, turn_id), False)


EMPTY_DECISIONS = MaskDecisions(masked={})


def sample_masking_decisions(
    layout: SequenceLayout,
    seed: int,
    p: float = P_CONV_MASK,
    p_grounding: float = P_CONV_MASK_GROUNDING,
) -> MaskDecisions:
    """Draw independent conversation-masking decisions for non-first turns.

    Each (document, turn) pair owns its own counter-based stream, so outcomes
    are reproducible regardless of evaluation order or platform.
    """
    masked: dict[tuple[int, int], bool] = {}
    for doc, turns in layout.document_turns().items():
        p_doc = p_grounding if layout.grounding[doc] else p
        for t in turns:
            if t == 0:
                continue
            u = split_rng(seed, "convmask", doc, t).random()
            masked[(doc, t)] = bool(u < p_doc)
    return MaskDecisions(masked, seed)


def allowed(i: int, j: int, layout: SequenceLayout, decisions: MaskDecisions) -> bool:
    """Whether query position i may attend key position j."""
    n = layout.total_len
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pair ({i}, {j}) out of range for length {n}")
    a = layout.tokens[i]
    b = layout.tokens[j]
    if a.role is TokenRole.PAD or b.role is TokenRole.PAD:
        return False
    if a.document_id != b.document_id:
        return False
    if i == j:
        return True
    if a.role is TokenRole.VISION and b.role is TokenRole.VISION:
        return True
    if j > i:
        return False
    if b.role is TokenRole.VISION:
        return True  # text query, prior vision key
    if a.role is TokenRole.VISION:
        return True  # vision query, prior text key
    # both text, j < i
    ta, tb = a.turn_key, b.turn_key
    if tb == PREAMBLE_TURN or ta == PREAMBLE_TURN:
        return True  # BOS / vision brackets are shared context
    if ta == tb:
        return True
    if tb < ta:
        return not decisions.is_masked(a.document_id, ta)
    return False


class BlockKind(Enum):
    BIDIRECTIONAL_VISION = "bidirectional_vision"
    CAUSAL_TEXT = "causal_text"
    TEXT_TO_VISION = "text_to_vision"
    VISION_TO_PRIOR_TEXT = "vision_to_prior_text"


@dataclass(frozen=True)
class MaskBlock:
    q_start: int
    q_stop: int
    k_start: int
    k_stop: int
    kind: BlockKind

    def to_record(self) -> dict:
        return {
            "q": [self.q_start, self.q_stop],
            "k": [self.k_start, self.k_stop],
            "kind": self.kind.value,
        }


@dataclass(frozen=True)
class MaskSpec:
    """Block decomposition of the attention predicate for one sequence."""

    blocks: tuple[MaskBlock, ...]
    sequence_len: int

    def dense(self) -> np.ndarray:
        """Expand blocks to the dense boolean (query, key) matrix."""
        m = np.zeros((self.sequence_len, self.sequence_len), dtype=bool)
        for b in self.blocks:
            if b.kind is BlockKind.CAUSAL_TEXT:
                for q in range(b.q_start, b.q_stop):
                    hi = min(b.k_stop, q + 1)
                    if hi > b.k_start:
                        m[q, b.k_start:hi] = True
            else:
                m[b.q_start:b.q_stop, b.k_start:b.k_stop] = True
        return m


@dataclass(frozen=True)
class _Segment:
    start: int
    stop: int
    doc: int
    is_vision: bool
    turn_key: int  # PREAMBLE_TURN for vision / preamble text


def _segments(layout: SequenceLayout) -> list[_Segment]:
    segs: list[_Segment] = []
    cur: _Segment | None = None
    for i, t in enumerate(layout.tokens):
        if t.role is TokenRole.PAD:
            cur = None
            continue
        vis = t.role is TokenRole.VISION
        key = PREAMBLE_TURN if vis else t.turn_key
        if cur is not None and cur.doc == t.document_id and cur.is_vision == vis and cur.turn_key == key:
            cur = _Segment(cur.start, i + 1, cur.doc, vis, key)
            segs[-1] = cur
        else:
            cur = _Segment(i, i + 1, t.document_id, vis, key)
            segs.append(cur)
    return segs


def compile_block_mask(layout: SequenceLayout, decisions: MaskDecisions) -> MaskSpec:
    """Compile the layout into blocks whose expansion equals `allowed`."""
    segs = _segments(layout)
    by_doc: dict[int, list[_Segment]] = {}
    for s in segs:
        by_doc.setdefault(s.doc, []).append(s)

    blocks: list[MaskBlock] = []
    for doc, doc_segs in by_doc.items():
        vision = [s for s in doc_segs if s.is_vision]
        text = [s for s in doc_segs if not s.is_vision]
        for sq in vision:
            for sk in vision:
                blocks.append(
                    MaskBlock(sq.start, sq.stop, sk.start, sk.stop, BlockKind.BIDIRECTIONAL_VISION)
                )
        for sq in text:
            for sk in vision:
                if sk.stop <= sq.start:
                    blocks.append(
                        MaskBlock(sq.start, sq.stop, sk.start, sk.stop, BlockKind.TEXT_TO_VISION)
                    )
        for sq in vision:
            for sk in text:
                if sk.stop <= sq.start:
                    blocks.append(
                        MaskBlock(
                            sq.start, sq.stop, sk.start, sk.stop, BlockKind.VISION_TO_PRIOR_TEXT
                        )
                    )
        for sq in text:
            for sk in text:
                if sk is sq:
                    blocks.append(
                        MaskBlock(sq.start, sq.stop, sk.start, sk.stop, BlockKind.CAUSAL_TEXT)
                    )
                elif sk.stop <= sq.start and _text_pair_visible(doc, sq, sk, decisions):
                    blocks.append(
                        MaskBlock(sq.start, sq.stop, sk.start, sk.stop, BlockKind.CAUSAL_TEXT)
                    )
    return MaskSpec(tuple(blocks), layout.total_len)


def _text_pair_visible(doc: int, sq: _Segment, sk: _Segment, decisions: MaskDecisions) -> bool:
    if sk.turn_key == PREAMBLE_TURN or sq.turn_key == PREAMBLE_TURN:
        return True
    if sq.turn_key == sk.turn_key:
        return True
    if sk.turn_key < sq.turn_key:
        return not decisions.is_masked(doc, sq.turn_key)
    return False


def dense_allowed_oracle(layout: SequenceLayout, decisions: MaskDecisions) -> np.ndarray:
    """Dense predicate built directly from the attention rules.

    Independent of the block compiler; used to verify compiled masks
    pair-for-pair.
    """
    arr = layout.arrays
    n = layout.total_len
    doc = arr.document
    nonpad = arr.role != ROLE_PAD
    vis = arr.role == ROLE_VISION
    txt = arr.role == ROLE_TEXT
    turn = arr.turn

    masked_query = np.zeros(n, dtype=bool)
    for i in range(n):
        if txt[i] and turn[i] > 0:
            masked_query[i] = decisions.is_masked(int(doc[i]), int(turn[i]))

    idx = np.arange(n)
    causal = idx[None, :] <= idx[:, None]
    same_doc = (doc[:, None] == doc[None, :]) & nonpad[:, None] & nonpad[None, :]

    both_vision = vis[:, None] & vis[None, :]
    text_to_vision = txt[:, None] & vis[None, :] & causal
    vision_to_text = vis[:, None] & txt[None, :] & causal

    tq = turn[:, None]
    tk = turn[None, :]
    turn_ok = (
        (tk == PREAMBLE_TURN)
        | (tq == PREAMBLE_TURN)
        | (tq == tk)
        | ((tk < tq) & (tk != PREAMBLE_TURN) & ~masked_query[:, None])
    )
    text_to_text = txt[:, None] & txt[None, :] & causal & turn_ok

    diag = np.eye(n, dtype=bool)
    return same_doc & (both_vision | text_to_vision | vision_to_text | text_to_text | diag)


def decode_mask_row(prefill_layout: SequenceLayout, t: int) -> range:
    """Allowed key positions for generated token at absolute position t.

    Decoding is plain causal: everything in the prefill plus all previously
    generated tokens plus self.
    """
    n = prefill_layout.total_len
    if t < n:
        raise ValueError(f"position {t} is inside the {n}-token prefill, not generated")
    return range(0, t + 1)


def extend_mask_for_decode(prefill: MaskSpec, n_generated: int) -> MaskSpec:
    """Mask for prefill + generated suffix: hybrid prefill, causal suffix."""
    if n_generated < 0:
        raise ValueError("cannot extend by a negative count")
    n = prefill.sequence_len
    total = n + n_generated
    blocks = list(prefill.blocks)
    if n_generated:
        blocks.append(MaskBlock(n, total, 0, total, BlockKind.CAUSAL_TEXT))
    return MaskSpec(tuple(blocks), total)
