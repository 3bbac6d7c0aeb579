"""Training examples, token roles, special tokens, and the chat template.

An example is a set of images followed by question/answer turns. Rendering
produces a :class:`SequenceLayout`: a token-level map carrying, for every
position, its role (vision/text/pad), document id, image id, turn id, and
whether it contributes to the training loss. Text is opaque token ids; no
tokenizer lives here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TokenRole(Enum):
    VISION = "vision"
    TEXT = "text"
    PAD = "pad"


class SpecialToken(IntEnum):
    """Reserved delimiter tokens, ids allocated just above the text range."""

    BOS = 0
    IM_START = 1
    IM_END = 2
    VISION_START = 3
    VISION_END = 4
    BOX_START = 5
    BOX_END = 6
    POINT_START = 7
    POINT_END = 8
    OBJECT_REF_START = 9
    OBJECT_REF_END = 10

    def vocab_id(self, text_vocab_size: int) -> int:
        return text_vocab_size + int(self)

    @property
    def literal(self) -> str:
        return _SPECIAL_LITERALS[self]


_SPECIAL_LITERALS = {
    SpecialToken.BOS: "<bos>",
    SpecialToken.IM_START: "<|im_start|>",
    SpecialToken.IM_END: "<|im_end|>",
    SpecialToken.VISION_START: "<|vision_start|>",
    SpecialToken.VISION_END: "<|vision_end|>",
    SpecialToken.BOX_START: "<|box_start|>",
    SpecialToken.BOX_END: "<|box_end|>",
    SpecialToken.POINT_START: "<|point_start|>",
    SpecialToken.POINT_END: "<|point_end|>",
    SpecialToken.OBJECT_REF_START: "<|object_ref_start|>",
    SpecialToken.OBJECT_REF_END: "<|object_ref_end|>",
}

N_SPECIAL_TOKENS = len(SpecialToken)

# Turn key used for text tokens that belong to no turn (BOS, vision brackets).
# They are shared context: visible, causally, to every turn of the document.
PREAMBLE_TURN = -1


@dataclass(frozen=True)
class ImageSpec:
    """Raw image dimensions; `id` is the ordinal within its example."""

    height_px: int
    width_px: int
    id: int = 0

    def __post_init__(self):
        if self.height_px < 1 or self.width_px < 1:
            raise ValueError(f"image sides must be >= 1 px, got {self.height_px}x{self.width_px}")


@dataclass(frozen=True)
class Turn:
    """One question/answer pair. Token fields are counts or explicit id lists."""

    question: int | tuple[int, ...]
    answer: int | tuple[int, ...]
    turn_index: int = 0

    def __post_init__(self):
        if isinstance(self.question, list):
            object.__setattr__(self, "question", tuple(self.question))
        if isinstance(self.answer, list):
            object.__setattr__(self, "answer", tuple(self.answer))
        if self.answer_len < 1:
            raise ValueError("a turn with no answer contributes no loss and is rejected")
        if self.question_len < 0:
            raise ValueError("negative question length")

    @property
    def question_len(self) -> int:
        return self.question if isinstance(self.question, int) else len(self.question)

    @property
    def answer_len(self) -> int:
        return self.answer if isinstance(self.answer, int) else len(self.answer)


@dataclass(frozen=True)
class MultimodalExample:
    """Ordered images plus conversation turns; images render first."""

    images: tuple[ImageSpec, ...]
    turns: tuple[Turn, ...]
    is_grounding: bool = False

    def __post_init__(self):
        if isinstance(self.images, list):
            object.__setattr__(self, "images", tuple(self.images))
        if isinstance(self.turns, list):
            object.__setattr__(self, "turns", tuple(self.turns))


@dataclass(frozen=True)
class TokenInfo:
    """One position of a rendered sequence."""

    role: TokenRole
    document_id: int
    image_id: int | None
    turn_id: int | None
    loss_flag: bool
    special: SpecialToken | None = None
    text_id: int | None = None

    @property
    def turn_key(self) -> int:
        return PREAMBLE_TURN if self.turn_id is None else self.turn_id


@dataclass(frozen=True)
class LayoutArrays:
    """Column view of a layout for vectorized consumers."""

    role: np.ndarray      # int8: 0=vision, 1=text, 2=pad
    document: np.ndarray  # int32, -1 for pad
    image: np.ndarray     # int32, -1 when absent
    turn: np.ndarray      # int32, PREAMBLE_TURN when absent
    loss: np.ndarray      # bool


_ROLE_CODE = {TokenRole.VISION: 0, TokenRole.TEXT: 1, TokenRole.PAD: 2}
ROLE_VISION, ROLE_TEXT, ROLE_PAD = 0, 1, 2


@dataclass(frozen=True)
class SequenceLayout:
    """Token-level map of a rendered (possibly packed) sequence.

    `grounding[d]` is the grounding flag of document d; document ids of
    non-pad tokens must form contiguous runs starting at 0.
    """

    tokens: tuple[TokenInfo, ...]
    grounding: tuple[bool, ...] = (False,)

    def __post_init__(self):
        if isinstance(self.tokens, list):
            object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def total_len(self) -> int:
        return len(self.tokens)

    @property
    def n_documents(self) -> int:
        return len(self.grounding)

    @cached_property
    def arrays(self) -> LayoutArrays:
        n = len(self.tokens)
        role = np.empty(n, dtype=np.int8)
        doc = np.empty(n, dtype=np.int32)
        img = np.empty(n, dtype=np.int32)
        turn = np.empty(n, dtype=np.int32)
        loss = np.empty(n, dtype=bool)
        for i, t in enumerate(self.tokens):
            role[i] = _ROLE_CODE[t.role]
            doc[i] = -1 if t.role is TokenRole.PAD else t.document_id
            img[i] = -1 if t.image_id is None else t.image_id
            turn[i] = t.turn_key
            loss[i] = t.loss_flag
        return LayoutArrays(role, doc, img, turn, loss)

    def loss_token_count(self) -> int:
        return int(self.arrays.loss.sum())

    def document_turns(self) -> dict[int, list[int]]:
        """Sorted turn ids present per document (preamble excluded)."""
        seen: dict[int, set[int]] = {}
        for t in self.tokens:
            if t.role is not TokenRole.PAD and t.turn_id is not None:
                seen.setdefault(t.document_id, set()).add(t.turn_id)
        return {d: sorted(v) for d, v in seen.items()}


def render_chat_template(
    example: MultimodalExample, vision_token_counts: Sequence[int]
) -> SequenceLayout:
    """Render one example into its token layout.

    Order: BOS, then per image VISION_START / vision tokens / VISION_END, then
    per turn question and answer text, with IM_START separating annotations
    and a final IM_END closing the example. Loss falls on answer tokens plus
    the terminal IM_END only. Delimiters carry the turn id of the turn they
    terminate so conversation masking isolates them with that turn.
    """
    if len(vision_token_counts) != len(example.images):
        raise ValueError(
            f"need one vision token count per image, got {len(vision_token_counts)} "
            f"for {len(example.images)} images"
        )
    if not example.turns:
        raise ValueError("example has no turns")
    for img, count in zip(example.images, vision_token_counts):
        if count < 1:
            raise ValueError(f"image {img.id} declared with zero vision tokens")

    toks: list[TokenInfo] = []

    def special(tok: SpecialToken, turn_id: int | None = None, loss: bool = False) -> None:
        toks.append(TokenInfo(TokenRole.TEXT, 0, None, turn_id, loss, special=tok))

    special(SpecialToken.BOS)
    for img, count in zip(example.images, vision_token_counts):
        special(SpecialToken.VISION_START)
        for _ in range(count):
            toks.append(TokenInfo(TokenRole.VISION, 0, img.id, None, False))
        special(SpecialToken.VISION_END)

    last = len(example.turns) - 1
    for t, turn in enumerate(example.turns):
        for tid in _token_ids(turn.question):
            toks.append(TokenInfo(TokenRole.TEXT, 0, None, t, False, text_id=tid))
        for tid in _token_ids(turn.answer):
            toks.append(TokenInfo(TokenRole.TEXT, 0, None, t, True, text_id=tid))
        if t == last:
            special(SpecialToken.IM_END, turn_id=t, loss=True)
        else:
            special(SpecialToken.IM_START, turn_id=t, loss=False)

    return SequenceLayout(tuple(toks), (example.is_grounding,))


def _token_ids(spec: int | tuple[int, ...]) -> list[int | None]:
    if isinstance(spec, int):
        return [None] * spec
    return list(spec)


def concatenate_layouts(layouts: Sequence[SequenceLayout]) -> SequenceLayout:
    """Concatenate documents into one layout, re-stamping document ids."""
    toks: list[TokenInfo] = []
    grounding: list[bool] = []
    for lay in layouts:
        base = len(grounding)
        for t in lay.tokens:
            if t.role is TokenRole.PAD:
                toks.append(t)
            else:
                toks.append(replace(t, document_id=base + t.document_id))
        grounding.extend(lay.grounding)
    return SequenceLayout(tuple(toks), tuple(grounding))


def load_manifest(path: str | Path) -> list[MultimodalExample]:
    """Read a line-delimited JSON corpus manifest.

    Each line: {"images": [{"h": int, "w": int}, ...],
                "turns": [{"q_len": int, "a_len": int}, ...],
                "grounding": bool}
    """
    examples = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            examples.append(example_from_record(rec, where=f"{path}:{lineno}"))
    return examples


def example_from_record(rec: dict, where: str = "<record>") -> MultimodalExample:
    try:
        images = tuple(
            ImageSpec(height_px=int(im["h"]), width_px=int(im["w"]), id=i)
            for i, im in enumerate(rec.get("images", []))
        )
        turns = tuple(
            Turn(question=int(t["q_len"]), answer=int(t["a_len"]), turn_index=i)
            for i, t in enumerate(rec["turns"])
        )
        return MultimodalExample(images, turns, bool(rec.get("grounding", False)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{where}: bad manifest record: {exc}") from exc


def example_to_record(ex: MultimodalExample) -> dict:
    return {
        "images": [{"h": im.height_px, "w": im.width_px} for im in ex.images],
        "turns": [{"q_len": t.question_len, "a_len": t.answer_len} for t in ex.turns],
        "grounding": ex.is_grounding,
    }


def dump_manifest(examples: Iterable[MultimodalExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for ex in examples:
            fp.write(json.dumps(example_to_record(ex)) + "\n")
