"""Seeded synthetic corpora for verification and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import (
    ImageSpec,
    MultimodalExample,
    SequenceLayout,
    Turn,
    concatenate_layouts,
    dump_manifest,
    render_chat_template,
)
from .rng import split_rng


def random_example(
    rng: np.random.Generator,
    *,
    max_images: int = 3,
    max_turns: int = 3,
    max_question: int = 10,
    max_answer: int = 8,
    max_side_px: int = 600,
    p_grounding: float = 0.3,
) -> MultimodalExample:
    n_images = int(rng.integers(0, max_images + 1))
    images = tuple(
        ImageSpec(
            height_px=int(rng.integers(28, max_side_px + 1)),
            width_px=int(rng.integers(28, max_side_px + 1)),
            id=i,
        )
        for i in range(n_images)
    )
    n_turns = int(rng.integers(1, max_turns + 1))
    turns = tuple(
        Turn(
            question=int(rng.integers(1, max_question + 1)),
            answer=int(rng.integers(1, max_answer + 1)),
            turn_index=t,
        )
        for t in range(n_turns)
    )
    return MultimodalExample(images, turns, bool(rng.random() < p_grounding))


def random_layout(
    rng: np.random.Generator,
    *,
    max_vision_tokens: int = 12,
    **example_kwargs,
) -> SequenceLayout:
    ex = random_example(rng, **example_kwargs)
    counts = [int(rng.integers(1, max_vision_tokens + 1)) for _ in ex.images]
    return render_chat_template(ex, counts)


def random_packed_layout(
    rng: np.random.Generator,
    *,
    max_documents: int = 3,
    max_len: int | None = None,
    **layout_kwargs,
) -> SequenceLayout:
    """Concatenated multi-document layout, optionally capped in length."""
    n_docs = int(rng.integers(1, max_documents + 1))
    docs = []
    used = 0
    for _ in range(n_docs):
        lay = random_layout(rng, **layout_kwargs)
        if max_len is not None and used + lay.total_len > max_len:
            if not docs:
                continue
            break
        docs.append(lay)
        used += lay.total_len
    if not docs:
        docs.append(
            render_chat_template(
                MultimodalExample((), (Turn(question=1, answer=1),)), []
            )
        )
    return concatenate_layouts(docs)


def write_fixture_manifest(path: str | Path, n_examples: int = 24, seed: int = 7) -> None:
    """Emit a small deterministic manifest sized for desk-scale checks."""
    rng = split_rng(seed, "fixture-manifest")
    examples = [
        random_example(rng, max_images=2, max_turns=3, max_side_px=200)
        for _ in range(n_examples)
    ]
    dump_manifest(examples, path)
