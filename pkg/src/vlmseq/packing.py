"""Greedy packing of variable-length examples into fixed-capacity sequences.

First-fit-decreasing: sort by length descending, drop each example into the
first sequence with room, open a new one otherwise. Also provides loss-token
accounting and the per-expert loss-token budget arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .datamodel import SequenceLayout, TokenRole, concatenate_layouts

DEFAULT_CAPACITY = 16500


class ExampleTooLongError(ValueError):
    """Raised when examples exceed the packing capacity; carries their indices."""

    def __init__(self, indices: list[int], capacity: int):
        self.indices = indices
        self.capacity = capacity
        super().__init__(f"examples at indices {indices} exceed capacity {capacity}")


@dataclass(frozen=True)
class PackedSequence:
    """Documents packed into one training sequence."""

    layouts: tuple[SequenceLayout, ...]
    capacity: int

    @property
    def used(self) -> int:
        """Non-pad tokens across all documents (slot accounting is total_len)."""
        return sum(
            1
            for lay in self.layouts
            for t in lay.tokens
            if t.role is not TokenRole.PAD
        )

    def combined_layout(self) -> SequenceLayout:
        return concatenate_layouts(self.layouts)


@dataclass(frozen=True)
class ExpertBudget:
    """Loss-token budget for MoE gradient signal."""

    n_experts: int
    top_k: int
    expected_loss_tokens_per_example: float
    target_loss_tokens_per_expert: int = 30000

    def __post_init__(self):
        if min(self.n_experts, self.top_k, self.target_loss_tokens_per_expert) <= 0:
            raise ValueError("budget fields must be positive")
        if self.expected_loss_tokens_per_example <= 0:
            raise ValueError("expected loss tokens per example must be positive")
        if self.top_k > self.n_experts:
            raise ValueError("top_k cannot exceed n_experts")


def pack(
    examples: Sequence[SequenceLayout], capacity: int = DEFAULT_CAPACITY
) -> list[PackedSequence]:
    """First-fit-decreasing bin packing of layouts into sequences."""
    too_long = [i for i, ex in enumerate(examples) if ex.total_len > capacity]
    if too_long:
        raise ExampleTooLongError(too_long, capacity)
    order = sorted(range(len(examples)), key=lambda i: -examples[i].total_len)
    bins: list[list[SequenceLayout]] = []
    room: list[int] = []
    for i in order:
        lay = examples[i]
        n = lay.total_len
        for b, free in enumerate(room):
            if free >= n:
                bins[b].append(lay)
                room[b] -= n
                break
        else:
            bins.append([lay])
            room.append(capacity - n)
    return [PackedSequence(tuple(b), capacity) for b in bins]


@dataclass(frozen=True)
class LossTokenStats:
    total_tokens: int
    loss_tokens: int
    per_sequence: tuple[tuple[int, int], ...]  # (total, loss) per sequence


def loss_token_stats(batch: Sequence[PackedSequence]) -> LossTokenStats:
    """Token and loss-token totals for a batch of packed sequences."""
    per_seq = []
    for seq in batch:
        total = seq.used
        loss = sum(lay.loss_token_count() for lay in seq.layouts)
        per_seq.append((total, loss))
    return LossTokenStats(
        total_tokens=sum(t for t, _ in per_seq),
        loss_tokens=sum(l for _, l in per_seq),
        per_sequence=tuple(per_seq),
    )


def required_examples_per_update(budget: ExpertBudget) -> int:
    """Examples per update so each expert expects the target loss tokens.

    Under uniform routing an example's loss tokens land on top_k of n_experts
    experts, so each expert sees a top_k/n_experts share.
    """
    per_example_share = budget.top_k * budget.expected_loss_tokens_per_example
    return math.ceil(budget.target_loss_tokens_per_expert * budget.n_experts / per_example_share)
