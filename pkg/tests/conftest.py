from pathlib import Path

import pytest

from vlmseq import ToyConfig

FIXTURE_MANIFEST = Path(__file__).parent / "data" / "fixture_manifest.ndjson"


@pytest.fixture
def fixture_manifest() -> Path:
    return FIXTURE_MANIFEST


@pytest.fixture
def small_config() -> ToyConfig:
    return ToyConfig(
        d_model=16,
        n_heads=2,
        n_layers=2,
        vocab_size=32,
        vision_vocab=8,
        n_experts=4,
        top_k=2,
        lora_ranks=(4, 2),
        conv_kernel=2,
        expert_hidden=32,
        seed=3,
    )
