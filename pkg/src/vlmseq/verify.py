"""End-to-end verification battery behind the `verify` CLI command.

Checks, in order: block-mask equivalence against the direct predicate,
document- and turn-isolation impulse tests through the toy model, a gradient
check, loss-normalization partition invariance, and grounding round-trips.
Results stream as line-delimited JSON; the exit status is 0 when everything
passes, 1 on any check failure, 2 on unusable inputs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO

import numpy as np

from . import grounding
from .convpad import plan_conv_padding, verify_isolation
from .datamodel import (
    SequenceLayout,
    concatenate_layouts,
    load_manifest,
    render_chat_template,
)
from .geometry import ResolutionCap, resize_to_patch_grid, vision_token_count
from .masking import (
    compile_block_mask,
    dense_allowed_oracle,
    sample_masking_decisions,
)
from .packing import pack
from .report import ndjson_line
from .rng import split_rng
from .synth import random_layout, random_packed_layout
from .toymodel import (
    ToyConfig,
    accumulate_normalized_loss,
    answer_loss,
    collect_activations,
    forward_full,
    grad_check,
    init_params,
    prepare_inputs,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


@dataclass
class VerifySettings:
    manifest: Path
    seed: int = 0
    capacity: int = 16500
    kernel: int = 4
    pad_kernel: int | None = None  # padding planned with this width (default: kernel)
    p_mask: float = 0.5
    p_mask_grounding: float = 0.7
    cap_mp: float = 0.3
    threads: int = 1
    n_synthetic_masks: int = 100
    n_isolation: int = 12
    toy: ToyConfig = field(
        default_factory=lambda: ToyConfig(
            d_model=16,
            n_heads=2,
            n_layers=1,
            vocab_size=16,
            vision_vocab=6,
            n_experts=3,
            top_k=2,
            lora_ranks=(2, 1),
            expert_hidden=12,
            conv_kernel=2,
        )
    )


def _manifest_layouts(settings: VerifySettings) -> list[SequenceLayout]:
    examples = load_manifest(settings.manifest)
    if not examples:
        raise ValueError(f"manifest {settings.manifest} contains no examples")
    cap = ResolutionCap(settings.cap_mp)
    layouts = []
    for ex in examples:
        counts = [vision_token_count(resize_to_patch_grid(im, cap)) for im in ex.images]
        layouts.append(render_chat_template(ex, counts))
    return layouts


def _mask_equivalence(settings: VerifySettings, layouts: list[SequenceLayout]) -> dict:
    # Equivalence is quadratic in sequence length, so pack the manifest into
    # working chunks rather than full training capacity.
    working_cap = min(settings.capacity, 1024)
    packable = [lay for lay in layouts if lay.total_len <= working_cap]
    seqs = [p.combined_layout() for p in pack(packable, working_cap)]
    rng_seeds = range(settings.n_synthetic_masks)

    def synth(i: int) -> SequenceLayout:
        return random_packed_layout(
            split_rng(settings.seed, "verify-mask", i), max_documents=3, max_len=256
        )

    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        seqs.extend(pool.map(synth, rng_seeds))

    def check(pair: tuple[int, SequenceLayout]) -> int:
        idx, lay = pair
        decisions = sample_masking_decisions(
            lay, settings.seed + idx, settings.p_mask, settings.p_mask_grounding
        )
        compiled = compile_block_mask(lay, decisions).dense()
        oracle = dense_allowed_oracle(lay, decisions)
        return int((compiled != oracle).sum())

    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        mismatches = list(pool.map(check, enumerate(seqs)))
    total = int(sum(mismatches))
    return {
        "check": "mask_oracle_equivalence",
        "sequences": len(seqs),
        "mismatched_pairs": total,
        "status": "pass" if total == 0 else "fail",
    }


def _two_doc_inputs(settings: VerifySettings, i: int, config: ToyConfig):
    rng = split_rng(settings.seed, "verify-isolation", i)
    docs = [
        random_layout(rng, max_images=1, max_turns=2, max_question=4, max_answer=4,
                      max_vision_tokens=5)
        for _ in range(2)
    ]
    layout = concatenate_layouts(docs)
    decisions = sample_masking_decisions(
        layout, settings.seed + i, settings.p_mask, settings.p_mask_grounding
    )
    pad_kernel = settings.pad_kernel if settings.pad_kernel is not None else config.conv_kernel
    padded = plan_conv_padding(layout, pad_kernel, decisions)
    return prepare_inputs(layout, config, decisions=decisions, padded=padded)


def _leaks(params, inputs, position: int, other_doc: int, rng) -> bool:
    arr = inputs.layout.arrays
    other_positions = np.flatnonzero(arr.document == other_doc)
    h0 = params["embed"][inputs.token_rows]
    baseline = collect_activations(params, inputs, h0)
    h0_pert = h0.copy()
    h0_pert[position] += rng.normal(0, 0.5, h0.shape[1])
    perturbed = collect_activations(params, inputs, h0_pert)
    return any(
        np.any(base[other_positions] != pert[other_positions])
        for base, pert in zip(baseline, perturbed)
    )


def _isolation(settings: VerifySettings) -> dict:
    config = settings.toy
    params = init_params(config)
    bad = 0
    pad_report_violations = 0
    for i in range(settings.n_isolation):
        inputs = _two_doc_inputs(settings, i, config)
        pad_report_violations += len(verify_isolation(inputs.padded).violations)
        rng = split_rng(settings.seed, "verify-impulse", i)
        arr = inputs.layout.arrays
        # boundary-adjacent impulse: last token of document 0 must not touch
        # document 1 (catches convolution bleed directly)
        boundary_pos = int(np.flatnonzero(arr.document == 0)[-1])
        doc = int(rng.integers(0, 2))
        random_pos = int(rng.choice(np.flatnonzero(arr.document == doc)))
        if _leaks(params, inputs, boundary_pos, 1, rng) or _leaks(
            params, inputs, random_pos, 1 - doc, rng
        ):
            bad += 1
    status = "pass" if bad == 0 and pad_report_violations == 0 else "fail"
    return {
        "check": "isolation_impulse",
        "instances": settings.n_isolation,
        "leaking_instances": bad,
        "window_violations": pad_report_violations,
        "status": status,
    }


def _gradcheck(settings: VerifySettings) -> dict:
    config = settings.toy
    params = init_params(config)
    rng = split_rng(settings.seed, "verify-gradcheck")
    layout = random_layout(
        rng, max_images=1, max_turns=2, max_question=3, max_answer=3, max_vision_tokens=4
    )
    decisions = sample_masking_decisions(layout, settings.seed)
    inputs = prepare_inputs(layout, config, decisions=decisions)
    targets = rng.integers(0, config.total_vocab, layout.total_len)
    errors = grad_check(params, [(inputs, targets)], eps=1e-5)
    worst = max(errors.values())
    return {
        "check": "grad_check",
        "groups": len(errors),
        "max_relative_error": worst,
        "status": "pass" if worst < 1e-5 else "fail",
    }


def _loss_invariance(settings: VerifySettings) -> dict:
    config = settings.toy
    params = init_params(config)
    rng = split_rng(settings.seed, "verify-loss")
    batch = []
    for _ in range(6):
        layout = random_layout(
            rng, max_images=1, max_turns=2, max_question=4, max_answer=4, max_vision_tokens=4
        )
        inputs = prepare_inputs(layout, config)
        targets = rng.integers(0, config.total_vocab, layout.total_len)
        batch.append((inputs, targets))
    splits = [[batch], [batch[:2], batch[2:]], [batch[:1], batch[1:4], batch[4:]]]
    values = []
    for parts in splits:
        micro = []
        for part in parts:
            s = 0.0
            c = 0
            for inputs, targets in part:
                res = forward_full(params, inputs)
                ls, lc = answer_loss(res.logits, targets, inputs.layout)
                s += ls
                c += lc
            micro.append((s, c))
        values.append(accumulate_normalized_loss(micro))
    spread = max(values) - min(values)
    return {
        "check": "loss_normalization_invariance",
        "partitions": len(splits),
        "spread": spread,
        "status": "pass" if spread < 1e-12 else "fail",
    }


def _grounding_roundtrips(settings: VerifySettings) -> dict:
    rng = split_rng(settings.seed, "verify-grounding")
    failures = 0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        pts = tuple(
            (int(rng.integers(0, 1001)) / 10.0, int(rng.integers(0, 1001)) / 10.0)
            for _ in range(n)
        )
        ps = grounding.PointSet(pts, grounding.CoordScale.PERCENT100, "obj")
        if grounding.parse_xml_points(grounding.render_xml_points(ps)) != ps:
            failures += 1
        pm = grounding.convert_scale(ps)
        if grounding.parse_point_tokens(grounding.render_point_tokens(pm)) != pm:
            failures += 1
        if grounding.convert_scale(pm) != ps:
            failures += 1
        xs = sorted(int(rng.integers(0, 1001)) for _ in range(2))
        ys = sorted(int(rng.integers(0, 1001)) for _ in range(2))
        box = grounding.BoundingBox(xs[0], ys[0], xs[1], ys[1], "thing")
        if grounding.parse_box(grounding.render_box(box)) != box:
            failures += 1
    bijection_ok = all(
        grounding.convert_scale(
            grounding.convert_scale(
                grounding.PointSet(((float(v), 0.0),), grounding.CoordScale.PERMILLE1000)
            )
        ).points[0][0] == float(v)
        for v in range(1001)
    )
    status = "pass" if failures == 0 and bijection_ok else "fail"
    return {
        "check": "grounding_roundtrips",
        "failures": failures,
        "permille_bijection": bijection_ok,
        "status": status,
    }


def run_verify(settings: VerifySettings, out: IO[str]) -> int:
    settings.toy = replace(settings.toy, conv_kernel=settings.kernel, seed=settings.seed)
    try:
        layouts = _manifest_layouts(settings)
    except (OSError, ValueError) as exc:
        out.write(ndjson_line({"check": "load_manifest", "status": "error", "error": str(exc)}) + "\n")
        return EXIT_USAGE

    checks = [
        lambda: _mask_equivalence(settings, layouts),
        lambda: _isolation(settings),
        lambda: _gradcheck(settings),
        lambda: _loss_invariance(settings),
        lambda: _grounding_roundtrips(settings),
    ]
    ok = True
    for check in checks:
        record = check()
        record["seed"] = settings.seed
        out.write(ndjson_line(record) + "\n")
        ok = ok and record["status"] == "pass"
    return EXIT_OK if ok else EXIT_CHECK_FAILED
