"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v` (add -s to see the lines as
they print).
"""

import math
import time
from dataclasses import replace

import numpy as np

from vlmseq import (
    BoundingBox,
    CoordScale,
    ImageSpec,
    MaskDecisions,
    MultimodalExample,
    PointSet,
    ResolutionCap,
    ToyConfig,
    Turn,
    accumulate_normalized_loss,
    answer_loss,
    compile_block_mask,
    concatenate_layouts,
    convert_scale,
    decode_incremental,
    dense_allowed_oracle,
    extend_inputs_for_decode,
    forward_full,
    grad_check,
    init_params,
    loss_and_grads,
    loss_token_stats,
    moe_dispatch,
    pack,
    parse_box,
    parse_point_tokens,
    parse_xml_points,
    prepare_inputs,
    render_box,
    render_chat_template,
    render_point_tokens,
    render_xml_points,
    resize_to_patch_grid,
    sample_masking_decisions,
    vision_token_count,
)
from vlmseq.report import ndjson_line
from vlmseq.rng import split_rng
from vlmseq.synth import random_layout, random_packed_layout
from vlmseq.toymodel import collect_activations

from test_packing import optimal_bins


def report(num, name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"criterion {num:02d} [{tag}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num:02d} {name} failed: {detail}"


ISO_CONFIG = ToyConfig(
    d_model=16,
    n_heads=2,
    n_layers=2,
    vocab_size=24,
    vision_vocab=8,
    n_experts=4,
    top_k=2,
    lora_ranks=(4, 2),
    conv_kernel=2,
    expert_hidden=24,
    seed=9,
)


def test_criterion_01_mask_oracle_equivalence():
    rng = split_rng(1001, "acc-mask")
    start = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        lay = random_packed_layout(
            rng,
            max_documents=4,
            max_len=512,
            max_images=3,
            max_turns=3,
            max_vision_tokens=40,
        )
        assert lay.total_len <= 512
        decisions = sample_masking_decisions(lay, i)
        compiled = compile_block_mask(lay, decisions).dense()
        oracle = dense_allowed_oracle(lay, decisions)
        mismatches += int((compiled != oracle).sum())
    elapsed = time.perf_counter() - start
    report(
        1,
        "mask-oracle equivalence on 1000 packed layouts",
        mismatches == 0 and elapsed < 60,
        f"mismatches={mismatches}, {elapsed:.1f}s",
    )


def test_criterion_02_token_count_anchors():
    low = vision_token_count(resize_to_patch_grid(ImageSpec(4000, 4000), ResolutionCap(0.8)))
    high = vision_token_count(resize_to_patch_grid(ImageSpec(4000, 4000), ResolutionCap(6.3)))
    ok = low == 961 and high == 7921 and 950 <= low <= 1100 and 7800 <= high <= 8100
    report(2, "square-image token counts at 0.8/6.3 MP", ok, f"low={low}, high={high}")


def _two_doc_instance(rng, config):
    docs = [
        random_layout(rng, max_images=2, max_turns=2, max_question=4, max_answer=4,
                      max_vision_tokens=5)
        for _ in range(2)
    ]
    lay = concatenate_layouts(docs)
    decisions = sample_masking_decisions(lay, int(rng.integers(0, 2**31)))
    inputs = prepare_inputs(lay, config, decisions=decisions)
    return inputs


def test_criterion_03_document_isolation():
    rng = split_rng(1003, "acc-iso")
    bad = 0
    instances = 0
    for kernel in (1, 2, 4):
        config = replace(ISO_CONFIG, conv_kernel=kernel)
        params = init_params(config)
        for _ in range(34):
            instances += 1
            inputs = _two_doc_instance(rng, config)
            arr = inputs.layout.arrays
            doc_a = int(rng.integers(0, 2))
            a_positions = np.flatnonzero(arr.document == doc_a)
            b_positions = np.flatnonzero(arr.document == 1 - doc_a)
            h0 = params["embed"][inputs.token_rows]
            base = collect_activations(params, inputs, h0)
            for pos in (int(rng.choice(a_positions)), int(a_positions[-1])):
                h0p = h0.copy()
                h0p[pos] += rng.normal(0, 0.5, h0.shape[1])
                pert = collect_activations(params, inputs, h0p)
                if any(
                    np.any(b[b_positions] != p[b_positions]) for b, p in zip(base, pert)
                ):
                    bad += 1
                    break
    report(
        3,
        "document isolation impulses, kernels {1,2,4}",
        bad == 0 and instances >= 100,
        f"instances={instances}, leaking={bad}",
    )


def _masked_pair_instance(rng, config, masked):
    n_vision = int(rng.integers(1, 7))
    ex = MultimodalExample(
        (ImageSpec(280, 280, 0),),
        (
            Turn(int(rng.integers(1, 5)), int(rng.integers(1, 5)), 0),
            Turn(int(rng.integers(1, 5)), int(rng.integers(1, 5)), 1),
        ),
    )
    lay = render_chat_template(ex, [n_vision])
    decisions = MaskDecisions({(0, 1): masked})
    return lay, prepare_inputs(lay, config, decisions=decisions)


def test_criterion_04_conversation_mask_leakage():
    rng = split_rng(1004, "acc-leak")
    config = replace(ISO_CONFIG, conv_kernel=4)
    params = init_params(config)
    bad = 0
    for _ in range(100):
        lay, inputs = _masked_pair_instance(rng, config, masked=True)
        turn1 = [i for i, t in enumerate(lay.tokens) if t.turn_id == 0]
        turn2 = np.array([i for i, t in enumerate(lay.tokens) if t.turn_id == 1])
        h0 = params["embed"][inputs.token_rows]
        base = forward_full(params, inputs).logits
        delta = rng.normal(0, 0.5, h0.shape[1])
        for pos in turn1:
            h0p = h0.copy()
            h0p[pos] += delta
            pert = collect_activations(params, inputs, h0p)[-1]
            if np.any(base[turn2] != pert[turn2]):
                bad += 1
                break
        # negative control: unmasked turn must see the perturbation
        lay_u, inputs_u = _masked_pair_instance(rng, config, masked=False)
        turn1_u = [i for i, t in enumerate(lay_u.tokens) if t.turn_id == 0]
        turn2_u = np.array([i for i, t in enumerate(lay_u.tokens) if t.turn_id == 1])
        h0u = params["embed"][inputs_u.token_rows]
        base_u = forward_full(params, inputs_u).logits
        h0p = h0u.copy()
        h0p[turn1_u[-1]] += delta
        pert_u = collect_activations(params, inputs_u, h0p)[-1]
        if np.array_equal(base_u[turn2_u], pert_u[turn2_u]):
            bad += 1
    report(4, "conversation-mask leakage impulses", bad == 0, f"violations={bad}")


def test_criterion_05_gradient_check():
    config = ToyConfig(
        d_model=16,
        n_heads=2,
        n_layers=2,
        vocab_size=24,
        vision_vocab=8,
        n_experts=4,
        top_k=2,
        lora_ranks=(4, 2),
        conv_kernel=2,
        expert_hidden=32,
        seed=17,
    )
    params = init_params(config)
    # 24-token mixed sequence: BOS + bracketed 6-token image + two turns
    ex = MultimodalExample(
        (ImageSpec(168, 168, 0),), (Turn(3, 3, 0), Turn(4, 3, 1))
    )
    lay = render_chat_template(ex, [6])
    assert lay.total_len == 24
    decisions = MaskDecisions({(0, 1): True})
    inputs = prepare_inputs(lay, config, decisions=decisions)
    targets = split_rng(1005, "acc-grad").integers(0, config.total_vocab, 24)
    start = time.perf_counter()
    errors = grad_check(params, [(inputs, targets)], eps=1e-5)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    has_lora = any(".lora_" in n for n in errors)
    has_router = any(n.endswith(".router") for n in errors)
    has_conv = any(n.endswith(".conv_w") for n in errors)
    ok = worst < 1e-5 and elapsed < 300 and has_lora and has_router and has_conv
    report(
        5,
        "finite-difference gradient check, all parameter groups",
        ok,
        f"groups={len(errors)}, worst={worst:.2e}, {elapsed:.0f}s",
    )


def test_criterion_06_lora_zero_init_and_vision_scoping():
    config = ISO_CONFIG
    params = init_params(config)
    ex = MultimodalExample((ImageSpec(112, 112, 0),), (Turn(3, 3, 0), Turn(3, 3, 1)))
    mixed = prepare_inputs(render_chat_template(ex, [5]), config)
    exact_at_init = np.array_equal(
        forward_full(params, mixed).logits,
        forward_full(params, mixed, disable_lora=True).logits,
    )

    targets = split_rng(1006, "acc-lora").integers(0, config.total_vocab, mixed.n)
    trained = params.copy()
    for _ in range(10):
        _, _, grads = loss_and_grads(trained, [(mixed, targets)])
        for name in trained.adapter_names():
            trained.tensors[name] -= 0.05 * grads[name]
    adapters_moved = any(
        not np.array_equal(trained.tensors[n], params.tensors[n])
        for n in trained.adapter_names()
    )
    text_only = prepare_inputs(
        render_chat_template(MultimodalExample((), (Turn(4, 4, 0), Turn(2, 3, 1))), []),
        config,
    )
    text_scoped = np.array_equal(
        forward_full(trained, text_only).logits,
        forward_full(trained, text_only, disable_lora=True).logits,
    )
    vision_engaged = not np.array_equal(
        forward_full(trained, mixed).logits,
        forward_full(trained, mixed, disable_lora=True).logits,
    )
    ok = exact_at_init and adapters_moved and text_scoped and vision_engaged
    report(
        6,
        "adapter zero-init equality and vision scoping after training",
        ok,
        f"init={exact_at_init}, scoped={text_scoped}, engaged={vision_engaged}",
    )


def test_criterion_07_loss_normalization_invariance():
    config = ISO_CONFIG
    params = init_params(config)
    rng = split_rng(1007, "acc-norm")
    per_seq = []
    for _ in range(9):
        lay = random_layout(rng, max_images=1, max_vision_tokens=4)
        inputs = prepare_inputs(lay, config)
        targets = rng.integers(0, config.total_vocab, lay.total_len)
        logits = forward_full(params, inputs).logits
        per_seq.append(answer_loss(logits, targets, inputs.layout))

    def value(partition):
        return accumulate_normalized_loss(
            [
                (sum(per_seq[i][0] for i in part), sum(per_seq[i][1] for i in part))
                for part in partition
            ]
        )

    values = [
        value([list(range(9))]),
        value([[0, 1, 2], [3, 4, 5], [6, 7, 8]]),
        value([[0], [1, 2, 3, 4], [5], [6, 7, 8]]),
    ]
    spread = max(values) - min(values)
    report(7, "loss normalization invariant to microbatching", spread < 1e-12, f"spread={spread:.2e}")


def test_criterion_08_packing():
    rng = split_rng(1008, "acc-pack")

    def build_corpus(seed):
        r = split_rng(seed, "acc-pack-corpus")
        lengths = [int(r.integers(4, 8000)) for _ in range(300)]
        return [
            render_chat_template(MultimodalExample((), (Turn(n - 3, 1, 0),)), [])
            for n in lengths
        ]

    corpus = build_corpus(42)
    packed = pack(corpus, 16500)
    never_over = all(p.used <= 16500 for p in packed)

    within_one = True
    for _ in range(200):
        n = int(rng.integers(1, 9))
        lengths = [int(rng.integers(4, 150)) for _ in range(n)]
        cap = int(rng.integers(max(lengths), 2 * max(lengths) + 50))
        layouts = [
            render_chat_template(MultimodalExample((), (Turn(x - 3, 1, 0),)), [])
            for x in lengths
        ]
        if len(pack(layouts, cap)) > optimal_bins(lengths, cap) + 1:
            within_one = False
            break

    def render_report(seed):
        corpus = build_corpus(seed)
        packed = pack(corpus, 16500)
        stats = loss_token_stats(packed)
        lines = [
            ndjson_line(
                {
                    "sequence": i,
                    "used": total,
                    "utilization": round(total / 16500, 6),
                    "loss_tokens": loss,
                }
            )
            for i, (total, loss) in enumerate(stats.per_sequence)
        ]
        return "\n".join(lines).encode()

    reproducible = render_report(77) == render_report(77)
    ok = never_over and within_one and reproducible
    report(
        8,
        "FFD capacity, near-optimality, reproducible report",
        ok,
        f"bins={len(packed)}, within_one={within_one}, reproducible={reproducible}",
    )


def test_criterion_09_masking_probability_calibration():
    def empirical(grounding, seed):
        docs = [
            render_chat_template(
                MultimodalExample((), tuple(Turn(1, 1, t) for t in range(101)), grounding),
                [],
            )
            for _ in range(1000)
        ]
        lay = concatenate_layouts(docs)
        decisions = sample_masking_decisions(lay, seed)
        vals = np.fromiter(decisions.masked.values(), dtype=bool)
        assert len(vals) == 100000
        return float(vals.mean())

    p_plain = empirical(False, 1009)
    p_ground = empirical(True, 1010)
    ok = abs(p_plain - 0.5) < 0.01 and abs(p_ground - 0.7) < 0.01
    report(9, "conversation-mask calibration 0.5 / 0.7", ok, f"{p_plain:.4f} / {p_ground:.4f}")


def test_criterion_10_grounding_roundtrips():
    rng = split_rng(1010, "acc-ground")
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        pts = tuple(
            (int(rng.integers(0, 1001)) / 10.0, int(rng.integers(0, 1001)) / 10.0)
            for _ in range(n)
        )
        ps = PointSet(pts, CoordScale.PERCENT100, f"o{int(rng.integers(0, 50))}")
        failures += parse_xml_points(render_xml_points(ps)) != ps
        pm = convert_scale(ps)
        failures += parse_point_tokens(render_point_tokens(pm)) != pm
        failures += convert_scale(pm) != ps
        xs = sorted(int(v) for v in rng.integers(0, 1001, 2))
        ys = sorted(int(v) for v in rng.integers(0, 1001, 2))
        box = BoundingBox(xs[0], ys[0], xs[1], ys[1], "thing")
        failures += parse_box(render_box(box)) != box

    bijective = all(
        convert_scale(
            convert_scale(PointSet(((float(v), 0.0),), CoordScale.PERMILLE1000))
        ).points[0][0]
        == float(v)
        for v in range(1001)
    )
    canonical = (
        render_xml_points(PointSet(((10.5, 20.0),), CoordScale.PERCENT100, "cat"))
        == '<points x1="10.5" y1="20.0" alt="cat">cat</points>'
        and render_point_tokens(PointSet(((105.0, 200.0),), CoordScale.PERMILLE1000))
        == "<|point_start|>(105, 200)<|point_end|>"
        and render_box(BoundingBox(100, 200, 300, 400))
        == "<|box_start|>[100, 200, 300, 400]<|box_end|>"
    )
    ok = failures == 0 and bijective and canonical
    report(
        10,
        "grounding round-trips, bijection, canonical templates",
        ok,
        f"failures={failures}, bijective={bijective}, canonical={canonical}",
    )


def test_criterion_11_decode_consistency():
    config = ISO_CONFIG
    params = init_params(config)
    rng = split_rng(1011, "acc-decode")
    worst = 0.0
    for trial in range(20):
        lay = random_layout(rng, max_images=2, max_vision_tokens=6)
        decisions = sample_masking_decisions(lay, trial)
        inputs = prepare_inputs(lay, config, decisions=decisions)
        gen_rows = rng.integers(0, config.vocab_size, 8)
        inc = decode_incremental(params, inputs, gen_rows)
        ext = extend_inputs_for_decode(inputs, gen_rows, config)
        full = forward_full(params, ext).logits[lay.total_len :]
        worst = max(worst, float(np.abs(inc - full).max()))
    report(11, "incremental decode equals hybrid-prefill forward", worst < 1e-10, f"max diff={worst:.2e}")


def test_criterion_12_router_entropy():
    config = replace(ISO_CONFIG, dual_router=True)
    params = init_params(config)
    params.tensors["layers.0.router"][:] = 0.0
    params.tensors["layers.0.router_vision"][:] = 0.0
    rng = split_rng(1012, "acc-router")
    x = rng.normal(0, 1, (64, config.d_model))
    vis = np.arange(64) % 2 == 0
    _, trace = moe_dispatch(params, 0, x, vis)
    target = math.log(config.n_experts)
    ent_v = trace.mean_entropy(vision=True)
    ent_t = trace.mean_entropy(vision=False)
    max_entropy = abs(ent_v - target) < 1e-12 and abs(ent_t - target) < 1e-12

    # independent traces: distinct routers route the modalities differently
    params2 = init_params(config)
    _, t1 = moe_dispatch(params2, 0, x, vis)
    params3 = params2.copy()
    params3.tensors["layers.0.router_vision"] += 0.7
    _, t2 = moe_dispatch(params3, 0, x, vis)
    independent = np.array_equal(t1.probs[~vis], t2.probs[~vis]) and not np.array_equal(
        t1.probs[vis], t2.probs[vis]
    )
    report(
        12,
        "router entropy maximal under uniform logits; dual traces independent",
        max_entropy and independent,
        f"|H-lnE|=({abs(ent_v-target):.1e},{abs(ent_t-target):.1e})",
    )
