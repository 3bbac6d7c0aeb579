"""Command-line entry point.

Subcommands: geometry, pack, mask, convpad, gradcheck, toy-forward,
grounding, verify. Options resolve as flag > config file > default; the
config file is flat `key = value` text. Reports are line-delimited JSON;
mask renders go to PGM, and report paths can also emit matplotlib figures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import grounding
from .convpad import PaddedKind, plan_conv_padding, verify_isolation
from .datamodel import ImageSpec, load_manifest, render_chat_template
from .geometry import ResolutionCap, resize_to_patch_grid, resolution_cap_at, vision_token_count
from .masking import compile_block_mask, sample_masking_decisions
from .packing import loss_token_stats, pack
from .report import (
    ascii_mask,
    ndjson_line,
    save_gradcheck_figure,
    save_mask_figure,
    save_packing_figures,
    write_pgm,
)
from .rng import split_rng
from .synth import random_layout
from .toymodel import ToyConfig, forward_full, grad_check, init_params, prepare_inputs
from .verify import EXIT_USAGE, VerifySettings, run_verify

_TOY_KEYS = {
    "d_model": int,
    "n_heads": int,
    "n_layers": int,
    "vocab_size": int,
    "vision_vocab": int,
    "n_experts": int,
    "top_k": int,
    "r_mlp": int,
    "r_att": int,
    "conv_kernel": int,
    "expert_hidden": int,
    "lora_scale": float,
    "dual_router": lambda s: s.lower() in ("1", "true", "yes"),
}


def load_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


class Options:
    """Flag > config-file > default resolution."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, str] = {}
        if getattr(args, "config", None):
            self.file = load_config_file(args.config)

    def get(self, key: str, default, cast=None):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file:
            raw = self.file[key]
            return cast(raw) if cast else raw
        return default

    def toy_config(self, seed: int) -> ToyConfig:
        kwargs = {}
        for key, cast in _TOY_KEYS.items():
            if key in self.file:
                kwargs[key] = cast(self.file[key])
        ranks = (kwargs.pop("r_mlp", 4), kwargs.pop("r_att", 2))
        return ToyConfig(lora_ranks=ranks, seed=seed, **kwargs)


def _packed_from_manifest(opts: Options):
    manifest = opts.get("manifest", None)
    if manifest is None:
        raise FileNotFoundError("no manifest given (flag --manifest or config key manifest)")
    examples = load_manifest(manifest)
    if not examples:
        raise ValueError(f"manifest {manifest} contains no examples")
    cap = ResolutionCap(opts.get("cap_mp", 6.3, float))
    layouts = []
    for ex in examples:
        counts = [vision_token_count(resize_to_patch_grid(im, cap)) for im in ex.images]
        layouts.append(render_chat_template(ex, counts))
    capacity = opts.get("capacity", 16500, int)
    return pack(layouts, capacity), capacity


def cmd_geometry(opts: Options) -> int:
    args = opts.args
    if args.progress is not None:
        cap = resolution_cap_at(args.progress)
    else:
        cap = ResolutionCap(opts.get("cap_mp", 6.3, float))
    grid = resize_to_patch_grid(ImageSpec(args.height, args.width), cap)
    print(
        ndjson_line(
            {
                "input_height_px": args.height,
                "input_width_px": args.width,
                "cap_mp": cap.megapixels,
                "height_px": grid.height_px,
                "width_px": grid.width_px,
                "rows": grid.rows,
                "cols": grid.cols,
                "vision_tokens": vision_token_count(grid),
            }
        )
    )
    return 0


def cmd_pack(opts: Options) -> int:
    packed, capacity = _packed_from_manifest(opts)
    stats = loss_token_stats(packed)
    utilization = []
    for i, (seq, (total, loss)) in enumerate(zip(packed, stats.per_sequence)):
        utilization.append(total / capacity)
        print(
            ndjson_line(
                {
                    "sequence": i,
                    "documents": len(seq.layouts),
                    "used": total,
                    "capacity": capacity,
                    "utilization": round(total / capacity, 6),
                    "loss_tokens": loss,
                }
            )
        )
    print(
        ndjson_line(
            {
                "sequences": len(packed),
                "total_tokens": stats.total_tokens,
                "loss_tokens": stats.loss_tokens,
                "mean_utilization": round(float(np.mean(utilization)), 6),
            }
        )
    )
    if opts.args.figures:
        paths = save_packing_figures(
            utilization, [loss for _, loss in stats.per_sequence], opts.args.figures
        )
        for p in paths:
            print(ndjson_line({"figure": str(p)}))
    return 0


def cmd_mask(opts: Options) -> int:
    args = opts.args
    packed, _ = _packed_from_manifest(opts)
    idx = args.sequence
    if not 0 <= idx < len(packed):
        print(f"sequence index {idx} out of range (have {len(packed)})", file=sys.stderr)
        return EXIT_USAGE
    layout = packed[idx].combined_layout()
    seed = opts.get("seed", 0, int)
    decisions = sample_masking_decisions(
        layout,
        seed,
        opts.get("p_conv_mask", 0.5, float),
        opts.get("p_conv_mask_grounding", 0.7, float),
    )
    spec = compile_block_mask(layout, decisions)
    print(
        ndjson_line(
            {
                "sequence": idx,
                "tokens": layout.total_len,
                "documents": layout.n_documents,
                "blocks": len(spec.blocks),
                "masked_turns": sorted(f"{d}:{t}" for (d, t), v in decisions.masked.items() if v),
            }
        )
    )
    if args.blocks:
        for b in spec.blocks:
            print(ndjson_line(b.to_record()))
    dense = None
    if args.render or args.figure:
        dense = spec.dense()
    if args.render:
        write_pgm(dense, args.render)
        print(ndjson_line({"pgm": str(args.render), "side": layout.total_len}))
        preview = ascii_mask(dense)
        if preview is not None:
            print(preview)
    if args.figure:
        save_mask_figure(dense, args.figure, title=f"sequence {idx} attention mask")
        print(ndjson_line({"figure": str(args.figure)}))
    return 0


_PAD_GLYPHS = {PaddedKind.PAD: "_", PaddedKind.DUPLICATE: "d"}


def cmd_convpad(opts: Options) -> int:
    args = opts.args
    packed, _ = _packed_from_manifest(opts)
    kernel = opts.get("kernel", 4, int)
    seed = opts.get("seed", 0, int)
    status = 0
    for i, seq in enumerate(packed):
        layout = seq.combined_layout()
        decisions = sample_masking_decisions(layout, seed)
        padded = plan_conv_padding(layout, kernel, decisions)
        report = verify_isolation(padded)
        glyphs = []
        for tok in padded.tokens:
            if tok.kind is PaddedKind.ORIGINAL:
                glyphs.append("v" if layout.tokens[tok.source].role.value == "vision" else ".")
            else:
                glyphs.append(_PAD_GLYPHS[tok.kind])
        print(
            ndjson_line(
                {
                    "sequence": i,
                    "kernel": kernel,
                    "original_tokens": layout.total_len,
                    "padded_tokens": len(padded.tokens),
                    "overhead": padded.overhead,
                    "violations": len(report.violations),
                }
            )
        )
        if args.show_layout:
            print("".join(glyphs))
        for v in report.violations:
            print(ndjson_line({"violation": v.kind, "window_end": v.window_end, "detail": v.detail}))
        if report.violations:
            status = 1
    return status


def cmd_gradcheck(opts: Options) -> int:
    seed = opts.get("seed", 0, int)
    config = opts.toy_config(seed)
    params = init_params(config)
    rng = split_rng(seed, "cli-gradcheck")
    layout = random_layout(
        rng, max_images=1, max_turns=2, max_question=3, max_answer=3, max_vision_tokens=4
    )
    decisions = sample_masking_decisions(layout, seed)
    inputs = prepare_inputs(layout, config, decisions=decisions)
    targets = rng.integers(0, config.total_vocab, layout.total_len)
    errors = grad_check(params, [(inputs, targets)], eps=opts.get("eps", 1e-5, float))
    worst = max(errors.values())
    for name in sorted(errors):
        print(ndjson_line({"group": name, "max_relative_error": errors[name]}))
    print(
        ndjson_line(
            {
                "groups": len(errors),
                "max_relative_error": worst,
                "status": "pass" if worst < 1e-5 else "fail",
            }
        )
    )
    if opts.args.figure:
        save_gradcheck_figure(errors, opts.args.figure)
        print(ndjson_line({"figure": str(opts.args.figure)}))
    return 0 if worst < 1e-5 else 1


def cmd_toy_forward(opts: Options) -> int:
    args = opts.args
    packed, _ = _packed_from_manifest(opts)
    idx = args.sequence
    if not 0 <= idx < len(packed):
        print(f"sequence index {idx} out of range (have {len(packed)})", file=sys.stderr)
        return EXIT_USAGE
    seed = opts.get("seed", 0, int)
    config = opts.toy_config(seed)
    params = init_params(config)
    layout = packed[idx].combined_layout()
    decisions = sample_masking_decisions(layout, seed)
    inputs = prepare_inputs(layout, config, decisions=decisions)
    logits = forward_full(params, inputs).logits
    digest = hashlib.sha256(logits.tobytes()).hexdigest()
    print(
        ndjson_line(
            {
                "sequence": idx,
                "tokens": layout.total_len,
                "logits_sha256": digest,
                "logits_sum": float(logits.sum()),
            }
        )
    )
    return 0


def cmd_grounding(opts: Options) -> int:
    args = opts.args
    text = sys.stdin.read().strip()
    try:
        if args.action == "parse":
            print(json.dumps(_parse_record(args.format, text)))
        elif args.action == "render":
            print(_render_record(args.format, json.loads(text)))
        else:  # convert
            print(_convert_text(args.format, text))
    except (grounding.FormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


def _parse_record(fmt: str, text: str) -> dict:
    if fmt == "xml":
        ps = grounding.parse_xml_points(text)
    elif fmt == "point":
        ps = grounding.parse_point_tokens(text)
    else:
        box = grounding.parse_box(text)
        return {"box": [box.x1, box.y1, box.x2, box.y2], "label": box.label}
    return {"points": [list(p) for p in ps.points], "scale": ps.scale.value, "label": ps.label}


def _render_record(fmt: str, rec: dict) -> str:
    if fmt == "box":
        x1, y1, x2, y2 = rec["box"]
        return grounding.render_box(grounding.BoundingBox(x1, y1, x2, y2, rec.get("label")))
    scale = grounding.CoordScale(rec.get("scale", "percent100" if fmt == "xml" else "permille1000"))
    ps = grounding.PointSet(tuple(tuple(p) for p in rec["points"]), scale, rec.get("label"))
    return grounding.render_xml_points(ps) if fmt == "xml" else grounding.render_point_tokens(ps)


def _convert_text(fmt: str, text: str) -> str:
    if fmt == "xml":
        return grounding.render_point_tokens(grounding.convert_scale(grounding.parse_xml_points(text)))
    if fmt == "point":
        return grounding.render_xml_points(grounding.convert_scale(grounding.parse_point_tokens(text)))
    raise ValueError("boxes have a single scale; nothing to convert")


def cmd_verify(opts: Options) -> int:
    args = opts.args
    manifest = opts.get("manifest", None)
    if manifest is None:
        print("error: verify requires a manifest", file=sys.stderr)
        return EXIT_USAGE
    seed = opts.get("seed", 0, int)
    settings = VerifySettings(
        manifest=Path(manifest),
        seed=seed,
        capacity=opts.get("capacity", 16500, int),
        kernel=opts.get("kernel", 4, int),
        pad_kernel=args.pad_kernel,
        p_mask=opts.get("p_conv_mask", 0.5, float),
        p_mask_grounding=opts.get("p_conv_mask_grounding", 0.7, float),
        cap_mp=opts.get("cap_mp", 0.3, float),
        threads=opts.get("threads", 1, int),
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fp:
            code = run_verify(settings, fp)
    else:
        code = run_verify(settings, sys.stdout)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmseq",
        description="Multimodal training-sequence machinery: packing, masks, padding, grounding, verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        if manifest:
            p.add_argument("--manifest", default=None, help="line-delimited JSON corpus manifest")
            p.add_argument("--capacity", type=int, default=None, help="packing capacity (default 16500)")
            p.add_argument("--cap-mp", dest="cap_mp", type=float, default=None, help="image area cap in MP")

    p = sub.add_parser("geometry", help="grid and token count for an image under a cap")
    common(p, manifest=False)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--cap-mp", dest="cap_mp", type=float, default=None)
    p.add_argument("--progress", type=float, default=None, help="training progress for the staged cap")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("pack", help="pack a manifest and report utilization")
    common(p)
    p.add_argument("--figures", default=None, help="directory for report figures")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("mask", help="compile and render the attention mask")
    common(p)
    p.add_argument("--sequence", type=int, default=0, help="packed sequence index")
    p.add_argument("--render", default=None, help="write the dense mask as binary PGM")
    p.add_argument("--blocks", action="store_true", help="dump mask blocks as NDJSON")
    p.add_argument("--figure", default=None, help="write the dense mask as a PNG figure")
    p.add_argument("--p-conv-mask", dest="p_conv_mask", type=float, default=None)
    p.add_argument("--p-conv-mask-grounding", dest="p_conv_mask_grounding", type=float, default=None)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("convpad", help="plan and verify convolution padding")
    common(p)
    p.add_argument("--kernel", type=int, default=None, help="convolution width (default 4)")
    p.add_argument("--show-layout", action="store_true", help="print the padded layout glyphs")
    p.set_defaults(func=cmd_convpad)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of the toy model")
    common(p, manifest=False)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--figure", default=None, help="write per-group errors as a PNG figure")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toy-forward", help="logits checksum for regression pinning")
    common(p)
    p.add_argument("--sequence", type=int, default=0)
    p.set_defaults(func=cmd_toy_forward)

    p = sub.add_parser("grounding", help="parse/render/convert grounding formats on stdin")
    common(p, manifest=False)
    p.add_argument("action", choices=["parse", "render", "convert"])
    p.add_argument("--format", choices=["xml", "point", "box"], required=True)
    p.set_defaults(func=cmd_grounding)

    p = sub.add_parser("verify", help="run the verification battery")
    common(p)
    p.add_argument("--kernel", type=int, default=None)
    p.add_argument("--pad-kernel", dest="pad_kernel", type=int, default=None,
                   help="plan padding with this width instead of --kernel")
    p.add_argument("--p-conv-mask", dest="p_conv_mask", type=float, default=None)
    p.add_argument("--p-conv-mask-grounding", dest="p_conv_mask_grounding", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="write the NDJSON report to a file")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(Options(args))
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
