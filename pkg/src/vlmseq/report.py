"""Report outputs: line-delimited JSON, PGM mask dumps, matplotlib figures."""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Iterable, Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def ndjson_line(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True, separators=(", ", ": "))


def write_ndjson(records: Iterable[Mapping], fp: IO[str]) -> None:
    for rec in records:
        fp.write(ndjson_line(rec) + "\n")


def write_pgm(mask: np.ndarray, path: str | Path) -> None:
    """Binary PGM of a dense attention mask; allowed pairs are ink (0)."""
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-D boolean matrix")
    h, w = mask.shape
    pixels = np.where(mask, 0, 255).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fp.write(pixels.tobytes())


def ascii_mask(mask: np.ndarray, limit: int = 128) -> str | None:
    """Character-cell preview of a small mask ('#' allowed, '.' not)."""
    n = mask.shape[0]
    if n > limit:
        return None
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


def save_mask_figure(mask: np.ndarray, path: str | Path, title: str = "attention mask") -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(mask, cmap="Greys", interpolation="nearest", origin="upper")
    ax.set_title(title)
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_packing_figures(
    utilization: list[float], loss_per_sequence: list[int], out_dir: str | Path
) -> list[Path]:
    """Utilization bars and loss-token histogram for a packing run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(utilization)), [100 * u for u in utilization], color="#33658a")
    ax.set_xlabel("packed sequence")
    ax.set_ylabel("utilization [%]")
    ax.set_ylim(0, 105)
    ax.set_title("sequence utilization")
    fig.tight_layout()
    path = out_dir / "packing_utilization.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(loss_per_sequence, bins=min(20, max(3, len(loss_per_sequence))), color="#86bbd8")
    ax.set_xlabel("loss tokens per sequence")
    ax.set_ylabel("sequences")
    ax.set_title("loss-token distribution")
    fig.tight_layout()
    path = out_dir / "packing_loss_tokens.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written


def save_gradcheck_figure(errors: Mapping[str, float], path: str | Path) -> None:
    names = list(errors)
    vals = [max(errors[n], 1e-18) for n in names]
    fig, ax = plt.subplots(figsize=(8, max(3, 0.18 * len(names))))
    ax.barh(range(len(names)), vals, color="#f6ae2d")
    ax.set_yticks(range(len(names)), names, fontsize=5)
    ax.set_xscale("log")
    ax.set_xlabel("max relative gradient error")
    ax.axvline(1e-5, color="red", linestyle="--", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
