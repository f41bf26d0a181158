"""Expert-utilization matrices, encoder/decoder overlap, and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .checkpoint import load_model
from .model import SIDES, MoeModel, RoutingError


@dataclass
class UtilizationMatrix:
    side: str
    layer: int
    rows: list[str]
    cells: np.ndarray  # (len(rows), n_experts) gate mass
    step: int | None = None

    @property
    def n_experts(self) -> int:
        return self.cells.shape[1]

    def selected(self, row: int) -> frozenset[int]:
        return frozenset(int(e) for e in np.flatnonzero(self.cells[row] > 0))

    def row(self, key: str) -> np.ndarray:
        return self.cells[self.rows.index(key)]


def utilization(model: MoeModel, layer: int, side: str, tasks: Sequence[int | str],
                labels: Sequence[str] | None = None) -> UtilizationMatrix:
    """Row ``i`` scatters the gates of ``tasks[i]``'s routing decision into expert columns.

    ``tasks`` are task ids or task keys; ``labels`` overrides the row names
    (e.g. language pairs that resolve to a shared TL task).
    """
    if side not in SIDES:
        raise RoutingError(f"side must be one of {SIDES}, got {side!r}")
    if layer not in model.cfg.moe_layers():
        raise RoutingError(f"{side} layer {layer} has no expert bank")
    ids = [model.registry.id(t) if isinstance(t, str) else int(t) for t in tasks]
    cells = np.zeros((len(ids), model.cfg.n_experts))
    for i, task in enumerate(ids):
        dec = model.route(layer, side, task)
        for e, g in zip(dec.experts, dec.gates):
            cells[i, e] += g
    rows = list(labels) if labels is not None else [model.registry.key(t) for t in ids]
    if len(rows) != len(ids):
        raise ValueError("labels and tasks differ in length")
    return UtilizationMatrix(side, layer, rows, cells)


@dataclass
class OverlapStats:
    per_task: dict[str, int]
    encoder_experts: frozenset[int]
    decoder_experts: frozenset[int]
    intersection: frozenset[int] = field(init=False)
    jaccard: float = field(init=False)

    def __post_init__(self):
        self.intersection = self.encoder_experts & self.decoder_experts
        union = self.encoder_experts | self.decoder_experts
        self.jaccard = len(self.intersection) / len(union) if union else 1.0

    def to_dict(self) -> dict:
        return {
            "per_task": self.per_task,
            "encoder_experts": sorted(self.encoder_experts),
            "decoder_experts": sorted(self.decoder_experts),
            "intersection": sorted(self.intersection),
            "intersection_size": len(self.intersection),
            "jaccard": self.jaccard,
        }


def overlap_stats(enc: UtilizationMatrix, dec: UtilizationMatrix) -> OverlapStats:
    if enc.rows != dec.rows:
        raise ValueError("encoder and decoder matrices must have the same task rows")
    per_task = {key: len(enc.selected(i) & dec.selected(i)) for i, key in enumerate(enc.rows)}
    enc_all = frozenset().union(*(enc.selected(i) for i in range(len(enc.rows))))
    dec_all = frozenset().union(*(dec.selected(i) for i in range(len(dec.rows))))
    return OverlapStats(per_task, enc_all, dec_all)


@dataclass
class Series:
    matrices: list[UtilizationMatrix]
    changes: list[int]  # tasks whose selected expert set changed between neighbours


def snapshot_series(checkpoints: Sequence[str | Path], layer: int, side: str,
                    tasks: Sequence[int | str]) -> Series:
    loaded = []
    for path in checkpoints:
        try:
            model, _, ckpt = load_model(path)
        except Exception as exc:
            raise IOError(f"cannot load checkpoint {path}: {exc}") from exc
        mat = utilization(model, layer, side, tasks)
        mat.step = int(ckpt.meta.get("step", 0))
        loaded.append(mat)
    loaded.sort(key=lambda m: m.step)
    changes = []
    for a, b in zip(loaded, loaded[1:]):
        changes.append(sum(a.selected(i) != b.selected(i) for i in range(len(a.rows))))
    return Series(loaded, changes)


def write_csv(matrix: UtilizationMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task"] + [str(e) for e in range(matrix.n_experts)])
        for key, row in zip(matrix.rows, matrix.cells):
            w.writerow([key] + [repr(float(v)) for v in row])


def read_csv(path: str | Path, side: str = "", layer: int = 0) -> UtilizationMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    keys = [r[0] for r in rows[1:]]
    cells = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(keys), len(rows[0]) - 1)
    return UtilizationMatrix(side, layer, keys, cells)


def _grey(v: float) -> str:
    level = int(round(255 * (1.0 - min(max(v, 0.0), 1.0))))
    return f"#{level:02x}{level:02x}{level:02x}"


def write_svg(matrix: UtilizationMatrix, path: str | Path, cell: int = 20) -> None:
    label_w = 8 * max([len(r) for r in matrix.rows] + [4]) + 10
    top = 40
    width = label_w + cell * matrix.n_experts + 10
    height = top + cell * len(matrix.rows) + 10
    title = f"{matrix.side} layer {matrix.layer}"
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<text x="4" y="14" font-family="monospace" font-size="12">{escape(title)}</text>',
    ]
    for e in range(matrix.n_experts):
        x = label_w + e * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 6}" font-family="monospace" font-size="10" '
                     f'text-anchor="middle">{e}</text>')
    for i, (key, row) in enumerate(zip(matrix.rows, matrix.cells)):
        y = top + i * cell
        parts.append(f'<text x="4" y="{y + cell - 6}" font-family="monospace" font-size="10">{escape(key)}</text>')
        for e, v in enumerate(row):
            parts.append(f'<rect x="{label_w + e * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_grey(float(v))}" stroke="#999999" stroke-width="0.5"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def export_heatmap(matrix: UtilizationMatrix, path: str | Path, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        write_csv(matrix, path)
    elif fmt == "svg":
        write_svg(matrix, path)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r} (csv or svg)")
    return path
