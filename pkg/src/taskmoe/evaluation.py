"""Greedy decoding, pivot translation, and the systems x directions BLEU matrix."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .bleu import BleuReport, corpus_bleu
from .checkpoint import CheckpointError, load_model
from .corpus import ParallelExample
from .model import DenseModel, MoeModel, pad_batch
from .tasks import PIVOT, TaskError, pair_key, resolve_infer
from .vocab import BOS, EOS, Vocab, decode, encode_source

log = logging.getLogger(__name__)


class PivotError(RuntimeError):
    pass


def _task_for(model, strategy, src: str, tgt: str) -> int | None:
    if isinstance(model, DenseModel):
        return None
    if strategy is None:
        raise TaskError("a strategy is required to decode with a task-routed model")
    return resolve_infer(model.registry, strategy, src, tgt)


def greedy_decode_batch(model: MoeModel | DenseModel, vocab: Vocab, texts: Sequence[str],
                        src: str, tgt: str, strategy=None, max_len: int | None = None,
                        batch_size: int = 64) -> list[str]:
    """Argmax decoding from <s> until </s> or ``max_len`` decoder positions."""
    task = _task_for(model, strategy, src, tgt)
    limit = min(max_len or model.cfg.max_len, model.cfg.max_len)
    out: list[str] = []
    for start in range(0, len(texts), batch_size):
        chunk = texts[start:start + batch_size]
        src_ids = pad_batch([encode_source(vocab, src, tgt, " ".join(t.split()[: limit - 3]))
                             for t in chunk])
        tasks = None if task is None else np.full(len(chunk), task, dtype=np.int64)
        out.extend(_decode_ids(model, vocab, src_ids, tasks, limit))
    return out


def _decode_ids(model, vocab: Vocab, src_ids: np.ndarray, tasks, limit: int) -> list[str]:
    n = src_ids.shape[0]
    ys = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    with T.no_grad():
        memory = model.encode(src_ids, tasks)
        while ys.shape[1] < limit and not done.all():
            logits = model.decode(memory, src_ids, ys, tasks)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            nxt = np.where(done, EOS, nxt)
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == EOS
    results = []
    for row in ys[:, 1:]:
        ids = list(row)
        if EOS in ids:
            ids = ids[: ids.index(EOS)]
        results.append(decode(vocab, ids))
    return results


def greedy_decode(model, vocab: Vocab, text: str, src: str, tgt: str, strategy=None,
                  max_len: int | None = None) -> str:
    return greedy_decode_batch(model, vocab, [text], src, tgt, strategy, max_len)[0]


@dataclass
class Stage:
    model: MoeModel | DenseModel
    vocab: Vocab
    strategy: str | None = None


def pivot_translate(stage1: Stage, stage2: Stage, texts: Sequence[str], src: str, tgt: str,
                    pivot: str = PIVOT) -> list[str]:
    """src -> pivot with ``stage1``, then pivot -> tgt with ``stage2``."""
    try:
        middle = greedy_decode_batch(stage1.model, stage1.vocab, texts, src, pivot, stage1.strategy)
    except Exception as exc:
        raise PivotError(f"pivot stage 1 ({src}->{pivot}): {exc}") from exc
    try:
        return greedy_decode_batch(stage2.model, stage2.vocab, middle, pivot, tgt, stage2.strategy)
    except Exception as exc:
        raise PivotError(f"pivot stage 2 ({pivot}->{tgt}): {exc}") from exc


# -- evaluation matrix ------------------------------------------------------------------

@dataclass
class Cell:
    system: str
    strategy: str
    column: str
    report: BleuReport | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"system": self.system, "strategy": self.strategy, "column": self.column}
        if self.report is not None:
            d["bleu"] = self.report.to_dict()
        else:
            d["error"] = self.error
        return d


@dataclass
class EvalMatrix:
    rows: list[tuple[str, str]]
    columns: list[str]
    cells: dict[tuple[str, str, str], Cell] = field(default_factory=dict)

    def cell(self, system: str, strategy: str, column: str) -> Cell:
        return self.cells[(system, strategy, column)]

    def best(self) -> dict[str, list[str]]:
        """Per column, every row label whose BLEU equals the column maximum at 2-decimal precision."""
        out = {}
        for col in self.columns:
            scored = [(round(c.report.score, 2), f"{c.system}/{c.strategy}")
                      for (s, st, cc), c in self.cells.items() if cc == col and c.report is not None]
            if not scored:
                out[col] = []
                continue
            top = max(sc for sc, _ in scored)
            out[col] = [label for sc, label in scored if sc == top]
        return out

    def to_dict(self) -> dict:
        return {
            "rows": [list(r) for r in self.rows],
            "columns": self.columns,
            "cells": [self.cells[(s, st, c)].to_dict() for s, st in self.rows for c in self.columns],
            "best": self.best(),
        }

    def table(self) -> str:
        labels = [f"{s}/{st}" for s, st in self.rows]
        w0 = max([len("system/strategy")] + [len(l) for l in labels])
        widths = [max(len(c), 7) for c in self.columns]
        best = self.best()
        lines = ["  ".join(["system/strategy".ljust(w0)] + [c.rjust(w) for c, w in zip(self.columns, widths)])]
        for (s, st), label in zip(self.rows, labels):
            parts = [label.ljust(w0)]
            for c, w in zip(self.columns, widths):
                cell = self.cells[(s, st, c)]
                if cell.report is None:
                    txt = "fail"
                else:
                    txt = f"{cell.report.score:.2f}" + ("*" if label in best[c] else " ")
                parts.append(txt.rjust(w))
            lines.append("  ".join(parts))
        lines.append("* best system for the column (ties all marked)")
        return "\n".join(lines)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TASKMOE_THREADS", "1")))
    except ValueError:
        return 1


class _ModelCache:
    def __init__(self):
        self._models: dict[str, tuple] = {}

    def get(self, path: str):
        if path not in self._models:
            if not Path(path).is_file():
                raise CheckpointError(f"missing checkpoint {path}")
            model, vocab, _ = load_model(path)
            self._models[path] = (model, vocab)
        return self._models[path]


def _columns(manifest: Mapping) -> list[tuple[str, str]]:
    cols: list[tuple[str, str]] = []
    for a, b in manifest["pairs"]:
        for d in ((a, b), (b, a)):
            if d not in cols:
                cols.append(d)
    return cols


def _rows(manifest: Mapping) -> list[tuple[str, str, dict]]:
    rows = []
    for sysdef in manifest["systems"]:
        kind = sysdef["type"]
        if kind == "moe":
            for st in sysdef["strategies"]:
                rows.append((sysdef["name"], st, sysdef))
        elif kind == "pivot_moe":
            rows.append((sysdef["name"], sysdef["strategy"], sysdef))
        elif kind in ("bilingual", "pivot", "dense"):
            rows.append((sysdef["name"], "-", sysdef))
        else:
            raise ValueError(f"unknown system type {kind!r} for {sysdef.get('name')!r}")
    return rows


def _translate(sysdef: Mapping, strategy: str, src: str, tgt: str, texts: list[str],
               cache: _ModelCache) -> list[str]:
    kind = sysdef["type"]
    if kind == "moe":
        model, vocab = cache.get(sysdef["checkpoint"])
        return greedy_decode_batch(model, vocab, texts, src, tgt, strategy)
    if kind == "dense":
        model, vocab = cache.get(sysdef["checkpoint"])
        return greedy_decode_batch(model, vocab, texts, src, tgt)
    if kind == "bilingual":
        path = sysdef["checkpoints"].get(pair_key(src, tgt))
        if path is None:
            raise CheckpointError(f"no bilingual model for {pair_key(src, tgt)}")
        model, vocab = cache.get(path)
        return greedy_decode_batch(model, vocab, texts, src, tgt, "lp_a")
    if kind == "pivot":
        stages = []
        for a, b in ((src, PIVOT), (PIVOT, tgt)):
            path = sysdef["checkpoints"].get(pair_key(a, b))
            if path is None:
                raise CheckpointError(f"no bilingual model for pivot leg {pair_key(a, b)}")
            model, vocab = cache.get(path)
            stages.append(Stage(model, vocab, "lp_a"))
        return pivot_translate(stages[0], stages[1], texts, src, tgt)
    if kind == "pivot_moe":
        model, vocab = cache.get(sysdef["checkpoint"])
        return pivot_translate(Stage(model, vocab, strategy), Stage(model, vocab, strategy), texts, src, tgt)
    raise ValueError(f"unknown system type {kind!r}")


def run_matrix_eval(manifest: Mapping, testsets: Mapping[tuple[str, str], Sequence[ParallelExample]],
                    report_path: str | Path | None = None, threads: int | None = None) -> EvalMatrix:
    """Evaluate every (system, strategy) row on every direction of every manifest pair.

    A cell that cannot be computed (missing checkpoint, unresolved task,
    missing test set) records the error text; other cells are unaffected.
    """
    cols = _columns(manifest)
    rows = _rows(manifest)
    matrix = EvalMatrix([(n, st) for n, st, _ in rows], [pair_key(*c) for c in cols])
    cache = _ModelCache()

    def job(row, col):
        name, st, sysdef = row
        src, tgt = col
        key = pair_key(src, tgt)
        cell = Cell(name, st, key)
        try:
            examples = testsets.get(col)
            if not examples:
                raise LookupError(f"no test set for {key}")
            hyps = _translate(sysdef, None if st == "-" else st, src, tgt, [e.src for e in examples], cache)
            cell.report = corpus_bleu(hyps, [e.tgt for e in examples])
        except Exception as exc:  # cell-level isolation is the contract here
            cell.error = f"{type(exc).__name__}: {exc}"
            log.info("cell %s/%s %s failed: %s", name, st, key, cell.error)
        return cell

    # load checkpoints up front so worker threads only read
    for _, _, sysdef in rows:
        for path in [sysdef.get("checkpoint")] + list(sysdef.get("checkpoints", {}).values()):
            if path:
                try:
                    cache.get(path)
                except CheckpointError:
                    pass
    jobs = [(r, c) for r in rows for c in cols]
    n = threads or _threads()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda rc: job(*rc), jobs))
    else:
        results = [job(r, c) for r, c in jobs]
    for cell in results:
        matrix.cells[(cell.system, cell.strategy, cell.column)] = cell
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(matrix.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return matrix
