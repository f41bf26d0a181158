"""Experiment lifecycle steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable

from .checkpoint import load_model, save_model
from .config import RunConfig
from .corpus import (CorpusSpec, ParallelExample, all_underlying, gen_corpus, load_tsv,
                     pair_filename)
from .evaluation import EvalMatrix, run_matrix_eval
from .model import SIDES, MoeModel
from .routing import export_heatmap, overlap_stats, utilization
from .tasks import TaskMode, build_registry, pair_key, resolve_infer, UnresolvedTaskError
from .training import checkpoint_name, train
from .vocab import Vocab, build_vocab

log = logging.getLogger(__name__)


def gen_data(rc: RunConfig) -> dict:
    """Write train and held-out TSVs, the vocabulary and a manifest; returns the manifest."""
    data_dir, test_dir = rc.paths["data"], rc.paths["test"]
    corpora = gen_corpus(rc.corpus, data_dir)
    manifest = {
        "corpus": rc.corpus.to_dict(),
        "train_files": {pair_key(s, t): pair_filename(s, t) for s, t, _ in rc.corpus.pairs},
        "test_files": {},
    }
    if rc.eval.test_pairs:
        test_spec = CorpusSpec(rc.corpus.languages, rc.eval.test_pairs, rc.corpus.min_len,
                               rc.corpus.max_len, rc.corpus.base_vocab, rc.eval.test_seed)
        gen_corpus(test_spec, test_dir, exclude=all_underlying(rc.corpus))
        manifest["test_files"] = {pair_key(s, t): pair_filename(s, t) for s, t, _ in rc.eval.test_pairs}
        manifest["test_spec"] = test_spec.to_dict()
    vocab = build_vocab((ex for exs in corpora.values() for ex in exs), rc.vocab_max_size,
                        languages=rc.corpus.languages)
    rc.paths["vocab"].parent.mkdir(parents=True, exist_ok=True)
    vocab.save(rc.paths["vocab"])
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return manifest


def load_train_corpora(rc: RunConfig) -> dict[tuple[str, str], list[ParallelExample]]:
    return {(s, t): list(load_tsv(rc.paths["data"] / pair_filename(s, t))) for s, t, _ in rc.corpus.pairs}


def load_test_sets(rc: RunConfig) -> dict[tuple[str, str], list[ParallelExample]]:
    out = {}
    for s, t, _ in rc.eval.test_pairs:
        path = rc.paths["test"] / pair_filename(s, t)
        if path.is_file():
            out[(s, t)] = list(load_tsv(path))
    return out


def load_vocab(rc: RunConfig) -> Vocab:
    path = rc.paths["vocab"]
    if not path.is_file():
        raise FileNotFoundError(f"vocabulary not found: {path} (run gen-data first)")
    return Vocab.load(path)


def moe_dir(rc: RunConfig) -> Path:
    return rc.paths["run"] / "moe"


def bilingual_dir(rc: RunConfig, src: str, tgt: str) -> Path:
    return rc.paths["run"] / "bilingual" / pair_key(src, tgt)


def final_checkpoint(rc: RunConfig, directory: Path, steps: int | None = None) -> Path:
    return directory / checkpoint_name(rc.train.steps if steps is None else steps)


def train_moe(rc: RunConfig, resume: str | Path | None = None,
              on_step: Callable[[int, float], None] | None = None) -> Path:
    corpora = load_train_corpora(rc)
    vocab = load_vocab(rc)
    registry = build_registry(rc.task_mode, list(corpora))
    model = MoeModel(rc.model_config(len(vocab)), registry, seed=rc.init_seed)
    return train(model, vocab, corpora, rc.train, moe_dir(rc), resume=resume, on_step=on_step)


def train_bilingual(rc: RunConfig, src: str, tgt: str,
                    on_step: Callable[[int, float], None] | None = None) -> Path:
    corpora = load_train_corpora(rc)
    if (src, tgt) not in corpora:
        raise KeyError(f"no training corpus for bilingual pair {pair_key(src, tgt)}")
    vocab = load_vocab(rc)
    registry = build_registry(TaskMode.LP, [(src, tgt)])
    cfg = rc.model_config(len(vocab)).dense_baseline()
    model = MoeModel(cfg, registry, seed=rc.init_seed)
    return train(model, vocab, {(src, tgt): corpora[(src, tgt)]}, rc.bilingual_train_config(),
                 bilingual_dir(rc, src, tgt), on_step=on_step)


def build_manifest(rc: RunConfig, checkpoint: str | Path, strategies: list[str] | None = None) -> dict:
    strategies = strategies or rc.eval.strategies
    bil_steps = rc.bilingual_train_config().steps
    bilingual = {pair_key(s, t): str(final_checkpoint(rc, bilingual_dir(rc, s, t), bil_steps))
                 for s, t in rc.bilingual_pairs}
    systems: list[dict] = [{"name": "task_moe", "type": "moe", "checkpoint": str(checkpoint),
                            "strategies": list(strategies)}]
    if bilingual:
        systems.append({"name": "bilingual", "type": "bilingual", "checkpoints": bilingual})
        if rc.eval.pivot:
            systems.append({"name": "pivot", "type": "pivot", "checkpoints": bilingual})
    if rc.eval.pivot_moe:
        systems.append({"name": "pivot_moe", "type": "pivot_moe", "checkpoint": str(checkpoint),
                        "strategy": strategies[0]})
    for extra in rc.eval.systems:
        extra = dict(extra)
        for key in ("checkpoint",):
            if key in extra:
                extra[key] = str(rc.system_path(extra[key]))
        if "checkpoints" in extra:
            extra["checkpoints"] = {k: str(rc.system_path(v)) for k, v in extra["checkpoints"].items()}
        systems.append(extra)
    pairs = rc.eval.pairs or sorted({tuple(sorted((s, t))) for s, t, _ in rc.eval.test_pairs})
    return {"systems": systems, "pairs": [list(p) for p in pairs]}


def evaluate(rc: RunConfig, checkpoint: str | Path, strategies: list[str] | None = None,
             report: str | Path | None = None) -> EvalMatrix:
    manifest = build_manifest(rc, checkpoint, strategies)
    return run_matrix_eval(manifest, load_test_sets(rc), report or rc.paths["report"])


def pair_rows(model: MoeModel, languages: list[str]) -> tuple[list[int], list[str]]:
    """Directional language pairs resolved to task ids with the mode's exact mapping."""
    strategy = "tl_a" if model.registry.mode is TaskMode.TL else "lp_a"
    ids, labels = [], []
    for s in languages:
        for t in languages:
            if s == t:
                continue
            try:
                ids.append(resolve_infer(model.registry, strategy, s, t))
            except UnresolvedTaskError:
                continue
            labels.append(pair_key(s, t))
    return ids, labels


def route_dump(checkpoint: str | Path, layer: int, sides: list[str], out_dir: str | Path,
               by_pair: bool = True) -> dict:
    """Write CSV + SVG heatmaps per side; with both sides also an overlap summary."""
    model, vocab, _ = load_model(checkpoint)
    if not isinstance(model, MoeModel):
        raise TypeError("route-dump needs a task-routed checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if by_pair:
        ids, labels = pair_rows(model, list(vocab.languages))
    else:
        ids, labels = list(range(len(model.registry))), list(model.registry.tasks)
    mats = {}
    written = []
    for side in sides:
        mat = utilization(model, layer, side, ids, labels)
        mats[side] = mat
        stem = f"{side}_layer{layer}"
        written.append(str(export_heatmap(mat, out / f"{stem}.csv", "csv")))
        written.append(str(export_heatmap(mat, out / f"{stem}.svg", "svg")))
    summary: dict = {"files": written, "layer": layer}
    if all(s in mats for s in SIDES):
        stats = overlap_stats(mats["encoder"], mats["decoder"])
        summary["overlap"] = stats.to_dict()
        (out / f"overlap_layer{layer}.json").write_text(json.dumps(summary["overlap"], indent=2) + "\n",
                                                        encoding="utf-8")
    return summary


def run_pipeline(rc: RunConfig, on_step: Callable[[int, float], None] | None = None) -> dict:
    gen_data(rc)
    ckpt = train_moe(rc, on_step=on_step)
    for s, t in rc.bilingual_pairs:
        train_bilingual(rc, s, t)
    matrix = evaluate(rc, ckpt)
    model, _, _ = load_model(ckpt)
    routing = {layer: route_dump(ckpt, layer, list(SIDES), rc.paths["routing"])
               for layer in model.cfg.moe_layers()}
    return {"checkpoint": str(ckpt), "matrix": matrix, "routing": routing}


def save_extracted(checkpoint: str | Path, task_key: str, out: str | Path) -> Path:
    model, vocab, _ = load_model(checkpoint)
    if not isinstance(model, MoeModel):
        raise TypeError("extract needs a task-routed checkpoint")
    dense = model.extract_dense(model.registry.id(task_key))
    save_model(out, dense, vocab)
    return Path(out)
