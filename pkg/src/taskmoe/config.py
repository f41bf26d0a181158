"""Run configuration: one JSON document driving gen-data, train, evaluate and route-dump."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusError, CorpusSpec
from .model import ConfigError, MoeConfig
from .tasks import Strategy, TaskMode
from .training import TrainConfig

SECTIONS = {"corpus", "model", "train", "eval", "paths"}
PATH_KEYS = {"data": "data", "test": "test", "vocab": "data/vocab.txt", "run": "run",
             "report": "report.json", "routing": "routing"}
EVAL_KEYS = {"test_pairs", "test_seed", "pairs", "strategies", "pivot", "pivot_moe", "systems"}
BILINGUAL_KEYS = {"pairs", "steps", "lr", "warmup", "checkpoint_interval"}


class RunConfigError(ValueError):
    pass


@dataclass
class EvalSpec:
    test_pairs: list[tuple[str, str, int]]
    test_seed: int = 1
    pairs: list[tuple[str, str]] = field(default_factory=list)
    strategies: list[str] = field(default_factory=list)
    pivot: bool = True
    pivot_moe: bool = True
    systems: list[dict] = field(default_factory=list)


@dataclass
class RunConfig:
    root: Path
    corpus: CorpusSpec
    model: dict
    task_mode: TaskMode
    init_seed: int
    train: TrainConfig
    bilingual: dict
    eval: EvalSpec
    paths: dict[str, Path]

    def model_config(self, vocab_size: int) -> MoeConfig:
        return MoeConfig.from_dict({**self.model, "vocab_size": vocab_size})

    @property
    def vocab_max_size(self) -> int:
        return int(self.model.get("vocab_size", 1000))

    def bilingual_train_config(self) -> TrainConfig:
        over = {k: v for k, v in self.bilingual.items() if k != "pairs"}
        return TrainConfig.from_dict({**self.train.to_dict(), **over})

    @property
    def bilingual_pairs(self) -> list[tuple[str, str]]:
        return [tuple(p) for p in self.bilingual.get("pairs", [])]

    def system_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise RunConfigError(f"section {where!r} must be a JSON object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise RunConfigError(f"unknown key {extra[0]!r} in section {where!r}")


def parse_run_config(raw: dict, root: Path) -> RunConfig:
    _check_keys(raw, SECTIONS, "<top level>")
    for sec in ("corpus", "model", "train"):
        if sec not in raw:
            raise RunConfigError(f"missing section {sec!r}")
    try:
        corpus = CorpusSpec.from_dict(raw["corpus"])
    except (CorpusError, TypeError) as exc:
        raise RunConfigError(f"corpus: {exc}") from exc

    model = dict(raw["model"])
    mode = model.pop("task_mode", "TL")
    init_seed = int(model.pop("init_seed", 0))
    try:
        task_mode = TaskMode(mode)
        MoeConfig.from_dict({**model, "vocab_size": model.get("vocab_size", 64)})
    except (ConfigError, ValueError, TypeError) as exc:
        raise RunConfigError(f"model: {exc}") from exc

    train = dict(raw["train"])
    bilingual = train.pop("bilingual", {})
    _check_keys(bilingual, BILINGUAL_KEYS, "train.bilingual")
    try:
        train_cfg = TrainConfig.from_dict(train)
    except (ValueError, TypeError) as exc:
        raise RunConfigError(f"train: {exc}") from exc

    ev = raw.get("eval", {})
    _check_keys(ev, EVAL_KEYS, "eval")
    strategies = ev.get("strategies") or (["tl_a", "tl_b"] if task_mode is TaskMode.TL else ["lp_a", "lp_b", "lp_c"])
    for st in strategies:
        try:
            if Strategy(st).mode is not task_mode:
                raise RunConfigError(f"eval: strategy {st!r} does not fit task_mode {task_mode.value}")
        except ValueError as exc:
            raise RunConfigError(f"eval: unknown strategy {st!r}") from exc
    eval_spec = EvalSpec(
        test_pairs=[(s, t, int(n)) for s, t, n in ev.get("test_pairs", [])],
        test_seed=int(ev.get("test_seed", corpus.seed + 1)),
        pairs=[tuple(p) for p in ev.get("pairs", [])],
        strategies=list(strategies),
        pivot=bool(ev.get("pivot", True)),
        pivot_moe=bool(ev.get("pivot_moe", True)),
        systems=list(ev.get("systems", [])),
    )
    known_langs = set(corpus.languages)
    for s, t, *_ in list(eval_spec.test_pairs) + list(eval_spec.pairs) + [tuple(p) for p in bilingual.get("pairs", [])]:
        if s not in known_langs or t not in known_langs:
            raise RunConfigError(f"pair {s}-{t} uses a language missing from corpus.languages")

    paths_raw = raw.get("paths", {})
    _check_keys(paths_raw, set(PATH_KEYS), "paths")
    paths = {k: (root / paths_raw.get(k, default)).resolve() for k, default in PATH_KEYS.items()}
    return RunConfig(root, corpus, model, task_mode, init_seed, train_cfg, bilingual, eval_spec, paths)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_run_config(raw, path.resolve().parent)
