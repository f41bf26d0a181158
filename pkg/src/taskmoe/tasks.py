"""Task universe (LP or TL mode) and inference-time task mappings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PIVOT = "en"


class TaskMode(str, enum.Enum):
    LP = "LP"
    TL = "TL"


class Strategy(str, enum.Enum):
    LP_A = "lp_a"
    LP_B = "lp_b"
    LP_C = "lp_c"
    TL_A = "tl_a"
    TL_B = "tl_b"

    @property
    def mode(self) -> TaskMode:
        return TaskMode.LP if self.value.startswith("lp") else TaskMode.TL


class TaskError(LookupError):
    pass


class UnresolvedTaskError(TaskError):
    """The mapped task key was never part of the training universe."""


def pair_key(src: str, tgt: str) -> str:
    return f"{src}-{tgt}"


@dataclass(frozen=True)
class TaskRegistry:
    mode: TaskMode
    tasks: tuple[str, ...]
    ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        object.__setattr__(self, "ids", {k: i for i, k in enumerate(self.tasks)})
        if len(self.ids) != len(self.tasks):
            raise TaskError("duplicate task key")

    def __len__(self) -> int:
        return len(self.tasks)

    def id(self, key: str) -> int:
        try:
            return self.ids[key]
        except KeyError:
            raise UnresolvedTaskError(f"task {key!r} is not in the {self.mode.value} training universe") from None

    def key(self, task_id: int) -> str:
        if not 0 <= task_id < len(self.tasks):
            raise TaskError(f"task id {task_id} out of range [0, {len(self.tasks)})")
        return self.tasks[task_id]

    def dumps(self) -> str:
        return "".join(f"{k}\t{i}\n" for i, k in enumerate(self.tasks))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(f"#mode\t{self.mode.value}\n" + self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> TaskRegistry:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        mode = TaskMode(lines[0].split("\t")[1])
        entries = sorted((int(i), k) for k, i in (ln.split("\t") for ln in lines[1:] if ln))
        if [i for i, _ in entries] != list(range(len(entries))):
            raise TaskError(f"{path}: task ids are not dense")
        return cls(mode, tuple(k for _, k in entries))

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "tasks": list(self.tasks)}

    @classmethod
    def from_dict(cls, d: dict) -> TaskRegistry:
        return cls(TaskMode(d["mode"]), tuple(d["tasks"]))


def build_registry(mode: TaskMode | str, training_pairs: Iterable[tuple[str, str]]) -> TaskRegistry:
    mode = TaskMode(mode)
    pairs = list(training_pairs)
    if not pairs:
        raise TaskError("cannot build a task registry without training pairs")
    if mode is TaskMode.LP:
        keys = {pair_key(s, t) for s, t in pairs}
    else:
        keys = {t for _, t in pairs}
    return TaskRegistry(mode, tuple(sorted(keys)))


def resolve_train(reg: TaskRegistry, ex) -> int:
    """Task id for a training example (anything with ``src_lang``/``tgt_lang``)."""
    if reg.mode is TaskMode.LP:
        return reg.id(pair_key(ex.src_lang, ex.tgt_lang))
    return reg.id(ex.tgt_lang)


def mapped_key(strategy: Strategy | str, src: str, tgt: str) -> str:
    strategy = Strategy(strategy)
    return {
        Strategy.LP_A: pair_key(src, tgt),
        Strategy.LP_B: pair_key(PIVOT, tgt),
        Strategy.LP_C: pair_key(src, PIVOT),
        Strategy.TL_A: tgt,
        Strategy.TL_B: src,
    }[strategy]


def resolve_infer(reg: TaskRegistry, strategy: Strategy | str, src: str, tgt: str) -> int:
    strategy = Strategy(strategy)
    if strategy.mode is not reg.mode:
        raise TaskError(f"strategy {strategy.value} needs a {strategy.mode.value}-mode registry, "
                        f"got {reg.mode.value}")
    key = mapped_key(strategy, src, tgt)
    try:
        return reg.id(key)
    except UnresolvedTaskError:
        raise UnresolvedTaskError(
            f"{strategy.value} maps {src}->{tgt} to task {key!r}, which was not trained") from None
