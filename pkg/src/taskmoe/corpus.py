"""Permutation-cipher toy languages and TSV parallel corpora.

Every toy language shares the same surface symbols ``s0 .. s{B-1}``; a
language renders base symbol ``i`` as ``s{perm[i]}``. English is the identity,
so xx->yy ground truth is ``perm_yy(perm_xx^-1(.))`` and pivoting through
English is exact at the data level.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PIVOT = "en"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelExample:
    src_lang: str
    tgt_lang: str
    src: str
    tgt: str

    def __post_init__(self):
        if not self.src_lang or not self.tgt_lang:
            raise CorpusError("language fields must be nonempty")
        if not self.src.strip() or not self.tgt.strip():
            raise CorpusError("source and target must contain at least one token")

    @property
    def pair(self) -> tuple[str, str]:
        return self.src_lang, self.tgt_lang


def symbol(i: int) -> str:
    return f"s{i}"


def _symbol_index(tok: str) -> int:
    if not tok.startswith("s") or not tok[1:].isdigit():
        raise CorpusError(f"not a base symbol: {tok!r}")
    return int(tok[1:])


@lru_cache(maxsize=None)
def _permutation(code: str, base_vocab: int) -> tuple[int, ...]:
    if code == PIVOT:
        return tuple(range(base_vocab))
    rng = np.random.default_rng(zlib.crc32(code.encode("utf-8")))
    return tuple(int(i) for i in rng.permutation(base_vocab))


@dataclass(frozen=True)
class ToyLanguage:
    code: str
    base_vocab: int

    @property
    def permutation(self) -> tuple[int, ...]:
        return _permutation(self.code, self.base_vocab)

    @property
    def inverse(self) -> tuple[int, ...]:
        inv = [0] * self.base_vocab
        for i, p in enumerate(self.permutation):
            inv[p] = i
        return tuple(inv)

    def render(self, base: Sequence[int]) -> str:
        perm = self.permutation
        return " ".join(symbol(perm[i]) for i in base)

    def unrender(self, text: str) -> list[int]:
        inv = self.inverse
        return [inv[_symbol_index(t)] for t in text.split()]


def cipher_translate(text: str, src: str, tgt: str, base_vocab: int) -> str:
    """Exact reference translation between two toy languages."""
    return ToyLanguage(tgt, base_vocab).render(ToyLanguage(src, base_vocab).unrender(text))


@dataclass
class CorpusSpec:
    languages: list[str]
    pairs: list[tuple[str, str, int]]
    min_len: int = 3
    max_len: int = 8
    base_vocab: int = 16
    seed: int = 0

    def __post_init__(self):
        self.pairs = [(str(s), str(t), int(n)) for s, t, n in self.pairs]
        if PIVOT not in self.languages:
            raise CorpusError(f"languages must include {PIVOT!r}")
        known = set(self.languages)
        for s, t, n in self.pairs:
            for lang in (s, t):
                if lang not in known:
                    raise CorpusError(f"pair {s}-{t} uses unknown language {lang!r}")
            if n <= 0:
                raise CorpusError(f"pair {s}-{t} needs a positive sentence count, got {n}")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError(f"bad sentence length range [{self.min_len}, {self.max_len}]")
        if self.base_vocab < 2:
            raise CorpusError("base_vocab must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> CorpusSpec:
        allowed = {"languages", "pairs", "min_len", "max_len", "base_vocab", "seed"}
        extra = set(d) - allowed
        if extra:
            raise CorpusError(f"unknown corpus keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> CorpusSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs]
        return d


def _pair_rng(seed: int, src: str, tgt: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(src.encode()), zlib.crc32(tgt.encode())])


def underlying_sentences(spec: CorpusSpec, src: str, tgt: str, count: int,
                         exclude: set[tuple[int, ...]] | frozenset = frozenset()) -> list[tuple[int, ...]]:
    """Base-symbol sequences for one pair, skipping any in ``exclude``."""
    rng = _pair_rng(spec.seed, src, tgt)
    out: list[tuple[int, ...]] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise CorpusError(f"could not draw {count} sentences for {src}-{tgt} outside the excluded set")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = tuple(int(i) for i in rng.integers(0, spec.base_vocab, size=n))
        if seq not in exclude:
            out.append(seq)
    return out


def pair_filename(src: str, tgt: str) -> str:
    return f"{src}-{tgt}.tsv"


def gen_corpus(spec: CorpusSpec, out_dir: str | Path | None = None,
               exclude: set[tuple[int, ...]] | frozenset = frozenset()) -> dict[tuple[str, str], list[ParallelExample]]:
    """Render every pair of ``spec``; optionally write one TSV per pair into ``out_dir``."""
    corpora: dict[tuple[str, str], list[ParallelExample]] = {}
    for src, tgt, count in spec.pairs:
        ls, lt = ToyLanguage(src, spec.base_vocab), ToyLanguage(tgt, spec.base_vocab)
        corpora[(src, tgt)] = [ParallelExample(src, tgt, ls.render(seq), lt.render(seq))
                               for seq in underlying_sentences(spec, src, tgt, count, exclude)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (src, tgt), examples in corpora.items():
            write_tsv(out / pair_filename(src, tgt), examples)
    return corpora


def all_underlying(spec: CorpusSpec) -> set[tuple[int, ...]]:
    return {seq for s, t, n in spec.pairs for seq in underlying_sentences(spec, s, t, n)}


def write_tsv(path: str | Path, examples: Iterable[ParallelExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.src_lang}\t{ex.tgt_lang}\t{ex.src}\t{ex.tgt}\n")


def load_tsv(path: str | Path) -> Iterator[ParallelExample]:
    """Stream examples from a 4-column TSV; the file must exist (checked eagerly)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return _iter_tsv(path)


def _iter_tsv(path: Path) -> Iterator[ParallelExample]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 tab-separated columns, found {len(cols)}")
            if not cols[0].strip() or not cols[1].strip():
                raise CorpusError(f"{path}:{lineno}: empty language field")
            try:
                yield ParallelExample(cols[0].strip(), cols[1].strip(), cols[2], cols[3])
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None


def group_by_pair(examples: Iterable[ParallelExample]) -> dict[tuple[str, str], list[ParallelExample]]:
    out: dict[tuple[str, str], list[ParallelExample]] = {}
    for ex in examples:
        out.setdefault(ex.pair, []).append(ex)
    return out
