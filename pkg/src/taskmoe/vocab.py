"""Shared encoder/decoder vocabulary with <4xx>/<2yy> language-tag tokens."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

# Vocabulary size of the large preset; only used for parameter counts.
LARGE_VOCAB_SIZE = 32_000


class VocabError(ValueError):
    pass


class UnknownLanguageError(VocabError):
    pass


def src_tag(lang: str) -> str:
    return f"<4{lang}>"


def tgt_tag(lang: str) -> str:
    return f"<2{lang}>"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    languages: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise VocabError("reserved tokens must occupy ids 0..3")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")
        for lang in self.languages:
            if src_tag(lang) not in index or tgt_tag(lang) not in index:
                raise VocabError(f"missing language tags for {lang!r}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    @property
    def special_ids(self) -> frozenset[int]:
        tags = [self.index[src_tag(l)] for l in self.languages]
        tags += [self.index[tgt_tag(l)] for l in self.languages]
        return frozenset(range(len(RESERVED))) | frozenset(tags)

    def save(self, path: str | Path) -> None:
        # Language list rides along as the set of <4xx> entries; line number = id.
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        tokens = tuple(Path(path).read_text(encoding="utf-8").splitlines())
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> Vocab:
        tokens = tuple(tokens)
        langs = tuple(t[2:-1] for t in tokens if t.startswith("<4") and t.endswith(">"))
        return cls(tokens, langs)


def build_vocab(corpus: Iterable, max_size: int, languages: Iterable[str] | None = None) -> Vocab:
    """Frequency-ranked whitespace vocabulary.

    ``corpus`` yields ParallelExample-like records (``src_lang``, ``tgt_lang``,
    ``src``, ``tgt``). Language tags are added for every language seen plus any
    listed in ``languages``. Ties in frequency break lexicographically.
    """
    counts: Counter[str] = Counter()
    langs = set(languages or ())
    seen_any = False
    for ex in corpus:
        seen_any = True
        langs.update((ex.src_lang, ex.tgt_lang))
        counts.update(ex.src.split())
        counts.update(ex.tgt.split())
    if not seen_any:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    ordered_langs = sorted(langs)
    head = list(RESERVED)
    head += [src_tag(l) for l in ordered_langs]
    head += [tgt_tag(l) for l in ordered_langs]
    if max_size < len(head):
        raise VocabError(f"max_size={max_size} is smaller than the {len(head)} reserved and language tokens")
    taken = set(head)
    ranked = sorted((tok for tok in counts if tok not in taken), key=lambda t: (-counts[t], t))
    return Vocab(tuple(head + ranked[: max_size - len(head)]), tuple(ordered_langs))


def encode_source(v: Vocab, src_lang: str, tgt_lang: str, text: str) -> list[int]:
    for lang in (src_lang, tgt_lang):
        if lang not in v.languages:
            raise UnknownLanguageError(f"unknown language code {lang!r}")
    return [v.index[src_tag(src_lang)], v.index[tgt_tag(tgt_lang)]] + [v.id(t) for t in text.split()] + [EOS]


def encode_target(v: Vocab, text: str) -> list[int]:
    return [BOS] + [v.id(t) for t in text.split()] + [EOS]


def decode(v: Vocab, ids: Iterable[int]) -> str:
    special = v.special_ids
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(v):
            raise VocabError(f"token id {i} out of range for vocabulary of size {len(v)}")
        if i not in special:
            out.append(v.tokens[i])
    return " ".join(out)
