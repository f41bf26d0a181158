"""Corpus-level BLEU-4 over whitespace tokens with epsilon smoothing."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

MAX_ORDER = 4
SMOOTH_EPS = 0.1


class BleuError(ValueError):
    pass


@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple[float, ...]
    bp: float
    hyp_len: int
    ref_len: int
    matches: tuple[float, ...] = ()
    totals: tuple[int, ...] = ()

    def format(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} ({ps}, BP={self.bp:.4f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precisions"] = list(self.precisions)
        d["matches"] = list(self.matches)
        d["totals"] = list(self.totals)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BleuReport:
        return cls(d["score"], tuple(d["precisions"]), d["bp"], d["hyp_len"], d["ref_len"],
                   tuple(d.get("matches", ())), tuple(d.get("totals", ())))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str], smooth: float = SMOOTH_EPS) -> BleuReport:
    """Zero match counts become ``smooth``.

    An order for which the hypotheses contain no n-grams at all has precision
    1 (nothing was proposed, so nothing is wrong); brevity is left to BP.
    """
    if len(hyps) != len(refs):
        raise BleuError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise BleuError("empty hypothesis list")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            totals[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    smoothed = [m if m > 0 or t == 0 else smooth for m, t in zip(matches, totals)]
    precisions = tuple(m / t if t else 1.0 for m, t in zip(smoothed, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    geo = math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    score = 100.0 * bp * geo
    return BleuReport(score, precisions, bp, hyp_len, ref_len, tuple(smoothed), tuple(totals))
