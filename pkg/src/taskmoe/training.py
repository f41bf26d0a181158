"""Temperature sampling, Adam with inverse-sqrt warmup, and the checkpointed train loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_model, save_model
from .corpus import ParallelExample
from .model import MoeModel, pad_batch
from .tasks import resolve_train
from .vocab import PAD, Vocab, encode_source, encode_target

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class SamplerSpec:
    counts: dict[tuple[str, str], int]
    temperature: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"sampling temperature must be positive, got {self.temperature}")
        if not self.counts:
            raise ValueError("sampler needs at least one pair")
        for pair, n in self.counts.items():
            if n <= 0:
                raise ValueError(f"pair {pair} needs a positive count, got {n}")


def pair_probs(spec: SamplerSpec) -> dict[tuple[str, str], float]:
    """p_i proportional to (n_i / sum n)^(1/T)."""
    if spec.temperature <= 0:
        raise ValueError(f"sampling temperature must be positive, got {spec.temperature}")
    keys = list(spec.counts)
    n = np.array([spec.counts[k] for k in keys], dtype=np.float64)
    # log space keeps huge T and tiny fractions well-conditioned
    logw = np.log(n / n.sum()) / spec.temperature
    w = np.exp(logw - logw.max())
    p = w / w.sum()
    return dict(zip(keys, (float(x) for x in p)))


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_len: int = 16
    steps: int = 1000
    lr: float = 2e-3
    warmup: int = 200
    seed: int = 0
    checkpoint_interval: int = 500
    temperature: float = 5.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_len < 3:
            raise ValueError("max_len must be at least 3")
        if self.steps < 0 or self.checkpoint_interval < 1:
            raise ValueError("steps must be >= 0 and checkpoint_interval >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    examples: list[ParallelExample]
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tasks: np.ndarray


def truncate(ex: ParallelExample, max_len: int) -> ParallelExample:
    """Clip token counts so encoded source and decoder input both fit in ``max_len``."""
    src = ex.src.split()[: max_len - 3]
    tgt = ex.tgt.split()[: max_len - 2]
    return ParallelExample(ex.src_lang, ex.tgt_lang, " ".join(src), " ".join(tgt))


def make_batch(vocab: Vocab, registry, examples: Sequence[ParallelExample], max_len: int) -> Batch:
    examples = [truncate(ex, max_len) for ex in examples]
    src = pad_batch([encode_source(vocab, ex.src_lang, ex.tgt_lang, ex.src) for ex in examples])
    tgt = pad_batch([encode_target(vocab, ex.tgt) for ex in examples])
    tasks = np.array([resolve_train(registry, ex) for ex in examples], dtype=np.int64)
    return Batch(examples, src, tgt[:, :-1], tgt[:, 1:], tasks)


class TemperatureSampler:
    """Draws pairs i.i.d. from temperature-scaled probabilities, sentences uniformly within a pair.

    Draw ``i`` depends only on ``(seed, i)``, so any batch can be regenerated
    without replaying earlier ones.
    """

    def __init__(self, corpora: Mapping[tuple[str, str], Sequence[ParallelExample]],
                 temperature: float = 5.0, seed: int = 0, counts: Mapping | None = None):
        self.corpora = {k: list(v) for k, v in corpora.items()}
        counts = dict(counts) if counts is not None else {k: len(v) for k, v in self.corpora.items()}
        self.spec = SamplerSpec(counts, temperature, seed)
        probs = pair_probs(self.spec)
        self.pairs = list(probs)
        self.probs = np.array([probs[p] for p in self.pairs])
        self.seed = seed

    def draw_pairs(self, index: int, n: int) -> list[tuple[str, str]]:
        rng = np.random.default_rng([self.seed, index])
        picks = rng.choice(len(self.pairs), size=n, p=self.probs)
        return [self.pairs[i] for i in picks]

    def sample(self, index: int, batch_size: int) -> list[ParallelExample]:
        rng = np.random.default_rng([self.seed, index])
        picks = rng.choice(len(self.pairs), size=batch_size, p=self.probs)
        out = []
        for i in picks:
            pool = self.corpora.get(self.pairs[i])
            if not pool:
                raise ValueError(f"sampled pair {self.pairs[i]} has an empty corpus")
            out.append(pool[int(rng.integers(len(pool)))])
        return out


def sample_batch(sampler: TemperatureSampler, vocab: Vocab, registry, batch_size: int,
                 max_len: int, index: int) -> Batch:
    return make_batch(vocab, registry, sampler.sample(index, batch_size), max_len)


class Adam:
    """Adam (beta1=0.9, beta2=0.98, eps=1e-9) with inverse-sqrt warmup."""

    def __init__(self, params: Mapping[str, T.Tensor], lr: float, warmup: int = 0,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9,
                 clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def rate(self, step: int) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.rate(t)
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in self.params.items()}
        if self.clip_norm:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        c1 = 1 - self.b1 ** t
        c2 = 1 - self.b2 ** t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"optim.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"optim.v.{k}"], dtype=np.float64)
        self.step_count = step_count


def batch_loss(model: MoeModel, batch: Batch) -> T.Tensor:
    logits, aux = model.forward_with_aux(batch.src, batch.tgt_in, batch.tasks)
    loss = T.cross_entropy(logits, batch.tgt_out, PAD)
    return loss if aux is None else loss + aux


def train_step(model: MoeModel, batch: Batch, opt: Adam) -> float:
    loss = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        opt.zero_grad()
        raise NonFiniteLossError(f"non-finite loss {value} at optimizer step {opt.step_count + 1}")
    T.backward(loss)
    opt.step()
    opt.zero_grad()
    return value


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.bin"


def train(model: MoeModel, vocab: Vocab, corpora: Mapping[tuple[str, str], Sequence[ParallelExample]],
          cfg: TrainConfig, out_dir: str | Path, resume: str | Path | None = None,
          on_step: Callable[[int, float], None] | None = None) -> Path:
    """Run ``cfg.steps`` optimizer steps, writing checkpoints and ``metrics.tsv`` into ``out_dir``.

    Returns the path of the final checkpoint. Resuming restores parameters,
    optimizer moments and the step counter; the batch stream is a pure
    function of (seed, step), so a resumed run matches an uninterrupted one.
    """
    if cfg.max_len > model.cfg.max_len:
        raise ValueError(f"train max_len={cfg.max_len} exceeds model max_len={model.cfg.max_len}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler = TemperatureSampler(corpora, cfg.temperature, cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.warmup, clip_norm=cfg.clip_norm)
    start = 0
    metrics = out / "metrics.tsv"
    lines: list[str] = []
    if resume is not None:
        loaded, _, ckpt = load_model(resume)
        for name, p in loaded.params.items():
            model.params[name].data[...] = p.data
        start = int(ckpt.meta["step"])
        opt.load_state_arrays(ckpt.tensors, start)
        if metrics.exists():
            lines = [ln for ln in metrics.read_text().splitlines()
                     if ln and int(ln.split("\t")[0]) <= start]
    try:
        fh = open(metrics, "w", encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot write metrics log {metrics}: {exc}") from exc
    final = out / checkpoint_name(start)
    with fh:
        for ln in lines:
            fh.write(ln + "\n")
        for step in range(start + 1, cfg.steps + 1):
            batch = sample_batch(sampler, vocab, model.registry, cfg.batch_size, cfg.max_len, step)
            loss = train_step(model, batch, opt)
            fh.write(f"{step}\t{loss!r}\n")
            fh.flush()
            if on_step is not None:
                on_step(step, loss)
            if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
                final = out / checkpoint_name(step)
                save_model(final, model, vocab,
                           meta={"step": step, "train": cfg.to_dict(), "seed": model.seed},
                           extra=opt.state_arrays())
                log.info("wrote %s", final)
    if start >= cfg.steps and not final.exists():
        save_model(final, model, vocab, meta={"step": start, "train": cfg.to_dict(), "seed": model.seed},
                   extra=opt.state_arrays())
    return final
