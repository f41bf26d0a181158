"""Encoder-decoder transformer with task-routed expert FFN banks.

Each MoE sublayer owns a bank of identically shaped FFN experts and a router
(task embedding table + linear projection to expert logits). Routing is a
function of the task id alone: every token of a sequence goes through the
same two experts, mixed by gates that sum to one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import PAD, LARGE_VOCAB_SIZE

SIDES = ("encoder", "decoder")
_SIDE_PREFIX = {"encoder": "enc", "decoder": "dec"}
MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


class RoutingError(IndexError):
    pass


@dataclass(frozen=True)
class MoeConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 2
    n_layers: int = 2
    n_experts: int = 8
    top_k: int = 2
    vocab_size: int = 64
    max_len: int = 32
    moe_every_layer: bool = True
    d_task: int = 16
    # "renorm": softmax over the selected logits; "full": softmax over all, then keep top-k.
    gating: str = "renorm"
    balance_coef: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_heads", "n_layers", "n_experts", "top_k", "vocab_size", "d_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_experts > 1 and self.top_k > self.n_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.n_experts == 1 and self.top_k not in (1, 2):
            raise ConfigError(f"top_k={self.top_k} is meaningless for a single expert")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be at least 3, got {self.max_len}")
        if self.gating not in ("renorm", "full"):
            raise ConfigError(f"unknown gating {self.gating!r}")

    @property
    def is_dense(self) -> bool:
        return self.n_experts == 1

    def moe_layers(self) -> list[int]:
        if self.is_dense:
            return []
        if self.moe_every_layer:
            return list(range(self.n_layers))
        return [i for i in range(self.n_layers) if i % 2 == 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MoeConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def large_preset(cls, n_experts: int = 16) -> MoeConfig:
        return cls(d_model=1024, d_ff=4096, n_heads=8, n_layers=3, n_experts=n_experts,
                   vocab_size=LARGE_VOCAB_SIZE, max_len=128, d_task=64)

    def dense_baseline(self) -> MoeConfig:
        """Same architecture with a single plain FFN per layer (bilingual baseline)."""
        return MoeConfig(**{**asdict(self), "n_experts": 1, "top_k": 1, "balance_coef": 0.0})


def param_count(cfg: MoeConfig, n_tasks: int = 1) -> int:
    """Closed-form number of trainable scalars in ``MoeModel(cfg, registry with n_tasks)``."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = 2 * d * f + f + d
    router = n_tasks * cfg.d_task + cfg.d_task * cfg.n_experts + cfg.n_experts
    moe = cfg.n_experts * ffn + router
    moe_set = set(cfg.moe_layers())
    total = v * d + d * v + v + 2 * ln
    for i in range(cfg.n_layers):
        block = moe if i in moe_set else ffn
        total += attn + 2 * ln + block
        total += 2 * attn + 3 * ln + block
    return total


@dataclass(frozen=True)
class RoutingDecision:
    task: int
    layer: int
    side: str
    experts: tuple[int, ...]
    gates: tuple[float, ...]


def select_experts(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits; ties go to the lower index."""
    return np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")[:k]


def top_k_gates(logits: Tensor, k: int, gating: str = "renorm") -> tuple[np.ndarray, Tensor]:
    chosen = select_experts(logits.data, k)
    T.record_branch(chosen)
    if gating == "renorm":
        return chosen, T.softmax(T.take(logits, chosen, axis=0), axis=0)
    return chosen, T.take(T.softmax(logits, axis=0), chosen, axis=0)


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    rates = np.power(10000.0, -(np.arange(0, d, 2) / d))
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table


def _ffn_apply(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def padding_mask(ids: np.ndarray) -> np.ndarray:
    """Additive key mask of shape (B, 1, 1, L)."""
    return np.where(ids == PAD, MASK_VALUE, 0.0)[:, None, None, :]


def causal_mask(ids: np.ndarray) -> np.ndarray:
    n = ids.shape[1]
    future = np.triu(np.full((n, n), MASK_VALUE), k=1)
    return future[None, None, :, :] + padding_mask(ids)


class Seq2Seq:
    """Shared transformer body; subclasses decide what the FFN sublayer does."""

    cfg: MoeConfig
    params: dict[str, Tensor]

    def __init__(self, cfg: MoeConfig):
        self.cfg = cfg
        self._pos = sinusoid_table(cfg.max_len, cfg.d_model)

    # -- parameters ---------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        # parameter tensors are updated in place, so the grouping can be memoized
        cache = self.__dict__.setdefault("_sub_cache", {})
        if prefix not in cache:
            n = len(prefix)
            cache[prefix] = {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}
        return cache[prefix]

    # -- blocks ---------------------------------------------------------------------
    def _embed(self, ids: np.ndarray) -> Tensor:
        cfg = self.cfg
        if ids.shape[1] > cfg.max_len:
            raise ConfigError(f"sequence length {ids.shape[1]} exceeds max_len={cfg.max_len}")
        x = T.take(self.params["embed"], ids, axis=0) * math.sqrt(cfg.d_model)
        return T.add_const(x, self._pos[: ids.shape[1]])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"], self.cfg.ln_eps)

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        b, lq, d = q_in.shape
        lk = kv_in.shape[1]
        h = self.cfg.n_heads
        dh = d // h

        def heads(x: Tensor, name: str, n: int) -> Tensor:
            y = x @ p[f"{prefix}.w{name}"] + p[f"{prefix}.b{name}"]
            return y.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(q_in, "q", lq), heads(kv_in, "k", lk), heads(kv_in, "v", lk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = T.softmax(T.add_const(scores, mask), axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

    def _ffn(self, x: Tensor, layer: int, side: str, task_ids: np.ndarray | None,
             aux: list | None = None) -> Tensor:
        raise NotImplementedError

    def encode(self, src_ids: np.ndarray, task_ids: np.ndarray | None, aux: list | None = None) -> Tensor:
        x = self._embed(src_ids)
        mask = padding_mask(src_ids)
        for i in range(self.cfg.n_layers):
            pre = f"enc.{i}"
            h = self._ln(x, pre + ".ln1")
            x = x + self._attention(pre + ".attn", h, h, mask)
            x = x + self._ffn(self._ln(x, pre + ".ln2"), i, "encoder", task_ids, aux)
        return self._ln(x, "enc.ln_f")

    def decode(self, memory: Tensor, src_ids: np.ndarray, tgt_ids: np.ndarray,
               task_ids: np.ndarray | None, aux: list | None = None) -> Tensor:
        y = self._embed(tgt_ids)
        self_mask = causal_mask(tgt_ids)
        cross_mask = padding_mask(src_ids)
        for i in range(self.cfg.n_layers):
            pre = f"dec.{i}"
            h = self._ln(y, pre + ".ln1")
            y = y + self._attention(pre + ".self", h, h, self_mask)
            y = y + self._attention(pre + ".cross", self._ln(y, pre + ".ln2"), memory, cross_mask)
            y = y + self._ffn(self._ln(y, pre + ".ln3"), i, "decoder", task_ids, aux)
        y = self._ln(y, "dec.ln_f")
        return y @ self.params["out.w"] + self.params["out.b"]


def _check_ids(ids, name: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a (batch, length) array, got shape {arr.shape}")
    return arr


def _init_params(cfg: MoeConfig, n_tasks: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    params: dict[str, Tensor] = {}

    def w(name: str, fan_in: int, shape: tuple[int, ...]):
        params[name] = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), name)

    def zeros(name: str, shape: tuple[int, ...]):
        params[name] = T.parameter(np.zeros(shape), name)

    def ln(prefix: str):
        params[prefix + ".g"] = T.parameter(np.ones(d), prefix + ".g")
        zeros(prefix + ".b", (d,))

    def attn(prefix: str):
        for n in ("q", "k", "v", "o"):
            w(f"{prefix}.w{n}", d, (d, d))
            zeros(f"{prefix}.b{n}", (d,))

    def ffn(prefix: str):
        w(prefix + ".w1", d, (d, f))
        zeros(prefix + ".b1", (f,))
        w(prefix + ".w2", f, (f, d))
        zeros(prefix + ".b2", (d,))

    def ffn_block(prefix: str, layer: int):
        if layer not in moe_set:
            ffn(prefix + ".ffn")
            return
        for e in range(cfg.n_experts):
            ffn(f"{prefix}.moe.expert.{e}")
        w(prefix + ".moe.router.task_emb", 1, (n_tasks, cfg.d_task))
        w(prefix + ".moe.router.w", cfg.d_task, (cfg.d_task, cfg.n_experts))
        zeros(prefix + ".moe.router.b", (cfg.n_experts,))

    moe_set = set(cfg.moe_layers())
    w("embed", d, (v, d))
    for i in range(cfg.n_layers):
        pre = f"enc.{i}"
        ln(pre + ".ln1")
        attn(pre + ".attn")
        ln(pre + ".ln2")
        ffn_block(pre, i)
    ln("enc.ln_f")
    for i in range(cfg.n_layers):
        pre = f"dec.{i}"
        ln(pre + ".ln1")
        attn(pre + ".self")
        ln(pre + ".ln2")
        attn(pre + ".cross")
        ln(pre + ".ln3")
        ffn_block(pre, i)
    ln("dec.ln_f")
    w("out.w", d, (d, v))
    zeros("out.b", (v,))
    return params


class MoeModel(Seq2Seq):
    """Task-routed MoE transformer. ``registry`` fixes the task universe."""

    def __init__(self, cfg: MoeConfig, registry, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        super().__init__(cfg)
        self.registry = registry
        self.n_tasks = len(registry)
        self.seed = seed
        self.params = params if params is not None else _init_params(cfg, self.n_tasks, seed)

    # -- routing -------------------------------------------------------------------
    def _router(self, layer: int, side: str) -> dict[str, Tensor]:
        if side not in SIDES:
            raise RoutingError(f"side must be one of {SIDES}, got {side!r}")
        if layer not in self.cfg.moe_layers():
            raise RoutingError(f"{side} layer {layer} has no expert bank")
        return self._sub(f"{_SIDE_PREFIX[side]}.{layer}.moe.router.")

    def _check_task(self, task: int) -> int:
        task = int(task)
        if not 0 <= task < self.n_tasks:
            raise RoutingError(f"task id {task} out of range [0, {self.n_tasks})")
        return task

    def router_logits(self, layer: int, side: str, task: int) -> Tensor:
        r = self._router(layer, side)
        task = self._check_task(task)
        emb = T.take(r["task_emb"], np.array([task]), axis=0)
        return (emb @ r["w"] + r["b"]).reshape(self.cfg.n_experts)

    def _route(self, layer: int, side: str, task: int) -> tuple[np.ndarray, Tensor]:
        return top_k_gates(self.router_logits(layer, side, task), self.cfg.top_k, self.cfg.gating)

    def route(self, layer: int, side: str, task: int) -> RoutingDecision:
        with T.no_grad():
            experts, gates = self._route(layer, side, task)
        return RoutingDecision(int(task), layer, side, tuple(int(e) for e in experts),
                               tuple(float(g) for g in gates.data))

    def _ffn(self, x: Tensor, layer: int, side: str, task_ids: np.ndarray | None,
             aux: list | None = None) -> Tensor:
        prefix = f"{_SIDE_PREFIX[side]}.{layer}"
        if layer not in self.cfg.moe_layers():
            return _ffn_apply(x, self._sub(prefix + ".ffn."))
        groups = []
        importance = None
        for task in np.unique(task_ids):
            experts, gates = self._route(layer, side, int(task))
            rows = np.flatnonzero(task_ids == task)
            xs = x if rows.size == x.shape[0] else T.take(x, rows, axis=0)
            out = None
            for j, e in enumerate(experts):
                term = T.take(gates, np.array(j), axis=0) * _ffn_apply(xs, self._sub(f"{prefix}.moe.expert.{e}."))
                out = term if out is None else out + term
            groups.append((rows, out))
            if self.cfg.balance_coef > 0:
                share = _scatter_gates(gates, experts, self.cfg.n_experts) * float(rows.size)
                importance = share if importance is None else importance + share
        if importance is not None and aux is not None:
            # squared coefficient of variation of per-expert gate mass, up to a constant
            aux.append((importance * importance).sum() * (self.cfg.n_experts / x.shape[0] ** 2))
        if len(groups) == 1:
            return groups[0][1]
        order = np.concatenate([rows for rows, _ in groups])
        return T.take(T.concat([out for _, out in groups], axis=0), np.argsort(order), axis=0)

    # -- forward -------------------------------------------------------------------
    def _check_tasks(self, task_ids, batch: int) -> np.ndarray:
        tasks = np.asarray(task_ids, dtype=np.int64).reshape(-1)
        if tasks.size != batch:
            raise ConfigError(f"need one task id per sequence ({batch}), got {tasks.size}")
        for t in np.unique(tasks):
            self._check_task(t)
        return tasks

    def forward(self, src_ids, tgt_ids, task_ids) -> Tensor:
        """Logits of shape (batch, tgt_len, vocab) for teacher-forced decoder input ``tgt_ids``."""
        logits, _ = self.forward_with_aux(src_ids, tgt_ids, task_ids)
        return logits

    __call__ = forward

    def forward_with_aux(self, src_ids, tgt_ids, task_ids) -> tuple[Tensor, Tensor | None]:
        src = _check_ids(src_ids, "src_ids")
        tgt = _check_ids(tgt_ids, "tgt_ids")
        tasks = self._check_tasks(task_ids, src.shape[0])
        terms: list[Tensor] = []
        memory = self.encode(src, tasks, terms)
        logits = self.decode(memory, src, tgt, tasks, terms)
        if not terms:
            return logits, None
        aux = terms[0]
        for term in terms[1:]:
            aux = aux + term
        return logits, aux * self.cfg.balance_coef

    def extract_dense(self, task: int) -> DenseModel:
        task = self._check_task(task)
        keep: dict[str, Tensor] = {}
        mixes: dict[tuple[int, str], list[tuple[float, str]]] = {}
        moe = set(self.cfg.moe_layers())
        for name, p in self.params.items():
            if ".moe." not in name:
                keep[name] = T.parameter(p.data.copy(), name)
        for side in SIDES:
            for layer in moe:
                dec = self.route(layer, side, task)
                prefix = f"{_SIDE_PREFIX[side]}.{layer}"
                terms = []
                for slot, (e, g) in enumerate(zip(dec.experts, dec.gates)):
                    new = f"{prefix}.mix.{slot}."
                    for part in ("w1", "b1", "w2", "b2"):
                        keep[new + part] = T.parameter(self.params[f"{prefix}.moe.expert.{e}.{part}"].data.copy(),
                                                       new + part)
                    terms.append((g, new))
                mixes[(layer, side)] = terms
        return DenseModel(self.cfg, keep, mixes, task_key=self.registry.key(task))


def _scatter_gates(gates: Tensor, experts: np.ndarray, n_experts: int) -> Tensor:
    onehot = np.zeros((len(experts), n_experts))
    onehot[np.arange(len(experts)), experts] = 1.0
    return gates.reshape(1, len(experts)) @ Tensor(onehot)


class DenseModel(Seq2Seq):
    """Router-free model for one task: every former MoE layer is a fixed gated pair of FFNs."""

    def __init__(self, cfg: MoeConfig, params: dict[str, Tensor],
                 mixes: dict[tuple[int, str], list[tuple[float, str]]], task_key: str = ""):
        super().__init__(cfg)
        self.params = params
        self.mixes = mixes
        self.task_key = task_key

    def _ffn(self, x: Tensor, layer: int, side: str, task_ids: np.ndarray | None,
             aux: list | None = None) -> Tensor:
        prefix = f"{_SIDE_PREFIX[side]}.{layer}"
        if (layer, side) not in self.mixes:
            return _ffn_apply(x, self._sub(prefix + ".ffn."))
        out = None
        for g, sub in self.mixes[(layer, side)]:
            term = Tensor(g) * _ffn_apply(x, self._sub(sub))
            out = term if out is None else out + term
        return out

    def forward(self, src_ids, tgt_ids, task_ids=None) -> Tensor:
        src = _check_ids(src_ids, "src_ids")
        tgt = _check_ids(tgt_ids, "tgt_ids")
        return self.decode(self.encode(src, None), src, tgt, None)

    __call__ = forward

    def mix_table(self) -> list[dict]:
        return [{"layer": layer, "side": side, "gates": [g for g, _ in terms]}
                for (layer, side), terms in sorted(self.mixes.items())]


def batch_routing(model: MoeModel, task_ids: Iterable[int]) -> dict[tuple[int, str, int], RoutingDecision]:
    """Decision for every (layer, side, task) touched by a batch."""
    out = {}
    for task in sorted(set(int(t) for t in task_ids)):
        for side in SIDES:
            for layer in model.cfg.moe_layers():
                out[(layer, side, task)] = model.route(layer, side, task)
    return out


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
