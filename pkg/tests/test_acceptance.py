"""Acceptance criteria 1-10, one verdict line each (echoed in the terminal summary)."""

import json
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from taskmoe import tensor as T
from taskmoe.bleu import corpus_bleu
from taskmoe.checkpoint import load_model
from taskmoe.config import load_run_config
from taskmoe.corpus import CorpusSpec, gen_corpus
from taskmoe.evaluation import greedy_decode_batch
from taskmoe.model import MoeConfig, MoeModel, param_count
from taskmoe.pipeline import load_test_sets, run_pipeline
from taskmoe.routing import read_csv
from taskmoe.tasks import UnresolvedTaskError, build_registry, resolve_infer
from taskmoe.training import SamplerSpec, TemperatureSampler, pair_probs
from taskmoe.vocab import BOS, EOS, PAD

from bleu_oracle import brute_bleu
from conftest import ACCEPTANCE_LINES, tiny_config
from test_bleu import random_corpus
from test_tensor import OP_CASES, full_moe_grad_error
from test_training import decimal_probs

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy_tl.json"


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _pipeline(dest: Path) -> SimpleNamespace:
    dest.mkdir(parents=True, exist_ok=True)
    shutil.copy(CONFIG, dest / CONFIG.name)
    rc = load_run_config(dest / CONFIG.name)
    t0 = time.perf_counter()
    result = run_pipeline(rc)
    return SimpleNamespace(rc=rc, root=dest, result=result, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("pipeline_a"))


# -- 1 ---------------------------------------------------------------------------------

def test_c1_parameter_counts():
    t0 = time.perf_counter()
    counts = {e: param_count(MoeConfig.large_preset(e), n_tasks=108) for e in (16, 64)}
    elapsed = time.perf_counter() - t0
    targets = {16: 1.0e9, 64: 3.5e9}
    rel = {e: counts[e] / targets[e] - 1 for e in counts}
    ok = all(abs(r) <= 0.15 for r in rel.values()) and elapsed < 1.0
    verdict(1, ok, "; ".join(f"{e} experts {counts[e] / 1e9:.3f}e9 ({rel[e]:+.1%} vs {targets[e] / 1e9:.1f}e9)"
                             for e in counts) + " [tol 15%]")


# -- 2 ---------------------------------------------------------------------------------

def test_c2_gradient_integrity():
    t0 = time.perf_counter()
    op_worst = 0.0
    for op in sorted(OP_CASES):
        for seed in range(20):
            f, x = OP_CASES[op](np.random.default_rng(seed))
            op_worst = max(op_worst, T.grad_check(f, x, h=1e-4, skip_kinks=True))
    model_worst, skipped = 0.0, 0
    for seed in range(20):
        worst, skip = full_moe_grad_error(seed)
        model_worst, skipped = max(model_worst, worst), skipped + skip
    elapsed = time.perf_counter() - t0
    ok = op_worst < 1e-4 and model_worst < 1e-4 and elapsed < 60
    verdict(2, ok, f"{len(OP_CASES)} ops x 20 seeds max rel err {op_worst:.2e}; full MoE x 20 seeds "
                   f"{model_worst:.2e} ({skipped} kink coords skipped) [tol 1e-4], {elapsed:.0f}s [limit 60s]")


# -- 3 ---------------------------------------------------------------------------------

LANGS = ["en", "aa", "bb", "cc", "dd", "ee"]


def _routing_trial(trial: int) -> list[str]:
    """One randomized model; returns the list of violated properties."""
    rng = np.random.default_rng([31, trial])
    n_experts = int(rng.integers(2, 9))
    n_layers = int(rng.integers(1, 3))
    pairs = [(s, t) for s in LANGS for t in LANGS if s != t]
    chosen = [pairs[i] for i in rng.choice(len(pairs), int(rng.integers(1, 8)), replace=False)]
    reg = build_registry("TL" if trial % 2 else "LP", chosen)
    cfg = tiny_config(n_experts=n_experts, n_layers=n_layers, moe_every_layer=n_layers == 1 or bool(rng.integers(2)))
    model = MoeModel(cfg, reg, seed=trial)
    spread = float(rng.choice([0.01, 1.0, 30.0]))
    for name, p in model.params.items():
        if ".router." in name:
            p.data[...] = rng.normal(scale=spread, size=p.shape)
    bad = []
    layer = int(rng.choice(cfg.moe_layers()))
    side = str(rng.choice(["encoder", "decoder"]))
    for task in range(len(reg)):
        dec = model.route(layer, side, task)
        g = np.array(dec.gates)
        if abs(g.sum() - 1.0) > 1e-9:
            bad.append("sum")
        if np.any(g < 0):
            bad.append("negative")
        if np.count_nonzero(g) > 2 or len(set(dec.experts)) != len(dec.experts):
            bad.append("more than two experts")

    batch, length = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    x = rng.normal(size=(batch, length, cfg.d_model))
    tasks = rng.integers(0, len(reg), batch)
    with T.no_grad():
        out = model._ffn(T.Tensor(x), layer, side, tasks).data
        perm = rng.permutation(length)
        shuffled = model._ffn(T.Tensor(x[:, perm]), layer, side, tasks).data
        if not np.allclose(shuffled, out[:, perm], rtol=0, atol=1e-12):
            bad.append("position dependence")
        for i in range(batch):
            alone = model._ffn(T.Tensor(x[i:i + 1]), layer, side, tasks[i:i + 1]).data
            if not np.allclose(alone[0], out[i], rtol=0, atol=1e-12):
                bad.append("batch dependence")
    return bad


def test_c3_routing_invariants():
    t0 = time.perf_counter()
    failures = {}
    for trial in range(1000):
        bad = _routing_trial(trial)
        if bad:
            failures[trial] = bad
    elapsed = time.perf_counter() - t0
    first = next(iter(failures.items()), None)
    verdict(3, not failures and elapsed < 60,
            f"1000 trials, {len(failures)} violating (first: {first}); gate sum tol 1e-9, "
            f"position/batch invariance tol 1e-12, {elapsed:.1f}s [limit 60s]")


# -- 4 ---------------------------------------------------------------------------------

def _random_inputs(rng, vocab_size: int, n: int, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    src = np.full((n, max_len), PAD)
    tgt = np.full((n, max_len), PAD)
    for i in range(n):
        ls, lt = rng.integers(2, max_len + 1, 2)
        src[i, :ls] = rng.integers(4, vocab_size, ls)
        src[i, ls - 1] = EOS
        tgt[i, :lt] = rng.integers(4, vocab_size, lt)
        tgt[i, 0] = BOS
    return src, tgt


@pytest.mark.slow
def test_c4_extraction_equivalence(first_run):
    t0 = time.perf_counter()
    model, vocab, _ = load_model(first_run.result["checkpoint"])
    rng = np.random.default_rng(404)
    worst = 0.0
    with T.no_grad():
        for task in range(len(model.registry)):
            dense = model.extract_dense(task)
            src, tgt = _random_inputs(rng, model.cfg.vocab_size, 100, model.cfg.max_len)
            moe_logits = model(src, tgt, np.full(100, task)).data
            worst = max(worst, float(np.abs(moe_logits - dense(src, tgt).data).max()))

    mismatched = []
    tests = load_test_sets(first_run.rc)
    for (s, t), examples in sorted(tests.items()):
        task = resolve_infer(model.registry, "tl_a", s, t)
        texts = [e.src for e in examples]
        refs = [e.tgt for e in examples]
        moe = corpus_bleu(greedy_decode_batch(model, vocab, texts, s, t, "tl_a"), refs).format()
        dense = corpus_bleu(greedy_decode_batch(model.extract_dense(task), vocab, texts, s, t), refs).format()
        if moe != dense:
            mismatched.append(f"{s}-{t}")
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and not mismatched and elapsed < 120
    verdict(4, ok, f"{len(model.registry)} tasks x 100 inputs max |logit diff| {worst:.1e} [tol 1e-9]; "
                   f"BLEU strings identical on {len(tests) - len(mismatched)}/{len(tests)} test sets, "
                   f"{elapsed:.1f}s [limit 120s]")


# -- 5 ---------------------------------------------------------------------------------

def test_c5_sampler():
    t0 = time.perf_counter()
    sizes = {("en", "aa"): 900, ("en", "bb"): 100, ("aa", "bb"): 300}
    spec = CorpusSpec(["en", "aa", "bb"], [(s, t, n) for (s, t), n in sizes.items()], 2, 4, 6, seed=5)
    corpora = gen_corpus(spec)
    hand = pair_probs(SamplerSpec({("en", "aa"): 900, ("en", "bb"): 100}, 5.0))
    hand_ok = abs(hand[("en", "aa")] - 0.6081) < 5e-5 and abs(hand[("en", "bb")] - 0.3919) < 5e-5
    worst_dev, worst_analytic = 0.0, 0.0
    keys = list(sizes)
    for temperature in (1.0, 5.0, 100.0):
        analytic = pair_probs(SamplerSpec(sizes, temperature))
        oracle = decimal_probs([sizes[k] for k in keys], temperature)
        worst_analytic = max(worst_analytic, max(abs(analytic[k] - o) for k, o in zip(keys, oracle)))
        draws = TemperatureSampler(corpora, temperature=temperature, seed=11).draw_pairs(0, 100_000)
        for k in keys:
            worst_dev = max(worst_dev, abs(draws.count(k) / len(draws) - analytic[k]))
    elapsed = time.perf_counter() - t0
    ok = hand_ok and worst_analytic < 1e-12 and worst_dev <= 0.02 and elapsed < 30
    verdict(5, ok, f"hand case {hand[('en', 'aa')]:.4f}/{hand[('en', 'bb')]:.4f} (want 0.6081/0.3919); "
                   f"analytic vs decimal oracle {worst_analytic:.1e}; max empirical dev over T=1,5,100 "
                   f"{worst_dev:.4f} [tol 0.02], {elapsed:.1f}s [limit 30s]")


# -- 6 ---------------------------------------------------------------------------------

def test_c6_bleu_oracles():
    t0 = time.perf_counter()
    sents = ["s1 s2 s3 s4 s5", "s2 s2", "s9"]
    identity = corpus_bleu(sents, sents).score
    substitution = corpus_bleu(["a b c d e"], ["a b c d f"]).score
    bp = corpus_bleu(["a"], ["a b c"]).bp
    hand_ok = abs(identity - 100.0) < 1e-9 and abs(substitution - 66.87) <= 0.01 and abs(bp - 0.1353) <= 5e-4
    diffs = []
    for seed in range(12):
        hyps, refs = random_corpus(seed)
        diffs.append(abs(corpus_bleu(hyps, refs).score - brute_bleu(hyps, refs)))
    elapsed = time.perf_counter() - t0
    ok = hand_ok and max(diffs) < 1e-9 and elapsed < 10
    verdict(6, ok, f"identity {identity:.2f}, substitution {substitution:.2f} [66.87 +-0.01], BP {bp:.4f} "
                   f"[0.1353 +-0.0005]; {len(diffs)} random cases max |diff| vs brute force {max(diffs):.1e}, "
                   f"{elapsed:.2f}s [limit 10s]")


# -- 7 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_c7_routing_finding(first_run):
    rc = first_run.rc
    model, _, _ = load_model(first_run.result["checkpoint"])
    cipher = [lang for lang in rc.corpus.languages if lang != "en"]
    direct = [(s, t) for s, t, _ in rc.corpus.pairs if "en" not in (s, t)]
    setup_ok = (model.cfg.n_experts == 8 and len(cipher) == 4 and bool(direct)
                and rc.train.steps <= 20_000 and first_run.seconds <= 30 * 60)
    problems, groups, summaries = [], 0, []
    for layer in model.cfg.moe_layers():
        for side in ("encoder", "decoder"):
            mat = read_csv(rc.paths["routing"] / f"{side}_layer{layer}.csv", side, layer)
            by_target: dict[str, list[np.ndarray]] = {}
            for label, row in zip(mat.rows, mat.cells):
                by_target.setdefault(label.split("-")[1], []).append(row)
            for tgt, rows in by_target.items():
                groups += len(rows) > 1
                if not all(np.array_equal(rows[0], r) for r in rows[1:]):
                    problems.append(f"{side} layer {layer} target {tgt}")
        overlap_file = rc.paths["routing"] / f"overlap_layer{layer}.json"
        if overlap_file.is_file():
            ov = json.loads(overlap_file.read_text())
            summaries.append(f"layer {layer} common {ov['intersection']} jaccard {ov['jaccard']:.2f}")
        else:
            problems.append(f"no overlap summary for layer {layer}")
    ok = setup_ok and not problems and groups > 0
    verdict(7, ok, f"{model.cfg.n_experts} experts, {len(cipher)} cipher langs + en, {rc.train.steps} steps, "
                   f"pipeline {first_run.seconds / 60:.1f} min [limit 30]; {groups} shared-target row groups, "
                   f"mismatches {problems or 'none'}; " + "; ".join(summaries))


# -- 8 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_c8_translation_quality(first_run):
    report = json.loads(first_run.rc.paths["report"].read_text())
    cells = {(c["system"], c["strategy"], c["column"]): c for c in report["cells"]}

    def score(system, strategy, column):
        cell = cells.get((system, strategy, column))
        return None if cell is None or "bleu" not in cell else cell["bleu"]["score"]

    english = [c for c in report["columns"] if "en" in c.split("-")]
    direct = "aa-bb"
    moe = {c: score("task_moe", "tl_a", c) for c in english + [direct]}
    systems = {s for s, _ in report["rows"]}
    baselines_ok = {"bilingual", "pivot"} <= systems and score("bilingual", "-", direct) is not None \
        and score("pivot", "-", direct) is not None
    ok = all(v is not None and v >= 90 for v in moe.values()) and baselines_ok

    def fmt(v):
        return "fail" if v is None else f"{v:.2f}"

    verdict(8, ok, "task_moe/tl_a " + ", ".join(f"{c} {fmt(v)}" for c, v in moe.items())
                   + f" [min 90]; bilingual {fmt(score('bilingual', '-', direct))} and pivot "
                   f"{fmt(score('pivot', '-', direct))} on {direct}; rows {sorted(systems)}")


# -- 9 ---------------------------------------------------------------------------------

def test_c9_strategy_semantics():
    t0 = time.perf_counter()
    pairs = [("en", "ja"), ("ja", "en"), ("en", "ko"), ("ko", "en"), ("ja", "ko"),
             ("fr", "en"), ("en", "fr"), ("ar", "en"), ("en", "ar")]
    lp, tl = build_registry("LP", pairs), build_registry("TL", pairs)
    expected = [
        (lp, "lp_a", "ja", "ko", "ja-ko"), (lp, "lp_b", "ja", "ko", "en-ko"), (lp, "lp_c", "ja", "ko", "ja-en"),
        (tl, "tl_a", "ja", "ko", "ko"), (tl, "tl_b", "ja", "ko", "ja"),
        (lp, "lp_b", "fr", "ar", "en-ar"), (lp, "lp_c", "fr", "ar", "fr-en"), (tl, "tl_a", "fr", "ar", "ar"),
    ]
    wrong = [(st, s, t) for reg, st, s, t, key in expected if resolve_infer(reg, st, s, t) != reg.id(key)]
    try:
        resolve_infer(lp, "lp_a", "fr", "ar")
        failure_path = False
    except UnresolvedTaskError:
        failure_path = True
    elapsed = time.perf_counter() - t0
    ok = not wrong and failure_path and elapsed < 1
    verdict(9, ok, f"{len(expected) - len(wrong)}/{len(expected)} mappings correct over lp_a..tl_b; "
                   f"fr-ar under lp_a {'raises' if failure_path else 'does not raise'} UnresolvedTaskError, "
                   f"{elapsed * 1000:.0f}ms [limit 1s]")


# -- 10 --------------------------------------------------------------------------------

def _artifacts(root: Path) -> dict[str, bytes]:
    keep = ("run", "data", "test", "routing")
    out = {}
    for path in sorted(root.rglob("*")):
        rel = path.relative_to(root)
        if path.is_file() and (rel.parts[0] in keep or rel.name == "report.json"):
            out[rel.as_posix()] = path.read_bytes()
    return out


@pytest.mark.slow
def test_c10_determinism(first_run, tmp_path_factory):
    second = _pipeline(tmp_path_factory.mktemp("pipeline_b"))
    a, b = _artifacts(first_run.root), _artifacts(second.root)
    ckpts = [k for k in a if k.endswith(".bin")]
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and bool(ckpts) and "report.json" in a
    verdict(10, ok, f"{len(ckpts)} checkpoints and {len(a) - len(ckpts)} other files compared byte for byte; "
                    f"differing: {differing or 'none'}")
