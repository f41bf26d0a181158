import pytest
from hypothesis import given, strategies as st

from taskmoe.corpus import ParallelExample
from taskmoe.tasks import (Strategy, TaskError, TaskMode, TaskRegistry, UnresolvedTaskError,
                           build_registry, resolve_infer, resolve_train)

PAIRS = [("en", "ja"), ("ja", "en"), ("en", "ko"), ("ko", "en"), ("ja", "ko")]


@pytest.fixture
def lp():
    return build_registry("LP", PAIRS)


@pytest.fixture
def tl():
    return build_registry("TL", PAIRS)


class TestBuild:
    def test_lp_count(self, lp):
        assert len(lp) == 5

    def test_tl_count(self, tl):
        assert set(tl.tasks) == {"en", "ja", "ko"}

    def test_sorted_dense_ids(self, lp):
        assert list(lp.tasks) == sorted(lp.tasks)
        assert [lp.id(k) for k in lp.tasks] == list(range(5))

    def test_empty(self):
        with pytest.raises(TaskError):
            build_registry("LP", [])

    def test_directional(self):
        assert len(build_registry("LP", [("ja", "ko"), ("ko", "ja")])) == 2

    def test_full_scale_counts(self):
        langs = [f"l{i:03d}" for i in range(107)]
        centric = [(l, "en") for l in langs] + [("en", l) for l in langs]
        direct = [(langs[2 * i], langs[2 * i + 1]) for i in range(53)]
        assert len(build_registry("LP", centric)) == 214
        assert len(build_registry("LP", centric + direct)) == 267
        assert len(build_registry("TL", centric)) == 108
        assert len(build_registry("TL", centric + direct)) == 108

    def test_save_load(self, lp, tmp_path):
        lp.dump(tmp_path / "reg.txt")
        back = TaskRegistry.load(tmp_path / "reg.txt")
        assert back == lp and back.ids == lp.ids

    def test_dict_roundtrip(self, tl):
        assert TaskRegistry.from_dict(tl.to_dict()) == tl

    def test_text_dump(self, tl):
        assert tl.dumps().splitlines()[0] == "en\t0"


class TestResolve:
    def test_train_lp(self, lp):
        assert resolve_train(lp, ParallelExample("ja", "ko", "x", "y")) == lp.id("ja-ko")

    def test_train_tl(self, tl):
        assert resolve_train(tl, ParallelExample("ja", "ko", "x", "y")) == tl.id("ko")

    def test_train_unseen(self, lp):
        with pytest.raises(UnresolvedTaskError):
            resolve_train(lp, ParallelExample("th", "zh", "x", "y"))

    @pytest.mark.parametrize("strategy,src,tgt,key", [
        ("lp_a", "ja", "ko", "ja-ko"),
        ("lp_b", "ja", "ko", "en-ko"),
        ("lp_c", "ja", "ko", "ja-en"),
        ("tl_a", "ja", "ko", "ko"),
        ("tl_b", "ja", "ko", "ja"),
        ("tl_a", "ko", "ja", "ja"),
        ("lp_b", "ko", "ja", "en-ja"),
    ])
    def test_five_strategies(self, lp, tl, strategy, src, tgt, key):
        reg = lp if strategy.startswith("lp") else tl
        assert resolve_infer(reg, strategy, src, tgt) == reg.id(key)

    def test_tl_bg_mk(self):
        reg = build_registry("TL", [("en", "bg"), ("en", "mk"), ("bg", "en")])
        assert resolve_infer(reg, "tl_a", "bg", "mk") == reg.id("mk")

    def test_lp_a_untrained_pair(self):
        reg = build_registry("LP", [("fr", "en"), ("en", "fr"), ("ar", "en"), ("en", "ar")])
        with pytest.raises(UnresolvedTaskError):
            resolve_infer(reg, "lp_a", "fr", "ar")
        assert resolve_infer(reg, "lp_b", "fr", "ar") == reg.id("en-ar")
        assert resolve_infer(reg, "lp_c", "fr", "ar") == reg.id("fr-en")

    def test_mode_mismatch(self, lp, tl):
        with pytest.raises(TaskError):
            resolve_infer(lp, "tl_a", "ja", "ko")
        with pytest.raises(TaskError):
            resolve_infer(tl, "lp_a", "ja", "ko")

    def test_strategy_modes(self):
        assert {s.mode for s in Strategy if s.value.startswith("lp")} == {TaskMode.LP}
        assert {s.mode for s in Strategy if s.value.startswith("tl")} == {TaskMode.TL}

    def test_lp_a_matches_train(self, lp):
        for s, t in PAIRS:
            assert resolve_infer(lp, "lp_a", s, t) == resolve_train(lp, ParallelExample(s, t, "x", "y"))


@given(st.sampled_from(["en", "ja", "ko"]), st.sampled_from(["en", "ja", "ko"]))
def test_tl_strategies_exhaustive(src, tgt):
    reg = build_registry("TL", PAIRS)
    assert resolve_infer(reg, "tl_a", src, tgt) == reg.id(tgt)
    assert resolve_infer(reg, "tl_b", src, tgt) == reg.id(src)
