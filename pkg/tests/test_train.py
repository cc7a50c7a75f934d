import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskmt import tensor as T
from deskmt.consist import ConsistConfig
from deskmt.corpus import LanguageSpec, SyntheticLanguageSpec, gen_synthetic
from deskmt.model import ModelConfig, greedy_decode_batch, new_checkpoint
from deskmt.subword import Codec
from deskmt.train import (MODE_DEFAULTS, Adam, TrainConfig, TrainingLog, Validation, adam_step, clip_grads,
                          encode_pairs, lr_at, make_batches, train_child, train_model)
from deskmt.transfer import tm_init

TOY = SyntheticLanguageSpec(base_vocab=30, min_len=3, max_len=6, languages=(
    ("E", LanguageSpec(11)), ("P", LanguageSpec(23, 2)), ("C", LanguageSpec(37, 2, share_with="P",
                                                                             share_fraction=0.5))))


class TestSchedule:
    @pytest.mark.parametrize("step,expected", [(1000, 2e-4), (4000, 1e-4), (500, 1e-4)])
    def test_examples(self, step, expected):
        assert lr_at(step, 1000, 2e-4) == pytest.approx(expected, rel=1e-12)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_at(0, 10, 1e-3)

    @given(st.integers(1, 5000), st.integers(1, 20000))
    @settings(max_examples=200, deadline=None)
    def test_peak_at_warmup_and_decreasing_after(self, warmup, extra):
        peak = 1e-3
        assert lr_at(warmup, warmup, peak) == pytest.approx(peak)
        assert lr_at(warmup + extra, warmup, peak) < lr_at(warmup + extra - 1, warmup, peak) or extra == 0
        assert lr_at(warmup + extra, warmup, peak) <= peak


class TestAdam:
    def test_first_step_is_minus_lr(self):
        p = {"w": np.array([0.5])}
        adam_step(p, {"w": np.array([1.0])}, Adam(), 0.01)
        assert p["w"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)

    def test_constant_gradient_keeps_unit_steps(self):
        p, opt = {"w": np.array([0.0])}, Adam()
        for _ in range(5):
            opt.step(p, {"w": np.array([1.0])}, 0.1)
        assert p["w"][0] == pytest.approx(-0.5, abs=1e-6)

    def test_zero_gradient_leaves_parameters(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, Adam(), 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_non_finite_gradient_aborts(self):
        p, opt = {"a": np.array([1.0]), "b": np.array([2.0])}, Adam()
        with pytest.raises(T.NonFiniteError, match="b"):
            opt.step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, 0.1)
        np.testing.assert_array_equal(p["a"], [1.0])
        assert opt.t == 0

    def test_clip_grads(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grads(g, 1.0) == pytest.approx(5.0)
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


class TestBatches:
    @given(st.lists(st.tuples(st.integers(1, 30), st.integers(1, 30)), min_size=1, max_size=60),
           st.integers(40, 400), st.integers(0, 5))
    @settings(max_examples=100, deadline=None)
    def test_partition_and_budget(self, lens, budget, seed):
        src, tgt = [a for a, _ in lens], [b for _, b in lens]
        batches = make_batches(src, tgt, budget, np.random.default_rng(seed))
        assert sorted(i for b in batches for i in b) == list(range(len(lens)))
        for b in batches:
            width = max(max(src[i] + 1, tgt[i]) for i in b)
            assert len(b) == 1 or width * len(b) <= budget

    def test_seeded_order(self):
        src = list(range(1, 40))
        a = make_batches(src, src, 50, np.random.default_rng(1))
        b = make_batches(src, src, 50, np.random.default_rng(1))
        assert a == b


class TestConfig:
    def test_mode_defaults(self):
        assert (TrainConfig("parent").warmup_steps, TrainConfig("parent").peak_lr) == (10000, 1e-3)
        assert TrainConfig("parent").dropout == 0.1
        assert (TrainConfig("scratch").warmup_steps, TrainConfig("scratch").peak_lr) == (8000, 5e-4)
        c = TrainConfig("transfer")
        assert (c.warmup_steps, c.peak_lr, c.dropout, c.attention_dropout, c.activation_dropout) == \
            (1000, 2e-4, 0.3, 0.1, 0.1)
        assert c.betas == (0.9, 0.98) and c.epochs == 200

    def test_override_and_round_trip(self):
        c = TrainConfig("transfer", peak_lr=1e-3, consist={"alpha": 4, "tau": 2, "divergence": "kl"})
        assert c.peak_lr == 1e-3 and c.consist == ConsistConfig(4, 2, "kl")
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            TrainConfig("finetune")

    def test_all_modes_listed(self):
        assert set(MODE_DEFAULTS) == {"parent", "scratch", "transfer"}


@pytest.fixture(scope="module")
def toy():
    parent_data = gen_synthetic(TOY, 300, 0, "P")
    child = gen_synthetic(TOY, 60, 1, "C")
    p_src = Codec.train(parent_data.src, 20, "source")
    tgt = Codec.train(parent_data.tgt, 20, "target")
    c_src = Codec.train(child.src, 20, "source")
    cfg = dict(layers=1, model_dim=16, ffn_dim=16, heads=2, max_positions=32)
    parent = new_checkpoint(ModelConfig(len(p_src.vocab), len(tgt.vocab), **cfg), 0, p_src.vocab.fingerprint(),
                            tgt.vocab.fingerprint())
    init, _ = tm_init(parent, ModelConfig(len(c_src.vocab), len(tgt.vocab), **cfg), (c_src.vocab, tgt.vocab), 1,
                      p_src.vocab)
    # an order-aligned stand-in for back-translated parent sources
    pseudo = gen_synthetic(TOY, 60, 1, "P")
    return child, pseudo, parent, init, c_src, p_src, tgt


def quick(**kw):
    return TrainConfig(**dict(dict(mode="transfer", epochs=2, max_tokens_per_batch=120, warmup_steps=4,
                                   peak_lr=1e-3, seed=3), **kw))


class TestTrainChild:
    def test_deterministic(self, toy):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        cfg = quick(consist={"alpha": 7})
        a, la = train_child(init, child, cfg, c_src, tgt, None, pseudo, parent, p_src)
        b, lb = train_child(init, child, cfg, c_src, tgt, None, pseudo, parent, p_src)
        assert la.to_lines(with_time=False) == lb.to_lines(with_time=False)
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_alpha_zero_matches_plain_transfer(self, toy):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        plain, lp = train_child(init, child, quick(), c_src, tgt)
        zero, lz = train_child(init, child, quick(consist={"alpha": 0.0}), c_src, tgt, None, pseudo, parent, p_src)
        for k in plain.params:
            assert plain.params[k].tobytes() == zero.params[k].tobytes(), k
        assert [r.nll for r in lp.records] == [r.nll for r in lz.records]

    def test_consistency_changes_training(self, toy):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        plain, _ = train_child(init, child, quick(), c_src, tgt)
        cons, _ = train_child(init, child, quick(consist={"alpha": 7}), c_src, tgt, None, pseudo, parent, p_src)
        assert not np.array_equal(plain.params["enc.0.self.wq"], cons.params["enc.0.self.wq"])

    def test_parent_untouched(self, toy):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        before = {k: v.tobytes() for k, v in parent.params.items()}
        train_child(init, child, quick(consist={"alpha": 7}), c_src, tgt, None, pseudo, parent, p_src)
        assert {k: v.tobytes() for k, v in parent.params.items()} == before

    def test_init_untouched(self, toy):
        child, _, _, init, c_src, _, tgt = toy
        before = init.params["src_embed"].tobytes()
        train_child(init, child, quick(), c_src, tgt)
        assert init.params["src_embed"].tobytes() == before

    @pytest.mark.parametrize("div", ["js", "kl"])
    def test_logged_divergence_bounds(self, toy, div):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        _, lg = train_child(init, child, quick(consist={"alpha": 4, "divergence": div}), c_src, tgt, None, pseudo,
                            parent, p_src)
        for r in lg.records:
            assert r.l_d >= 0
            if div == "js":
                assert r.l_d <= math.log(2)

    def test_consistency_requires_pseudo(self, toy):
        child, _, parent, init, c_src, p_src, tgt = toy
        with pytest.raises(ValueError, match="pseudo"):
            train_child(init, child, quick(consist={"alpha": 7}), c_src, tgt, None, None, parent, p_src)

    def test_misaligned_pseudo(self, toy):
        child, pseudo, parent, init, c_src, p_src, tgt = toy
        with pytest.raises(ValueError, match="aligned"):
            train_child(init, child, quick(consist={"alpha": 7}), c_src, tgt, None, pseudo.subset(range(59)),
                        parent, p_src)

    def test_rdrop_logged(self, toy):
        child, _, _, init, c_src, _, tgt = toy
        _, lg = train_child(init, child, quick(rdrop=5.0), c_src, tgt)
        assert all(r.rdrop is not None and r.rdrop >= 0 for r in lg.records)

    def test_best_checkpoint_and_log_format(self, toy, tmp_path):
        child, _, _, init, c_src, _, tgt = toy
        valid = Validation([c_src.encode(s, role="source") for s in child.src[:10]], child.tgt[:10], tgt, 10)
        best, lg = train_child(init, child, quick(epochs=3), c_src, tgt, valid)
        assert len(lg.records) == 3 and all(r.bleu is not None for r in lg.records)
        assert best.meta["best_epoch"] == lg.best_epoch
        assert valid.score(best) == pytest.approx(lg.best_bleu)
        lg.save(tmp_path / "log.jsonl")
        back = TrainingLog.load(tmp_path / "log.jsonl")
        assert back.curve() == lg.curve() and back.best_epoch == lg.best_epoch


def test_learns_a_toy_bijection():
    spec = SyntheticLanguageSpec(base_vocab=12, min_len=3, max_len=5, markov_weight=0.0, languages=(
        ("E", LanguageSpec(11)), ("X", LanguageSpec(5))))
    train = gen_synthetic(spec, 1500, 0, "X")
    held = gen_synthetic(spec, 100, 1, "X")
    src = Codec.train(train.src, 100, "source")
    tgt = Codec.train(train.tgt, 100, "target")
    init = new_checkpoint(ModelConfig(len(src.vocab), len(tgt.vocab), layers=1, model_dim=32, ffn_dim=64, heads=4,
                                      max_positions=48), 0)
    cfg = TrainConfig("scratch", epochs=40, max_tokens_per_batch=800, warmup_steps=60, peak_lr=3e-3, dropout=0.0,
                      attention_dropout=0.0, activation_dropout=0.0, label_smoothing=0.0)
    model, _ = train_model(init, encode_pairs(train, src, tgt), cfg)
    hyps = greedy_decode_batch(model, [src.encode(s, role="source") for s in held.src], 30)
    exact = np.mean([tgt.decode(h) == ref for h, ref in zip(hyps, held.tgt)])
    assert exact >= 0.9, exact
