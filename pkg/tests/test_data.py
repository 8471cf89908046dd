import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clim.core import ContractError
from clim.data import (PRESETS, AugmentPolicy, DomainPreset, Example, FormatError, Pool, ShiftParams, attach_augmentation,
                       augment, featurize, hashed_counts, load_paired_augmentation, make_contrastive_batch,
                       parse_preset, pool_from_examples, pool_to_examples, read_jsonl, split_dev, synth_generate,
                       tokenize, write_jsonl)


class TestFeaturize:
    def test_empty(self):
        v = featurize("", 8)
        assert v.shape == (8,) and not v.any()

    def test_deterministic(self):
        np.testing.assert_array_equal(featurize("Great product!", 32, 5), featurize("Great product!", 32, 5))

    def test_multiplicity(self):
        one, two = hashed_counts(["good"], 16), hashed_counts(["good", "good"], 16)
        assert np.count_nonzero(one) == 1
        np.testing.assert_array_equal(two, 2 * one)
        assert np.abs(two).max() == 2.0

    def test_tokenizer(self):
        assert tokenize("It's GREAT--really_great!! 10/10") == ["it", "s", "great", "really", "great", "10", "10"]

    def test_hash_seed_matters(self):
        text = "the quick brown fox jumps over the lazy dog"
        assert not np.array_equal(featurize(text, 64, 0), featurize(text, 64, 1))

    @settings(max_examples=100, deadline=None)
    @given(st.text(max_size=60), st.integers(2, 64))
    def test_unit_norm(self, text, dim):
        v = featurize(text, dim)
        n = np.linalg.norm(v)
        # signed collisions can cancel to zero even with tokens present
        if tokenize(text) and hashed_counts(tokenize(text), dim).any():
            assert n == pytest.approx(1.0, abs=1e-12)
        else:
            assert n == 0.0


class TestSynth:
    @pytest.mark.parametrize("name,pos,neg", [
        ("books", 5192, 808),
        ("airlines", 21072, 18324),
        ("dvd", 30600, 4141),
        ("electronics", 10324, 2829),
        ("kitchen", 13793, 2992),
    ])
    def test_preset_counts(self, name, pos, neg):
        p = PRESETS[name]
        # independent check of the rounding formula
        assert pos == int(np.floor(p.unlabeled * p.ratio / (1 + p.ratio) + 0.5))
        assert p.unlabeled_positive == pos and p.unlabeled_negative == neg

    def test_generated_pools(self):
        d = synth_generate(PRESETS["books"], PRESETS["electronics"], seed=3)
        assert len(d["source_labeled"]) == 2000
        assert d["source_labeled"].labels.sum() == 1000
        assert len(d["source_unlabeled"]) == 6000
        assert d["source_unlabeled"].latent_labels.sum() == 5192
        assert d["source_unlabeled"].labels is None
        assert len(d["target_unlabeled"]) == 13153
        assert d["target_unlabeled"].latent_labels.sum() == 10324
        assert d["target_test"].labels.sum() == 1000
        assert d["target_test"].domain == "target"

    def test_deterministic(self):
        a = synth_generate(PRESETS["kitchen"], PRESETS["dvd"], seed=1)
        b = synth_generate(PRESETS["kitchen"], PRESETS["dvd"], seed=1)
        for k in a:
            assert a[k].X.tobytes() == b[k].X.tobytes()
            assert a[k].ids == b[k].ids

    def test_shift_moves_means(self):
        shift = ShiftParams(sigma=0.0)
        d = synth_generate(DomainPreset("s", 2, 2, 1.0), DomainPreset("t", 2, 2, 1.0), shift, seed=0)
        src = d["source_labeled"].X[d["source_labeled"].labels == 1][0]
        tgt = d["target_test"].X[d["target_test"].labels == 1][0]
        np.testing.assert_allclose(src[:2], [1.0, 0.0], atol=1e-15)
        c, s = np.cos(np.radians(30)), np.sin(np.radians(30))
        np.testing.assert_allclose(tgt[:2], [c + 0.5 / np.sqrt(2), s + 0.5 / np.sqrt(2)], atol=1e-12)

    def test_zero_scale_rejected(self):
        with pytest.raises(ContractError):
            ShiftParams(scale=0.0)

    def test_parse_preset(self):
        assert parse_preset("books") is PRESETS["books"]
        assert parse_preset("200,500,2.0").unlabeled_positive == 333
        with pytest.raises(ContractError, match="books"):
            parse_preset("bogus")


class TestAugment:
    def test_zero_jitter_identity(self, rng):
        x = rng.normal(size=8)
        ex = Example("a", "source", features=x)
        np.testing.assert_array_equal(augment(ex, AugmentPolicy(sigma=0.0), rng), x)

    def test_jitter_preserves_norm(self, rng):
        x = rng.normal(size=8)
        out = augment(Example("a", "source", features=x), AugmentPolicy(sigma=0.5), rng)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(x))
        assert not np.allclose(out, x)

    def test_aug_payload_wins(self, rng):
        ex = Example("a", "source", features=np.ones(4), aug_payload=[1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(augment(ex, AugmentPolicy(sigma=10.0), rng), [1, 2, 3, 4])
        ex = Example("b", "source", text="bad", aug_payload="terrible film")
        np.testing.assert_array_equal(
            augment(ex, AugmentPolicy(kind="token_dropout", dim=16), rng), featurize("terrible film", 16))

    def test_dropout_all(self, rng):
        ex = Example("a", "target", text="one two three")
        out = augment(ex, AugmentPolicy(kind="token_dropout", drop_prob=1.0, dim=8), rng)
        assert out.shape == (8,) and not out.any()

    def test_dropout_none(self, rng):
        ex = Example("a", "target", text="one two three")
        out = augment(ex, AugmentPolicy(kind="token_dropout", drop_prob=0.0, dim=8), rng)
        np.testing.assert_array_equal(out, featurize("one two three", 8))

    def test_dropout_needs_text(self, rng):
        with pytest.raises(ContractError):
            augment(Example("a", "source", features=np.ones(3)), AugmentPolicy(kind="token_dropout"), rng)

    def test_example_needs_one_payload(self):
        with pytest.raises(ContractError):
            Example("a", "source")
        with pytest.raises(ContractError):
            Example("a", "source", text="x", features=np.ones(2))


class TestPairedFile:
    def test_empty(self, tmp_path):
        p = tmp_path / "aug.jsonl"
        p.write_text("")
        assert load_paired_augmentation(p) == {}

    def test_two_lines(self, tmp_path):
        p = tmp_path / "aug.jsonl"
        p.write_text('{"id": "a", "aug_text": "hello"}\n{"id": "b", "aug_features": [1, 2.5]}\n')
        m = load_paired_augmentation(p)
        assert len(m) == 2 and m["a"] == "hello"
        np.testing.assert_array_equal(m["b"], [1.0, 2.5])

    def test_missing_id(self, tmp_path):
        p = tmp_path / "aug.jsonl"
        p.write_text('{"aug_text": "hello"}\n')
        with pytest.raises(FormatError, match="line 1"):
            load_paired_augmentation(p)

    def test_duplicate(self, tmp_path):
        p = tmp_path / "aug.jsonl"
        p.write_text('{"id": "a", "aug_text": "x"}\n{"id": "a", "aug_text": "y"}\n')
        with pytest.raises(FormatError, match="line 2"):
            load_paired_augmentation(p)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "aug.jsonl"
        p.write_text('{"id": "a", "aug_text": "x"}\n{nope\n')
        with pytest.raises(FormatError, match="line 2"):
            load_paired_augmentation(p)

    def test_attach_rejects_unknown(self):
        pool = Pool(["a", "b"], np.ones((2, 2)), "source")
        attach_augmentation([pool], {"a": [0.0, 1.0]})
        assert "a" in pool.aug
        with pytest.raises(ContractError):
            attach_augmentation([pool], {"zzz": "text"})


def _pools(n_src=20, n_tgt=30):
    r = np.random.default_rng(0)
    return {
        "source": Pool([f"s{i}" for i in range(n_src)], r.normal(size=(n_src, 3)) + 5, "source"),
        "target": Pool([f"t{i}" for i in range(n_tgt)], r.normal(size=(n_tgt, 3)) - 5, "target"),
    }


class TestContrastiveBatch:
    def test_single_pair(self, rng):
        b = make_contrastive_batch(_pools(), "both-domain", 1, AugmentPolicy(), rng)
        assert b.X.shape == (2, 3)
        assert b.ids[0] == b.ids[1]

    @pytest.mark.parametrize("strategy", ["in-domain", "both-domain"])
    def test_layout(self, strategy, rng):
        pools = _pools()
        b = make_contrastive_batch(pools, strategy, 8, AugmentPolicy(sigma=0.0), rng)
        assert b.X.shape == (16, 3)
        for k in range(8):
            assert b.ids[2 * k] == b.ids[2 * k + 1]
            np.testing.assert_array_equal(b.X[2 * k], b.X[2 * k + 1])
        assert len(set(b.ids[0::2])) == 8

    def test_in_domain_alternates(self, rng):
        pools = _pools()
        doms = [set(make_contrastive_batch(pools, "in-domain", 4, AugmentPolicy(), rng, batch_index=i).domains)
                for i in range(4)]
        assert doms == [{"source"}, {"target"}, {"source"}, {"target"}]

    def test_both_domain_mixes(self):
        pools = _pools(50, 50)
        b = make_contrastive_batch(pools, "both-domain", 40, AugmentPolicy(), np.random.default_rng(0))
        assert set(b.domains) == {"source", "target"}

    def test_reproducible(self):
        a = make_contrastive_batch(_pools(), "both-domain", 5, AugmentPolicy(), np.random.default_rng(9))
        b = make_contrastive_batch(_pools(), "both-domain", 5, AugmentPolicy(), np.random.default_rng(9))
        assert a.ids == b.ids
        assert a.X.tobytes() == b.X.tobytes()

    def test_oversized(self, rng):
        with pytest.raises(ContractError):
            make_contrastive_batch(_pools(), "in-domain", 21, AugmentPolicy(), rng)
        with pytest.raises(ContractError):
            make_contrastive_batch(_pools(), "both-domain", 51, AugmentPolicy(), rng)

    def test_unknown_strategy(self, rng):
        with pytest.raises(ContractError):
            make_contrastive_batch(_pools(), "cross-domain", 2, AugmentPolicy(), rng)


class TestSplitDev:
    def _labeled(self):
        return synth_generate(PRESETS["books"], PRESETS["books"], seed=0)["source_labeled"]

    def test_sizes(self):
        train, dev = split_dev(self._labeled(), 400, seed=0)
        assert (len(train), len(dev)) == (1600, 400)

    def test_disjoint_exhaustive(self):
        pool = self._labeled()
        train, dev = split_dev(pool, 400, seed=1)
        assert not set(train.ids) & set(dev.ids)
        assert set(train.ids) | set(dev.ids) == set(pool.ids)

    def test_deterministic(self):
        pool = self._labeled()
        assert split_dev(pool, 400, 5)[1].ids == split_dev(pool, 400, 5)[1].ids
        assert split_dev(pool, 400, 5)[1].ids != split_dev(pool, 400, 6)[1].ids

    def test_lists(self):
        exs = [Example(str(i), "source", features=np.ones(2), label=i % 2) for i in range(10)]
        train, dev = split_dev(exs, 3, seed=0)
        assert len(train) == 7 and len(dev) == 3

    def test_too_many(self):
        with pytest.raises(ContractError):
            split_dev(self._labeled(), 2000)


class TestJsonl:
    def test_round_trip_bytes(self, tmp_path):
        d = synth_generate(DomainPreset("s", 10, 12, 2.0), DomainPreset("t", 10, 8, 0.5), seed=2)
        for name, pool in d.items():
            p1, p2 = tmp_path / f"{name}1.jsonl", tmp_path / f"{name}2.jsonl"
            write_jsonl(pool_to_examples(pool), p1)
            write_jsonl(read_jsonl(p1), p2)
            assert p1.read_bytes() == p2.read_bytes()
            back = pool_from_examples(read_jsonl(p1))
            assert back.X.tobytes() == pool.X.tobytes()

    def test_text_records(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text('{"id": "x", "text": "Good value", "domain": "source", "label": 1}\n'
                     '{"id": "y", "text": "awful", "domain": "source", "label": 0}\n')
        pool = pool_from_examples(read_jsonl(p), dim=8)
        assert pool.X.shape == (2, 8)
        np.testing.assert_array_equal(pool.labels, [1, 0])
        np.testing.assert_array_equal(pool.X[0], featurize("Good value", 8))

    @pytest.mark.parametrize("line,msg", [
        ('{"text": "x", "domain": "source"}', "id"),
        ('{"id": "x", "domain": "source"}', "exactly one"),
        ('{"id": "x", "text": "a", "features": [1], "domain": "source"}', "exactly one"),
        ('{"id": "x", "text": "a", "domain": "elsewhere"}', "domain"),
        ('{"id": "x", "text": "a", "domain": "source", "label": 2}', "label"),
        ('{"id": "x", "text": "a", "domain": "source", "colour": 2}', "unknown"),
        ('{"id": "x", "features": ["a"], "domain": "source"}', "numbers"),
    ])
    def test_errors(self, tmp_path, line, msg):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "ok", "text": "fine", "domain": "source"}\n' + line + "\n")
        with pytest.raises(FormatError, match=f"line 2.*{msg}"):
            read_jsonl(p)
