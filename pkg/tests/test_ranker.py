import numpy as np
import pytest

from mixnas import ranker as R
from mixnas.records import CandidateRecord
from mixnas.space import classification_space, toy_space


def make_records(space, n, loss_fn, seed=0, latency_fn=None):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        cfg = space.sample(rng)
        feats = space.encode(cfg)
        records.append(
            CandidateRecord(
                config=cfg,
                features=feats,
                loss=float(loss_fn(feats)),
                latency_ms=float(latency_fn(feats)) if latency_fn else 1.0,
                flops=1.0,
                params=1,
            )
        )
    return records


@pytest.fixture(scope="module")
def linear_landscape():
    space = classification_space()
    rng = np.random.default_rng(42)
    w_true = rng.standard_normal(space.vector_length())
    records = make_records(space, 200, lambda x: 10.0 + x @ w_true * 0.1, seed=7)
    return space, w_true, records


class TestFitRanker:
    def test_single_pair_separable(self, linear_landscape):
        space, _, records = linear_landscape
        a, b = records[0], records[1]
        model = R.fit_ranker([a, b], "loss", seed=0, space=space)
        better, worse = (a, b) if a.loss < b.loss else (b, a)
        assert model.score(better.features) > model.score(worse.features)

    def test_synthetic_linear_landscape_accuracy(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=1, space=space)
        assert model.holdout_accuracy >= 0.95
        assert model.pairs_seen >= 2

    def test_antisymmetry_exact(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records[:50], "loss", seed=2, space=space)
        a, b = records[0].features, records[1].features
        assert model.score(a) - model.score(b) == -(model.score(b) - model.score(a))

    def test_insufficient_distinct_targets(self, linear_landscape):
        space, _, records = linear_landscape
        clones = []
        for r in records[:5]:
            clones.append(
                CandidateRecord(r.config, r.features, 1.0, r.latency_ms, r.flops, r.params)
            )
        with pytest.raises(R.InsufficientDataError):
            R.fit_ranker(clones, "loss", seed=0, space=space)
        with pytest.raises(R.InsufficientDataError):
            R.fit_ranker(records[:1], "loss", seed=0, space=space)

    def test_deterministic_fit(self, linear_landscape):
        space, _, records = linear_landscape
        w1 = R.fit_ranker(records, "loss", seed=3, space=space).weights
        w2 = R.fit_ranker(records, "loss", seed=3, space=space).weights
        assert w1.tobytes() == w2.tobytes()

    def test_affine_rescaling_gives_identical_weights(self, linear_landscape):
        """Labels depend only on target comparisons, so a*t+b changes nothing."""
        space, _, records = linear_landscape
        rescaled = [
            CandidateRecord(
                r.config, r.features, 3.5 * r.loss + 7.0, r.latency_ms, r.flops, r.params
            )
            for r in records
        ]
        w1 = R.fit_ranker(records, "loss", seed=4, space=space)
        w2 = R.fit_ranker(rescaled, "loss", seed=4, space=space)
        assert w1.weights.tobytes() == w2.weights.tobytes()
        assert w1.holdout_accuracy == w2.holdout_accuracy

    def test_pair_label_symmetry(self):
        """Storing a pair as (worse, better) with a flipped label gives the
        same hinge terms as the canonical orientation."""
        rng = np.random.default_rng(5)
        diffs = rng.standard_normal((20, 6))
        w = rng.standard_normal(6)
        canonical = np.maximum(0.0, 1.0 - diffs @ w)
        flipped = np.maximum(0.0, 1.0 - (-1.0) * (-diffs) @ w)
        np.testing.assert_array_equal(canonical, flipped)

    def test_latency_target(self, linear_landscape):
        space, _, _ = linear_landscape
        rng = np.random.default_rng(6)
        w_lat = rng.standard_normal(space.vector_length())
        records = make_records(
            space, 100, lambda x: 1.0, seed=8, latency_fn=lambda x: 50.0 + x @ w_lat
        )
        model = R.fit_ranker(records, "latency", seed=0, space=space)
        assert model.holdout_accuracy >= 0.9


class TestFeatureImportance:
    def test_output_is_permutation_of_feature_names(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=9, space=space)
        ranked = R.feature_importance(model, records)
        assert sorted(n for n, _ in ranked) == sorted(f.name for f in space.features)

    def test_constant_feature_importance_zero(self):
        space = classification_space()
        rng = np.random.default_rng(10)
        # loss depends only on ffn columns; enc_layers is forced constant
        frozen = space.freeze({"enc_layers": 12})
        cols = space.feature_columns()["enc_ffn_dim"]
        w_ffn = rng.standard_normal(cols.stop - cols.start)
        records = make_records(
            frozen, 80, lambda x: 20.0 + float(x[cols] @ w_ffn), seed=11
        )
        model = R.fit_ranker(records, "loss", seed=12, space=frozen)
        ranked = dict(R.feature_importance(model, records))
        assert ranked["enc_layers"] == 0.0

    def test_single_factor_landscape_ranks_that_feature_first(self):
        # attention type is the only feature not aliased by another (head
        # counts are pinned to the embedding via divisibility), so a
        # single-factor landscape must rank it first
        space = classification_space()
        cols = space.feature_columns()["enc_attn_type"]
        rng = np.random.default_rng(20)
        w_attn = rng.standard_normal(cols.stop - cols.start)
        records = make_records(
            space, 150, lambda x: 30.0 + float(x[cols] @ w_attn), seed=13
        )
        model = R.fit_ranker(records, "loss", seed=14, space=space)
        ranked = R.feature_importance(model, records)
        assert ranked[0][0] == "enc_attn_type"
        assert ranked[0][1] > 0.1

    def test_requires_space_information(self, linear_landscape):
        _, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=15)
        with pytest.raises(ValueError):
            R.feature_importance(model, records)


class TestPruneSpace:
    def test_keep_all_leaves_space_searchable(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=16, space=space)
        ranked = R.feature_importance(model, records)
        best = min(records, key=lambda r: r.loss).config
        pruned = R.prune_space(space, ranked, keep_k=len(space.features), best_config=best)
        assert not pruned.frozen
        assert pruned.enumerable_size() == space.enumerable_size()

    def test_keep_zero_rejected(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=17, space=space)
        ranked = R.feature_importance(model, records)
        best = min(records, key=lambda r: r.loss).config
        with pytest.raises(ValueError):
            R.prune_space(space, ranked, keep_k=0, best_config=best)

    def test_pruned_features_frozen_to_best_candidate(self, linear_landscape):
        space, _, records = linear_landscape
        model = R.fit_ranker(records, "loss", seed=18, space=space)
        ranked = R.feature_importance(model, records)
        best = min(records, key=lambda r: r.loss).config
        pruned = R.prune_space(space, ranked, keep_k=2, best_config=best)
        assert len(pruned.frozen) == len(space.features) - 2
        rng = np.random.default_rng(19)
        for _ in range(20):
            cfg = pruned.sample(rng)
            space.validate_config(cfg)
            if "enc_emb_dim" in pruned.frozen:
                assert cfg.enc_emb_dim == best.enc_emb_dim
