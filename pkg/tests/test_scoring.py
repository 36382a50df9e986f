"""Unit tests for token importance scoring."""

import numpy as np
import pytest

from prunemerge import scoring
from prunemerge import tensor as T
from prunemerge import vit
from prunemerge.data import synthetic_shapes
from prunemerge.errors import ContractError, ShapeMismatchError
from prunemerge.scoring import ScorerVariant


class TestTaylorToken:
    def test_zero_gradient(self):
        z = np.random.default_rng(0).normal(size=(4, 8))
        np.testing.assert_array_equal(
            scoring.score_taylor_token(z, np.zeros_like(z)), np.zeros(4))

    def test_signed_cancellation(self):
        z = np.array([[1.0, 2.0]])
        g = np.array([[0.5, -0.25]])
        np.testing.assert_allclose(scoring.score_taylor_token(z, g), [0.0])

    def test_unit_case(self):
        np.testing.assert_allclose(
            scoring.score_taylor_token(np.array([[1.0, 1.0]]),
                                       np.array([[1.0, 1.0]])), [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            scoring.score_taylor_token(np.zeros((3, 2)), np.zeros((2, 2)))


class TestGradWeightedAttention:
    def test_hand_column_sums(self):
        a = np.array([[[0.9, 0.1], [0.6, 0.4]]])  # one head, query-major
        g = np.ones_like(a)
        np.testing.assert_allclose(
            scoring.score_grad_weighted_attention(a, g), [1.5, 0.5])

    def test_zero_gradient(self):
        a = np.full((2, 3, 3), 1 / 3)
        np.testing.assert_array_equal(
            scoring.score_grad_weighted_attention(a, np.zeros_like(a)),
            np.zeros(3))

    def test_duplicate_heads_match_single_head(self):
        rng = np.random.default_rng(42)
        a1 = rng.uniform(size=(1, 4, 4))
        a1 /= a1.sum(-1, keepdims=True)
        g1 = rng.normal(size=(1, 4, 4))
        single = scoring.score_grad_weighted_attention(a1, g1)
        a2 = np.concatenate([a1, a1], axis=0)
        g2 = np.concatenate([g1, g1], axis=0)
        np.testing.assert_allclose(
            scoring.score_grad_weighted_attention(a2, g2), single, atol=1e-12)

    def test_head_permutation_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(size=(3, 5, 5))
        g = rng.normal(size=(3, 5, 5))
        base = scoring.score_grad_weighted_attention(a, g)
        perm = [2, 0, 1]
        np.testing.assert_allclose(
            scoring.score_grad_weighted_attention(a[perm], g[perm]), base,
            atol=1e-12)

    def test_batch_folds_inside_absolute_value(self):
        # Two samples with opposite-sign gradients must cancel, not add.
        a = np.full((2, 1, 2, 2), 0.5)
        g = np.stack([np.ones((1, 2, 2)), -np.ones((1, 2, 2))])
        np.testing.assert_allclose(
            scoring.score_grad_weighted_attention(a, g), [0.0, 0.0])


class TestOtherVariants:
    def test_attn_only_sums_to_token_count(self):
        rng = np.random.default_rng(42)
        for n in (3, 7, 17):
            a = rng.uniform(size=(4, 2, n, n))
            a /= a.sum(-1, keepdims=True)
            s = scoring.score_attention_only(a)
            np.testing.assert_allclose(s.sum(), n, atol=1e-8)

    def test_attn_class_row(self):
        a = np.zeros((1, 2, 2))
        a[0, 0] = [0.3, 0.7]
        a[0, 1] = [0.9, 0.1]
        np.testing.assert_allclose(
            scoring.score_attention_only(a, class_only=True), [0.3, 0.7])

    def test_grad_only_ignores_attention(self):
        g = np.array([[[1.0, -2.0], [3.0, 1.0]]])
        np.testing.assert_allclose(scoring.score_gradient_only(g), [4.0, 1.0])

    def test_random_variant_needs_rng(self):
        trace = vit.AttentionTrace(layer=0)
        with pytest.raises(ContractError):
            scoring.scores_from_trace(trace, ScorerVariant.RANDOM)

    def test_unknown_variant_name(self):
        with pytest.raises(ContractError, match="unknown scorer"):
            ScorerVariant.from_name("best_guess")


class TestAccumulate:
    def test_single_iteration_identity(self):
        x = np.array([1.0, 2.0, 3.0])
        s = scoring.accumulate(np.zeros(3), x)
        np.testing.assert_array_equal(scoring.finalize(s, 1), x)

    def test_two_identical_iterations(self):
        x = np.array([0.5, 1.5])
        s = scoring.accumulate(scoring.accumulate(np.zeros(2), x), x)
        np.testing.assert_array_equal(scoring.finalize(s, 2), x)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ContractError):
            scoring.finalize(np.zeros(2), 0)

    def test_accumulator_counts(self):
        acc = scoring.ScoreAccumulator([2, 2])
        acc.add([np.ones(2), np.zeros(2)])
        acc.add([np.ones(2), np.ones(2)])
        out = acc.finalize()
        assert acc.iterations == 2
        np.testing.assert_array_equal(out[0], [1.0, 1.0])
        np.testing.assert_array_equal(out[1], [0.5, 0.5])
        assert all((s >= 0).all() for s in out)


class TestTokenMask:
    def test_no_pruning(self):
        np.testing.assert_array_equal(
            scoring.make_token_mask(np.array([0.1, 0.2, 0.3]), 0),
            [1, 1, 1])

    def test_min_selection(self):
        mask = scoring.make_token_mask(np.array([0.9, 0.1, 0.5, 0.2]), 1)
        np.testing.assert_array_equal(mask, [1, 0, 1, 1])

    def test_all_but_class(self):
        mask = scoring.make_token_mask(np.array([0.0, 0.9, 0.9, 0.9]), 3,
                                       class_token=True)
        np.testing.assert_array_equal(mask, [1, 0, 0, 0])

    def test_ties_prune_higher_index_first(self):
        mask = scoring.make_token_mask(np.array([0.5, 0.2, 0.2, 0.2]), 2,
                                       class_token=False)
        np.testing.assert_array_equal(mask, [1, 1, 0, 0])

    def test_zero_count_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            p = int(rng.integers(0, n - 1))
            mask = scoring.make_token_mask(rng.uniform(size=n), p)
            assert int((mask == 0).sum()) == p
            assert mask[0] == 1  # class exempt

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            scoring.make_token_mask(np.ones(4), 4)
        with pytest.raises(ContractError):
            scoring.make_token_mask(np.ones(4), -1)


class TestPruneCount:
    def test_default_threshold(self):
        # 17 tokens, one class token: round(0.1 * 16) = 2
        assert scoring.prune_count_for(0.1, 17) == 2

    def test_rounding_half_up(self):
        assert scoring.prune_count_for(0.5, 6, class_token=False) == 3
        assert scoring.round_half_up(2.5) == 3
        assert scoring.round_half_up(2.4999) == 2

    def test_range_check(self):
        with pytest.raises(ContractError):
            scoring.prune_count_for(1.5, 10)


@pytest.fixture(scope="module")
def model_and_data():
    cfg = vit.ModelConfig(image_size=8, patch_size=4, channels=1,
                          embed_dim=8, depth=2, heads=2, num_classes=10)
    model = vit.VisionTransformer.build(cfg, seed=0)
    ds = synthetic_shapes(24, image_size=8, seed=1)
    return model, ds


class TestCollectScores:
    def test_deterministic_and_nonnegative(self, model_and_data):
        model, ds = model_and_data
        a = scoring.collect_scores(model, ds, iterations=3, batch_size=8,
                                   seed=5)
        b = scoring.collect_scores(model, ds, iterations=3, batch_size=8,
                                   seed=5)
        assert len(a) == 2
        for sa, sb in zip(a, b):
            assert sa.shape == (5,)
            assert (sa >= 0).all()
            np.testing.assert_array_equal(sa, sb)

    def test_scoring_leaves_model_untouched(self, model_and_data):
        model, ds = model_and_data
        before = {n: t.data.copy() for n, t in model.named_parameters()}
        scoring.collect_scores(model, ds, iterations=2, batch_size=8, seed=0)
        for n, t in model.named_parameters():
            np.testing.assert_array_equal(t.data, before[n])
            assert t.grad is None  # grads zeroed after the pass

    def test_variants_produce_distinct_scores(self, model_and_data):
        model, ds = model_and_data
        results = {}
        for variant in ScorerVariant:
            results[variant] = scoring.collect_scores(
                model, ds, iterations=2, batch_size=8, seed=3,
                variant=variant)
        default = results[ScorerVariant.GRAD_WEIGHTED_AVG]
        assert not np.allclose(results[ScorerVariant.ATTN_ONLY_AVG][0],
                               default[0])
        assert not np.allclose(results[ScorerVariant.RANDOM][0], default[0])

    def test_csv_round_trip(self, model_and_data, tmp_path):
        model, ds = model_and_data
        scores = scoring.collect_scores(model, ds, iterations=1, batch_size=8,
                                        seed=2)
        path = tmp_path / "scores.csv"
        scoring.export_scores_csv(path, scores)
        loaded = scoring.load_scores_csv(path)
        assert len(loaded) == len(scores)
        for a, b in zip(scores, loaded):
            np.testing.assert_array_equal(a, b)

    def test_malformed_csv_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("layer,token,score\n0,0,1.0\n")
        with pytest.raises(ContractError):
            scoring.load_scores_csv(p)
