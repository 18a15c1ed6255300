"""Embedding, cosine ranking, goal resolution, and the embedding cache."""

import numpy as np
import pytest
import torch

from crossia import (
    ArchitectureConfig,
    EmbeddingVector,
    EncoderBundle,
    FormatError,
    GoalUnreachable,
    InvalidArgument,
    NumericError,
    RankingResult,
    VoxelSemanticMap,
    build_embedding_index,
    cosine_similarity,
    db_digest,
    embed,
    load_embedding_index,
    locate,
    rank_instances,
    save_embedding_index,
)

from _oracles import retrieval_rank, unit

_ARCH = ArchitectureConfig(input_size=32, feature_dim=16, proj_dim=8)


def _vec(values, source=""):
    return EmbeddingVector(np.asarray(values, dtype=np.float64), source=source)


class TestEmbeddingVector:
    def test_must_be_one_dimensional(self):
        with pytest.raises(InvalidArgument):
            EmbeddingVector(np.zeros((2, 2)))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            EmbeddingVector(np.array([1.0, np.nan]))

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericError):
            EmbeddingVector(np.zeros(4))


class TestCosineSimilarity:
    def test_matches_normalized_dot_product(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.normal(size=8), rng.normal(size=8)
            expected = float(np.dot(unit(a), unit(b)))
            assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-9)

    def test_symmetry_and_self_similarity(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert cosine_similarity(a, b) == pytest.approx(
            cosine_similarity(b, a), rel=1e-12)
        assert cosine_similarity(a, a) == pytest.approx(1.0, rel=1e-12)

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert cosine_similarity(3.7 * a, b) == pytest.approx(
            cosine_similarity(a, b), rel=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericError):
            cosine_similarity(np.zeros(3), np.ones(3))


class TestRankInstances:
    def _fixture_index(self):
        # cosines against query [1, 0]: instance 1 -> 0.9, instance 2 -> 0.5
        return {
            1: [_vec([0.9, np.sqrt(1 - 0.81)], "one")],
            2: [_vec([0.5, np.sqrt(0.75)], "two")],
        }

    def test_hand_fixture_scores_and_rank(self):
        result = rank_instances(_vec([1.0, 0.0], "q"), self._fixture_index(),
                                gt_instance=2)
        assert result.top_instance == 1
        assert [i for i, _ in result.ranking] == [1, 2]
        assert result.ranking[0][1] == pytest.approx(0.9, abs=1e-12)
        assert result.ranking[1][1] == pytest.approx(0.5, abs=1e-12)
        assert result.k == 2
        assert result.query == "q"

    def test_max_aggregation_takes_the_best_crop(self):
        index = {7: [_vec([0.2, np.sqrt(1 - 0.04)]),
                     _vec([0.8, np.sqrt(1 - 0.64)])]}
        by_max = rank_instances(_vec([1.0, 0.0]), index, aggregate="max")
        by_mean = rank_instances(_vec([1.0, 0.0]), index, aggregate="mean")
        assert by_max.ranking[0][1] == pytest.approx(0.8, abs=1e-12)
        assert by_mean.ranking[0][1] == pytest.approx(0.5, abs=1e-12)

    def test_exact_ties_list_lower_ids_first(self):
        same = [0.6, 0.8]
        index = {4: [_vec(same)], 2: [_vec(same)], 9: [_vec(same)]}
        result = rank_instances(_vec([1.0, 1.0]), index)
        assert [i for i, _ in result.ranking] == [2, 4, 9]
        assert result.top_instance == 2

    def test_rank_counts_lower_id_ties_above_ground_truth(self):
        same = [1.0, 0.0]
        index = {1: [_vec(same)], 5: [_vec(same)], 9: [_vec([0.0, 1.0])]}
        assert rank_instances(_vec(same), index, gt_instance=1).k == 1
        assert rank_instances(_vec(same), index, gt_instance=5).k == 2
        assert rank_instances(_vec(same), index, gt_instance=9).k == 3

    def test_rank_matches_oracle_on_random_draws(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            index = {
                int(i): [_vec(rng.normal(size=6))
                         for _ in range(int(rng.integers(1, 4)))]
                for i in rng.choice(50, size=rng.integers(3, 7), replace=False)
            }
            query = _vec(rng.normal(size=6))
            scores = {
                i: max(cosine_similarity(query.values, e.values)
                       for e in index[i])
                for i in index
            }
            gt = int(rng.choice(sorted(index)))
            result = rank_instances(query, index, gt_instance=gt)
            assert result.top_instance == min(
                scores, key=lambda i: (-scores[i], i))
            assert result.k == retrieval_rank(scores, gt)

    def test_global_positive_scaling_keeps_every_ordering(self):
        rng = np.random.default_rng(4)
        index = {i: [_vec(rng.normal(size=5)) for _ in range(2)]
                 for i in (1, 2, 3, 4)}
        query = _vec(rng.normal(size=5))
        scaled_index = {i: [_vec(3.7 * e.values) for e in index[i]]
                        for i in index}
        base = rank_instances(query, index)
        scaled = rank_instances(_vec(3.7 * query.values), scaled_index)
        assert [i for i, _ in base.ranking] == [i for i, _ in scaled.ranking]
        for (_, a), (_, b) in zip(base.ranking, scaled.ranking):
            assert a == pytest.approx(b, rel=1e-9)

    def test_missing_ground_truth_leaves_k_unset(self):
        result = rank_instances(_vec([1.0, 0.0]), self._fixture_index(),
                                gt_instance=99)
        assert result.k is None

    def test_empty_index_rejected(self):
        with pytest.raises(InvalidArgument):
            rank_instances(_vec([1.0, 0.0]), {})

    def test_unknown_aggregate_rejected(self):
        with pytest.raises(InvalidArgument):
            rank_instances(_vec([1.0, 0.0]), self._fixture_index(),
                           aggregate="median")


class TestRankingResult:
    def test_scores_must_be_non_increasing(self):
        with pytest.raises(InvalidArgument):
            RankingResult("q", ((1, 0.2), (2, 0.9)))

    def test_ids_must_be_unique(self):
        with pytest.raises(InvalidArgument):
            RankingResult("q", ((1, 0.9), (1, 0.5)))


@pytest.fixture(scope="module")
def bundle(db):
    return EncoderBundle(_ARCH, db.instance_ids, seed=0)


class TestEmbed:
    def test_deterministic_and_correct_shape(self, db, bundle):
        images = [db.load_image(c) for c in db.crops("low")[:4]]
        first = embed(bundle, images, sources=["a", "b", "c", "d"])
        second = embed(bundle, images)
        assert len(first) == 4
        for one, two in zip(first, second):
            assert one.values.shape == (_ARCH.feature_dim,)
            assert np.isfinite(one.values).all()
            np.testing.assert_array_equal(one.values, two.values)
        assert [e.source for e in first] == ["a", "b", "c", "d"]

    def test_handles_mixed_input_sizes(self, bundle):
        rng = np.random.default_rng(5)
        images = [rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
                  for h, w in ((10, 14), (64, 64), (33, 7))]
        assert len(embed(bundle, images)) == 3

    def test_empty_input(self, bundle):
        assert embed(bundle, []) == []


class TestIndexPersistence:
    def test_round_trip(self, db, bundle, tmp_path):
        index = build_embedding_index(bundle, db)
        assert sorted(index) == db.instance_ids
        path = tmp_path / "index.npz"
        save_embedding_index(index, path, bundle_fingerprint="fp",
                             database_digest=db_digest(db))
        loaded = load_embedding_index(path, expect_fingerprint="fp",
                                      expect_digest=db_digest(db))
        assert sorted(loaded) == sorted(index)
        for instance_id in index:
            assert [e.source for e in loaded[instance_id]] == \
                [e.source for e in index[instance_id]]
            for got, want in zip(loaded[instance_id], index[instance_id]):
                np.testing.assert_array_equal(got.values, want.values)

    def test_fingerprint_mismatch(self, db, bundle, tmp_path):
        index = build_embedding_index(bundle, db)
        save_embedding_index(index, tmp_path / "index.npz",
                             bundle_fingerprint="fp")
        with pytest.raises(FormatError, match="another bundle"):
            load_embedding_index(tmp_path / "index.npz",
                                 expect_fingerprint="other")

    def test_digest_mismatch(self, db, bundle, tmp_path):
        index = build_embedding_index(bundle, db)
        save_embedding_index(index, tmp_path / "index.npz",
                             database_digest="abc")
        with pytest.raises(FormatError, match="another database"):
            load_embedding_index(tmp_path / "index.npz", expect_digest="def")

    def test_unsupported_version(self, tmp_path):
        np.savez(tmp_path / "index.npz", format_version=np.int64(99))
        with pytest.raises(FormatError, match="version"):
            load_embedding_index(tmp_path / "index.npz")

    def test_digest_tracks_content(self, db):
        assert db_digest(db) == db_digest(db)
        assert db_digest(db) != db_digest(db.with_shots(0))


class TestLocate:
    def test_returns_consistent_ranking_and_goal(self, db, vmap, bundle):
        query = db.load_image(db.crops("low")[0])
        ranking, goal = locate(query, bundle, db, vmap)
        assert ranking.top_instance in db.instance_ids
        assert goal.instance_id == ranking.top_instance
        assert goal.distance_to_centroid <= 1.0 + 1e-9

    def test_singleton_index_forces_the_match(self, db, vmap, bundle):
        target = db.instance_ids[-1]
        index = build_embedding_index(bundle, db)
        query = db.load_image(db.crops("low")[0])
        ranking, goal = locate(query, bundle, db, vmap,
                               index={target: index[target]})
        assert ranking.top_instance == target
        assert goal.instance_id == target

    def test_unreachable_goal_propagates(self, db, bundle):
        blocked = VoxelSemanticMap(voxel_size=0.25)
        blocked.add_vote((0, 0, 1), 1)
        for i in range(-6, 7):
            for j in range(-6, 7):
                blocked.mark_occupied((i, j, 1))
        query = db.load_image(db.crops("low")[0])
        index = {1: embed(bundle, [query], sources=["x"])}
        with pytest.raises(GoalUnreachable):
            locate(query, bundle, db, blocked, index=index)
