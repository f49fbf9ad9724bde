"""Sparsity signatures, similarity matrix, binarization, and persistence."""

import numpy as np
import pytest

from u2s import csm as cm


class TestChannelSparsity:
    def test_all_zero_channel(self):
        feats = np.zeros((2, 3, 4, 4))
        np.testing.assert_array_equal(cm.channel_sparsity(feats), np.ones(3))

    def test_all_positive_channel(self):
        feats = np.full((2, 3, 4, 4), 0.5)
        np.testing.assert_array_equal(cm.channel_sparsity(feats), np.zeros(3))

    def test_half_active_channel(self):
        feats = np.zeros((1, 1, 2, 4))
        feats[0, 0, 0, :] = 1.0  # 4 of 8 positions
        assert cm.channel_sparsity(feats).tolist() == [0.5]

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        feats = np.abs(rng.normal(size=(2, 5, 3, 3))) + 0.01
        a = cm.channel_sparsity(feats)
        b = cm.channel_sparsity(feats * 37.5)
        np.testing.assert_array_equal(a, b)

    def test_negative_features_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            cm.channel_sparsity(np.full((1, 2, 2, 2), -1.0))


class TestCategorySignatures:
    def test_single_sample_equals_own_sparsity(self):
        rng = np.random.default_rng(1)
        feats = [np.abs(rng.normal(size=(2, 4, 3, 3)))]
        sigs = cm.category_signatures(feats, [0], 1)
        np.testing.assert_array_equal(sigs[0].per_channel, cm.channel_sparsity(feats[0]))
        assert sigs[0].support_count == 1

    def test_two_identical_samples(self):
        rng = np.random.default_rng(2)
        f = np.abs(rng.normal(size=(1, 4, 2, 2)))
        sigs = cm.category_signatures([f, f.copy()], [0, 0], 1)
        np.testing.assert_array_equal(sigs[0].per_channel, cm.channel_sparsity(f))
        assert sigs[0].support_count == 2

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(3)
        feats = [np.abs(rng.normal(size=(2, 6, 3, 3))) for _ in range(9)]
        labels = [0, 1, 2, 0, 1, 2, 0, 1, 2]
        sigs = cm.category_signatures(feats, labels, 3)
        for m in range(3):
            rows = [cm.channel_sparsity(f) for f, l in zip(feats, labels) if l == m]
            expect = sum(rows) / len(rows)
            np.testing.assert_allclose(sigs[m].per_channel, expect, atol=1e-15)

    def test_empty_class_rejected(self):
        feats = [np.ones((1, 2, 2, 2))]
        with pytest.raises(ValueError, match="class 1 has no samples"):
            cm.category_signatures(feats, [0], 2)


def sig(vec):
    return cm.SparsitySignature(per_channel=np.asarray(vec, dtype=float))


class TestSimilarityMatrix:
    def test_identical_signatures(self):
        s = cm.similarity_matrix([sig([0.3, 0.7]), sig([0.3, 0.7])])
        assert s[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_supports(self):
        s = cm.similarity_matrix([sig([1.0, 0.0]), sig([0.0, 1.0])])
        assert s[0, 1] == 0.0

    def test_matches_brute_force_double_loop(self):
        rng = np.random.default_rng(4)
        sigs = [sig(rng.uniform(0, 1, size=6)) for _ in range(4)]
        s = cm.similarity_matrix(sigs)
        for i in range(4):
            for j in range(4):
                a, b = sigs[i].per_channel, sigs[j].per_channel
                expect = 1.0 if i == j else float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
                assert abs(s[i, j] - expect) < 1e-12

    def test_symmetric_unit_diagonal_in_range(self):
        rng = np.random.default_rng(5)
        sigs = [sig(rng.uniform(0, 1, size=8)) for _ in range(6)]
        s = cm.similarity_matrix(sigs)
        assert np.array_equal(s, s.T)
        assert np.array_equal(np.diag(s), np.ones(6))
        assert s.min() >= 0.0 and s.max() <= 1.0

    def test_zero_norm_signature_handled(self, caplog):
        with caplog.at_level("WARNING"):
            s = cm.similarity_matrix([sig([0.0, 0.0]), sig([0.5, 0.5])])
        assert s[0, 1] == 0.0 and s[0, 0] == 1.0
        assert any("zero-norm" in r.message for r in caplog.records)

    def test_euclidean_alternative_in_range(self):
        rng = np.random.default_rng(6)
        sigs = [sig(rng.uniform(0, 1, size=5)) for _ in range(4)]
        s = cm.similarity_matrix(sigs, metric="euclidean")
        assert s.min() >= 0.0 and s.max() <= 1.0
        assert np.array_equal(np.diag(s), np.ones(4))


class TestBinarize:
    def test_clear_pair_with_tight_budget(self):
        m = 8
        s = np.full((m, m), 0.3)
        s[0, 1] = s[1, 0] = 0.9
        np.fill_diagonal(s, 1.0)
        result = cm.binarize_with_target_degree(s, 1)
        expect = np.eye(m)
        expect[0, 1] = expect[1, 0] = 1.0
        np.testing.assert_array_equal(result.C_bin, expect)
        assert result.alpha == 0.9

    def test_full_budget_includes_everything(self):
        rng = np.random.default_rng(7)
        base = rng.uniform(0.1, 0.9, size=(5, 5))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        result = cm.binarize_with_target_degree(s, 4)
        off = s[~np.eye(5, dtype=bool)]
        assert result.alpha <= off.min()
        np.testing.assert_array_equal(result.C_bin, np.ones((5, 5)))

    def test_matches_sort_and_scan_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(30):
            base = rng.uniform(0, 1, size=(8, 8))
            s = (base + base.T) / 2
            np.fill_diagonal(s, 1.0)
            target = float(rng.integers(1, 8))
            result = cm.binarize_with_target_degree(s, target)
            # oracle: try every off-diagonal value as alpha with a double loop
            off = sorted({s[i, j] for i in range(8) for j in range(8) if i != j})
            feasible = []
            for alpha in off:
                ones = sum(
                    1 for i in range(8) for j in range(8) if i != j and s[i, j] >= alpha
                )
                if ones / 8 <= target:
                    feasible.append(alpha)
            assert feasible, "oracle found no feasible alpha but binarize did"
            assert result.alpha == pytest.approx(min(feasible), abs=0.0)

    def test_degenerate_all_equal(self, caplog):
        s = np.full((4, 4), 0.4)
        np.fill_diagonal(s, 1.0)
        with caplog.at_level("WARNING"):
            result = cm.binarize_with_target_degree(s, 1)
        assert result.alpha == pytest.approx(0.7)
        np.testing.assert_array_equal(result.C_bin, np.eye(4))
        assert any("degenerate" in r.message for r in caplog.records)

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(9)
        base = rng.uniform(0, 1, size=(6, 6))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        low = cm.binarize_with_target_degree(s, 1)
        high = cm.binarize_with_target_degree(s, 5)
        assert low.alpha >= high.alpha
        assert ((low.C_bin == 1) <= (high.C_bin == 1)).all()

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(10)
        base = rng.uniform(0, 1, size=(7, 7))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        result = cm.binarize_with_target_degree(s, 2)
        np.testing.assert_array_equal(result.C_bin, result.C_bin.T)

    def test_target_degree_range(self):
        s = np.eye(3)
        with pytest.raises(ValueError):
            cm.binarize_with_target_degree(s, 0.5)
        with pytest.raises(ValueError):
            cm.binarize_with_target_degree(s, 3)


class TestInterclassVector:
    def test_two_classes(self):
        s = np.array([[1.0, 0.4], [0.4, 1.0]])
        vec = cm.interclass_similarity_vector(s)
        assert vec.tolist() == [0.0, 0.0]  # equal sums: constant case

    def test_identity_matrix_constant_case(self, caplog):
        with caplog.at_level("WARNING"):
            vec = cm.interclass_similarity_vector(np.eye(5))
        np.testing.assert_array_equal(vec, np.zeros(5))

    def test_matches_hand_normalization(self):
        rng = np.random.default_rng(11)
        base = rng.uniform(0, 1, size=(5, 5))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        vec = cm.interclass_similarity_vector(s)
        raw = np.array([s[i].sum() - 1.0 for i in range(5)])
        expect = (raw - raw.min()) / (raw.max() - raw.min())
        np.testing.assert_allclose(vec, expect, atol=1e-12)


class TestFullPipelineOracle:
    def test_three_class_fixture_matches_straight_line_script(self):
        # 3 classes, 2 samples each, C=4: run the entire pipeline and an
        # independent brute-force recomputation side by side
        rng = np.random.default_rng(12)
        feats = [np.abs(rng.normal(size=(2, 4, 3, 3))) * (rng.uniform(size=(2, 4, 3, 3)) > 0.4)
                 for _ in range(6)]
        labels = [0, 0, 1, 1, 2, 2]
        sigs = cm.category_signatures(feats, labels, 3)
        s = cm.similarity_matrix(sigs)
        result = cm.binarize_with_target_degree(s, 1)

        # brute force, no shared helpers
        xi = []
        for f in feats:
            t, c, h, w = f.shape
            per_channel = []
            for ch in range(c):
                count = 0
                for tt in range(t):
                    for hh in range(h):
                        for ww in range(w):
                            if f[tt, ch, hh, ww] > 1e-6:
                                count += 1
                per_channel.append(1.0 - count / (t * h * w))
            xi.append(per_channel)
        mean_sig = []
        for m in range(3):
            rows = [xi[i] for i in range(6) if labels[i] == m]
            mean_sig.append([sum(col) / len(rows) for col in zip(*rows)])
        s_expect = [[0.0] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(3):
                if i == j:
                    s_expect[i][j] = 1.0
                else:
                    dot = sum(a * b for a, b in zip(mean_sig[i], mean_sig[j]))
                    ni = sum(a * a for a in mean_sig[i]) ** 0.5
                    nj = sum(b * b for b in mean_sig[j]) ** 0.5
                    s_expect[i][j] = dot / (ni * nj)
        for i in range(3):
            for j in range(3):
                assert abs(s[i, j] - s_expect[i][j]) < 1e-12
        # binarization oracle: smallest feasible off-diagonal value
        off = sorted({s_expect[i][j] for i in range(3) for j in range(3) if i != j})
        feasible = [a for a in off if sum(v >= a for row_i in range(3) for v in s_expect[row_i])
                    - 3 <= 3]  # off-diag count vs budget M*N_t = 3
        assert abs(result.alpha - min(feasible)) < 1e-12


class TestPersistence:
    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        base = rng.uniform(0, 1, size=(4, 4))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        original = cm.binarize_with_target_degree(s, 2)
        names = [f"class_{i:02d}" for i in range(4)]
        path = tmp_path / "csm.json"
        cm.save_csm(path, original, names)
        loaded, loaded_names = cm.load_csm(path)
        assert loaded_names == names
        assert np.array_equal(loaded.S, original.S)
        assert np.array_equal(loaded.C_bin, original.C_bin)
        assert loaded.alpha == original.alpha
        assert loaded.mode == original.mode

    def test_validation_rejects_tampering(self, tmp_path):
        s = np.eye(3)
        csm = cm.Csm(S=s, C_bin=np.ones((3, 3)), alpha=0.5, mode="binary")
        with pytest.raises(ValueError, match="C_bin"):
            csm.validate()
