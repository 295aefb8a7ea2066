"""Probe heads: linear, mixture-of-experts, kNN, PCA."""

import numpy as np
import pytest

from lessvit import heads as hd
from lessvit.heads import MoeHead
from lessvit.tensor import Tensor


def gaussian_clusters(rng, n_per, centers, scale=0.05):
    feats, labels = [], []
    for i, c in enumerate(centers):
        feats.append(rng.normal(scale=scale, size=(n_per, len(c))) + np.asarray(c))
        labels += [i] * n_per
    return np.concatenate(feats), np.array(labels)


class TestLinearProbe:
    def test_zero_weights_uniform_logits(self):
        out = hd.linear_head(np.ones((2, 4)), Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        assert np.all(out.data == 0.0)

    def test_one_hot_row_copies_feature(self):
        w = np.zeros((4, 2))
        w[2, 0] = 1.0
        feats = np.arange(8.0).reshape(2, 4)
        out = hd.linear_head(feats, Tensor(w), Tensor(np.zeros(2)))
        assert np.array_equal(out.data[:, 0], feats[:, 2])

    def test_separable_features_reach_full_accuracy(self):
        rng = np.random.default_rng(0)
        feats, labels = gaussian_clusters(rng, 30, [[2, 0, 0], [0, 2, 0], [0, 0, 2]])
        w, b = hd.train_linear_probe(feats, labels, 3, epochs=150, lr=5e-2, seed=0)
        preds = hd.linear_predict(feats, w, b)
        assert np.mean(preds == labels) == 1.0


class TestMoe:
    def _head(self, gates, weights, biases, top_k):
        return MoeHead(
            gates=[Tensor(g, requires_grad=True, name=f"moe.gate{i}") for i, g in enumerate(gates)],
            weights=[Tensor(w, requires_grad=True, name=f"moe.w{i}") for i, w in enumerate(weights)],
            biases=[Tensor(b, requires_grad=True, name=f"moe.b{i}") for i, b in enumerate(biases)],
            top_k=top_k,
        )

    def test_single_expert_is_gated_linear_head(self):
        rng = np.random.default_rng(1)
        c, d, k = 5, 6, 4
        gate = rng.normal(size=c)
        w = rng.normal(size=(d, k))
        b = rng.normal(size=k)
        head = self._head([gate], [w], [b], top_k=2)
        x = rng.normal(size=(3, c, d))
        preds = hd.moe_forward(x, head)
        probs = np.exp(gate - gate.max()) / np.exp(gate - gate.max()).sum()
        chosen = np.argsort(-probs, kind="stable")[:2]
        gw = probs[chosen] / probs[chosen].sum()
        pooled = np.einsum("k,bkd->bd", gw, x[:, chosen])
        assert np.array_equal(preds, (pooled @ w + b).argmax(axis=1))

    def test_identical_experts_match_single(self):
        rng = np.random.default_rng(2)
        gate, w, b = rng.normal(size=4), rng.normal(size=(5, 3)), rng.normal(size=3)
        single = self._head([gate], [w], [b], top_k=2)
        triple = self._head([gate] * 3, [w] * 3, [b] * 3, top_k=2)
        x = rng.normal(size=(6, 4, 5))
        assert np.array_equal(hd.moe_forward(x, single), hd.moe_forward(x, triple))

    def test_three_expert_hand_enumeration(self):
        # experts vote 0, 1, 1 -> class 1 wins the majority
        d, c = 2, 3
        x = np.zeros((1, c, d))
        x[0, :, 0] = 1.0
        gates = [np.array([10.0, -10, -10])] * 3
        w0 = np.array([[5.0, 0.0], [0.0, 0.0]])  # votes class 0
        w1 = np.array([[0.0, 5.0], [0.0, 0.0]])  # votes class 1
        head = self._head(gates, [w0, w1, w1], [np.zeros(2)] * 3, top_k=1)
        assert hd.moe_forward(x, head)[0] == 1

    def test_tie_broken_by_summed_probability(self):
        d, c = 2, 2
        x = np.ones((1, c, d))
        gates = [np.zeros(c)] * 2
        # expert 0 votes class 0 weakly, expert 1 votes class 1 strongly
        w0 = np.array([[0.1, 0.0], [0.0, 0.0]])
        w1 = np.array([[0.0, 3.0], [0.0, 0.0]])
        head = self._head(gates, [w0, w1], [np.zeros(2)] * 2, top_k=1)
        assert hd.moe_forward(x, head)[0] == 1

    def test_expert_permutation_invariance(self):
        rng = np.random.default_rng(3)
        gates = [rng.normal(size=6) for _ in range(4)]
        ws = [rng.normal(size=(5, 3)) for _ in range(4)]
        bs = [rng.normal(size=3) for _ in range(4)]
        x = rng.normal(size=(8, 6, 5))
        base = hd.moe_forward(x, self._head(gates, ws, bs, top_k=3))
        perm = [2, 0, 3, 1]
        shuffled = hd.moe_forward(
            x, self._head([gates[i] for i in perm], [ws[i] for i in perm],
                          [bs[i] for i in perm], top_k=3))
        assert np.array_equal(base, shuffled)

    def test_too_few_channels_rejected(self):
        with pytest.raises(ValueError):
            MoeHead.init(np.random.default_rng(0), 2, n_channels=2, dim=4,
                         n_classes=3, top_k=3)

    def test_training_learns_from_informative_channels(self):
        # class signal lives in channels 1..3; any top-3 pick sees some of it
        rng = np.random.default_rng(4)
        n, c, d = 120, 5, 6
        labels = rng.integers(0, 3, size=n)
        feats = rng.normal(scale=0.3, size=(n, c, d))
        for i in range(n):
            for ch in (1, 2, 3):
                feats[i, ch, labels[i]] += 1.5
        untrained = MoeHead.init(np.random.default_rng(0), 4, c, d, 3, top_k=3)
        base_acc = np.mean(hd.moe_forward(feats, untrained) == labels)
        head = hd.train_moe(feats, labels, 3, n_experts=4, top_k=3,
                            epochs=150, lr=5e-2, seed=0)
        acc = np.mean(hd.moe_forward(feats, head) == labels)
        assert acc > 0.9
        assert acc > base_acc


class TestKnn:
    def test_duplicate_training_point_wins(self):
        train = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        labels = np.array([2, 0, 2])
        preds = hd.knn_predict(train, labels, np.array([[1.0, 0.0]]), k=1)
        assert preds[0] == 2

    def test_separated_clusters_perfect(self):
        rng = np.random.default_rng(5)
        train_f, train_l = gaussian_clusters(rng, 50, [[3, 0], [0, 3]], scale=0.2)
        query_f, query_l = gaussian_clusters(rng, 30, [[3, 0], [0, 3]], scale=0.2)
        assert hd.knn_probe(train_f, train_l, query_f, query_l, k=20) == 1.0

    def test_k_equals_train_size_predicts_majority(self):
        rng = np.random.default_rng(6)
        train = rng.normal(size=(10, 3))
        labels = np.array([0] * 6 + [1] * 4)
        preds = hd.knn_predict(train, labels, rng.normal(size=(5, 3)), k=10)
        assert np.all(preds == 0)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(7)
        train_f, train_l = gaussian_clusters(rng, 40, [[2, 0, 0], [0, 2, 0]], scale=0.3)
        query_f = rng.normal(size=(25, 3)) + np.array([1, 1, 0])
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        base = hd.knn_predict(train_f, train_l, query_f, k=5)
        rotated = hd.knn_predict(train_f @ q.T, train_l, query_f @ q.T, k=5)
        assert np.array_equal(base, rotated)

    def test_empty_train_rejected(self):
        with pytest.raises(ValueError):
            hd.knn_predict(np.zeros((0, 3)), np.array([]), np.ones((1, 3)), k=1)


class TestPca:
    def test_line_captures_all_variance(self):
        rng = np.random.default_rng(8)
        t = rng.normal(size=50)
        direction = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
        x = np.outer(t, direction)
        with pytest.warns(UserWarning):
            scores, comps, vals = hd.pca_patch_features(x, n_components=3)
        assert comps.shape[0] == 1  # rank deficient: one component survives
        assert abs(abs(comps[0] @ direction) - 1.0) < 1e-8

    def test_isotropic_data_is_stable(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(200, 6))
        scores, comps, vals = hd.pca_patch_features(x, n_components=3)
        assert np.all(np.isfinite(scores)) and np.all(np.isfinite(vals))
        assert vals.max() / vals.min() < 2.0

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(50, 8)) @ np.diag([4, 3, 2, 1, 0.5, 0.3, 0.2, 0.1])
        _, comps, vals = hd.pca_patch_features(x, n_components=3)
        xc = x - x.mean(axis=0)
        ref = np.linalg.eigh(xc.T @ xc / 49)
        top3 = ref[0][::-1][:3]
        assert np.abs(vals - top3).max() < 1e-6
        for j in range(3):
            ref_vec = ref[1][:, ::-1][:, j]
            assert min(np.linalg.norm(comps[j] - ref_vec),
                       np.linalg.norm(comps[j] + ref_vec)) < 1e-5

    def test_components_orthonormal(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(80, 10)) * np.linspace(3, 0.5, 10)
        _, comps, _ = hd.pca_patch_features(x, n_components=4)
        gram = comps @ comps.T
        assert np.abs(gram - np.eye(4)).max() < 1e-6

    def test_scores_min_max_scaled(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(40, 5))
        scores, _, _ = hd.pca_patch_features(x, n_components=2)
        assert scores.min() >= 0.0 and scores.max() <= 1.0
        assert scores[:, 0].min() == 0.0 and scores[:, 0].max() == 1.0

    def test_ppm_export(self, tmp_path):
        grid = np.random.default_rng(13).random((4, 5, 3))
        path = str(tmp_path / "pca.ppm")
        hd.export_ppm(grid, path)
        text = open(path).read().split()
        assert text[0] == "P3"
        assert text[1] == "5" and text[2] == "4"
        assert len(text) == 4 + 4 * 5 * 3
