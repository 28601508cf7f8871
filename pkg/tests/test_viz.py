import csv

import numpy as np
import pytest

from degradasr.viz import VizError, embed_2d, plot_latent_spaces, silhouette


def brute_force_silhouette(points, labels):
    """Independent silhouette oracle, straight from the definition."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)

    def d(i, j):
        return float(np.linalg.norm(points[i] - points[j]))

    vals = []
    for i in range(len(points)):
        same = [j for j in range(len(points)) if labels[j] == labels[i] and j != i]
        if not same:
            vals.append(0.0)
            continue
        a = sum(d(i, j) for j in same) / len(same)
        b = min(
            sum(d(i, j) for j in range(len(points)) if labels[j] == c)
            / sum(1 for j in range(len(points)) if labels[j] == c)
            for c in set(labels.tolist()) if c != labels[i]
        )
        vals.append((b - a) / max(a, b))
    return sum(vals) / len(vals)


def two_clusters(n=30, d=8, sep=40.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0, size=(n, d))
    b = rng.normal(0.0, 1.0, size=(n, d))
    b[:, 0] += sep
    pts = np.concatenate([a, b])
    labels = np.array([0] * n + [1] * n)
    return pts, labels


class TestSilhouette:
    def test_matches_brute_force_oracle(self):
        # [DERIVED] vectorized implementation vs literal-definition oracle
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(24, 5))
        labels = rng.integers(0, 3, size=24)
        got = silhouette(pts, labels)
        want = brute_force_silhouette(pts, labels)
        assert got == pytest.approx(want, rel=1e-12)

    def test_well_separated_clusters_score_high(self):
        # [DERIVED] clusters 40 sigma apart must be nearly perfectly separated
        pts, labels = two_clusters()
        assert silhouette(pts, labels) > 0.8

    def test_identical_distributions_score_low(self):
        pts, labels = two_clusters(sep=0.0, seed=1)
        assert abs(silhouette(pts, labels)) < 0.2

    def test_singleton_cluster_scores_zero(self):
        # [TRIVIAL] a lone point contributes 0 by convention
        pts = np.array([[0.0], [10.0], [10.5]])
        labels = np.array([0, 1, 1])
        oracle = brute_force_silhouette(pts, labels)
        assert silhouette(pts, labels) == pytest.approx(oracle)

    def test_single_cluster_rejected(self):
        with pytest.raises(VizError):
            silhouette(np.zeros((4, 2)), np.zeros(4, dtype=int))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(VizError):
            silhouette(np.zeros((4, 2)), np.zeros(3, dtype=int))


class TestEmbed:
    def test_output_shape_and_determinism(self):
        pts, _ = two_clusters(n=15, d=8)
        e1 = embed_2d(pts, seed=7)
        e2 = embed_2d(pts, seed=7)
        assert e1.shape == (30, 2)
        np.testing.assert_array_equal(e1, e2)

    def test_too_few_points_rejected(self):
        with pytest.raises(VizError):
            embed_2d(np.zeros((2, 4)))

    def test_separated_clusters_stay_separated(self):
        # [DERIVED] a 40-sigma gap survives the embedding: the 2-D silhouette
        # of the t-SNE output must still clearly separate the two clusters.
        pts, labels = two_clusters(n=20, d=16)
        emb = embed_2d(pts, seed=0)
        assert silhouette(emb, labels) > 0.5


class TestPlot:
    def test_outputs_written_and_csv_round_trip(self, tmp_path):
        pts, labels = two_clusters(n=10, d=8)
        scores = plot_latent_spaces({"sampling": pts, "representation": pts * 2},
                                    labels, tmp_path, seed=0)
        for name in ("sampling", "representation"):
            assert (tmp_path / f"{name}.png").exists()
            with open(tmp_path / f"{name}.csv") as f:
                rows = list(csv.reader(f))
            assert rows[0] == ["x", "y", "label"]
            assert len(rows) == 21
            assert scores[name] > 0.8
        with open(tmp_path / "silhouette.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["space", "silhouette"]
        assert {r[0] for r in rows[1:]} == {"sampling", "representation"}

    def test_small_categories_excluded_with_warning(self, tmp_path):
        pts, labels = two_clusters(n=10, d=8)
        labels = labels.copy()
        labels[0] = 9  # singleton category
        with pytest.warns(UserWarning, match="excluding small categories"):
            scores = plot_latent_spaces({"s": pts}, labels, tmp_path)
        assert scores["s"] > 0.8

    def test_length_mismatch_rejected(self, tmp_path):
        pts, labels = two_clusters(n=5, d=4)
        with pytest.raises(VizError):
            plot_latent_spaces({"s": pts}, labels[:-1], tmp_path)
