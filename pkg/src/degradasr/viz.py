"""2-D embedding and cluster-quality diagnostics for learned representations.

Used to compare the sampling space (encoder output z) against the
representation space (projector penultimate features) for the same patches.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class VizError(ValueError):
    pass


def embed_2d(points: np.ndarray, seed: int = 0, perplexity: float = 30.0,
             n_iter: int = 1000) -> np.ndarray:
    """t-SNE embedding to 2 dimensions (PCA init, fixed seed)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 3:
        raise VizError("need a 2-D array with at least 3 points")
    from sklearn.manifold import TSNE

    perplexity = min(perplexity, (len(points) - 1) / 3.0)
    tsne = TSNE(n_components=2, init="pca", random_state=seed,
                perplexity=perplexity, max_iter=n_iter)
    return tsne.fit_transform(points)


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    For each point: a = mean distance to its own cluster (excluding itself),
    b = min over other clusters of the mean distance to that cluster,
    s = (b - a) / max(a, b).  Singleton clusters score 0.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if points.ndim != 2 or len(points) != len(labels):
        raise VizError("points/labels shape mismatch")
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise VizError("silhouette needs at least 2 clusters")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    scores = np.zeros(len(points))
    for i in range(len(points)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, labels == c].mean() for c in uniq if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def plot_latent_spaces(spaces: dict[str, np.ndarray], labels: np.ndarray,
                       out_dir, seed: int = 0,
                       min_cluster_size: int = 2) -> dict[str, float]:
    """Embed each named space, write one scatter PNG + CSV per space.

    Returns the silhouette score per space (computed on the original
    high-dimensional points, not the embedding).  Categories with fewer than
    `min_cluster_size` points are excluded from the score with a warning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels)
    scores: dict[str, float] = {}
    for name, points in spaces.items():
        points = np.asarray(points, dtype=np.float64)
        if len(points) != len(labels):
            raise VizError(f"space {name!r}: points/labels length mismatch")
        uniq, counts = np.unique(labels, return_counts=True)
        keep_cats = uniq[counts >= min_cluster_size]
        dropped = [c for c in uniq if c not in keep_cats]
        if dropped:
            warnings.warn(f"space {name!r}: excluding small categories "
                          f"{dropped} from silhouette")
        mask = np.isin(labels, keep_cats)
        if len(keep_cats) >= 2:
            scores[name] = silhouette(points[mask], labels[mask])
        else:
            scores[name] = float("nan")
            warnings.warn(f"space {name!r}: fewer than 2 usable categories")
        emb = embed_2d(points, seed=seed)

        fig, ax = plt.subplots(figsize=(6, 6))
        for c in uniq:
            sel = labels == c
            ax.scatter(emb[sel, 0], emb[sel, 1], s=12, label=str(c))
        ax.set_title(f"{name} (silhouette={scores[name]:.3f})")
        ax.legend(fontsize=7, markerscale=1.5)
        fig.savefig(out_dir / f"{name}.png", dpi=120)
        plt.close(fig)

        with open(out_dir / f"{name}.csv", "w", newline="",
                  encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "label"])
            for (x, y), c in zip(emb, labels):
                w.writerow([f"{x:.6f}", f"{y:.6f}", c])
    with open(out_dir / "silhouette.csv", "w", newline="",
              encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["space", "silhouette"])
        for name, s in scores.items():
            w.writerow([name, f"{s:.6f}"])
    return scores
