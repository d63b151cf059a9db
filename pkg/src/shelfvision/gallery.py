"""Gallery index: the recognition database of labeled embeddings.

Built from the query-image db by encoding each product image plus a
number of augmented variants. Classification is nearest-neighbor over
squared Euclidean distance (on unit vectors this ranks identically to
cosine distance); top-K ranks labels by their closest gallery entry.

The index is immutable once built; readers may share it freely.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import archive
from .embedder import AugmentParams, PatchEmbedder, augment

INDEX_KIND = "gallery-index"
NORM_TOL = 1e-5


class StaleGalleryWarning(UserWarning):
    """The index was built from different embedder weights than are in use."""


@dataclass
class GalleryIndex:
    labels: list[str]
    vectors: np.ndarray  # (N, D) float32, unit rows
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if len(self.labels) != len(self.vectors):
            raise ValueError("labels and vectors must have equal length")
        if len(self.vectors) == 0:
            raise ValueError("gallery index cannot be empty")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValueError("all gallery embeddings must be unit-norm")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def distinct_labels(self) -> list[str]:
        return sorted(set(self.labels))

    def check_fingerprint(self, fingerprint: str, warn: bool = True) -> bool:
        ok = self.metadata.get("fingerprint") == fingerprint
        if not ok and warn:
            warnings.warn(
                "gallery index was built from different embedder weights; rebuild it",
                StaleGalleryWarning,
            )
        return ok


def build_gallery(
    products: list[tuple[str, np.ndarray]],
    embedder: PatchEmbedder,
    n_aug: int = 8,
    params: AugmentParams | None = None,
    seed: int = 0,
) -> GalleryIndex:
    """Encode each query image plus *n_aug* augmented variants.

    Produces (n_aug + 1) entries per product, in db order with the
    original first; deterministic given the seed.
    """
    if not products:
        raise ValueError("query-image database is empty")
    if n_aug < 0:
        raise ValueError("n_aug must be >= 0")
    labels = [label for label, _ in products]
    if len(set(labels)) != len(labels):
        raise ValueError("query-image labels must be unique")
    params = params or embedder.augment_params()

    out_labels: list[str] = []
    images: list[np.ndarray] = []
    for pi, (label, image) in enumerate(products):
        images.append(image)
        out_labels.append(label)
        for k in range(n_aug):
            images.append(augment(image, params, [int(seed), pi, k]))
            out_labels.append(label)
    vectors = embedder.transform(images)
    meta = {
        "fingerprint": embedder.weights_fingerprint(),
        "n_aug": int(n_aug),
        "augment": params.to_meta(),
        "seed": int(seed),
    }
    return GalleryIndex(out_labels, vectors, meta)


def classify(embedding, index: GalleryIndex) -> tuple[str, float]:
    """Label of the nearest gallery entry plus its squared distance.

    Distance ties break by label lexicographic order, then insertion
    order.
    """
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    d2 = ((index.vectors.astype(np.float64) - e) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), np.asarray(index.labels), d2))
    best = order[0]
    return index.labels[best], float(d2[best])


def topk(embedding, index: GalleryIndex, k: int) -> list[tuple[str, float]]:
    """Up to k distinct labels ranked by each label's minimum distance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    d2 = ((index.vectors.astype(np.float64) - e) ** 2).sum(axis=1)
    best: dict[str, float] = {}
    for label, dist in zip(index.labels, d2):
        if label not in best or dist < best[label]:
            best[label] = float(dist)
    ranked = sorted(best.items(), key=lambda item: (item[1], item[0]))
    return ranked[:k]


def save_index(index: GalleryIndex, path) -> None:
    data = dump_index(index)
    with open(path, "wb") as fh:
        fh.write(data)


def dump_index(index: GalleryIndex) -> bytes:
    meta = {"kind": INDEX_KIND, "labels": list(index.labels), **index.metadata}
    return archive.dump_arrays({"vectors": index.vectors}, meta)


def load_index(path) -> GalleryIndex:
    arrays, meta = archive.load_archive(path)
    if meta.get("kind") != INDEX_KIND:
        raise archive.ArchiveError(f"{path} is not a gallery index")
    labels = meta.pop("labels")
    meta.pop("kind")
    return GalleryIndex(labels, arrays["vectors"], meta)


class GalleryClassifier(BaseEstimator):
    """Nearest-gallery-entry product classifier over a fitted embedder.

    fit(X, y) takes one query image per product class; predict(X) maps
    patches to labels, and predict_ranked gives the per-patch top-K
    (label, distance) lists.
    """

    def __init__(self, embedder: PatchEmbedder, n_aug: int = 8, seed: int = 0):
        self.embedder = embedder
        self.n_aug = n_aug
        self.seed = seed

    def fit(self, X, y):
        products = [(str(label), image) for label, image in zip(y, X)]
        self.index_ = build_gallery(
            products, self.embedder, n_aug=self.n_aug, seed=self.seed
        )
        self.classes_ = np.asarray(self.index_.distinct_labels)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        emb = self.embedder.transform(X)
        return np.asarray([classify(e, self.index_)[0] for e in emb])

    def predict_ranked(self, X, k: int) -> list[list[tuple[str, float]]]:
        check_is_fitted(self, "index_")
        emb = self.embedder.transform(X)
        return [topk(e, self.index_, k) for e in emb]
