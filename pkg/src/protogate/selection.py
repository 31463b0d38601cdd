"""Representative-sample selection.

Given a labeled pool of embeddings, pick k samples per class by clustering
each class's features and taking the member nearest each centroid. The
output is a small, diverse training set: one sample per discovered mode
rather than k draws from wherever the density is highest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import kmeans, nearest_to_centroid
from .dataio import EmbeddingDataset
from .errors import ConsistencyError, InfeasibleError, ValidationError


@dataclass
class ClassSelection:
    """Selection outcome for one class."""

    class_id: int
    chosen: np.ndarray           # (k,) pool row indices
    cluster_sizes: np.ndarray    # (k,) members per cluster
    cluster_inertias: np.ndarray  # (k,) within-cluster squared distance

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "chosen": self.chosen.tolist(),
            "cluster_sizes": self.cluster_sizes.tolist(),
            "cluster_inertias": self.cluster_inertias.tolist(),
        }


@dataclass
class SelectionReport:
    k: int
    classes: list[ClassSelection]

    @property
    def total_selected(self) -> int:
        return sum(len(c.chosen) for c in self.classes)

    def all_indices(self) -> np.ndarray:
        """Pool row indices in output order: by class id, pool order within."""
        parts = [np.sort(c.chosen) for c in self.classes]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "total_selected": self.total_selected,
            "classes": [c.to_dict() for c in self.classes],
        }


def select_representatives(pool: EmbeddingDataset, k: int, seed) -> SelectionReport:
    """Pick k representatives per class from a labeled pool.

    Each class is clustered independently (seeded per class, so adding a
    class never perturbs the others) and each cluster contributes the
    member nearest its centroid. A class with fewer than k samples cannot
    be covered and is an error rather than a silent shortfall.
    """
    pool.validate()
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    n_classes = len(pool.class_names)
    classes = []
    for class_id in range(n_classes):
        rows = np.where(pool.labels == class_id)[0]
        if len(rows) < k:
            raise InfeasibleError(
                f"class {class_id} ({pool.class_names[class_id]!r}) has "
                f"{len(rows)} samples, need at least k={k}"
            )
        feats = pool.vectors[rows]
        result = kmeans(feats, k=k, seed=[seed, class_id])
        local = nearest_to_centroid(result, feats)
        chosen = _dedupe(local, result.assignments, feats, result.centroids)
        sizes = np.bincount(result.assignments, minlength=k)
        inertias = np.zeros(k)
        for c in range(k):
            members = feats[result.assignments == c]
            inertias[c] = ((members - result.centroids[c]) ** 2).sum()
        classes.append(
            ClassSelection(
                class_id=class_id,
                chosen=rows[chosen].astype(np.int64),
                cluster_sizes=sizes.astype(np.int64),
                cluster_inertias=inertias,
            )
        )
    return SelectionReport(k=k, classes=classes)


def _dedupe(local, assignments, feats, centroids):
    """Resolve representative collisions across clusters.

    Clusters partition the points, so collisions cannot arise from a
    healthy clustering; the walk to the next-nearest member is a guard
    that keeps the k-distinct guarantee unconditional.
    """
    taken: set[int] = set()
    out = np.empty(len(local), dtype=np.int64)
    for c, idx in enumerate(local.tolist()):
        if idx not in taken:
            taken.add(idx)
            out[c] = idx
            continue
        members = np.where(assignments == c)[0]
        dists = ((feats[members] - centroids[c]) ** 2).sum(axis=1)
        for cand in members[np.argsort(dists, kind="stable")].tolist():
            if cand not in taken:
                taken.add(cand)
                out[c] = cand
                break
        else:
            raise ConsistencyError(f"cluster {c} exhausted during dedup")
    return out


def materialize_selection(
    pool: EmbeddingDataset, report: SelectionReport
) -> EmbeddingDataset:
    """Extract the selected rows as a new dataset.

    Rows come out grouped by class id, pool order within each class. Works
    on any dataset aligned row-for-row with the pool the report was built
    from (e.g. the paired context view).
    """
    idx = report.all_indices()
    if idx.size and (idx.min() < 0 or idx.max() >= pool.n):
        raise ConsistencyError(
            f"report references row {int(idx.max())} outside pool of {pool.n}"
        )
    seen = set()
    for sel in report.classes:
        if len(sel.chosen) != report.k:
            raise ConsistencyError(
                f"class {sel.class_id} carries {len(sel.chosen)} picks, "
                f"expected k={report.k}"
            )
        for i in sel.chosen.tolist():
            if i in seen:
                raise ConsistencyError(f"row {i} selected twice")
            seen.add(i)
            if pool.labels[i] != sel.class_id:
                raise ConsistencyError(
                    f"row {i} has label {int(pool.labels[i])}, report "
                    f"claims class {sel.class_id}"
                )
    out = pool.take(idx)
    return out.validate()
