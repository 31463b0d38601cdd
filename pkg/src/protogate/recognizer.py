"""Open-set routing and evaluation.

Every test sample gets a closed-set prediction, then a similarity score
between its projected feature and the predicted class's prototype. A
threshold comparator turns the score into a known/unknown call: known
samples keep the closed-set label, unknown ones are delegated to a
pluggable fallback model. The two comparator directions are both
implemented because either reading is defensible; exactly one is active
per run and it is recorded in every report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import Projector, PrototypeBank
from .context import ContextDictionary, FusionHead, predict_closed
from .dataio import UNKNOWN_LABEL, EmbeddingDataset
from .errors import UndefinedSimilarityError, ValidationError
from .numkit import cosine_similarity

COMPARATORS = ("sim-above-known", "sim-above-unknown")
OPEN_METRICS = ("detection", "label")

SOURCE_CLOSED = "closed_head"
SOURCE_FALLBACK = "fallback"


@dataclass
class Decision:
    index: int
    csr_label: int      # closed-set prediction, always computed
    similarity: float   # NaN when the projected feature had zero norm
    is_known: bool
    final_label: int
    source: str         # SOURCE_CLOSED or SOURCE_FALLBACK

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "csr_label": self.csr_label,
            "similarity": self.similarity,
            "is_known": self.is_known,
            "final_label": self.final_label,
            "source": self.source,
        }


@dataclass
class PrototypeFallback:
    """Nearest-prototype open-vocabulary stand-in.

    Rows may cover classes the closed head never saw; labels map each row
    to a global class id.
    """

    prototypes: np.ndarray  # (m, d)
    labels: np.ndarray      # (m,) global class ids
    class_names: list[str]

    def validate(self) -> "PrototypeFallback":
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] == 0:
            raise ValidationError("fallback needs at least one prototype row")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValidationError("fallback prototypes contain non-finite values")
        if self.labels.shape != (self.prototypes.shape[0],):
            raise ValidationError("fallback labels do not match prototype rows")
        return self

    @classmethod
    def from_dataset(cls, ds: EmbeddingDataset) -> "PrototypeFallback":
        return cls(
            prototypes=ds.vectors.copy(),
            labels=ds.labels.copy(),
            class_names=list(ds.class_names),
        ).validate()

    def predict(self, f: np.ndarray) -> int:
        return fallback_predict(f, self)


@dataclass
class NullFallback:
    """Fallback of last resort: every delegated sample stays unknown."""

    def predict(self, f: np.ndarray) -> int:
        return UNKNOWN_LABEL


@dataclass
class ModelBundle:
    """Everything decide() needs, in one place."""

    dictionary: ContextDictionary
    head: FusionHead
    projector: Projector
    bank: PrototypeBank
    fallback: object = field(default_factory=NullFallback)


def fallback_predict(f: np.ndarray, fb: PrototypeFallback) -> int:
    """Cosine nearest prototype; first (lowest-index) row wins ties."""
    f = np.asarray(f, dtype=np.float64)
    sims = np.empty(fb.prototypes.shape[0])
    for i, row in enumerate(fb.prototypes):
        sims[i] = cosine_similarity(f, row)
    return int(fb.labels[int(np.argmax(sims))])


def comparator_calls_known(similarity: float, threshold: float, comparator: str) -> bool:
    if comparator == "sim-above-known":
        return similarity > threshold
    if comparator == "sim-above-unknown":
        return not (similarity > threshold)
    raise ValidationError(
        f"unknown comparator {comparator!r}, expected one of {COMPARATORS}"
    )


def decide(
    f: np.ndarray,
    bundle: ModelBundle,
    threshold: float,
    comparator: str = "sim-above-known",
    index: int = -1,
) -> Decision:
    """Route one sample through the threshold gate.

    The similarity is cosine between the projected feature and the
    prototype of the closed-set predicted class. A zero-norm projection
    (or prototype) leaves the similarity undefined; such samples carry a
    NaN score and always go to the fallback.
    """
    if comparator not in COMPARATORS:
        raise ValidationError(
            f"unknown comparator {comparator!r}, expected one of {COMPARATORS}"
        )
    csr_label, _ = predict_closed(f, bundle.dictionary, bundle.head)
    projected = bundle.projector.project(f)
    try:
        similarity = cosine_similarity(
            projected, bundle.bank.prototypes[csr_label]
        )
        is_known = comparator_calls_known(similarity, threshold, comparator)
    except UndefinedSimilarityError:
        similarity = math.nan
        is_known = False
    if is_known:
        return Decision(
            index=index, csr_label=csr_label, similarity=similarity,
            is_known=True, final_label=csr_label, source=SOURCE_CLOSED,
        )
    return Decision(
        index=index, csr_label=csr_label, similarity=similarity,
        is_known=False, final_label=int(bundle.fallback.predict(f)),
        source=SOURCE_FALLBACK,
    )


@dataclass
class EvalReport:
    threshold: float
    comparator: str
    open_metric: str
    n_samples: int
    n_known_truth: int
    n_unknown_truth: int
    n_known_routed: int
    n_unknown_routed: int
    known_as_known: int
    known_as_unknown: int
    unknown_as_known: int
    unknown_as_unknown: int
    closed_acc: float
    open_acc: float
    overall_acc: float
    decisions: list[Decision] = field(default_factory=list)

    def to_dict(self, include_decisions: bool = False) -> dict:
        out = {
            "threshold": self.threshold,
            "comparator": self.comparator,
            "open_metric": self.open_metric,
            "n_samples": self.n_samples,
            "n_known_truth": self.n_known_truth,
            "n_unknown_truth": self.n_unknown_truth,
            "n_known_routed": self.n_known_routed,
            "n_unknown_routed": self.n_unknown_routed,
            "confusion": {
                "known_as_known": self.known_as_known,
                "known_as_unknown": self.known_as_unknown,
                "unknown_as_known": self.unknown_as_known,
                "unknown_as_unknown": self.unknown_as_unknown,
            },
            "closed_acc": self.closed_acc,
            "open_acc": self.open_acc,
            "overall_acc": self.overall_acc,
        }
        if include_decisions:
            out["decisions"] = [d.to_dict() for d in self.decisions]
        return out


def _ratio(num: int, den: int) -> float:
    """Accuracy with the vacuous case pinned: no samples, nothing wrong."""
    return num / den if den else 1.0


def evaluate(
    test: EmbeddingDataset,
    bundle: ModelBundle,
    threshold: float,
    comparator: str = "sim-above-known",
    open_metric: str = "detection",
) -> EvalReport:
    """Run decide over a labeled test set and score the routing.

    Ground truth marks open-set rows either with the unknown sentinel or
    with a class id beyond the closed head's range. Closed-set accuracy is
    final-label match over known-truth rows; open-set accuracy is, per
    open_metric, the fraction of unknown-truth rows delegated to the
    fallback ("detection") or delegated AND labeled correctly ("label");
    overall accuracy is strict final-label match over everything.
    """
    if open_metric not in OPEN_METRICS:
        raise ValidationError(
            f"unknown open_metric {open_metric!r}, expected one of {OPEN_METRICS}"
        )
    test.validate(allow_unknown=True)
    n_classes = bundle.head.n_classes
    truth = test.labels
    known_truth = (truth >= 0) & (truth < n_classes)

    decisions = [
        decide(test.vectors[i], bundle, threshold, comparator, index=i)
        for i in range(test.n)
    ]
    final = np.array([d.final_label for d in decisions])
    routed_known = np.array([d.is_known for d in decisions], dtype=bool)

    correct = final == truth
    closed_acc = _ratio(
        int((correct & known_truth).sum()), int(known_truth.sum())
    )
    unknown_truth = ~known_truth
    if open_metric == "detection":
        open_hits = int((unknown_truth & ~routed_known).sum())
    else:
        open_hits = int((unknown_truth & ~routed_known & correct).sum())
    open_acc = _ratio(open_hits, int(unknown_truth.sum()))
    overall_acc = _ratio(int(correct.sum()), test.n)

    return EvalReport(
        threshold=threshold,
        comparator=comparator,
        open_metric=open_metric,
        n_samples=test.n,
        n_known_truth=int(known_truth.sum()),
        n_unknown_truth=int(unknown_truth.sum()),
        n_known_routed=int(routed_known.sum()),
        n_unknown_routed=int((~routed_known).sum()),
        known_as_known=int((known_truth & routed_known).sum()),
        known_as_unknown=int((known_truth & ~routed_known).sum()),
        unknown_as_known=int((unknown_truth & routed_known).sum()),
        unknown_as_unknown=int((unknown_truth & ~routed_known).sum()),
        closed_acc=closed_acc,
        open_acc=open_acc,
        overall_acc=overall_acc,
        decisions=decisions,
    )


def sweep_threshold(
    test: EmbeddingDataset,
    bundle: ModelBundle,
    thresholds,
    comparator: str = "sim-above-known",
    open_metric: str = "detection",
) -> list[tuple[float, EvalReport]]:
    """Evaluate at each threshold, in the order given."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValidationError("threshold list is empty")
    return [
        (t, evaluate(test, bundle, t, comparator, open_metric))
        for t in thresholds
    ]


def write_sweep_csv(results, path, comment: str | None = None) -> None:
    """Table of the sweep for plotting; one row per threshold."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("T,closed_acc,open_acc,overall_acc,n_known_routed,n_unknown_routed")
    for t, rep in results:
        lines.append(
            f"{t!r},{rep.closed_acc!r},{rep.open_acc!r},{rep.overall_acc!r},"
            f"{rep.n_known_routed},{rep.n_unknown_routed}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
