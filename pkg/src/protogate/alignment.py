"""Prototype alignment: mixup augmentation, class prototypes, and the
projector that pulls known-class features toward their prototypes.

The projector is the open-set workhorse: after training, known samples
project close to their class prototype while features from classes never
seen during training land far away, which is what the threshold gate in
the recognizer measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .context import BATCH_STREAM, INIT_STREAM, EpochRecord, TrainLog
from .dataio import EmbeddingDataset, RunConfig, split_batches
from .errors import (
    DimensionError,
    DivergenceError,
    InfeasibleError,
    PoisonedGradientError,
    ValidationError,
)
from .numkit import AdamState, Params, adam_step

MIXUP_STREAM = 303

# synthetic samples generated per class, as a multiple of the mean class size
MIXUP_FOLD = 4


@dataclass
class PrototypeBank:
    """Per-class mean features over the (augmented) training set."""

    prototypes: np.ndarray  # (C, d)
    counts: np.ndarray      # (C,) rows contributing to each mean

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def validate(self) -> "PrototypeBank":
        if self.prototypes.ndim != 2:
            raise ValidationError("prototypes must be 2-D")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValidationError("prototypes contain non-finite values")
        if self.counts.shape != (self.n_classes,):
            raise ValidationError("counts shape does not match prototype count")
        if np.any(self.counts < 1):
            raise ValidationError("every class needs at least one contributor")
        return self


@dataclass
class Projector:
    """Two-layer rectifier MLP, d -> hidden -> d. No residual path, so the
    identity map is learnable but must be earned by training."""

    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> Params:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def from_params(cls, params: Params) -> "Projector":
        return cls(w1=params["w1"], b1=params["b1"], w2=params["w2"], b2=params["b2"])

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise PoisonedGradientError(f"non-finite values in {name}")

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Project a batch (n, d) -> (n, d)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.d:
            raise DimensionError(
                f"expected (n, {self.d}) features, got {features.shape}"
            )
        hidden = np.maximum(features @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    def project(self, f: np.ndarray) -> np.ndarray:
        """Project a single vector."""
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 1:
            raise DimensionError(f"expected a vector, got shape {f.shape}")
        return self.forward(f[None, :])[0]


def init_projector(d: int, seed, hidden: int | None = None) -> Projector:
    """He-scaled random start; biases at zero."""
    h = d if hidden is None else hidden
    rng = np.random.default_rng([seed, INIT_STREAM])
    return Projector(
        w1=rng.normal(size=(h, d)) * math.sqrt(2.0 / d),
        b1=np.zeros(h),
        w2=rng.normal(size=(d, h)) * math.sqrt(2.0 / h),
        b2=np.zeros(d),
    )


@dataclass
class MixupRecord:
    """Provenance of one synthetic sample: out = lam*a + (1-lam)*b."""

    label: int
    source_a: int
    source_b: int
    lam: float
    out_index: int


@dataclass
class MixupResult:
    dataset: EmbeddingDataset     # originals followed by synthetics
    records: list[MixupRecord] = field(default_factory=list)
    n_original: int = 0

    @property
    def is_synthetic(self) -> np.ndarray:
        flags = np.zeros(self.dataset.n, dtype=bool)
        flags[self.n_original :] = True
        return flags


def mixup_augment(
    ds: EmbeddingDataset,
    per_class: int,
    alpha: float,
    seed,
    lam_override: float | None = None,
) -> MixupResult:
    """Append per_class synthetic convex combinations to every class.

    Each synthetic draws two distinct same-class rows and a coefficient
    lam ~ Beta(alpha, alpha); the pair and coefficient are recorded so any
    output row is exactly recomputable. lam_override pins the coefficient
    (test hook for the endpoint and midpoint cases).
    """
    ds.validate()
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    if per_class < 0:
        raise ValidationError(f"per_class must be >= 0, got {per_class}")
    rng = np.random.default_rng([seed, MIXUP_STREAM])
    new_vecs, new_labels, records = [], [], []
    out_index = ds.n
    for class_id in range(len(ds.class_names)):
        rows = np.where(ds.labels == class_id)[0]
        if len(rows) < 2:
            raise InfeasibleError(
                f"class {class_id} ({ds.class_names[class_id]!r}) has "
                f"{len(rows)} samples; mixup needs at least 2"
            )
        for _ in range(per_class):
            a, b = rng.choice(rows, size=2, replace=False)
            lam = float(rng.beta(alpha, alpha)) if lam_override is None else lam_override
            new_vecs.append(lam * ds.vectors[a] + (1.0 - lam) * ds.vectors[b])
            new_labels.append(class_id)
            records.append(
                MixupRecord(
                    label=class_id, source_a=int(a), source_b=int(b),
                    lam=lam, out_index=out_index,
                )
            )
            out_index += 1
    if new_vecs:
        vectors = np.concatenate([ds.vectors, np.stack(new_vecs)])
        labels = np.concatenate(
            [ds.labels, np.array(new_labels, dtype=np.int64)]
        )
    else:
        vectors, labels = ds.vectors.copy(), ds.labels.copy()
    out = EmbeddingDataset(vectors, labels, list(ds.class_names), view=ds.view)
    return MixupResult(dataset=out.validate(), records=records, n_original=ds.n)


def compute_prototypes(ds: EmbeddingDataset) -> PrototypeBank:
    """Per-class arithmetic mean of all rows carrying that label."""
    ds.validate()
    n_classes = len(ds.class_names)
    prototypes = np.zeros((n_classes, ds.d))
    counts = np.zeros(n_classes, dtype=np.int64)
    for class_id in range(n_classes):
        rows = np.where(ds.labels == class_id)[0]
        if len(rows) == 0:
            raise InfeasibleError(
                f"class {class_id} ({ds.class_names[class_id]!r}) is empty"
            )
        prototypes[class_id] = ds.vectors[rows].mean(axis=0)
        counts[class_id] = len(rows)
    return PrototypeBank(prototypes=prototypes, counts=counts).validate()


def alignment_loss(
    features: np.ndarray,
    labels: np.ndarray,
    bank: PrototypeBank,
    proj: Projector,
) -> tuple[float, Params]:
    """Mean squared error between projected features and their class
    prototypes, averaged over batch and coordinates, with analytic
    gradients for the projector parameters."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValidationError("batch must be a nonempty (n, d) matrix")
    n, d = features.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} for batch of {n}")
    if labels.min() < 0 or labels.max() >= bank.n_classes:
        raise ValidationError("label outside prototype bank range")
    if bank.d != d or proj.d != d:
        raise DimensionError(
            f"feature dim {d} vs bank {bank.d} vs projector {proj.d}"
        )

    pre = features @ proj.w1.T + proj.b1       # (n, h)
    hidden = np.maximum(pre, 0.0)
    out = hidden @ proj.w2.T + proj.b2         # (n, d)
    target = bank.prototypes[labels]           # (n, d)
    diff = out - target
    loss = float((diff**2).mean())
    if not np.isfinite(loss):
        raise PoisonedGradientError(f"non-finite loss {loss}")

    d_out = 2.0 * diff / (n * d)               # (n, d)
    d_w2 = d_out.T @ hidden                    # (d, h)
    d_b2 = d_out.sum(axis=0)                   # (d,)
    d_hidden = d_out @ proj.w2                 # (n, h)
    d_pre = d_hidden * (pre > 0.0)             # rectifier gate
    d_w1 = d_pre.T @ features                  # (h, d)
    d_b1 = d_pre.sum(axis=0)                   # (h,)

    return loss, {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


def _mean_alignment(ds: EmbeddingDataset, bank: PrototypeBank, proj: Projector) -> float:
    """Mean cosine similarity between projected rows and their prototypes.
    Zero-norm pairs contribute 0 (no alignment evidence either way)."""
    projected = proj.forward(ds.vectors)
    targets = bank.prototypes[ds.labels]
    pn = np.linalg.norm(projected, axis=1)
    tn = np.linalg.norm(targets, axis=1)
    ok = (pn > 0) & (tn > 0)
    sims = np.zeros(ds.n)
    sims[ok] = (projected[ok] * targets[ok]).sum(axis=1) / (pn[ok] * tn[ok])
    return float(sims.mean())


def train_pa(
    ds: EmbeddingDataset, config: RunConfig, seed
) -> tuple[Projector, PrototypeBank, TrainLog]:
    """Augment, build prototypes, and train the projector.

    Single stage at lr_main with the same decay rule as the closed-set
    trainer. The log's accuracy column records mean cosine alignment
    between projected training rows and their prototypes (there is no
    notion of label accuracy here). epochs=0 returns the initialized
    projector untouched.
    """
    ds.validate()
    if ds.n == 0:
        raise ValidationError("training set is empty")
    mean_class = ds.n / max(1, len(ds.class_names))
    per_class = MIXUP_FOLD * max(1, math.ceil(mean_class))
    mixed = mixup_augment(ds, per_class, config.mixup_alpha, seed)
    train_set = mixed.dataset
    bank = compute_prototypes(train_set)
    proj = init_projector(ds.d, seed)
    log = TrainLog()
    if config.epochs == 0:
        return proj, bank, log

    initial_loss, _ = alignment_loss(
        train_set.vectors, train_set.labels, bank, proj
    )
    state = AdamState(lr=config.lr_main, weight_decay=config.weight_decay)
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_main * (
            config.lr_decay_factor if epoch > config.lr_decay_epoch else 1.0
        )
        state.lr = lr
        total = 0.0
        for batch_idx in split_batches(
            train_set, config.batch_size, [seed, BATCH_STREAM, epoch]
        ):
            feats = train_set.vectors[batch_idx]
            labs = train_set.labels[batch_idx]
            loss, grads = alignment_loss(feats, labs, bank, proj)
            total += loss * len(batch_idx)
            proj = Projector.from_params(adam_step(proj.params(), grads, state))
            proj.check_finite()
        epoch_loss = total / train_set.n
        log.append(
            EpochRecord(
                epoch=epoch,
                stage=1,
                lr=lr,
                loss=epoch_loss,
                accuracy=_mean_alignment(train_set, bank, proj),
            )
        )
        if epoch_loss > 1e3 * max(initial_loss, 1e-12):
            raise DivergenceError(
                f"epoch {epoch} loss {epoch_loss:.3e} exceeds 1e3 x initial "
                f"{initial_loss:.3e}",
                log=log,
            )
    return proj, bank, log
