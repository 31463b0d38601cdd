"""Context-prototype fusion and the closed-set head.

A dictionary of background prototypes is built once by clustering
context-view features. At inference each sample feature attends over the
dictionary (scaled dot-product, softmax over prototypes) and receives a
prior-weighted combination of prototypes added onto itself; a linear
classifier reads the fused feature. Training is two-stage: classifier
first with the attention maps frozen, then everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import kmeans
from .dataio import EmbeddingDataset, RunConfig, split_batches
from .errors import (
    DimensionError,
    DivergenceError,
    InfeasibleError,
    PoisonedGradientError,
    ValidationError,
)
from .numkit import AdamState, Params, adam_step, softmax_rows

# seed stream tags, so the init / batch / mixup draws never collide
INIT_STREAM = 101
BATCH_STREAM = 202


@dataclass
class ContextDictionary:
    """Frozen bank of context prototypes with occupancy priors."""

    prototypes: np.ndarray   # (beta, d) group means
    priors: np.ndarray       # (beta,) group share of the corpus, sums to 1
    group_sizes: np.ndarray  # (beta,) members per group

    @property
    def beta(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def validate(self) -> "ContextDictionary":
        if self.prototypes.ndim != 2:
            raise ValidationError("prototypes must be 2-D")
        if self.priors.shape != (self.beta,):
            raise ValidationError("priors shape does not match prototype count")
        if self.group_sizes.shape != (self.beta,):
            raise ValidationError("group_sizes shape does not match prototype count")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValidationError("prototypes contain non-finite values")
        if abs(float(self.priors.sum()) - 1.0) > 1e-12:
            raise ValidationError("priors must sum to 1")
        if np.any(self.priors < 0):
            raise ValidationError("priors must be nonnegative")
        return self


@dataclass
class FusionHead:
    """Trainable attention maps plus the linear closed-set classifier."""

    query_proj: np.ndarray  # (d, d)
    key_proj: np.ndarray    # (d, d)
    cls_weight: np.ndarray  # (C, d)
    cls_bias: np.ndarray    # (C,)

    @property
    def d(self) -> int:
        return self.query_proj.shape[0]

    @property
    def n_classes(self) -> int:
        return self.cls_weight.shape[0]

    def params(self) -> Params:
        return {
            "query_proj": self.query_proj,
            "key_proj": self.key_proj,
            "cls_weight": self.cls_weight,
            "cls_bias": self.cls_bias,
        }

    @classmethod
    def from_params(cls, params: Params) -> "FusionHead":
        return cls(
            query_proj=params["query_proj"],
            key_proj=params["key_proj"],
            cls_weight=params["cls_weight"],
            cls_bias=params["cls_bias"],
        )

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise PoisonedGradientError(f"non-finite values in {name}")


@dataclass
class EpochRecord:
    epoch: int       # global 1-based epoch number
    stage: int       # 1 = classifier only, 2 = all parameters
    lr: float        # learning rate in effect this epoch
    loss: float      # mean loss per sample over the epoch
    accuracy: float  # training-set accuracy after the epoch's updates

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "stage": self.stage,
            "lr": self.lr,
            "loss": self.loss,
            "accuracy": self.accuracy,
        }


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records:
            prev = self.records[-1]
            if rec.epoch != prev.epoch + 1:
                raise ValidationError("epochs must be recorded contiguously")
            if rec.stage < prev.stage:
                raise ValidationError("stage 1 epochs must precede stage 2")
        self.records.append(rec)

    def to_dict(self) -> dict:
        return {"epochs": [r.to_dict() for r in self.records]}

    def __len__(self) -> int:
        return len(self.records)


def build_dictionary(
    context_ds: EmbeddingDataset, beta: int, seed
) -> ContextDictionary:
    """Cluster context-view features into beta groups and keep the means.

    Priors are exact occupancy ratios |group| / n, so a prototype seen in
    more backgrounds contributes proportionally more during fusion.
    """
    context_ds.validate()
    if beta < 1:
        raise ValidationError(f"beta must be >= 1, got {beta}")
    if context_ds.n < beta:
        raise InfeasibleError(
            f"need at least beta={beta} context samples, have {context_ds.n}"
        )
    result = kmeans(context_ds.vectors, k=beta, seed=seed)
    sizes = np.bincount(result.assignments, minlength=beta).astype(np.int64)
    priors = sizes / float(context_ds.n)
    return ContextDictionary(
        prototypes=result.centroids.copy(),
        priors=priors,
        group_sizes=sizes,
    ).validate()


def init_fusion_head(d: int, n_classes: int, seed) -> FusionHead:
    """Identity-plus-noise attention maps, zero classifier.

    Starting the maps at the identity makes initial attention scores plain
    feature-prototype affinity; the zero classifier yields uniform logits,
    so the first stage starts from loss ln(C) regardless of the data.
    """
    rng = np.random.default_rng([seed, INIT_STREAM])
    sigma = 0.01 / math.sqrt(d)
    eye = np.eye(d)
    return FusionHead(
        query_proj=eye + rng.normal(size=(d, d)) * sigma,
        key_proj=eye + rng.normal(size=(d, d)) * sigma,
        cls_weight=np.zeros((n_classes, d)),
        cls_bias=np.zeros(n_classes),
    )


def _check_dims(features: np.ndarray, dictionary: ContextDictionary, head: FusionHead):
    d = features.shape[-1]
    if dictionary.d != d:
        raise DimensionError(
            f"feature dim {d} vs dictionary dim {dictionary.d}"
        )
    if head.d != d:
        raise DimensionError(f"feature dim {d} vs head dim {head.d}")


def _fuse_batch(
    features: np.ndarray, dictionary: ContextDictionary, head: FusionHead
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fusion. features (n, d) -> (fused (n, d), lambdas (n, beta))."""
    _check_dims(features, dictionary, head)
    z = dictionary.prototypes
    q = features @ head.query_proj.T                 # (n, d)
    k = z @ head.key_proj.T                          # (beta, d)
    scores = q @ k.T / math.sqrt(head.d)             # (n, beta)
    lambdas = softmax_rows(scores)
    fused = features + (lambdas * dictionary.priors) @ z
    return fused, lambdas


def fuse(
    f: np.ndarray, dictionary: ContextDictionary, head: FusionHead
) -> tuple[np.ndarray, np.ndarray]:
    """Fuse one feature vector with the dictionary.

    Returns (fused vector, attention weights over prototypes). The weights
    are a probability vector; the fused feature is the input plus the
    prior-scaled, attention-weighted sum of prototypes.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {f.shape}")
    fused, lambdas = _fuse_batch(f[None, :], dictionary, head)
    return fused[0], lambdas[0]


def csr_forward_loss(
    features: np.ndarray,
    labels: np.ndarray,
    dictionary: ContextDictionary,
    head: FusionHead,
) -> tuple[float, Params]:
    """Mean cross-entropy of the classifier on fused features, with
    analytic gradients for every head parameter.

    The backward pass is hand-derived; grad_check holds it below 1e-4
    relative error, and the selfcheck CLI re-runs that proof on demand.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValidationError("batch must be a nonempty (n, d) matrix")
    n, d = features.shape
    n_classes = head.n_classes
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} for batch of {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError("label outside classifier range")
    _check_dims(features, dictionary, head)

    z = dictionary.prototypes                         # (beta, d)
    priors = dictionary.priors                        # (beta,)
    scale = 1.0 / math.sqrt(d)

    q = features @ head.query_proj.T                  # (n, d)
    k = z @ head.key_proj.T                           # (beta, d)
    scores = (q @ k.T) * scale                        # (n, beta)
    lambdas = softmax_rows(scores)                    # (n, beta)
    coef = lambdas * priors                           # (n, beta)
    fused = features + coef @ z                       # (n, d)
    logits = fused @ head.cls_weight.T + head.cls_bias

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise PoisonedGradientError(f"non-finite loss {loss}")

    probs = np.exp(log_probs)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n                                     # (n, C)

    d_cls_weight = d_logits.T @ fused                 # (C, d)
    d_cls_bias = d_logits.sum(axis=0)                 # (C,)
    d_fused = d_logits @ head.cls_weight              # (n, d)

    d_coef = d_fused @ z.T                            # (n, beta)
    d_lambdas = d_coef * priors                       # (n, beta)
    # softmax backward, rowwise
    inner = (d_lambdas * lambdas).sum(axis=1, keepdims=True)
    d_scores = lambdas * (d_lambdas - inner)          # (n, beta)

    d_q = (d_scores @ k) * scale                      # (n, d)
    d_k = (d_scores.T @ q) * scale                    # (beta, d)
    d_query_proj = d_q.T @ features                   # (d, d)
    d_key_proj = d_k.T @ z                            # (d, d)

    grads = {
        "query_proj": d_query_proj,
        "key_proj": d_key_proj,
        "cls_weight": d_cls_weight,
        "cls_bias": d_cls_bias,
    }
    return loss, grads


def predict_closed(
    f: np.ndarray, dictionary: ContextDictionary, head: FusionHead
) -> tuple[int, np.ndarray]:
    """Closed-set prediction: argmax logit on the fused feature.

    np.argmax returns the first maximum, which is the lowest class id on
    ties.
    """
    fused, _ = fuse(f, dictionary, head)
    logits = head.cls_weight @ fused + head.cls_bias
    return int(np.argmax(logits)), logits


def _training_accuracy(
    ds: EmbeddingDataset, dictionary: ContextDictionary, head: FusionHead
) -> float:
    fused, _ = _fuse_batch(ds.vectors, dictionary, head)
    logits = fused @ head.cls_weight.T + head.cls_bias
    return float((logits.argmax(axis=1) == ds.labels).mean())


def train_csr(
    train: EmbeddingDataset,
    dictionary: ContextDictionary,
    config: RunConfig,
    seed,
) -> tuple[FusionHead, TrainLog]:
    """Two-stage closed-set training over fused features.

    Stage 1 updates only the classifier; the attention maps stay bitwise
    at their initialization. Stage 2 re-opens every parameter with a fresh
    optimizer state at lr_main. The learning rate is multiplied once by
    lr_decay_factor after lr_decay_epoch global epochs. An epochs=0 config
    is a no-op returning the initialized head.
    """
    train.validate()
    dictionary.validate()
    if train.n == 0:
        raise ValidationError("training set is empty")
    head = init_fusion_head(train.d, len(train.class_names), seed)
    log = TrainLog()
    if config.epochs == 0:
        return head, log

    initial_loss, _ = csr_forward_loss(
        train.vectors, train.labels, dictionary, head
    )
    stage1_epochs = min(config.stage1_epochs, config.epochs)
    stage1_keys = ("cls_weight", "cls_bias")
    state = AdamState(lr=config.lr_classifier, weight_decay=config.weight_decay)

    for epoch in range(1, config.epochs + 1):
        stage = 1 if epoch <= stage1_epochs else 2
        if stage == 2 and (epoch == stage1_epochs + 1):
            # stage flip: all parameters become trainable, moments reset
            state = AdamState(lr=config.lr_main, weight_decay=config.weight_decay)
        base_lr = config.lr_classifier if stage == 1 else config.lr_main
        lr = base_lr * (
            config.lr_decay_factor if epoch > config.lr_decay_epoch else 1.0
        )
        state.lr = lr

        total = 0.0
        for batch_idx in split_batches(train, config.batch_size, [seed, BATCH_STREAM, epoch]):
            feats = train.vectors[batch_idx]
            labs = train.labels[batch_idx]
            loss, grads = csr_forward_loss(feats, labs, dictionary, head)
            total += loss * len(batch_idx)
            params = head.params()
            if stage == 1:
                sub_params = {k: params[k] for k in stage1_keys}
                sub_grads = {k: grads[k] for k in stage1_keys}
                new = adam_step(sub_params, sub_grads, state)
                params = {**params, **new}
            else:
                params = adam_step(params, grads, state)
            head = FusionHead.from_params(params)
            head.check_finite()

        epoch_loss = total / train.n
        log.append(
            EpochRecord(
                epoch=epoch,
                stage=stage,
                lr=lr,
                loss=epoch_loss,
                accuracy=_training_accuracy(train, dictionary, head),
            )
        )
        if epoch_loss > 1e3 * max(initial_loss, 1e-12):
            raise DivergenceError(
                f"epoch {epoch} loss {epoch_loss:.3e} exceeds 1e3 x initial "
                f"{initial_loss:.3e}",
                log=log,
            )
    return head, log
