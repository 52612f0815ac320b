"""Conditioning objectives on hypersphere embeddings.

All contrastive forms reduce to one pattern: for each anchor row, a masked
log-sum-exp over a "denominator" set of scaled similarities minus one over a
"numerator" subset.  Keeping the numerator a subset of the denominator makes
every such loss non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "EmbeddingBatch",
    "acgan_aux_loss",
    "loss_2c",
    "loss_2c_aps",
    "loss_eq7",
    "nt_xent",
    "projection_term",
    "proxy_nca",
]

UNIT_TOL = 1e-9


class ContractError(ValueError):
    pass


def _check_temperature(t: float) -> float:
    t = float(t)
    if not t > 0:
        raise ContractError(f"temperature must be positive, got {t}")
    return t


def _check_unit_rows(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.data**2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} rows must have unit norm (max deviation {np.abs(norms - 1).max():.3g})")


@dataclass
class EmbeddingBatch:
    """Unit-norm sample embeddings, their integer labels and the class table.

    ``class_table`` rows are normalized inside the contrastive losses, so the
    raw learnable table can be passed directly.  It may be ``None`` for losses
    that never look at class embeddings (APS).
    """

    features: Tensor
    labels: np.ndarray
    class_table: Tensor | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        m = self.features.shape[0]
        if m < 1:
            raise ContractError("an embedding batch needs at least one row")
        if self.labels.shape[0] != m:
            raise ContractError(f"{m} feature rows but {self.labels.shape[0]} labels")
        if np.any(self.labels < 0):
            raise ContractError("labels must be non-negative")
        if self.class_table is not None:
            n_classes = self.class_table.shape[0]
            if self.labels.max() >= n_classes:
                raise ContractError(f"label {self.labels.max()} out of range for {n_classes} classes")
            if self.class_table.shape[1] != self.features.shape[1]:
                raise ContractError(
                    f"class table width {self.class_table.shape[1]} != embedding width {self.features.shape[1]}"
                )
        _check_unit_rows(self.features, "feature")

    @property
    def m(self) -> int:
        return self.features.shape[0]


def _contrast(logits: Tensor, numerator: np.ndarray, denominator: np.ndarray) -> Tensor:
    per_anchor = ad.sub(ad.log_sum_exp_rows(logits, denominator), ad.log_sum_exp_rows(logits, numerator))
    return ad.mean(per_anchor)


def _class_term_logits(feats: Tensor, anchors: Tensor, t: float) -> Tensor:
    """``[l_i . a_i / t | l_i . l_k / t]`` as an m x (m+1) matrix."""
    own = ad.sum_(ad.mul(feats, anchors), axis="rows")
    pairwise = ad.matmul(feats, ad.transpose(feats))
    return ad.scale(ad.concat_cols(own, pairwise), 1.0 / t)


def _masks(labels: np.ndarray, same_label_positives: bool) -> tuple[np.ndarray, np.ndarray]:
    m = labels.shape[0]
    off_diag = ~np.eye(m, dtype=bool)
    lead = np.ones((m, 1), dtype=bool)
    den = np.hstack([lead, off_diag])
    if same_label_positives:
        num = np.hstack([lead, off_diag & (labels[:, None] == labels[None, :])])
    else:
        num = np.hstack([lead, np.zeros((m, m), dtype=bool)])
    return num, den


def nt_xent(features: Tensor, t: float = 1.0) -> Tensor:
    """NT-Xent over ``2m`` unit rows where rows ``2k`` and ``2k+1`` are two views
    of the same sample; averaged over all ``2m`` anchors."""
    t = _check_temperature(t)
    n = features.shape[0]
    if n % 2:
        raise ContractError(f"nt_xent needs an even number of rows, got {n}")
    _check_unit_rows(features, "feature")
    logits = ad.scale(ad.matmul(features, ad.transpose(features)), 1.0 / t)
    den = ~np.eye(n, dtype=bool)
    num = np.zeros((n, n), dtype=bool)
    idx = np.arange(n)
    num[idx, idx ^ 1] = True
    return _contrast(logits, num, den)


def loss_eq7(batch: EmbeddingBatch, t: float = 1.0) -> Tensor:
    """Class embedding as the sole positive; every other batch sample is a negative."""
    t = _check_temperature(t)
    anchors = ad.take_rows(ad.l2_normalize_rows(_require_table(batch)), batch.labels)
    num, den = _masks(batch.labels, same_label_positives=False)
    return _contrast(_class_term_logits(batch.features, anchors, t), num, den)


def loss_2c(batch: EmbeddingBatch, t: float = 1.0) -> Tensor:
    """Conditional contrastive (2C) loss.

    Positives are the anchor's class embedding plus every *other* batch sample
    with the same label; the anchor itself is never counted.
    """
    t = _check_temperature(t)
    anchors = ad.take_rows(ad.l2_normalize_rows(_require_table(batch)), batch.labels)
    num, den = _masks(batch.labels, same_label_positives=True)
    return _contrast(_class_term_logits(batch.features, anchors, t), num, den)


def loss_2c_aps(batch: EmbeddingBatch, augmented_features: Tensor, t: float = 1.0) -> Tensor:
    """2C loss with each class embedding replaced by the embedding of an
    augmented view of the same sample (row-aligned, unit rows)."""
    t = _check_temperature(t)
    if augmented_features.shape != batch.features.shape:
        raise ContractError(
            f"augmented features {augmented_features.shape} not row-aligned with batch {batch.features.shape}"
        )
    _check_unit_rows(augmented_features, "augmented feature")
    num, den = _masks(batch.labels, same_label_positives=True)
    return _contrast(_class_term_logits(batch.features, augmented_features, t), num, den)


def proxy_nca(batch: EmbeddingBatch, t: float = 1.0) -> Tensor:
    """Proxy-NCA with cosine similarity: the target proxy over the *other* proxies.

    Unlike the contrastive losses the target is excluded from the denominator,
    so values below zero are expected once samples sit on their proxy.
    """
    t = _check_temperature(t)
    table = _require_table(batch)
    n_classes = table.shape[0]
    if n_classes < 2:
        raise ContractError("proxy_nca needs at least two classes (empty negative set)")
    proxies = ad.l2_normalize_rows(table)
    logits = ad.scale(ad.matmul(batch.features, ad.transpose(proxies)), 1.0 / t)
    target = np.zeros((batch.m, n_classes), dtype=bool)
    target[np.arange(batch.m), batch.labels] = True
    return _contrast(logits, target, ~target)


def acgan_aux_loss(class_logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of the auxiliary classifier."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, n_classes = class_logits.shape
    if labels.shape[0] != m:
        raise ContractError(f"{m} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    target = np.zeros((m, n_classes), dtype=bool)
    target[np.arange(m), labels] = True
    return _contrast(class_logits, target, np.ones_like(target))


def projection_term(trunk_features: Tensor, class_table_proj: Tensor, labels) -> Tensor:
    """Per-sample inner product between trunk features and the (raw) class
    embedding of the sample's label; m x 1."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if trunk_features.shape[1] != class_table_proj.shape[1]:
        raise ContractError(
            f"feature width {trunk_features.shape[1]} != projection table width {class_table_proj.shape[1]}"
        )
    if labels.shape[0] != trunk_features.shape[0]:
        raise ContractError(f"{trunk_features.shape[0]} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= class_table_proj.shape[0]):
        raise ContractError(f"labels must lie in [0, {class_table_proj.shape[0]})")
    chosen = ad.take_rows(class_table_proj, labels)
    return ad.sum_(ad.mul(trunk_features, chosen), axis="rows")


def _require_table(batch: EmbeddingBatch) -> Tensor:
    if batch.class_table is None:
        raise ContractError("this loss needs a class embedding table")
    return batch.class_table
