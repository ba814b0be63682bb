"""Training objective: weighted identity loss, center loss and masked attribute losses.

All functions are pure numpy (float64) and return analytic gradients next to
their values, so the network side only has to back-propagate the gradients it
is handed.

The objective for a batch of N samples is::

    total = L_id + alpha * L_cs + lambda * sum_i mask_i * l_att(i)

with ``L_id`` the mean over the batch of ``-log softmax(logits)[y] / count(y)``,
``L_cs = sum_i ||x_i - c_{y_i}||^2`` and ``l_att(i)`` the sum over attributes of
the true-class negative log-likelihood divided by that class's training count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data.types import BINARY, AttributeAnnotation, AttributeSchema, Batch


class LossError(ValueError):
    pass


def _reciprocal(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    out = np.zeros_like(counts)
    np.divide(1.0, counts, out=out, where=counts > 0)
    return out


@dataclass
class LossWeights:
    alpha: float = 0.0
    lam: float = 0.0
    identity_class_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    attribute_class_weights: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.lam < 0:
            raise LossError("alpha and lambda must be nonnegative")
        if not (math.isfinite(self.alpha) and math.isfinite(self.lam)):
            raise LossError("alpha and lambda must be finite")
        self.identity_class_weights = np.asarray(self.identity_class_weights, dtype=np.float64)

    @classmethod
    def from_counts(cls, identity_counts, attribute_counts=(), alpha=0.0, lam=0.0) -> "LossWeights":
        """Weights are reciprocal training counts; unseen classes get weight 0."""
        return cls(
            alpha=alpha,
            lam=lam,
            identity_class_weights=_reciprocal(identity_counts),
            attribute_class_weights=[_reciprocal(c) for c in attribute_counts],
        )

    @classmethod
    def from_registry(cls, registry, alpha=0.0, lam=0.0) -> "LossWeights":
        return cls.from_counts(registry.count_vector(), registry.attribute_counts(), alpha, lam)


@dataclass
class Centers:
    """Per-identity centers in signature space (rows indexed by global identity)."""

    matrix: np.ndarray

    @classmethod
    def zeros(cls, num_identities: int, dim: int) -> "Centers":
        return cls(np.zeros((num_identities, dim), dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def copy(self) -> "Centers":
        return Centers(self.matrix.copy())


@dataclass
class LossBreakdown:
    l_id: float
    l_cs: float
    l_att_per_attribute: list[float]
    l_att_total: float
    total: float
    alpha: float
    lam: float
    # masked per-sample attribute losses; zeros where the mask is off
    l_att_per_sample: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise LossError(f"{name} contains non-finite values")


def identity_loss_per_sample(logits, labels, weights: LossWeights) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted NLL and its gradient w.r.t. that sample's logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise LossError(f"identity logits must be N x K, got shape {logits.shape}")
    n, k = logits.shape
    if len(labels) != n:
        raise LossError("labels and logits disagree on batch size")
    if len(weights.identity_class_weights) != k:
        raise LossError(
            f"{k} identity logits but {len(weights.identity_class_weights)} class weights"
        )
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LossError(f"identity label outside [0, {k})")
    _check_finite("identity logits", logits)
    logp = _log_softmax(logits)
    rows = np.arange(n)
    w = weights.identity_class_weights[labels]
    losses = -w * logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= w[:, None]
    return losses, grad


def identity_loss(logits, labels, weights: LossWeights) -> tuple[float, np.ndarray]:
    """Batch mean of the frequency-weighted cross-entropy."""
    losses, grad = identity_loss_per_sample(logits, labels, weights)
    n = max(len(losses), 1)
    return float(losses.sum() / n), grad / n


def center_loss(features, labels, centers: Centers) -> tuple[float, np.ndarray]:
    """Sum of squared distances to the class centers; centers are constants here."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != centers.dim:
        raise LossError(f"features of shape {x.shape} do not match center dim {centers.dim}")
    if len(labels) and (labels.min() < 0 or labels.max() >= len(centers)):
        raise LossError("label has no center row")
    diff = x - centers.matrix[labels]
    return float(np.sum(diff * diff)), 2.0 * diff


def update_centers(centers: Centers, features, labels, cs_alpha: float) -> Centers:
    """Mini-batch center step: c_j -= cs_alpha * sum_i(c_j - x_i) / (1 + n_j)."""
    if not 0.0 < cs_alpha <= 1.0:
        raise LossError(f"cs_alpha must lie in (0, 1], got {cs_alpha}")
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != centers.dim:
        raise LossError(f"features of shape {x.shape} do not match center dim {centers.dim}")
    out = centers.matrix.copy()
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((len(classes), centers.dim))
    np.add.at(sums, inverse, x)
    delta = (counts[:, None] * out[classes] - sums) / (1.0 + counts[:, None])
    out[classes] -= cs_alpha * delta
    return Centers(out)


def _attribute_terms(
    attribute_logits: Sequence[np.ndarray],
    values: np.ndarray,
    schema: AttributeSchema,
    weights: LossWeights,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-sample, per-attribute weighted NLL (N x L) and per-head logit gradients."""
    n = values.shape[0]
    if len(attribute_logits) != len(schema):
        raise LossError(f"{len(attribute_logits)} attribute heads for {len(schema)} attributes")
    if len(weights.attribute_class_weights) != len(schema):
        raise LossError("attribute class weights do not match the schema")
    terms = np.zeros((n, len(schema)))
    grads = []
    rows = np.arange(n)
    for l, (spec, z) in enumerate(zip(schema, attribute_logits)):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (n, spec.head_width):
            raise LossError(
                f"attribute {spec.name!r}: logits shape {z.shape}, expected {(n, spec.head_width)}"
            )
        _check_finite(f"attribute {spec.name!r} logits", z)
        y = values[:, l]
        w = weights.attribute_class_weights[l][y]
        if spec.kind == BINARY:
            s = z[:, 0]
            # -log sigmoid(s) if y == 1, -log(1 - sigmoid(s)) if y == 0
            nll = np.logaddexp(0.0, s) - y * s
            terms[:, l] = w * nll
            prob = 0.5 * (1.0 + np.tanh(0.5 * s))
            grads.append((w * (prob - y))[:, None])
        else:
            logp = _log_softmax(z)
            terms[:, l] = -w * logp[rows, y]
            g = np.exp(logp)
            g[rows, y] -= 1.0
            grads.append(g * w[:, None])
    return terms, grads


def _row_sums(terms: np.ndarray) -> np.ndarray:
    out = np.zeros(terms.shape[0])
    for l in range(terms.shape[1]):
        out = out + terms[:, l]
    return out


def _annotation_matrix(labels: Sequence[Optional[AttributeAnnotation]], n_attr: int) -> np.ndarray:
    return np.array(
        [a.values if a is not None else (0,) * n_attr for a in labels], dtype=np.int64
    ).reshape(len(labels), n_attr)


def attribute_loss_sample(
    attribute_logits: Sequence[np.ndarray],
    annotation: AttributeAnnotation,
    schema: AttributeSchema,
    weights: LossWeights,
) -> tuple[float, list[np.ndarray]]:
    """Weighted attribute loss of one annotated sample.

    ``attribute_logits[l]`` is a vector of the head width of attribute ``l``
    (one logit for binary attributes).
    """
    try:
        annotation.validate(schema)
    except ValueError as exc:
        raise LossError(str(exc)) from None
    logits = [np.asarray(z, dtype=np.float64).reshape(1, -1) for z in attribute_logits]
    values = np.asarray(annotation.values, dtype=np.int64)[None, :]
    terms, grads = _attribute_terms(logits, values, schema, weights)
    return float(_row_sums(terms)[0]), [g[0] for g in grads]


def total_loss(
    outputs: Mapping[str, object],
    batch: Batch,
    centers: Centers,
    weights: LossWeights,
    schema: AttributeSchema,
) -> tuple[LossBreakdown, dict]:
    """Combine all terms for a batch.

    ``outputs`` carries ``identity_logits`` (N x K), ``signatures`` (N x D) and
    ``attribute_logits`` (one N x width array per attribute). The returned
    gradient dict has the same keys.
    """
    labels = np.asarray(batch.global_identities, dtype=np.int64)
    mask = np.asarray(batch.attribute_mask, dtype=bool)
    n = len(labels)
    for i, (m, a) in enumerate(zip(mask, batch.attribute_labels)):
        if bool(m) != (a is not None):
            raise LossError(f"attribute mask disagrees with labels at sample {i}")

    l_id, g_logits = identity_loss(outputs["identity_logits"], labels, weights)
    l_cs, g_feat = center_loss(outputs["signatures"], labels, centers)

    n_attr = len(schema)
    if n_attr:
        values = _annotation_matrix(batch.attribute_labels, n_attr)
        terms, head_grads = _attribute_terms(outputs["attribute_logits"], values, schema, weights)
        per_sample = np.where(mask, _row_sums(terms), 0.0)
        per_attr = [math.fsum(np.where(mask, terms[:, l], 0.0)) for l in range(n_attr)]
        beta = mask.astype(np.float64)[:, None]
        g_heads = [weights.lam * beta * g for g in head_grads]
    else:
        per_sample = np.zeros(n)
        per_attr = []
        g_heads = []
    l_att = math.fsum(per_sample)
    total = l_id + weights.alpha * l_cs + weights.lam * l_att
    breakdown = LossBreakdown(
        l_id=l_id,
        l_cs=l_cs,
        l_att_per_attribute=per_attr,
        l_att_total=l_att,
        total=total,
        alpha=weights.alpha,
        lam=weights.lam,
        l_att_per_sample=per_sample,
    )
    grads = {
        "identity_logits": g_logits,
        "signatures": weights.alpha * g_feat,
        "attribute_logits": g_heads,
    }
    return breakdown, grads
