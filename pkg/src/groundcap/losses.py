"""Training objective: caption cross-entropy plus two grounding losses.

The grounding losses act on the pool of all projected object vectors of a
batch's images (UNK-labeled and zero-norm vectors are excluded):

* cluster loss — max-margin ranking over sampled triplets (anchor,
  same-class, other-class): mean of max(0, margin - cos(a, p) + cos(a, n))
  over the valid triplets.
* perceptual loss — negative Pearson correlation between the cosine
  similarities of sampled cross-class vector pairs and the cosine
  similarities of their class labels' word embeddings. Multi-word labels
  embed as the unweighted mean of their token embeddings.

Both samplers draw with replacement and discard draws that cannot satisfy
the class constraints; losses normalize by the number of valid draws, and
zero valid draws yields a constant 0 contribution. Each sampler owns its
own RNG stream so toggling one loss never perturbs the other's draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateStatisticsError, DomainError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    cluster_weight: float = 1.0
    perceptual_weight: float = 1.0
    sample_size: int = 500

    def validate(self) -> None:
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.sample_size < 1:
            raise ConfigError(f"sample_size must be >= 1, got {self.sample_size}")
        if self.cluster_weight < 0 or self.perceptual_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class LabeledProjection:
    """Projected object vectors pooled over a batch, with their class ids.

    ``rows`` indexes into ``vectors`` (a possibly larger matrix); only
    labeled, non-zero-norm rows are kept.
    """

    vectors: Tensor  # (N, d), superset matrix
    rows: np.ndarray  # (n,) indices of usable rows
    class_ids: np.ndarray  # (n,) class per usable row

    @property
    def size(self) -> int:
        return len(self.rows)


def build_projection_pool(vectors: Tensor, labels: np.ndarray, unk_id: int) -> LabeledProjection:
    """Filter UNK-labeled and zero-norm rows out of the batch pool."""
    labels = np.asarray(labels, dtype=np.int64)
    norms = np.linalg.norm(vectors.data, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("excluding %d zero-norm projected vectors from the grounding pool", int(zero.sum()))
    keep = (~zero) & (labels != unk_id)
    rows = np.flatnonzero(keep)
    return LabeledProjection(vectors=vectors, rows=rows, class_ids=labels[rows])


def cross_entropy_loss(logprobs) -> float:
    """Mean negative log-likelihood over the steps of one caption."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if logprobs.size < 1:
        raise DomainError("cross_entropy_loss needs at least one step")
    return float(-logprobs.mean())


def batch_cross_entropy(per_example_logprob: Tensor) -> Tensor:
    """Mean over examples of the per-caption mean NLL (tape node)."""
    return ad.neg(ad.mean_(per_example_logprob))


def sample_triplets(
    pool: LabeledProjection, n_draws: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor / same-class / other-class index triples into the pool.

    Each of the ``n_draws`` draws picks the anchor uniformly, a positive
    uniformly among the anchor's classmates and a negative uniformly among
    other classes; draws without a possible positive or negative are
    discarded. Indices refer to pool-internal positions (0..size-1).
    """
    n = pool.size
    anchors, positives, negatives = [], [], []
    if n == 0:
        return (np.zeros(0, np.int64),) * 3
    by_class: dict[int, np.ndarray] = {
        c: np.flatnonzero(pool.class_ids == c) for c in np.unique(pool.class_ids)
    }
    rank_in_class = np.empty(n, dtype=np.int64)
    for members in by_class.values():
        rank_in_class[members] = np.arange(len(members))
    others = {c: np.flatnonzero(pool.class_ids != c) for c in by_class}
    for _ in range(n_draws):
        i = int(rng.integers(n))
        c = pool.class_ids[i]
        mates = by_class[c]
        rest = others[c]
        if len(mates) < 2 or len(rest) == 0:
            continue
        j = int(rng.integers(len(mates) - 1))
        if j >= rank_in_class[i]:
            j += 1
        k = int(rng.integers(len(rest)))
        anchors.append(i)
        positives.append(int(mates[j]))
        negatives.append(int(rest[k]))
    return (
        np.asarray(anchors, dtype=np.int64),
        np.asarray(positives, dtype=np.int64),
        np.asarray(negatives, dtype=np.int64),
    )


def cluster_loss(
    pool: LabeledProjection,
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray],
    margin: float,
) -> Tensor:
    """Mean hinge over valid triplets; constant 0 when there are none."""
    anchors, positives, negatives = triplets
    if len(anchors) == 0:
        return Tensor(0.0)
    rows = pool.rows
    cos_ap = ad.pair_cosines(pool.vectors, rows[anchors], rows[positives])
    cos_an = ad.pair_cosines(pool.vectors, rows[anchors], rows[negatives])
    hinge = ad.relu(ad.add(ad.sub(Tensor(margin), cos_ap), cos_an))
    return ad.mean_(hinge)


def sample_pairs(
    pool: LabeledProjection, n_draws: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-class index pairs into the pool (unordered, with replacement)."""
    n = pool.size
    left, right = [], []
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    for _ in range(n_draws):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        if pool.class_ids[i] == pool.class_ids[j]:
            continue
        left.append(i)
        right.append(j)
    return np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64)


def label_embedding(
    class_id: int, w_e: np.ndarray, class_tokens: dict[int, list[int]]
) -> np.ndarray:
    """Word vector of a class: its token's embedding column, or the mean
    of the constituent tokens' columns for multi-word labels."""
    if class_id not in class_tokens:
        raise DomainError(f"class {class_id} has no label embedding (UNK or unknown)")
    cols = class_tokens[class_id]
    return np.asarray(w_e)[:, cols].mean(axis=1)


def label_embedding_matrix(
    w_e: Tensor, class_ids: np.ndarray, class_tokens: dict[int, list[int]]
) -> tuple[Tensor, dict[int, int]]:
    """Stack label embeddings for the given classes; returns (matrix, row-of-class)."""
    present = sorted(set(int(c) for c in class_ids))
    missing = [c for c in present if c not in class_tokens]
    if missing:
        raise DomainError(f"classes {missing} have no label tokens")
    groups = [np.asarray(class_tokens[c], dtype=np.int64) for c in present]
    return ad.column_group_mean(w_e, groups), {c: r for r, c in enumerate(present)}


def perceptual_loss(
    pool: LabeledProjection,
    pairs: tuple[np.ndarray, np.ndarray],
    w_e: Tensor,
    class_tokens: dict[int, list[int]],
) -> Tensor:
    """Negative correlation between object- and word-space pair similarities.

    Returns a constant 0 (logged) when fewer than 2 valid pairs exist or
    either similarity list has zero variance.
    """
    left, right = pairs
    if len(left) < 2:
        log.warning("perceptual loss skipped: %d valid cross-class pairs", len(left))
        return Tensor(0.0)
    rows = pool.rows
    sim_obj = ad.pair_cosines(pool.vectors, rows[left], rows[right])
    classes = np.concatenate([pool.class_ids[left], pool.class_ids[right]])
    embeddings, row_of = label_embedding_matrix(w_e, classes, class_tokens)
    e_left = np.array([row_of[int(c)] for c in pool.class_ids[left]], dtype=np.int64)
    e_right = np.array([row_of[int(c)] for c in pool.class_ids[right]], dtype=np.int64)
    sim_text = ad.pair_cosines(embeddings, e_left, e_right)
    try:
        correlation = ad.pearson_t(sim_obj, sim_text)
    except DegenerateStatisticsError as err:
        log.warning("perceptual loss skipped: %s", err)
        return Tensor(0.0)
    return ad.neg(correlation)


def total_loss(
    l_xe: Tensor,
    l_c: Tensor | None,
    l_p: Tensor | None,
    config: LossConfig,
) -> Tensor:
    """Weighted sum of the enabled heads; disabled heads leave l_xe intact."""
    total = l_xe
    if l_c is not None:
        total = ad.add(total, ad.mul(Tensor(config.cluster_weight), l_c))
    if l_p is not None:
        total = ad.add(total, ad.mul(Tensor(config.perceptual_weight), l_p))
    return total
