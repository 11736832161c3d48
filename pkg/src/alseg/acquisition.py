"""Rareness-aware acquisition and baseline selection strategies.

Image scores combine three terms: rareness (exp of minus the pseudo-label
posterior, so globally rare predicted classes score high), predictive
entropy, and diversity (min embedding distance to everything already
labelled or picked this cycle). Selection is greedy: K rounds of argmax
with the diversity term updated incrementally after every pick.

The three terms are summed raw, as defined; their natural scales differ
(r <= 1, u <= ln C, d unbounded) and every selection log carries the
per-term breakdown so scale effects stay auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import NetParams, forward
from .ops import argmax_tiebreak_low, entropy, global_average_pool, l2_distance

STRATEGIES = ("rareness_aware", "random", "entropy", "coreset")


@dataclass(frozen=True)
class AcquisitionConfig:
    strategy: str = "rareness_aware"
    use_rareness: bool = True
    use_entropy: bool = True
    use_diversity: bool = True
    aggregator: str = "max"
    budget: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.aggregator not in ("max", "mean"):
            raise ValueError(f"aggregator must be 'max' or 'mean', got {self.aggregator!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.strategy == "rareness_aware" and not (
            self.use_rareness or self.use_entropy or self.use_diversity
        ):
            raise ValueError("rareness_aware needs at least one enabled term")

    def effective_terms(self) -> tuple[bool, bool, bool]:
        """(rareness, entropy, diversity) toggles implied by the strategy."""
        if self.strategy == "entropy":
            return False, True, False
        if self.strategy == "coreset":
            return False, False, True
        if self.strategy == "random":
            return False, False, False
        return self.use_rareness, self.use_entropy, self.use_diversity


@dataclass
class PoolState:
    """Book-keeping for one selection cycle."""

    labelled: list[int]
    unlabelled: list[int]
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)
    min_dist: dict[int, float] = field(default_factory=dict)
    picked: list[int] = field(default_factory=list)

    def __post_init__(self):
        if set(self.labelled) & set(self.unlabelled):
            raise ValueError("labelled and unlabelled sets overlap")


@dataclass(frozen=True)
class ScoreBreakdown:
    r: float | None
    u: float | None
    d: float | None

    @property
    def total(self) -> float:
        return sum(t for t in (self.r, self.u, self.d) if t is not None)


def evaluate_image(params: NetParams, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One forward pass giving (per-pixel probs, pooled embedding)."""
    _, probs, features, _ = forward(params, image)
    return probs, global_average_pool(features)


def pseudo_label_map(params: NetParams, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax class; ties go to the lowest class index."""
    _, probs, _, _ = forward(params, image)
    return probs.argmax(axis=-1)


def class_posterior(params: NetParams, images: np.ndarray) -> np.ndarray:
    """Pseudo-label class distribution over every pixel of ``images``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ValueError("class_posterior needs at least one image")
    n_classes = params.head_w.shape[1]
    counts = np.zeros(n_classes, dtype=np.int64)
    for img in images:
        labels = pseudo_label_map(params, img)
        counts += np.bincount(labels.ravel(), minlength=n_classes)
    return counts.astype(np.float64) / counts.sum()


def _aggregate(pixel_scores: np.ndarray, aggregator: str) -> float:
    if aggregator == "max":
        return float(pixel_scores.max())
    return float(pixel_scores.mean(dtype=np.float64))


def rareness_from_probs(probs: np.ndarray, posterior: np.ndarray, aggregator: str) -> float:
    labels = probs.argmax(axis=-1)
    r = np.exp(-np.asarray(posterior, dtype=np.float64))[labels]
    return _aggregate(r, aggregator)


def entropy_from_probs(probs: np.ndarray, aggregator: str) -> float:
    u = entropy(probs, axis=-1)
    return _aggregate(u, aggregator)


def rareness_image(
    params: NetParams, image: np.ndarray, posterior: np.ndarray, aggregator: str = "max"
) -> float:
    """Image rareness score; always in [e^-1, 1]."""
    _, probs, _, _ = forward(params, image)
    return rareness_from_probs(probs, posterior, aggregator)


def entropy_image(params: NetParams, image: np.ndarray, aggregator: str = "max") -> float:
    """Aggregated per-pixel predictive entropy; in [0, ln C]."""
    _, probs, _, _ = forward(params, image)
    return entropy_from_probs(probs, aggregator)


def diversity(embedding: np.ndarray, reference: list[np.ndarray]) -> float:
    """Min L2 distance from ``embedding`` to the reference set."""
    if len(reference) == 0:
        raise ValueError("diversity needs a non-empty reference set")
    return min(l2_distance(embedding, ref) for ref in reference)


def build_pool_state(
    params: NetParams, images: np.ndarray, labelled: list[int], unlabelled: list[int]
) -> PoolState:
    """Pool with fresh embeddings for every labelled/unlabelled image."""
    from .net import image_embedding

    emb = {i: image_embedding(params, images[i]) for i in sorted(labelled) + sorted(unlabelled)}
    return PoolState(labelled=sorted(labelled), unlabelled=sorted(unlabelled), embeddings=emb)


def score(
    params: NetParams,
    images: np.ndarray,
    index: int,
    posterior: np.ndarray,
    pool: PoolState,
    config: AcquisitionConfig,
) -> ScoreBreakdown:
    """Score of one unlabelled image against the current reference set
    (labelled plus already picked this cycle)."""
    if index not in pool.unlabelled:
        raise ValueError(f"image {index} is not in the unlabelled pool")
    use_r, use_u, use_d = config.effective_terms()
    probs, emb = evaluate_image(params, images[index])
    r = rareness_from_probs(probs, posterior, config.aggregator) if use_r else None
    u = entropy_from_probs(probs, config.aggregator) if use_u else None
    d = None
    if use_d:
        refs = [pool.embeddings[j] for j in pool.labelled + pool.picked]
        d = diversity(emb, refs)
    return ScoreBreakdown(r=r, u=u, d=d)


def greedy_select(
    params: NetParams,
    images: np.ndarray,
    pool: PoolState,
    config: AcquisitionConfig,
    k: int,
) -> tuple[list[int], list[ScoreBreakdown], np.ndarray]:
    """K rounds of argmax over the combined score (ties to the lowest
    image index). The pseudo-label posterior is computed once from the
    current model; rareness and entropy are cached per image; the
    diversity term is maintained as an incremental min-distance.

    Returns (picks in order, per-pick score breakdowns, posterior).
    """
    if k > len(pool.unlabelled):
        raise ValueError(f"budget {k} exceeds pool size {len(pool.unlabelled)}")
    use_r, use_u, use_d = config.effective_terms()
    if use_d and not pool.labelled:
        raise ValueError(
            "diversity term needs a non-empty labelled set (cycle 0 must be random)"
        )

    train_order = sorted(pool.labelled) + sorted(pool.unlabelled)
    n_classes = params.head_w.shape[1]
    counts = np.zeros(n_classes, dtype=np.int64)
    probs_cache: dict[int, np.ndarray] = {}
    unlabelled_set = set(pool.unlabelled)
    for i in train_order:
        _, probs, _, _ = forward(params, images[i])
        counts += np.bincount(probs.argmax(axis=-1).ravel(), minlength=n_classes)
        if i in unlabelled_set:
            probs_cache[i] = probs
    posterior = counts.astype(np.float64) / counts.sum()

    r_cache: dict[int, float] = {}
    u_cache: dict[int, float] = {}
    for i in pool.unlabelled:
        if use_r:
            r_cache[i] = rareness_from_probs(probs_cache[i], posterior, config.aggregator)
        if use_u:
            u_cache[i] = entropy_from_probs(probs_cache[i], config.aggregator)
    if use_d:
        for i in pool.unlabelled:
            pool.min_dist[i] = diversity(
                pool.embeddings[i], [pool.embeddings[j] for j in pool.labelled]
            )

    remaining = sorted(pool.unlabelled)
    picks: list[int] = []
    records: list[ScoreBreakdown] = []
    for _ in range(k):
        totals = np.empty(len(remaining), dtype=np.float64)
        for pos, i in enumerate(remaining):
            t = 0.0
            if use_r:
                t += r_cache[i]
            if use_u:
                t += u_cache[i]
            if use_d:
                t += pool.min_dist[i]
            totals[pos] = t
        chosen = remaining[argmax_tiebreak_low(totals)]
        records.append(
            ScoreBreakdown(
                r=r_cache.get(chosen) if use_r else None,
                u=u_cache.get(chosen) if use_u else None,
                d=pool.min_dist.get(chosen) if use_d else None,
            )
        )
        remaining.remove(chosen)
        picks.append(chosen)
        pool.picked.append(chosen)
        pool.unlabelled.remove(chosen)
        pool.min_dist.pop(chosen, None)
        if use_d:
            for i in remaining:
                dist = l2_distance(pool.embeddings[i], pool.embeddings[chosen])
                if dist < pool.min_dist[i]:
                    pool.min_dist[i] = dist
    return picks, records, posterior


def random_select(pool: PoolState, k: int, rng) -> list[int]:
    """Uniform sample without replacement from the unlabelled pool."""
    if k > len(pool.unlabelled):
        raise ValueError(f"budget {k} exceeds pool size {len(pool.unlabelled)}")
    return rng.sample(sorted(pool.unlabelled), k)


def entropy_select(
    params: NetParams, images: np.ndarray, pool: PoolState, k: int, aggregator: str = "max"
) -> list[int]:
    """Top-K unlabelled images by aggregated entropy (ties to the lowest
    index); picks do not interact, so this equals the greedy path with
    only the entropy term enabled."""
    if k > len(pool.unlabelled):
        raise ValueError(f"budget {k} exceeds pool size {len(pool.unlabelled)}")
    idx = sorted(pool.unlabelled)
    scores = [entropy_image(params, images[i], aggregator) for i in idx]
    ranked = sorted(range(len(idx)), key=lambda p: (-scores[p], idx[p]))
    return [idx[p] for p in ranked[:k]]


def coreset_select(pool: PoolState, k: int) -> list[int]:
    """k-center greedy (farthest point first) on the pool embeddings,
    recomputing min distances from scratch at every step."""
    if k > len(pool.unlabelled):
        raise ValueError(f"budget {k} exceeds pool size {len(pool.unlabelled)}")
    if not pool.labelled:
        raise ValueError("coreset selection needs a non-empty labelled set")
    refs = [pool.embeddings[j] for j in sorted(pool.labelled)]
    remaining = sorted(pool.unlabelled)
    picks: list[int] = []
    for _ in range(k):
        dists = np.array(
            [min(l2_distance(pool.embeddings[i], ref) for ref in refs) for i in remaining]
        )
        chosen = remaining[argmax_tiebreak_low(dists)]
        picks.append(chosen)
        remaining.remove(chosen)
        refs.append(pool.embeddings[chosen])
    return picks
