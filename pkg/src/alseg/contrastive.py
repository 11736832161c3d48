"""SimCLR-style contrastive pretraining of the segmentation encoder-decoder.

Two augmented views per image are pushed through the network, average
pooled, projected by a 2-layer MLP head, and L2-normalized; the batch is
scored with the InfoNCE loss (positives are the view pairs, negatives
all other in-batch views). After pretraining the projection head is
thrown away and the conv layers seed each AL cycle's model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .net import (
    NetConfig,
    NetParams,
    RmspropState,
    features_backward,
    forward_features,
    init_head,
    init_params,
    rmsprop_step,
)
from .ops import global_average_pool
from .rng import Rng

UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class PretrainConfig:
    temperature: float = 0.5
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    crop_area_min: float = 0.6
    crop_area_max: float = 1.0
    flip_probability: float = 0.5
    brightness_jitter: float = 0.2
    hidden_dim: int = 16
    proj_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (need at least one negative)")
        if not 0.0 < self.crop_area_min <= self.crop_area_max <= 1.0:
            raise ValueError("crop area range must satisfy 0 < min <= max <= 1")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")


@dataclass
class HeadParams:
    """2-layer MLP projection head: F -> hidden -> proj_dim."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def groups(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2

    def copy(self) -> "HeadParams":
        return HeadParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def astype(self, dtype) -> "HeadParams":
        return HeadParams(
            self.w1.astype(dtype), self.b1.astype(dtype),
            self.w2.astype(dtype), self.b2.astype(dtype),
        )


def init_projection_head(
    feature_dim: int, hidden_dim: int, proj_dim: int, rng: Rng, dtype=np.float32
) -> HeadParams:
    s1 = np.sqrt(2.0 / feature_dim)
    s2 = np.sqrt(2.0 / hidden_dim)
    return HeadParams(
        w1=(rng.normals((feature_dim, hidden_dim), dtype=np.float64) * s1).astype(dtype),
        b1=np.zeros(hidden_dim, dtype=dtype),
        w2=(rng.normals((hidden_dim, proj_dim), dtype=np.float64) * s2).astype(dtype),
        b2=np.zeros(proj_dim, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# Augmentation: crop-and-resize, flips, brightness jitter. Exactly six
# draws per view (area, top, left, hflip, vflip, brightness) so the
# stream stays aligned whatever the parameters.

def augment_view(image: np.ndarray, rng: Rng, cfg: PretrainConfig) -> np.ndarray:
    h, w = image.shape[0], image.shape[1]
    area = rng.uniform(cfg.crop_area_min, cfg.crop_area_max)
    side = math.sqrt(area)
    ch = max(1, int(round(side * h)))
    cw = max(1, int(round(side * w)))
    top = rng.randint(h - ch + 1)
    left = rng.randint(w - cw + 1)
    view = image[top:top + ch, left:left + cw]
    if ch != h or cw != w:
        rows = (np.arange(h) * ch) // h
        cols = (np.arange(w) * cw) // w
        view = view[rows][:, cols]
    if rng.random() < cfg.flip_probability:
        view = view[:, ::-1]
    if rng.random() < cfg.flip_probability:
        view = view[::-1]
    delta = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    return np.clip(view.astype(np.float32) + np.float32(delta), 0.0, 1.0)


def augment_pair(image: np.ndarray, rng: Rng, cfg: PretrainConfig) -> tuple[np.ndarray, np.ndarray]:
    return augment_view(image, rng, cfg), augment_view(image, rng, cfg)


# ---------------------------------------------------------------------------
# Projection and InfoNCE.

def _project_batch(params: NetParams, head: HeadParams, images: np.ndarray):
    feats, cache = forward_features(params, images)
    if feats.ndim == 3:
        feats = feats[None]
    dtype = feats.dtype
    hw = feats.shape[1] * feats.shape[2]
    pooled = feats.mean(axis=(1, 2), dtype=np.float64).astype(dtype)
    z1 = pooled @ head.w1 + head.b1
    hidden = np.maximum(z1, 0)
    z2 = hidden @ head.w2 + head.b2
    norms = np.sqrt((z2.astype(np.float64) ** 2).sum(axis=1)).astype(dtype)
    degenerate = norms < 1e-30
    if degenerate.any():
        warnings.warn("zero projection vector; substituting the first basis vector")
    safe = np.where(degenerate, 1, norms)
    v = z2 / safe[:, None]
    v[degenerate] = 0
    v[degenerate, 0] = 1
    return v, (cache, pooled, z1, hidden, z2, norms, degenerate, hw)


def project(params: NetParams, head: HeadParams, image: np.ndarray) -> np.ndarray:
    """Pool -> MLP -> L2 normalize; unit-norm embedding for one image."""
    feats, _ = forward_features(params, image)
    if feats.ndim == 4:
        feats = feats[0]
    pooled = global_average_pool(feats)
    z1 = pooled @ head.w1 + head.b1
    z2 = np.maximum(z1, 0) @ head.w2 + head.b2
    norm = float(np.sqrt((z2.astype(np.float64) ** 2).sum()))
    if norm < 1e-30:
        warnings.warn("zero projection vector; substituting the first basis vector")
        e1 = np.zeros_like(z2)
        e1[0] = 1
        return e1
    return (z2 / z2.dtype.type(norm)).astype(z2.dtype)


def _check_embeddings(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 2 or v.shape[0] < 4 or v.shape[0] % 2:
        raise ValueError("need an even batch of at least 4 embeddings")
    norms = np.sqrt((v.astype(np.float64) ** 2).sum(axis=1))
    if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
        raise ValueError("embeddings must be unit-norm")
    return v


def info_nce_loss(embeddings: np.ndarray, temperature: float) -> float:
    """Mean InfoNCE over all anchors; views (2k, 2k+1) are positives and
    every other in-batch view is a negative. The denominator includes
    the positive term, so the loss is strictly positive."""
    v = _check_embeddings(embeddings)
    m = v.shape[0]
    s = (v @ v.T).astype(np.float64) / temperature
    np.fill_diagonal(s, -np.inf)
    row_max = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - row_max).sum(axis=1)) + row_max[:, 0]
    partners = np.arange(m) ^ 1
    pos = s[np.arange(m), partners]
    return float((lse - pos).mean())


def info_nce_backward(
    images: np.ndarray, params: NetParams, head: HeadParams, temperature: float
) -> tuple[float, NetParams, HeadParams]:
    """Loss and exact gradients through normalization, projection,
    pooling and the conv stack, for a stacked batch of 2B views."""
    v, (cache, pooled, z1, hidden, z2, norms, degenerate, hw) = _project_batch(params, head, images)
    m = v.shape[0]
    if m < 4 or m % 2:
        raise ValueError("need an even batch of at least 4 views")
    dtype = v.dtype
    tau = dtype.type(temperature)

    s = (v @ v.T) / tau
    neg_inf = np.finfo(dtype).min
    np.fill_diagonal(s, neg_inf)
    row_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - row_max)
    np.fill_diagonal(e, 0)
    denom = e.sum(axis=1, keepdims=True)
    partners = np.arange(m) ^ 1
    pos = s[np.arange(m), partners]
    lse = np.log(denom[:, 0].astype(np.float64)) + row_max[:, 0].astype(np.float64)
    loss = float((lse - pos.astype(np.float64)).mean())

    ds = e / denom
    ds[np.arange(m), partners] -= 1
    ds /= dtype.type(m)
    dv = (ds @ v + ds.T @ v) / tau

    # Through v = z2 / ||z2||; degenerate rows were replaced by a constant.
    inner = (v * dv).sum(axis=1, keepdims=True)
    dz2 = (dv - v * inner) / np.where(degenerate, 1, norms)[:, None]
    dz2[degenerate] = 0

    dw2 = hidden.T @ dz2
    db2 = dz2.sum(axis=0)
    dhidden = dz2 @ head.w2.T
    dz1 = dhidden * (z1 > 0)
    dw1 = pooled.T @ dz1
    db1 = dz1.sum(axis=0)
    dpooled = dz1 @ head.w1.T

    dfeat = np.broadcast_to(
        (dpooled / dtype.type(hw))[:, None, None, :], cache.features.shape
    ).astype(dtype)
    net_grads = features_backward(cache, dfeat, params)
    head_grads = HeadParams(dw1, db1, dw2, db2)
    return loss, net_grads, head_grads


# ---------------------------------------------------------------------------
# Pretraining loop and weight transfer.

def pretrain(
    dataset: Dataset, net_config: NetConfig, cfg: PretrainConfig
) -> tuple[NetParams, list[float]]:
    """Contrastive pretraining on the train split.

    RMSprop with a cosine-decayed learning rate; batches of B images give
    2B views, pairs interleaved as (2k, 2k+1). Trailing batches smaller
    than 2 images are skipped. Returns conv-layer parameters (head_w is
    None: the segmentation head never existed here) and the per-epoch
    mean loss.
    """
    train_idx = list(dataset.train_indices)
    if len(train_idx) < cfg.batch_size:
        raise ValueError("train split smaller than the pretraining batch size")
    root = Rng(cfg.seed)
    params = init_params(net_config, root.derive("init"), with_head=False)
    head = init_projection_head(
        net_config.dec_channels, cfg.hidden_dim, cfg.proj_dim, root.derive("head-init")
    )
    shuffle_rng = root.derive("shuffle")
    aug_rng = root.derive("augment")
    net_state = RmspropState.zeros_like(params)
    head_state = {name: np.zeros_like(arr) for name, arr in head.groups()}

    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        order = list(train_idx)
        shuffle_rng.shuffle(order)
        epoch_loss, n_views = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            views = []
            for i in batch:
                v1, v2 = augment_pair(dataset.images[i], aug_rng, cfg)
                views.append(v1)
                views.append(v2)
            stacked = np.ascontiguousarray(np.stack(views))
            loss, net_grads, head_grads = info_nce_backward(stacked, params, head, cfg.temperature)
            params, net_state = rmsprop_step(params, net_grads, net_state, lr, decay=0.9, eps=1e-8)
            for name, h in head.groups():
                g = dict(head_grads.groups())[name]
                s = 0.9 * head_state[name] + 0.1 * g * g
                head_state[name] = s
                setattr(head, name, h - lr * g / (np.sqrt(s) + 1e-8))
            epoch_loss += loss * len(views)
            n_views += len(views)
        history.append(epoch_loss / n_views if n_views else float("nan"))
    return params, history


def transfer(pretrained: NetParams, config: NetConfig, rng: Rng) -> NetParams:
    """Copy conv layers from a pretrained checkpoint and attach a freshly
    seeded segmentation head."""
    expected = init_params(config, Rng(0), with_head=False)
    for (name, arr), (_, ref) in zip(pretrained.groups(), expected.groups()):
        if arr.shape != ref.shape:
            raise ValueError(f"pretrained {name} has shape {arr.shape}, config wants {ref.shape}")
    out = pretrained.copy()
    out.head_w, out.head_b = init_head(config, rng)
    return out
