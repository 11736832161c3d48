"""Small encoder-decoder segmentation network with hand-written backprop.

Architecture (all convs same-padded):

    conv3x3 -> ReLU            (a1, kept for the skip path)
    maxpool 2x2
    conv3x3 -> ReLU
    nearest upsample x2
    concat a1                  (if skip_connection)
    conv3x3 -> ReLU            (decoder features, F channels)
    conv1x1                    (segmentation head -> per-class logits)
    per-pixel softmax

The forward pass runs on a batch [N, H, W, C] or a single [H, W, C]
image and keeps every intermediate needed for the exact backward pass.
All ops are dtype-polymorphic so gradient checks can run the same code
in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, class_frequencies
from .ops import global_average_pool, softmax
from .rng import Rng

LOG_CLAMP = 1e-12
FREQ_FLOOR = 1e-6


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    enc1_channels: int = 8
    enc2_channels: int = 16
    dec_channels: int = 8
    n_classes: int = 4
    skip_connection: bool = True

    def __post_init__(self):
        for name in ("in_channels", "enc1_channels", "enc2_channels", "dec_channels", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def dec_in_channels(self) -> int:
        return self.enc2_channels + (self.enc1_channels if self.skip_connection else 0)


@dataclass
class NetParams:
    """All weights of the segmentation network.

    ``head_w``/``head_b`` are None for contrastively pretrained params,
    where the segmentation head never existed.
    """

    enc1_w: np.ndarray  # [3, 3, in, e1]
    enc1_b: np.ndarray
    enc2_w: np.ndarray  # [3, 3, e1, e2]
    enc2_b: np.ndarray
    dec_w: np.ndarray  # [3, 3, e2 (+e1), F]
    dec_b: np.ndarray
    head_w: np.ndarray | None  # [F, C], a 1x1 conv
    head_b: np.ndarray | None

    def groups(self, include_head: bool = True):
        yield "enc1_w", self.enc1_w
        yield "enc1_b", self.enc1_b
        yield "enc2_w", self.enc2_w
        yield "enc2_b", self.enc2_b
        yield "dec_w", self.dec_w
        yield "dec_b", self.dec_b
        if include_head and self.head_w is not None:
            yield "head_w", self.head_w
            yield "head_b", self.head_b

    def copy(self) -> "NetParams":
        return NetParams(
            self.enc1_w.copy(), self.enc1_b.copy(),
            self.enc2_w.copy(), self.enc2_b.copy(),
            self.dec_w.copy(), self.dec_b.copy(),
            None if self.head_w is None else self.head_w.copy(),
            None if self.head_b is None else self.head_b.copy(),
        )

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            self.enc1_w.astype(dtype), self.enc1_b.astype(dtype),
            self.enc2_w.astype(dtype), self.enc2_b.astype(dtype),
            self.dec_w.astype(dtype), self.dec_b.astype(dtype),
            None if self.head_w is None else self.head_w.astype(dtype),
            None if self.head_b is None else self.head_b.astype(dtype),
        )


def _he_conv(rng: Rng, kh: int, kw: int, cin: int, cout: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (rng.normals((kh, kw, cin, cout), dtype=np.float64) * std).astype(dtype)


def init_head(config: NetConfig, rng: Rng, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    std = np.sqrt(2.0 / config.dec_channels)
    w = (rng.normals((config.dec_channels, config.n_classes), dtype=np.float64) * std).astype(dtype)
    return w, np.zeros(config.n_classes, dtype=dtype)


def init_params(config: NetConfig, rng: Rng, dtype=np.float32, with_head: bool = True) -> NetParams:
    """He-scaled random weights, zero biases; draw order fixed per group."""
    p = NetParams(
        enc1_w=_he_conv(rng, 3, 3, config.in_channels, config.enc1_channels, dtype),
        enc1_b=np.zeros(config.enc1_channels, dtype=dtype),
        enc2_w=_he_conv(rng, 3, 3, config.enc1_channels, config.enc2_channels, dtype),
        enc2_b=np.zeros(config.enc2_channels, dtype=dtype),
        dec_w=_he_conv(rng, 3, 3, config.dec_in_channels, config.dec_channels, dtype),
        dec_b=np.zeros(config.dec_channels, dtype=dtype),
        head_w=None,
        head_b=None,
    )
    if with_head:
        p.head_w, p.head_b = init_head(config, rng, dtype)
    return p


def config_of(params: NetParams) -> NetConfig:
    e1 = params.enc1_w.shape[3]
    e2 = params.enc2_w.shape[3]
    skip = params.dec_w.shape[2] == e2 + e1
    return NetConfig(
        in_channels=params.enc1_w.shape[2],
        enc1_channels=e1,
        enc2_channels=e2,
        dec_channels=params.dec_w.shape[3],
        n_classes=0 if params.head_w is None else params.head_w.shape[1],
        skip_connection=skip,
    )


# ---------------------------------------------------------------------------
# Layer primitives (batched NHWC, same padding).
#
# The 3x3 convolution is computed as one GEMM producing all nine tap
# products at once, followed by nine shifted accumulations; this avoids
# materializing an im2col matrix. With P[n,i,j,k,:] = x[n,i,j,:] @
# w[ky,kx] (k = 3*ky + kx), the same-padded output satisfies
# out[a,b] = sum_k P[a+ky-1, b+kx-1, k], accumulated on a padded canvas.


def _tap_matrix(w: np.ndarray) -> np.ndarray:
    # [3,3,Cin,Cout] -> [Cin, 9*Cout], tap-major over the output channel
    return np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(w.shape[2], -1)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xm = x.reshape(-1, cin)
    acc = np.zeros((n, h + 2, wd + 2, cout), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            p = (xm @ w[ky, kx]).reshape(n, h, wd, cout)
            acc[:, 2 - ky:2 - ky + h, 2 - kx:2 - kx + wd, :] += p
    return acc[:, 1:-1, 1:-1, :] + b, x


def conv3x3_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    n, h, wd, cout = dy.shape
    cin = x.shape[3]
    canvas = np.zeros((n, h + 2, wd + 2, cout), dtype=dy.dtype)
    canvas[:, 1:-1, 1:-1, :] = dy
    db = dy.reshape(-1, cout).sum(axis=0)
    xm = x.reshape(-1, cin)
    if cin <= cout:
        # Per-tap GEMMs on contiguous gathers; cheap when dw slabs are small.
        dx = np.zeros((n * h * wd, cin), dtype=dy.dtype)
        dw = np.empty_like(w)
        for ky in range(3):
            for kx in range(3):
                q = np.ascontiguousarray(
                    canvas[:, 2 - ky:2 - ky + h, 2 - kx:2 - kx + wd, :]
                ).reshape(-1, cout)
                dx += q @ w[ky, kx].T
                dw[ky, kx] = xm.T @ q
        return dw, db, dx.reshape(x.shape)
    # Wide-input layers: gather all taps once and use two fat GEMMs.
    dp = np.empty((n, h, wd, 9, cout), dtype=dy.dtype)
    for ky in range(3):
        for kx in range(3):
            dp[:, :, :, 3 * ky + kx, :] = canvas[:, 2 - ky:2 - ky + h, 2 - kx:2 - kx + wd, :]
    dp_mat = dp.reshape(-1, 9 * cout)
    dx = (dp_mat @ _tap_matrix(w).T).reshape(x.shape)
    dw_big = xm.T @ dp_mat
    dw = np.ascontiguousarray(dw_big.reshape(cin, 3, 3, cout).transpose(1, 2, 0, 3))
    return dw, db, dx


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; argmax ties go to the lowest window index."""
    n, h, w, c = x.shape
    xr = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    xr = xr.reshape(n, h // 2, w // 2, 4, c)
    idx = xr.argmax(axis=3).astype(np.uint8)
    out = np.take_along_axis(xr, idx[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    return out, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    n, h, w, c = in_shape
    dxr = np.zeros((n, h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :].astype(np.intp), dy[:, :, :, None, :], axis=3)
    return dxr.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# Forward / backward through the whole network.

@dataclass
class ForwardCache:
    x_shape: tuple
    x1: np.ndarray  # conv1 input
    z1: np.ndarray
    pool_idx: np.ndarray
    pooled_shape: tuple
    x2: np.ndarray  # conv2 input (pooled a1)
    z2: np.ndarray
    x3: np.ndarray  # conv3 input (upsampled a2, concat a1)
    z3: np.ndarray
    features: np.ndarray
    probs: np.ndarray | None
    skip: bool


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")


def forward_features(params: NetParams, x: np.ndarray):
    """Everything before the segmentation head; returns (features, cache)."""
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be divisible by 2, got {h}x{w}")
    if c != params.enc1_w.shape[2]:
        raise ValueError(f"expected {params.enc1_w.shape[2]} input channels, got {c}")

    z1, x1 = conv3x3(xb, params.enc1_w, params.enc1_b)
    a1 = np.maximum(z1, 0)
    pooled, pool_idx = maxpool2(a1)
    z2, x2 = conv3x3(pooled, params.enc2_w, params.enc2_b)
    a2 = np.maximum(z2, 0)
    up = upsample2(a2)
    skip = params.dec_w.shape[2] == a2.shape[3] + a1.shape[3]
    cat = np.concatenate([up, a1], axis=-1) if skip else up
    z3, x3 = conv3x3(cat, params.dec_w, params.dec_b)
    features = np.maximum(z3, 0)
    cache = ForwardCache(
        x_shape=xb.shape, x1=x1, z1=z1, pool_idx=pool_idx,
        pooled_shape=pooled.shape, x2=x2, z2=z2, x3=x3, z3=z3,
        features=features, probs=None, skip=skip,
    )
    return (features[0] if squeeze else features), cache


def forward(params: NetParams, x: np.ndarray):
    """Full pass; returns (logits, probs, decoder_features, cache)."""
    if params.head_w is None:
        raise ValueError("params carry no segmentation head (pretrained checkpoint?)")
    features, cache = forward_features(params, x)
    f = cache.features
    logits = f @ params.head_w + params.head_b
    probs = softmax(logits, axis=-1)
    cache.probs = probs
    if np.asarray(x).ndim == 3:
        return logits[0], probs[0], features, cache
    return logits, probs, features, cache


def features_backward(cache: ForwardCache, dfeat: np.ndarray, params: NetParams) -> NetParams:
    """Gradients of all pre-head parameters given d(loss)/d(features)."""
    dz3 = dfeat * (cache.z3 > 0)
    dw3, db3, dcat = conv3x3_backward(dz3, cache.x3, params.dec_w)
    e2 = params.enc2_w.shape[3]
    if cache.skip:
        dup, da1_skip = dcat[..., :e2], dcat[..., e2:]
    else:
        dup, da1_skip = dcat, None
    da2 = upsample2_backward(dup)
    dz2 = da2 * (cache.z2 > 0)
    dw2, db2, dpooled = conv3x3_backward(dz2, cache.x2, params.enc2_w)
    n, h, w, _ = cache.x_shape
    da1 = maxpool2_backward(dpooled, cache.pool_idx, (n, h, w, params.enc1_w.shape[3]))
    if da1_skip is not None:
        da1 = da1 + da1_skip
    dz1 = da1 * (cache.z1 > 0)
    dw1, db1, _ = conv3x3_backward(dz1, cache.x1, params.enc1_w)
    return NetParams(dw1, db1, dw2, db2, dw3, db3, None, None)


def weighted_cross_entropy(probs: np.ndarray, mask: np.ndarray, weights: np.ndarray) -> float:
    """Mean of -log p(true class), weighted per pixel by its class weight
    and normalized by the summed weights (64-bit accumulation)."""
    probs = np.asarray(probs)
    mask = np.asarray(mask)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("class weights must be positive")
    if probs.shape[:-1] != mask.shape:
        raise ValueError(f"probs {probs.shape} do not match mask {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= probs.shape[-1]:
        raise ValueError("mask contains a class outside the prob map range")
    p_true = np.take_along_axis(probs, mask[..., None].astype(np.intp), axis=-1)[..., 0]
    w = weights[mask]
    losses = -np.log(np.maximum(p_true.astype(np.float64), LOG_CLAMP))
    return float((w * losses).sum() / w.sum())


def backward(cache: ForwardCache, mask: np.ndarray, weights: np.ndarray, params: NetParams) -> NetParams:
    """Exact gradients of weighted_cross_entropy w.r.t. every parameter."""
    if cache.probs is None:
        raise ValueError("cache has no probabilities; run the full forward first")
    probs = cache.probs
    mask = np.asarray(mask)
    if mask.ndim == probs.ndim - 2:
        mask = mask[None]
    if probs.shape[:-1] != mask.shape:
        raise ValueError(f"stale cache: probs {probs.shape} vs mask {mask.shape}")
    dtype = probs.dtype
    weights_t = np.asarray(weights, dtype=dtype)

    midx = mask[..., None].astype(np.intp)
    p_true = np.take_along_axis(probs, midx, axis=-1)[..., 0]
    w_map = weights_t[mask]
    wsum = np.asarray(weights, dtype=np.float64)[mask].sum()
    # The loss clamps -log at 1e-12 for finiteness, but the gradient
    # deliberately ignores the clamp: p - onehot is bounded either way,
    # and zeroing clamped pixels would freeze badly mispredicted ones.
    scale = w_map.astype(dtype) / dtype.type(wsum)

    dlogits = probs.copy()
    np.put_along_axis(dlogits, midx, (p_true - 1)[..., None], axis=-1)
    dlogits *= scale[..., None]

    f2 = cache.features.reshape(-1, cache.features.shape[-1])
    dl2 = dlogits.reshape(-1, dlogits.shape[-1])
    dhead_w = f2.T @ dl2
    dhead_b = dl2.sum(axis=0)
    dfeat = (dl2 @ params.head_w.T).reshape(cache.features.shape)

    grads = features_backward(cache, dfeat, params)
    grads.head_w = dhead_w
    grads.head_b = dhead_b
    return grads


# ---------------------------------------------------------------------------
# Optimizer and training loop.

@dataclass
class RmspropState:
    sq: dict

    @classmethod
    def zeros_like(cls, params: NetParams) -> "RmspropState":
        return cls({name: np.zeros_like(arr) for name, arr in params.groups()})


def rmsprop_step(
    params: NetParams,
    grads: NetParams,
    state: RmspropState,
    lr: float,
    decay: float = 0.9,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[NetParams, RmspropState]:
    new_p, new_s = {}, {}
    gmap = dict(grads.groups())
    for name, p in params.groups():
        g = gmap[name]
        s = decay * state.sq[name] + (1.0 - decay) * g * g
        new_s[name] = s
        new_p[name] = p - lr * g / (np.sqrt(s) + eps) - lr * weight_decay * p
    out = params.copy()
    for name, arr in new_p.items():
        setattr(out, name, arr)
    return out, RmspropState(new_s)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_drop_epoch: int = 25
    lr_drop_factor: float = 0.1
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    weight_decay: float = 1e-8
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("learning rates must be positive")


def class_weights(dataset: Dataset, labelled_indices: list[int]) -> np.ndarray:
    """Inverse-frequency class weights over the labelled pixels.

    Frequencies are floored at 1e-6 (absent classes get the floor) and
    the weights are rescaled to mean 1.
    """
    freq = class_frequencies(dataset, labelled_indices)
    raw = 1.0 / np.maximum(freq, FREQ_FLOOR)
    return (raw / raw.mean()).astype(np.float64)


def train(
    init: NetParams,
    dataset: Dataset,
    labelled_indices: list[int],
    cfg: TrainConfig,
) -> tuple[NetParams, list[float]]:
    """RMSprop training on the labelled subset, starting from ``init``.

    Class weights are computed once up front; each epoch shuffles the
    labelled set and applies per-sample flip augmentation. Deterministic
    for a given (init, labelled set, config).
    """
    if len(labelled_indices) == 0:
        raise ValueError("cannot train on an empty labelled set")
    params = init.copy()
    if params.head_w is None:
        raise ValueError("training requires params with a segmentation head")
    weights = class_weights(dataset, labelled_indices)
    state = RmspropState.zeros_like(params)
    shuffle_rng = Rng(cfg.seed).derive("shuffle")
    aug_rng = Rng(cfg.seed).derive("augment")

    idx = list(labelled_indices)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)
        order = list(idx)
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xs, ys = [], []
            for i in batch:
                img, msk = dataset.images[i], dataset.masks[i]
                if aug_rng.random() < cfg.flip_probability:
                    img, msk = img[:, ::-1], msk[:, ::-1]
                if aug_rng.random() < cfg.flip_probability:
                    img, msk = img[::-1], msk[::-1]
                xs.append(img)
                ys.append(msk)
            xb = np.ascontiguousarray(np.stack(xs))
            yb = np.stack(ys)
            _, probs, _, cache = forward(params, xb)
            loss = weighted_cross_entropy(probs, yb, weights)
            grads = backward(cache, yb, weights, params)
            params, state = rmsprop_step(
                params, grads, state, lr,
                decay=cfg.rmsprop_decay, eps=cfg.rmsprop_eps, weight_decay=cfg.weight_decay,
            )
            epoch_loss += loss * len(batch)
        history.append(epoch_loss / len(idx))
    return params, history


def predict(params: NetParams, image: np.ndarray) -> np.ndarray:
    """Per-pixel class posterior for a single image."""
    _, probs, _, _ = forward(params, image)
    return probs


def image_embedding(params: NetParams, image: np.ndarray) -> np.ndarray:
    """Average-pooled decoder features; length F."""
    features, _ = forward_features(params, image)
    if features.ndim == 4:
        features = features[0]
    return global_average_pool(features)


# ---------------------------------------------------------------------------
# Checkpoint file: magic "ALNP1", kind u32 (0 = full segmentation,
# 1 = pretrained encoder-decoder, no head), six u32 config fields
# (in_channels, enc1, enc2, dec, n_classes, skip), then parameter groups
# as little-endian float32 in groups() order.

_MAGIC = b"ALNP1"
KIND_FULL = 0
KIND_PRETRAINED = 1


class CheckpointFormatError(Exception):
    pass


def save_params(path, params: NetParams, config: NetConfig, kind: int = KIND_FULL) -> None:
    if kind == KIND_FULL and params.head_w is None:
        raise ValueError("full checkpoint requires a segmentation head")
    blob = bytearray(_MAGIC)
    blob += struct.pack(
        "<7I", kind, config.in_channels, config.enc1_channels, config.enc2_channels,
        config.dec_channels, config.n_classes, int(config.skip_connection),
    )
    for _, arr in params.groups(include_head=(kind == KIND_FULL)):
        blob += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_params(path) -> tuple[NetParams, NetConfig, int]:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:5]!r} at byte 0, expected {_MAGIC!r}")
    if len(raw) < 5 + 28:
        raise CheckpointFormatError(f"header truncated at byte {len(raw)}")
    kind, cin, e1, e2, f, ncls, skip = struct.unpack_from("<7I", raw, 5)
    config = NetConfig(
        in_channels=cin, enc1_channels=e1, enc2_channels=e2, dec_channels=f,
        n_classes=max(ncls, 1), skip_connection=bool(skip),
    )
    shapes = [
        ("enc1_w", (3, 3, cin, e1)), ("enc1_b", (e1,)),
        ("enc2_w", (3, 3, e1, e2)), ("enc2_b", (e2,)),
        ("dec_w", (3, 3, config.dec_in_channels, f)), ("dec_b", (f,)),
    ]
    if kind == KIND_FULL:
        shapes += [("head_w", (f, ncls)), ("head_b", (ncls,))]
    elif kind != KIND_PRETRAINED:
        raise CheckpointFormatError(f"unknown checkpoint kind {kind}")

    offset = 5 + 28
    fields: dict[str, np.ndarray | None] = {"head_w": None, "head_b": None}
    for name, shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(
                f"{name}: payload truncated at byte {len(raw)}, expected data up to byte {end}"
            )
        fields[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes at byte {offset}")
    params = NetParams(**fields)  # type: ignore[arg-type]
    return params, config, kind
