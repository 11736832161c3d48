"""Synthetic class-imbalanced die-scan images with ground-truth masks.

Each grayscale image shows a vertical copper pillar whose foot sits in a
solder bump; the memory variant adds a pad slab under the bump, and a
fraction of images carry a small void strictly inside the solder. The
void class is rare by construction (well under 5% of all pixels), which
is the property the acquisition experiments exercise.

Layering, back to front: background, pillar, pad, solder, void. A mask
pixel always takes the frontmost shape covering it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng

LOGIC_CLASSES = ("background", "pillar", "solder", "void")
MEMORY_CLASSES = ("background", "pillar", "solder", "void", "pad")

# Gray level per class, tuned so the void sits between pillar and solder
# intensities (hard to tell from the pillar by brightness alone).
DEFAULT_INTENSITY_MEANS = {
    "background": 0.10,
    "pillar": 0.40,
    "solder": 0.85,
    "void": 0.52,
    "pad": 0.22,
}

_VOID_PLACEMENT_ATTEMPTS = 200


class GenerationError(Exception):
    """Scene constraints cannot be satisfied at the requested size."""


class DatasetFormatError(Exception):
    """On-disk dataset is malformed; message carries the byte offset."""


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and intensity parameters of the generator."""

    height: int = 32
    width: int = 32
    variant: str = "logic"
    void_probability: float = 0.3
    void_radius_min: float = 1.0
    void_radius_max: float = 3.0
    noise_sigma: float = 0.05
    intensity_means: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.variant not in ("logic", "memory"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.void_probability <= 1.0:
            raise ValueError("void_probability must be in (0, 1]")
        if self.void_radius_min < 1.0 or self.void_radius_max < self.void_radius_min:
            raise ValueError("void radii must satisfy 1 <= min <= max")
        means = self.class_means()
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                if abs(means[i] - means[j]) < 0.1 - 1e-9:
                    raise ValueError(
                        f"intensity means for {self.class_names()[i]} and "
                        f"{self.class_names()[j]} closer than 0.1"
                    )

    def class_names(self) -> tuple[str, ...]:
        return MEMORY_CLASSES if self.variant == "memory" else LOGIC_CLASSES

    def class_means(self) -> tuple[float, ...]:
        if self.intensity_means is not None:
            if len(self.intensity_means) != len(self.class_names()):
                raise ValueError("intensity_means length must match the class set")
            return tuple(float(m) for m in self.intensity_means)
        return tuple(DEFAULT_INTENSITY_MEANS[name] for name in self.class_names())


@dataclass(frozen=True)
class SceneShapes:
    """Sampled geometry of one image; enough to re-rasterize the mask."""

    pillar_x0: float
    pillar_x1: float
    pillar_y1: float
    solder_cx: float
    solder_cy: float
    solder_rx: float
    solder_ry: float
    pad_y0: float | None = None
    pad_y1: float | None = None
    pad_x0: float | None = None
    pad_x1: float | None = None
    void_cx: float | None = None
    void_cy: float | None = None
    void_r: float | None = None


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, 1] float32 in [0, 1]
    masks: np.ndarray  # [N, H, W] uint8
    train_indices: list[int]
    test_indices: list[int]
    class_names: list[str]
    spec: SceneSpec | None = None
    seed: int | None = None
    shapes: list[SceneShapes] = field(default_factory=list, repr=False)

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _sample_shapes(spec: SceneSpec, g: Rng) -> SceneShapes:
    h, w = spec.height, spec.width
    pillar_w = g.randint(int(round(0.5 * w)) - int(round(0.3 * w)) + 1) + int(round(0.3 * w))
    pillar_cx = g.uniform(0.35 * w, 0.65 * w)
    foot_y = g.uniform(0.45 * h, 0.65 * h)
    solder_rx = g.uniform(0.18, 0.28) * w
    solder_ry = g.uniform(0.14, 0.20) * h

    pad = {}
    if spec.variant == "memory":
        pad_h = g.uniform(0.08, 0.14) * h
        pad_w = g.uniform(0.6, 0.9) * w
        pad_y0 = foot_y + 0.8 * solder_ry
        pad = {
            "pad_y0": pad_y0,
            "pad_y1": pad_y0 + pad_h,
            "pad_x0": 0.5 * w - 0.5 * pad_w,
            "pad_x1": 0.5 * w + 0.5 * pad_w,
        }

    shapes = SceneShapes(
        pillar_x0=pillar_cx - 0.5 * pillar_w,
        pillar_x1=pillar_cx + 0.5 * pillar_w,
        pillar_y1=foot_y,
        solder_cx=pillar_cx,
        solder_cy=foot_y,
        solder_rx=solder_rx,
        solder_ry=solder_ry,
        **pad,
    )

    if g.random() < spec.void_probability:
        shapes = _place_void(spec, shapes, g)
    return shapes


def _void_fits(spec: SceneSpec, shapes: SceneShapes, cx: float, cy: float, r: float) -> bool:
    """Pixel-level check: the disc is non-empty and its 4-neighborhood
    dilation stays strictly inside the solder ellipse (and the image)."""
    h, w = spec.height, spec.width
    yy, xx = np.ogrid[:h, :w]
    disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if not disc.any():
        return False
    ys, xs = np.nonzero(disc)
    if ys.min() < 1 or xs.min() < 1 or ys.max() >= h - 1 or xs.max() >= w - 1:
        return False
    ellipse = ((xx - shapes.solder_cx) / shapes.solder_rx) ** 2 + (
        (yy - shapes.solder_cy) / shapes.solder_ry
    ) ** 2 <= 1.0
    dilated = disc.copy()
    dilated[1:, :] |= disc[:-1, :]
    dilated[:-1, :] |= disc[1:, :]
    dilated[:, 1:] |= disc[:, :-1]
    dilated[:, :-1] |= disc[:, 1:]
    return bool((ellipse | ~dilated).all())


def _place_void(spec: SceneSpec, shapes: SceneShapes, g: Rng) -> SceneShapes:
    for _ in range(_VOID_PLACEMENT_ATTEMPTS):
        r = g.uniform(spec.void_radius_min, spec.void_radius_max)
        cx = g.uniform(shapes.solder_cx - shapes.solder_rx, shapes.solder_cx + shapes.solder_rx)
        cy = g.uniform(shapes.solder_cy - shapes.solder_ry, shapes.solder_cy + shapes.solder_ry)
        if _void_fits(spec, shapes, cx, cy, r):
            return replace(shapes, void_cx=cx, void_cy=cy, void_r=r)
    raise GenerationError(
        f"could not place a void of radius >= {spec.void_radius_min} strictly "
        f"inside the solder at {spec.height}x{spec.width}; enlarge the image "
        "or shrink void_radius_min"
    )


def rasterize_mask(spec: SceneSpec, shapes: SceneShapes) -> np.ndarray:
    """Class-index mask for one scene (frontmost shape wins)."""
    h, w = spec.height, spec.width
    names = spec.class_names()
    yy, xx = np.ogrid[:h, :w]
    mask = np.zeros((h, w), dtype=np.uint8)

    pillar = (xx >= shapes.pillar_x0) & (xx <= shapes.pillar_x1) & (yy <= shapes.pillar_y1)
    mask[pillar] = names.index("pillar")
    if shapes.pad_y0 is not None:
        pad = (
            (xx >= shapes.pad_x0)
            & (xx <= shapes.pad_x1)
            & (yy >= shapes.pad_y0)
            & (yy <= shapes.pad_y1)
        )
        mask[pad] = names.index("pad")
    solder = ((xx - shapes.solder_cx) / shapes.solder_rx) ** 2 + (
        (yy - shapes.solder_cy) / shapes.solder_ry
    ) ** 2 <= 1.0
    mask[solder] = names.index("solder")
    if shapes.void_r is not None:
        void = (xx - shapes.void_cx) ** 2 + (yy - shapes.void_cy) ** 2 <= shapes.void_r ** 2
        mask[void] = names.index("void")
    return mask


def generate_dataset(
    spec: SceneSpec, n_images: int, seed: int, train_fraction: float = 0.8
) -> Dataset:
    """Deterministic dataset for (spec, n_images, seed).

    Draw order per image: pillar width, pillar center, foot height, solder
    radii, (memory: pad size), void coin flip, void placement attempts,
    noise field. The train/test split is drawn last from its own stream.
    """
    if n_images < 10:
        raise ValueError("n_images must be at least 10")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if spec.height < 16 or spec.width < 16:
        raise GenerationError("images smaller than 16x16 cannot hold the scene shapes")
    means = np.array(spec.class_means(), dtype=np.float64)

    g = Rng(seed).derive("scene")
    images = np.empty((n_images, spec.height, spec.width, 1), dtype=np.float32)
    masks = np.empty((n_images, spec.height, spec.width), dtype=np.uint8)
    all_shapes: list[SceneShapes] = []
    for i in range(n_images):
        shapes = _sample_shapes(spec, g)
        mask = rasterize_mask(spec, shapes)
        noise = g.normals((spec.height, spec.width), dtype=np.float64) * spec.noise_sigma
        img = np.clip(means[mask] + noise, 0.0, 1.0)
        images[i, :, :, 0] = img.astype(np.float32)
        masks[i] = mask
        all_shapes.append(shapes)

    split_rng = Rng(seed).derive("split")
    order = list(range(n_images))
    split_rng.shuffle(order)
    n_train = int(round(train_fraction * n_images))
    train_indices = sorted(order[:n_train])
    test_indices = sorted(order[n_train:])

    ds = Dataset(
        images=images,
        masks=masks,
        train_indices=train_indices,
        test_indices=test_indices,
        class_names=list(spec.class_names()),
        spec=spec,
        seed=seed,
        shapes=all_shapes,
    )
    void_freq = float((masks == spec.class_names().index("void")).mean())
    if void_freq >= 0.05:
        raise GenerationError(
            f"void class covers {void_freq:.3f} of all pixels; the rare-class "
            "premise requires < 0.05"
        )
    return ds


def class_frequencies(dataset: Dataset, indices: list[int]) -> np.ndarray:
    """Per-class pixel frequency over the given images; sums to 1."""
    if len(indices) == 0:
        raise ValueError("class_frequencies needs a non-empty index list")
    sel = dataset.masks[np.asarray(indices, dtype=np.intp)]
    counts = np.bincount(sel.ravel(), minlength=dataset.n_classes).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# On-disk format: meta.json + images.bin (LE float32) + masks.bin (uint8),
# both image-major row-major.

_FORMAT_VERSION = 1


def save_dataset(dataset: Dataset, directory) -> None:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w, _ = dataset.images.shape
    meta = {
        "version": _FORMAT_VERSION,
        "height": h,
        "width": w,
        "n_images": n,
        "class_names": list(dataset.class_names),
        "train_indices": list(map(int, dataset.train_indices)),
        "test_indices": list(map(int, dataset.test_indices)),
        "generator_spec": _spec_to_json(dataset.spec),
        "seed": dataset.seed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    dataset.images.astype("<f4").tofile(directory / "images.bin")
    dataset.masks.astype(np.uint8).tofile(directory / "masks.bin")


def load_dataset(directory) -> Dataset:
    from pathlib import Path

    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"{meta_path} is missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"meta.json is not valid JSON: {e}") from e
    if meta.get("version") != _FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {meta.get('version')!r}")
    for key in ("height", "width", "n_images", "class_names", "train_indices", "test_indices"):
        if key not in meta:
            raise DatasetFormatError(f"meta.json is missing key {key!r}")
    n, h, w = meta["n_images"], meta["height"], meta["width"]
    class_names = list(meta["class_names"])

    img_bytes = (directory / "images.bin").read_bytes()
    expected = n * h * w * 4
    if len(img_bytes) != expected:
        raise DatasetFormatError(
            f"images.bin: expected {expected} bytes, got {len(img_bytes)} "
            f"(payload ends at byte {len(img_bytes)})"
        )
    images = np.frombuffer(img_bytes, dtype="<f4").reshape(n, h, w, 1).astype(np.float32)

    mask_bytes = (directory / "masks.bin").read_bytes()
    if len(mask_bytes) != n * h * w:
        raise DatasetFormatError(
            f"masks.bin: expected {n * h * w} bytes, got {len(mask_bytes)} "
            f"(payload ends at byte {len(mask_bytes)})"
        )
    masks = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(n, h, w).copy()
    if masks.max(initial=0) >= len(class_names):
        raise DatasetFormatError(
            f"masks.bin contains class {int(masks.max())} but meta.json lists "
            f"only {len(class_names)} classes"
        )
    train = list(map(int, meta["train_indices"]))
    test = list(map(int, meta["test_indices"]))
    if sorted(train + test) != list(range(n)):
        raise DatasetFormatError("train/test indices do not partition 0..n_images-1")

    spec = _spec_from_json(meta.get("generator_spec"))
    return Dataset(
        images=images,
        masks=masks,
        train_indices=train,
        test_indices=test,
        class_names=class_names,
        spec=spec,
        seed=meta.get("seed"),
    )


def _spec_to_json(spec: SceneSpec | None):
    if spec is None:
        return None
    return {
        "height": spec.height,
        "width": spec.width,
        "variant": spec.variant,
        "void_probability": spec.void_probability,
        "void_radius_min": spec.void_radius_min,
        "void_radius_max": spec.void_radius_max,
        "noise_sigma": spec.noise_sigma,
        "intensity_means": list(spec.intensity_means) if spec.intensity_means else None,
    }


def _spec_from_json(blob) -> SceneSpec | None:
    if blob is None:
        return None
    means = blob.get("intensity_means")
    return SceneSpec(
        height=blob["height"],
        width=blob["width"],
        variant=blob["variant"],
        void_probability=blob["void_probability"],
        void_radius_min=blob["void_radius_min"],
        void_radius_max=blob["void_radius_max"],
        noise_sigma=blob["noise_sigma"],
        intensity_means=tuple(means) if means else None,
    )
