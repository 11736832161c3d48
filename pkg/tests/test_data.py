import collections
import json

import numpy as np
import pytest

from alseg.data import (
    Dataset,
    DatasetFormatError,
    GenerationError,
    SceneSpec,
    class_frequencies,
    generate_dataset,
    load_dataset,
    rasterize_mask,
    save_dataset,
)


def test_determinism_byte_identical():
    a = generate_dataset(SceneSpec(), 30, seed=3)
    b = generate_dataset(SceneSpec(), 30, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert a.train_indices == b.train_indices and a.test_indices == b.test_indices


def test_different_seeds_differ():
    a = generate_dataset(SceneSpec(), 30, seed=3)
    b = generate_dataset(SceneSpec(), 30, seed=4)
    assert a.images.tobytes() != b.images.tobytes()


def test_no_void_when_probability_tiny():
    # void_probability must be > 0; use a probability so small no coin wins
    spec = SceneSpec(void_probability=1e-12)
    ds = generate_dataset(spec, 20, seed=2)
    assert not (ds.masks == ds.class_names.index("void")).any()


def test_void_rarity_construction_check():
    ds = generate_dataset(SceneSpec(), 300, seed=7)
    void_freq = (ds.masks == ds.class_names.index("void")).mean()
    assert 0.0 < void_freq < 0.05


def test_split_is_partition_and_ratio():
    ds = generate_dataset(SceneSpec(), 40, seed=9, train_fraction=0.75)
    assert sorted(ds.train_indices + ds.test_indices) == list(range(40))
    assert len(ds.train_indices) == 30


def test_mask_matches_reference_rasterizer(small_dataset):
    """Pixel-by-pixel loop re-deriving the layering rule."""
    spec = small_dataset.spec
    names = spec.class_names()
    for idx in range(0, small_dataset.n_images, 7):
        s = small_dataset.shapes[idx]
        expected = np.zeros((spec.height, spec.width), dtype=np.uint8)
        for y in range(spec.height):
            for x in range(spec.width):
                cls = 0
                if s.pillar_x0 <= x <= s.pillar_x1 and y <= s.pillar_y1:
                    cls = names.index("pillar")
                if s.pad_y0 is not None and (
                    s.pad_x0 <= x <= s.pad_x1 and s.pad_y0 <= y <= s.pad_y1
                ):
                    cls = names.index("pad")
                if ((x - s.solder_cx) / s.solder_rx) ** 2 + (
                    (y - s.solder_cy) / s.solder_ry
                ) ** 2 <= 1.0:
                    cls = names.index("solder")
                if s.void_r is not None and (x - s.void_cx) ** 2 + (
                    y - s.void_cy
                ) ** 2 <= s.void_r ** 2:
                    cls = names.index("void")
                expected[y, x] = cls
        assert np.array_equal(small_dataset.masks[idx], expected)
        assert np.array_equal(rasterize_mask(spec, s), expected)


def test_void_strictly_inside_solder(small_dataset):
    void_id = small_dataset.class_names.index("void")
    solder_id = small_dataset.class_names.index("solder")
    for mask in small_dataset.masks:
        ys, xs = np.nonzero(mask == void_id)
        for y, x in zip(ys, xs):
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                assert mask[y + dy, x + dx] in (void_id, solder_id)


def test_memory_variant_has_pad(memory_dataset):
    assert memory_dataset.class_names == ["background", "pillar", "solder", "void", "pad"]
    pad_id = memory_dataset.class_names.index("pad")
    assert (memory_dataset.masks == pad_id).any()


def test_images_in_unit_range(small_dataset):
    assert small_dataset.images.min() >= 0.0
    assert small_dataset.images.max() <= 1.0
    assert small_dataset.images.dtype == np.float32


def test_generation_error_for_tiny_images():
    with pytest.raises(GenerationError):
        generate_dataset(SceneSpec(height=14, width=14), 10, seed=1)


def test_intensity_means_must_be_separated():
    with pytest.raises(ValueError):
        SceneSpec(intensity_means=(0.1, 0.15, 0.8, 0.5))


def test_class_frequencies_single_class():
    images = np.zeros((2, 4, 4, 1), dtype=np.float32)
    masks = np.zeros((2, 4, 4), dtype=np.uint8)
    ds = Dataset(images, masks, [0], [1], ["background", "pillar"])
    assert np.allclose(class_frequencies(ds, [0]), [1.0, 0.0])


def test_class_frequencies_two_images():
    images = np.zeros((2, 4, 4, 1), dtype=np.float32)
    masks = np.stack([np.zeros((4, 4)), np.ones((4, 4))]).astype(np.uint8)
    ds = Dataset(images, masks, [0, 1], [], ["a", "b", "c"])
    assert np.allclose(class_frequencies(ds, [0, 1]), [0.5, 0.5, 0.0])


def test_class_frequencies_match_histogram_oracle(small_dataset):
    freq = class_frequencies(small_dataset, small_dataset.train_indices)
    counter = collections.Counter()
    for i in small_dataset.train_indices:
        counter.update(small_dataset.masks[i].ravel().tolist())
    total = sum(counter.values())
    expected = [counter.get(c, 0) / total for c in range(small_dataset.n_classes)]
    assert np.allclose(freq, expected, atol=1e-12)
    assert abs(freq.sum() - 1.0) < 1e-9


def test_class_frequencies_empty_indices(small_dataset):
    with pytest.raises(ValueError):
        class_frequencies(small_dataset, [])


def test_save_load_roundtrip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.images, small_dataset.images)
    assert np.array_equal(back.masks, small_dataset.masks)
    assert back.train_indices == small_dataset.train_indices
    assert back.test_indices == small_dataset.test_indices
    assert back.class_names == small_dataset.class_names
    assert back.seed == small_dataset.seed
    assert back.spec == small_dataset.spec


def test_save_is_byte_stable(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "a")
    save_dataset(small_dataset, tmp_path / "b")
    for name in ("meta.json", "images.bin", "masks.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_truncated_masks_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    path = tmp_path / "ds" / "masks.bin"
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError, match="byte"):
        load_dataset(tmp_path / "ds")


def test_truncated_images_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    path = tmp_path / "ds" / "images.bin"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match="images.bin"):
        load_dataset(tmp_path / "ds")


def test_mask_class_out_of_range_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    meta_path = tmp_path / "ds" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["class_names"] = meta["class_names"][:2]  # fewer classes than mask ids
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(DatasetFormatError, match="class"):
        load_dataset(tmp_path / "ds")


def test_bad_version_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    meta_path = tmp_path / "ds" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["version"] = 99
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(tmp_path / "ds")
