import numpy as np
import pytest

from alseg.rng import Rng, fnv1a64

MASK = (1 << 64) - 1


def reference_stream(seed, n):
    """Independent straight-from-the-definition xoshiro256** with
    splitmix64 seeding, written without reuse of the library code."""
    state = seed & MASK
    s = []
    for _ in range(4):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))
    out = []
    for _ in range(n):
        x = (s[1] * 5) & MASK
        x = ((x << 7) | (x >> 57)) & MASK
        out.append((x * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = ((s[3] << 45) | (s[3] >> 19)) & MASK
    return out


def test_matches_reference_recurrence():
    rng = Rng(12345)
    assert [rng.next_u64() for _ in range(64)] == reference_stream(12345, 64)


def test_equal_seeds_equal_streams():
    a, b = Rng(99), Rng(99)
    assert [a.next_u64() for _ in range(10_000)] == [b.next_u64() for _ in range(10_000)]


def test_different_seeds_differ():
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_derive_is_seed_xor_tag():
    rng = Rng(77)
    tag = fnv1a64("augment")
    direct = Rng(77 ^ tag)
    derived = rng.derive("augment")
    assert [derived.next_u64() for _ in range(5)] == [direct.next_u64() for _ in range(5)]


def test_derive_does_not_disturb_parent():
    a, b = Rng(5), Rng(5)
    a.derive("x")
    assert a.next_u64() == b.next_u64()


def test_random_in_unit_interval():
    rng = Rng(3)
    vals = [rng.random() for _ in range(2000)]
    assert all(0.0 <= v < 1.0 for v in vals)
    assert 0.45 < np.mean(vals) < 0.55


def test_randint_bounds_and_uniformity():
    rng = Rng(8)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[rng.randint(4)] += 1
    freqs = counts / counts.sum()
    assert np.all(np.abs(freqs - 0.25) < 0.02)


def test_randint_rejects_nonpositive():
    with pytest.raises(ValueError):
        Rng(0).randint(0)


def test_normals_moments():
    vals = Rng(21).normals(20_000, dtype=np.float64)
    assert abs(vals.mean()) < 0.03
    assert abs(vals.std() - 1.0) < 0.03


def test_shuffle_is_permutation():
    rng = Rng(4)
    items = list(range(50))
    shuffled = list(items)
    rng.shuffle(shuffled)
    assert sorted(shuffled) == items
    assert shuffled != items  # astronomically unlikely to be identity


def test_sample_without_replacement():
    rng = Rng(6)
    picks = rng.sample(list(range(10)), 4)
    assert len(picks) == len(set(picks)) == 4
    with pytest.raises(ValueError):
        rng.sample([1, 2], 3)


def test_sample_single_draw_uniform():
    counts = np.zeros(4)
    rng = Rng(13)
    for _ in range(10_000):
        counts[rng.sample([0, 1, 2, 3], 1)[0]] += 1
    assert np.all(np.abs(counts / 10_000 - 0.25) < 0.02)
