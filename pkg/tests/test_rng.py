"""Seeded stream determinism and conformance to the reference algorithms."""

import numpy as np
import pytest

from mpnode.rng import Rng, derive


def reference_splitmix64_stream(seed, count):
    """Independent transcription of the splitmix64 reference in uint64 numpy."""
    mask = np.uint64(0xFFFFFFFFFFFFFFFF)
    x = np.uint64(seed)
    out = []
    with np.errstate(over="ignore"):
        for _ in range(count):
            x = (x + np.uint64(0x9E3779B97F4A7C15)) & mask
            z = x
            z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & mask
            z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & mask
            out.append(int(z ^ (z >> np.uint64(31))))
    return out


def reference_xoshiro(seed, count):
    """Independent transcription of xoshiro256++ seeded from splitmix64."""
    mask = (1 << 64) - 1
    s = reference_splitmix64_stream(seed, 4)
    out = []
    for _ in range(count):
        result = ((((s[0] + s[3]) & mask) << 23 | ((s[0] + s[3]) & mask) >> 41) + s[0]) & mask
        t = (s[1] << 17) & mask
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = ((s[3] << 45) | (s[3] >> 19)) & mask
        out.append(result)
    return out


class TestStreams:
    @pytest.mark.parametrize("seed", [0, 1, 1234567, 2**64 - 1])
    def test_matches_reference_algorithm(self, seed):
        rng = Rng(seed)
        ours = [rng.next_u64() for _ in range(20)]
        assert ours == reference_xoshiro(seed, 20)

    def test_same_seed_same_stream(self):
        a, b = Rng(99), Rng(99)
        assert [a.next_u64() for _ in range(50)] == [b.next_u64() for _ in range(50)]

    def test_different_seeds_differ(self):
        assert Rng(1).next_u64() != Rng(2).next_u64()

    def test_uniform_in_unit_interval(self):
        rng = Rng(7)
        draws = [rng.uniform() for _ in range(2000)]
        assert all(0.0 <= u < 1.0 for u in draws)
        assert abs(np.mean(draws) - 0.5) < 0.05

    def test_uniforms_array_row_major_order(self):
        a = Rng(11).uniforms((2, 3))
        b = Rng(11)
        expect = np.array([b.uniform() for _ in range(6)]).reshape(2, 3)
        assert np.array_equal(a, expect)

    def test_uniform_range(self):
        rng = Rng(13)
        vals = [rng.uniform_range(-2.0, 5.0) for _ in range(500)]
        assert min(vals) >= -2.0 and max(vals) < 5.0


class TestIntsAndShuffle:
    def test_below_bounds_and_coverage(self):
        rng = Rng(17)
        draws = [rng.below(7) for _ in range(700)]
        assert set(draws) == set(range(7))

    def test_below_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Rng(0).below(0)

    def test_shuffle_is_permutation(self):
        rng = Rng(19)
        items = list(range(30))
        rng.shuffle(items)
        assert sorted(items) == list(range(30))
        assert items != list(range(30))

    def test_permutation_deterministic(self):
        assert Rng(23).permutation(10) == Rng(23).permutation(10)


class TestDerive:
    def test_deterministic(self):
        assert derive(5, 1, 2) == derive(5, 1, 2)

    def test_index_sensitivity(self):
        seen = {derive(5, i) for i in range(1000)}
        assert len(seen) == 1000

    def test_argument_order_matters(self):
        assert derive(5, 1, 2) != derive(5, 2, 1)

    def test_derived_streams_uncorrelated(self):
        a = Rng(derive(42, 0))
        b = Rng(derive(42, 1))
        xs = np.array([a.uniform() for _ in range(400)])
        ys = np.array([b.uniform() for _ in range(400)])
        assert abs(np.corrcoef(xs, ys)[0, 1]) < 0.15
