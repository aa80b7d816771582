import itertools
import math

import numpy as np
import pytest
from scipy.stats import norm

from sparsecl.data import (
    Dictionary,
    LatentConfig,
    NoiseConfig,
    build_dictionary,
    infinity_norm_limit,
    random_mask,
    read_dataset_jsonl,
    read_dictionary_csv,
    sample_input,
    sample_inputs,
    sample_latent,
    sample_negatives,
    write_dataset_jsonl,
    write_dictionary_csv,
)
from sparsecl.errors import DictionaryConstructionError, DimensionError
from sparsecl.rng import SeededRng

TINY = NoiseConfig(1e-300)


def all_masks(n):
    return [np.array(bits, dtype=bool) for bits in itertools.product([False, True], repeat=n)]


class TestDictionary:
    def test_one_by_one(self, rng):
        d = build_dictionary(1, 1, 4.0, rng)
        assert abs(d.M[0, 0]) == 1.0

    def test_orthonormal(self, rng):
        d = build_dictionary(8, 64, 4.0, rng)
        assert d.orthonormality_residual() <= 1e-10

    def test_acceptance_rate_d1_256(self):
        limit = infinity_norm_limit(256, 4.0)
        assert limit == pytest.approx(4 * math.sqrt(math.log(256) / 256))
        first_try = [build_dictionary(8, 256, 4.0, SeededRng(s, 0)).retries == 0 for s in range(100)]
        assert np.mean(first_try) >= 0.9

    def test_bound_holds(self, desk_dictionary):
        assert desk_dictionary.infinity_bound <= infinity_norm_limit(256, 4.0)

    def test_too_tight_bound(self, rng):
        with pytest.raises(DictionaryConstructionError):
            build_dictionary(8, 64, 0.01, rng, max_retries=5)

    def test_bad_dims(self, rng):
        with pytest.raises(DimensionError):
            build_dictionary(9, 8, 4.0, rng)

    def test_immutable(self, desk_dictionary):
        with pytest.raises(ValueError):
            desk_dictionary.M[0, 0] = 1.0

    def test_deterministic(self):
        a = build_dictionary(4, 16, 4.0, SeededRng(3, 0))
        b = build_dictionary(4, 16, 4.0, SeededRng(3, 0))
        assert np.array_equal(a.M, b.M)

    def test_dense_part(self, desk_dictionary):
        v = SeededRng(0, 0).normal((256,))
        dense = desk_dictionary.dense_part(v)
        assert np.abs(desk_dictionary.sparse_coords(dense)).max() <= 1e-12


class TestLatent:
    def test_zero_probability(self, rng):
        assert not sample_latent(LatentConfig(0.0), 10, rng).any()

    def test_full_probability(self, rng):
        z = sample_latent(LatentConfig(1.0), 1000, rng)
        assert set(np.unique(z)) <= {-1.0, 1.0}

    def test_defaults(self):
        assert LatentConfig.default(32).p_active == pytest.approx(2 * math.log(math.log(32)) / 32)
        assert NoiseConfig.default(32).sigma_xi_sq == pytest.approx(math.sqrt(math.log(32)) / 32)

    def test_frequency_and_symmetry(self):
        cfg = LatentConfig.default(32)
        z = sample_latent(cfg, 32, SeededRng(1, 2), n=100_000 // 32 + 1)
        n = z.size
        p = cfg.p_active
        band = 3 * math.sqrt(p * (1 - p) / n)
        assert abs(np.mean(z != 0) - p) <= band
        q = p / 2
        assert abs(np.mean(z == 1) - q) <= 3 * math.sqrt(q * (1 - q) / n)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            LatentConfig(1.5)


class TestSampleInput:
    def test_zero_latent_no_noise(self, desk_dictionary, rng):
        s = sample_input(desk_dictionary, LatentConfig(0.1), TINY, rng, z=np.zeros(32))
        assert np.abs(s.x).max() <= 1e-140

    def test_forced_atom(self, desk_dictionary, rng):
        z = np.zeros(32)
        z[5] = 1.0
        s = sample_input(desk_dictionary, LatentConfig(0.1), TINY, rng, z=z)
        np.testing.assert_allclose(s.x, desk_dictionary.M[:, 5], atol=1e-14)
        assert desk_dictionary.M[:, 5] @ s.x == pytest.approx(1.0, abs=1e-12)

    def test_reconstruction(self, desk_dictionary, desk_configs, rng):
        s = sample_inputs(desk_dictionary, *desk_configs, 50, rng)
        assert np.abs(s.x - (s.z @ desk_dictionary.M.T + s.xi)).max() <= 1e-12

    def test_noise_energy(self, desk_dictionary, desk_configs):
        # E|xi|^2 = d1 sigma^2 = 256 * sqrt(ln 32) / 32
        s = sample_inputs(desk_dictionary, *desk_configs, 10_000, SeededRng(5, 2))
        expect = 256 * math.sqrt(math.log(32)) / 32
        assert expect == pytest.approx(14.893, abs=1e-3)
        assert np.mean(np.sum(s.xi**2, axis=1)) == pytest.approx(expect, rel=0.02)

    def test_forced_latent_shape(self, desk_dictionary, rng):
        with pytest.raises(DimensionError):
            sample_input(desk_dictionary, LatentConfig(0.1), TINY, rng, z=np.zeros(3))

    def test_signal_coordinate_exact(self, desk_dictionary, desk_configs, rng):
        s = sample_inputs(desk_dictionary, *desk_configs, 200, rng)
        clean = s.z @ desk_dictionary.M.T
        np.testing.assert_allclose(clean @ desk_dictionary.M, s.z, atol=1e-12)

    def test_noise_projection_tail(self, desk_dictionary, desk_configs):
        # <xi, M_j> ~ N(0, sigma^2); tail mass above 0.5 is 2 Phi(-0.5 / sigma)
        s = sample_inputs(desk_dictionary, *desk_configs, 4000, SeededRng(6, 2))
        proj = s.xi @ desk_dictionary.M
        p = 2 * norm.sf(0.5 / desk_configs[1].sigma)
        n = proj.size
        assert abs(np.mean(np.abs(proj) > 0.5) - p) <= 4 * math.sqrt(p * (1 - p) / n)

    @pytest.mark.xfail(strict=True, reason="tail mass at the desk defaults is about 0.038, not <= 1e-3 (see ledger)")
    def test_noise_projection_claimed_bound(self, desk_dictionary, desk_configs):
        s = sample_inputs(desk_dictionary, *desk_configs, 4000, SeededRng(6, 2))
        assert np.mean(np.abs(s.xi @ desk_dictionary.M) > 0.5) <= 1e-3


class TestRandomMask:
    def test_zero_input(self, rng):
        p = random_mask(np.zeros(6), rng)
        assert not p.x_plus.any() and not p.x_plusplus.any()

    def test_forced_all_ones(self, rng):
        x = SeededRng(0, 0).normal((6,))
        p = random_mask(x, rng, mask=np.ones(6, dtype=bool))
        assert np.array_equal(p.x_plus, 2 * x) and not p.x_plusplus.any()

    def test_identities_exact(self, rng):
        x = SeededRng(1, 0).normal((20, 256))
        p = random_mask(x, rng)
        assert np.array_equal(p.x_plus + p.x_plusplus, 2 * x)
        assert np.all(np.einsum("ij,ij->i", p.x_plus, p.x_plusplus) == 0.0)

    def test_mask_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            random_mask(np.zeros(4), rng, mask=np.ones(3, dtype=bool))

    def test_mean_enumeration(self):
        x = SeededRng(2, 0).normal((10,))
        mean = np.mean([random_mask(x, None, mask=m).x_plus for m in all_masks(10)], axis=0)
        assert np.abs(mean - x).max() <= 1e-12

    def test_mean_monte_carlo(self):
        x = SeededRng(3, 0).normal((10,))
        p = random_mask(np.tile(x, (10_000, 1)), SeededRng(3, 3))
        se = np.abs(x) / math.sqrt(10_000)
        assert np.all(np.abs(p.x_plus.mean(axis=0) - x) <= 3 * se + 1e-15)

    def test_decoupling_enumeration(self):
        v = SeededRng(4, 0).normal((9,))
        xi = SeededRng(4, 1).normal((9,))
        vals = [(v @ random_mask(xi, None, mask=m).x_plus) * (v @ random_mask(xi, None, mask=m).x_plusplus) for m in all_masks(9)]
        expect = (v @ xi) ** 2 - np.sum(v**2 * xi**2)
        assert abs(np.mean(vals) - expect) <= 1e-12


class TestNegatives:
    def test_singleton(self, desk_dictionary, desk_configs, rng):
        assert len(sample_negatives(desk_dictionary, *desk_configs, 1, rng)) == 1

    def test_stream_advances(self, desk_dictionary, desk_configs, rng):
        a = sample_negatives(desk_dictionary, *desk_configs, 3, rng)
        b = sample_negatives(desk_dictionary, *desk_configs, 3, rng)
        assert not np.array_equal(a.x, b.x)

    def test_zero_count(self, desk_dictionary, desk_configs, rng):
        with pytest.raises(DimensionError):
            sample_negatives(desk_dictionary, *desk_configs, 0, rng)

    def test_noise_nearly_orthogonal(self, desk_dictionary, desk_configs):
        s = sample_negatives(desk_dictionary, *desk_configs, 64, SeededRng(8, 4))
        u = s.xi / np.linalg.norm(s.xi, axis=1, keepdims=True)
        g = u @ u.T
        off = np.abs(g[~np.eye(64, dtype=bool)])
        assert off.max() <= 5 / math.sqrt(256)


class TestDumps:
    def test_dictionary_csv_round_trip(self, tmp_path, desk_dictionary):
        path = tmp_path / "dict.csv"
        write_dictionary_csv(path, desk_dictionary)
        head = path.read_text().splitlines()[:2]
        assert head == ["d,32", "d1,256"]
        back = read_dictionary_csv(path)
        assert np.array_equal(back.M, desk_dictionary.M)

    def test_dictionary_csv_bad_body(self, tmp_path):
        path = tmp_path / "dict.csv"
        path.write_text("d,2\nd1,3\n1,0\n0,1\n")
        with pytest.raises(DimensionError):
            read_dictionary_csv(path)

    def test_dataset_jsonl(self, tmp_path, desk_dictionary, desk_configs, rng):
        s = sample_inputs(desk_dictionary, *desk_configs, 5, rng)
        path = tmp_path / "data.jsonl"
        write_dataset_jsonl(path, s)
        back = read_dataset_jsonl(path)
        assert np.array_equal(back.x, s.x) and np.array_equal(back.z, s.z)

    def test_sample_iteration(self, desk_dictionary, desk_configs, rng):
        s = sample_inputs(desk_dictionary, *desk_configs, 4, rng)
        rows = list(s)
        assert len(rows) == 4 and np.array_equal(rows[2].x, s.x[2])


def test_dictionary_rejects_wide():
    with pytest.raises(DimensionError):
        Dictionary(np.ones((2, 3)))
