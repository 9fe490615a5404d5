import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from shiftlic import ops
from shiftlic.codec import (Bitstream, BitstreamError, _decode_values, _encode_values, compress,
                            decompress, pad_image)
from shiftlic.entropy import (FactorizedPrior, GaussianConditional, gaussian_likelihood, quantize,
                              quantize_pmf, rate_bits)
from shiftlic.gradcheck import param_grad_check
from shiftlic.model import Model, ModelConfig
from shiftlic.rangecoder import (TOTAL, RangeCoderError, RangeDecoder, RangeEncoder,
                                 TruncatedStreamError, rc_decode, rc_encode, validate_cdf)
from shiftlic.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def random_cdf(rng, max_symbols=300):
    n = int(rng.integers(2, max_symbols))
    # skewed masses so some symbols sit at the one-unit minimum
    pmf = rng.dirichlet(np.full(n, rng.choice([0.05, 1.0, 10.0])))
    return quantize_pmf(pmf)


def sample(rng, cdf, size):
    freq = np.diff(cdf)
    return rng.choice(len(freq), size=size, p=freq / TOTAL)


class TestQuantize:
    def test_round_examples(self):
        out = quantize(T([1.4, -1.5, 1.5, -0.4, 2.5]), "round").data
        assert out.tolist() == [1.0, -2.0, 2.0, 0.0, 3.0]

    def test_mean_offset(self):
        assert quantize(T([1.0]), "round", offset=T([0.4])).data[0] == pytest.approx(1.4)

    def test_noise_bound(self, rng):
        x = T(rng.standard_normal((4, 8, 8)) * 10)
        q = quantize(x, "noise", rng=rng).data
        assert np.all(np.abs(q - x.data) <= 0.5)
        assert np.std(q - x.data) > 0.2

    @given(st.integers(0, 2**31 - 1))
    def test_mean_centred_residual_is_integer(self, seed):
        rng = np.random.default_rng(seed)
        x, mu = T(rng.normal(0, 5, 50)), T(rng.normal(0, 5, 50))
        r = quantize(x, "round", offset=mu).data - mu.data
        np.testing.assert_allclose(r, np.round(r), atol=1e-9)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            quantize(T([0.0]), "floor")


class TestGaussianLikelihood:
    def test_at_mean_unit_scale(self):
        p = gaussian_likelihood(T([0.0]), T([0.0]), T([1.0])).data[0]
        assert p == pytest.approx(norm.cdf(0.5) - norm.cdf(-0.5), abs=1e-12)
        assert p == pytest.approx(0.382925, abs=1e-6)

    @given(st.floats(-20, 20), st.floats(0.11, 50), st.floats(-30, 30))
    def test_matches_normal_cdf(self, mu, sigma, y):
        y = float(np.round(y))
        p = gaussian_likelihood(T([y]), T([mu]), T([sigma])).data[0]
        ref = max(norm.cdf((y - mu + 0.5) / sigma) - norm.cdf((y - mu - 0.5) / sigma), 1e-9)
        assert p == pytest.approx(ref, rel=1e-7, abs=1e-12)

    def test_decreasing_in_sigma_at_mean(self):
        sig = np.geomspace(0.11, 256, 40)
        p = gaussian_likelihood(T(np.zeros(40)), T(np.zeros(40)), T(sig)).data
        assert np.all(np.diff(p) < 0)

    @given(st.floats(-10, 10), st.floats(0.11, 40))
    def test_sums_to_one(self, mu, sigma):
        ys = np.arange(-400, 401, dtype=np.float64)
        raw = norm.cdf((ys - mu + 0.5) / sigma) - norm.cdf((ys - mu - 0.5) / sigma)
        p = gaussian_likelihood(T(ys), T(np.full_like(ys, mu)), T(np.full_like(ys, sigma))).data
        # the floor only lifts symbols far in the tails
        assert abs(p.sum() - 1) < 1e-6 + (p - raw).sum()
        assert abs(raw.sum() - 1) < 1e-6

    def test_floor(self):
        p = gaussian_likelihood(T([100.0]), T([0.0]), T([0.11])).data[0]
        assert p == 1e-9


class TestRate:
    def test_half_probabilities(self):
        R = rate_bits([T(np.full(40, 0.5))], num_pixels=10).data
        assert float(R) == pytest.approx(4.0)

    def test_floor_caps_contribution(self):
        assert float(rate_bits([T([1e-9])], 1).data) == pytest.approx(-math.log2(1e-9))
        assert -math.log2(1e-9) == pytest.approx(29.897, abs=1e-3)

    @given(st.lists(st.floats(1e-9, 1.0), min_size=1, max_size=30))
    def test_non_negative(self, ps):
        assert float(rate_bits([T(ps)], 7).data) >= 0

    def test_multiple_tensors_add(self):
        R = rate_bits([T([0.5, 0.5]), T([0.25])], 1).data
        assert float(R) == pytest.approx(4.0)


class TestFactorizedPrior:
    @pytest.fixture
    def prior(self):
        p = FactorizedPrior(6, np.random.default_rng(0)).astype(np.float64)
        rng = np.random.default_rng(1)
        for m in p.matrices:
            m.data += rng.normal(0, 0.5, m.shape)
        for f in p.factors:
            f.data += rng.normal(0, 1.0, f.shape)
        return p

    def test_cdf_monotone(self, prior):
        v = np.linspace(-60, 60, 2001)
        logits = prior._logits_np(np.broadcast_to(v, (6, 1, v.size)).copy())[:, 0]
        assert np.all(np.diff(logits, axis=1) >= 0)

    def test_likelihood_sums_to_one(self, prior):
        ks = np.arange(-300, 301, dtype=np.float64)
        z = T(np.broadcast_to(ks, (1, 6, 1, ks.size)).copy())
        total = prior.likelihood(z).data.sum(axis=-1)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_coding_window_tail_mass(self, prior):
        offsets, cdfs = prior.coding_tables()
        for c, (lo, cdf) in enumerate(zip(offsets, cdfs)):
            validate_cdf(cdf)
            n_window = len(cdf) - 2
            edges = np.array([lo - 0.5, lo + n_window - 0.5])
            logits = prior._logits_np(np.broadcast_to(edges, (6, 1, 2)).copy())[c, 0]
            tail = 1 / (1 + np.exp(-logits[0])) + 1 / (1 + np.exp(logits[1]))
            assert tail <= 1e-9 * 1.01

    def test_gradients(self, prior):
        z = T(np.random.default_rng(2).normal(0, 2, (1, 6, 2, 2)).round())
        err = param_grad_check(lambda: ops.sum_(ops.log(prior.likelihood(z))), prior.parameters())
        assert err < 1e-4


class TestGaussianTables:
    def test_scale_table(self):
        g = GaussianConditional()
        assert len(g.scale_table) == 64
        assert g.scale_table[0] == pytest.approx(0.11) and g.scale_table[-1] == pytest.approx(256)
        np.testing.assert_allclose(np.diff(np.log(g.scale_table)), np.log(256 / 0.11) / 63)

    def test_cdf_invariants(self):
        g = GaussianConditional()
        for cdf, k in zip(g.cdfs, g.half_ranges):
            assert cdf[0] == 0 and cdf[-1] == TOTAL
            assert len(cdf) == 2 * k + 3
            assert min(np.diff(cdf)) >= 1

    def test_nearest_index(self):
        g = GaussianConditional()
        idx = g.index(g.scale_table * 1.01)
        assert idx.tolist() == list(range(64))


class TestRangeCoder:
    def test_round_trip_random(self, rng):
        cdfs = [random_cdf(rng) for _ in range(50)]
        choice = rng.integers(0, 50, 10_000)
        per = [cdfs[i] for i in choice]
        syms = [int(sample(rng, c, 1)[0]) for c in per]
        assert rc_decode(rc_encode(syms, per), per) == syms

    @settings(max_examples=60)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 60))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        per = [random_cdf(rng, 40) for _ in range(n)]
        syms = [int(sample(rng, c, 1)[0]) for c in per]
        assert rc_decode(rc_encode(syms, per), per) == syms

    def test_extreme_probabilities(self):
        cdf = [0, 1, TOTAL - 1, TOTAL]
        syms = [0, 2, 0, 0, 1, 2, 2, 0] * 50
        assert rc_decode(rc_encode(syms, [cdf] * len(syms)), [cdf] * len(syms)) == syms

    def test_uniform_bytes_length(self, rng):
        cdf = [i * 256 for i in range(257)]
        n = 5000
        data = rc_encode(rng.integers(0, 256, n).tolist(), [cdf] * n)
        assert n <= len(data) <= n + 16

    def test_length_tracks_information(self, rng):
        cdf = random_cdf(rng, 20)
        n = 20_000
        syms = sample(rng, cdf, n).tolist()
        freq = np.diff(cdf)
        bits = -np.log2(freq[syms] / TOTAL).sum()
        assert len(rc_encode(syms, [cdf] * n)) <= 1.01 * bits / 8 + 4

    def test_empty(self):
        assert rc_decode(rc_encode([], []), []) == []

    def test_out_of_support(self):
        with pytest.raises(RangeCoderError):
            rc_encode([3], [[0, TOTAL // 2, TOTAL]])

    def test_zero_width_symbol(self):
        with pytest.raises(RangeCoderError):
            rc_encode([1], [[0, TOTAL, TOTAL]])

    def test_truncated(self, rng):
        cdf = [i * 256 for i in range(257)]
        data = rc_encode(list(range(200)), [cdf] * 200)
        with pytest.raises(TruncatedStreamError):
            rc_decode(data[:-1], [cdf] * 200)

    def test_trailing_bytes(self):
        cdf = [0, TOTAL // 2, TOTAL]
        with pytest.raises(RangeCoderError):
            rc_decode(rc_encode([0, 1], [cdf] * 2) + b"\x00", [cdf] * 2)

    def test_validate_cdf(self):
        validate_cdf([0, 10, TOTAL])
        for bad in ([1, TOTAL], [0, 5], [0, 10, 5, TOTAL], [0]):
            with pytest.raises(RangeCoderError):
                validate_cdf(bad)

    def test_streaming_api_matches_batch(self):
        cdf = [0, 100, 40000, TOTAL]
        syms = [0, 1, 2, 2, 1]
        enc = RangeEncoder()
        for s in syms:
            enc.encode_symbol(s, cdf)
        data = enc.finish()
        assert data == rc_encode(syms, [cdf] * 5)
        dec = RangeDecoder(data)
        assert [dec.decode_symbol(cdf) for _ in syms] == syms and dec.exhausted


class TestEscape:
    def test_values_outside_window(self):
        g = GaussianConditional()
        cdf = g.cdfs[0]
        k = g.half_ranges[0]
        values = np.array([0, 1, -k, k, k + 1, -k - 1, 500, -3000, 32000])
        offsets = np.full(values.size, -k)
        enc = RangeEncoder()
        _encode_values(enc, values, offsets, [cdf] * values.size)
        dec = RangeDecoder(enc.finish())
        out = _decode_values(dec, offsets, [cdf] * values.size)
        assert out.tolist() == values.tolist()

    def test_beyond_escape_range(self):
        cdf = GaussianConditional().cdfs[0]
        with pytest.raises(ValueError):
            _encode_values(RangeEncoder(), np.array([40000]), np.array([0]), [cdf])


@pytest.fixture(scope="module")
def tiny_model():
    return Model(ModelConfig.tiny(), seed=0)


class TestImageCodec:
    def test_latent_round_trip_and_crop(self, tiny_model, rng):
        x = rng.uniform(0, 1, (3, 70, 100)).astype(np.float32)
        bs, enc = compress(x, tiny_model)
        x_hat, dec = decompress(bs.to_bytes(), tiny_model)
        np.testing.assert_array_equal(enc.z_hat, dec.z_hat)
        np.testing.assert_array_equal(enc.y_hat, dec.y_hat)
        assert x_hat.shape == (1, 3, 70, 100)
        assert x_hat.min() >= 0 and x_hat.max() <= 1

    def test_deterministic_bytes(self, tiny_model, rng):
        x = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
        assert compress(x, tiny_model)[0].to_bytes() == compress(x, tiny_model)[0].to_bytes()

    def test_bpp_definition(self, tiny_model, rng):
        bs = compress(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32), tiny_model)[0]
        assert bs.bpp() == 8 * len(bs.to_bytes()) / (64 * 64)

    def test_pad_replicates_edges(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        p = pad_image(x, 4)
        assert p.shape == (1, 1, 4, 4)
        assert p[0, 0, 3].tolist() == [3, 4, 5, 5]

    def test_config_mismatch(self, tiny_model, rng):
        bs = compress(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32), tiny_model)[0]
        with pytest.raises(BitstreamError, match="config"):
            decompress(bs, Model(ModelConfig.tiny("small")))


class TestBitstream:
    def make(self):
        return Bitstream(3, 2, 70, 100, b"\x01\x02", b"\x03\x04\x05")

    def test_layout(self):
        data = self.make().to_bytes()
        assert data[:4] == b"SLIC" and data[4] == 1 and data[5] == 3 and data[6] == 2
        assert data[7:9] == (70).to_bytes(2, "big") and data[9:11] == (100).to_bytes(2, "big")
        assert data[11:15] == (2).to_bytes(4, "big") and data[15:17] == b"\x01\x02"
        assert data[17:21] == (3).to_bytes(4, "big") and data[21:] == b"\x03\x04\x05"
        assert Bitstream.from_bytes(data) == self.make()
        assert len(self.make()) == len(data)

    @pytest.mark.parametrize("cut", range(1, 24))
    def test_every_truncation_rejected(self, cut):
        data = self.make().to_bytes()
        if cut < len(data):
            with pytest.raises(BitstreamError):
                Bitstream.from_bytes(data[:-cut])

    def test_bad_magic(self):
        with pytest.raises(BitstreamError, match="magic"):
            Bitstream.from_bytes(b"XXXX" + self.make().to_bytes()[4:])

    def test_unknown_version(self):
        data = bytearray(self.make().to_bytes())
        data[4] = 2
        with pytest.raises(BitstreamError, match="version"):
            Bitstream.from_bytes(bytes(data))

    def test_trailing(self):
        with pytest.raises(BitstreamError, match="trailing"):
            Bitstream.from_bytes(self.make().to_bytes() + b"\x00")
