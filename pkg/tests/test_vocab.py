import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detrack.nn import Param
from detrack.vocab import (CoordLogits, Vocabulary, decode_box, dequantize,
                           expected_box, quantize)

from conftest import finite_diff, rel_err


class TestQuantize:
    def test_boundaries(self):
        assert quantize(0.0, 800) == 0
        assert quantize(1.0, 800) == 799

    def test_round_half_up(self):
        # 0.5 * 799 = 399.5 rounds up
        assert quantize(0.5, 800) == 400

    def test_clamps_out_of_range(self):
        assert quantize(-3.7, 100) == 0
        assert quantize(2.2, 100) == 99

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(-0.5, 1.5), y=st.floats(-0.5, 1.5), bins=st.integers(2, 1200))
    def test_monotone(self, x, y, bins):
        lo, hi = min(x, y), max(x, y)
        assert quantize(lo, bins) <= quantize(hi, bins)


class TestDequantize:
    def test_endpoints(self):
        assert dequantize(0, 800) == 0.0
        assert dequantize(799, 800) == 1.0

    def test_out_of_range_token(self):
        with pytest.raises(ValueError):
            dequantize(800, 800)
        with pytest.raises(ValueError):
            dequantize(-1, 800)

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(-0.2, 1.2), bins=st.integers(2, 900))
    def test_round_trip_error_bound(self, x, bins):
        clamped = min(max(x, 0.0), 1.0)
        assert abs(dequantize(quantize(x, bins), bins) - clamped) <= 0.5 / (bins - 1) + 1e-12


class TestEmbed:
    def test_one_hot_table(self, rng):
        vocab = Vocabulary(6, 6, rng)
        vocab.table.value[...] = np.eye(6)
        emb = vocab.embed(np.array([0, 2, 5, 5]))
        assert np.array_equal(emb, np.eye(6)[[0, 2, 5, 5]])
        assert np.array_equal(emb[2], emb[3])

    def test_invalid_token(self, rng):
        vocab = Vocabulary(6, 4, rng)
        with pytest.raises(ValueError):
            vocab.embed(np.array([0, 1, 2, 6]))

    def test_gradient_matches_finite_differences(self, rng):
        vocab = Vocabulary(8, 5, rng)
        tokens = np.array([[1, 3, 3, 7], [0, 1, 2, 3]])
        coeff = rng.random((2, 4, 5))

        def loss():
            return float(np.sum(vocab.embed(tokens) * coeff) ** 2)

        vocab.table.grad[...] = 0.0
        emb = vocab.embed(tokens)
        scalar = float(np.sum(emb * coeff))
        vocab.embed_backward(tokens, 2.0 * scalar * coeff)
        fd = finite_diff(loss, vocab.table.value,
                         [(1, 0), (3, 2), (7, 4), (0, 0), (2, 3)])
        for idx, val in fd.items():
            assert rel_err(val, vocab.table.grad[idx]) < 1e-4


class TestReadout:
    def test_self_similarity_argmax(self, rng):
        vocab = Vocabulary(10, 16, rng)
        latent = 50.0 * vocab.table.value[[3, 1, 4, 9]]
        logits = vocab.readout(latent)
        assert list(np.argmax(logits, axis=-1)) == [3, 1, 4, 9]

    def test_zero_latent_uniform(self, rng):
        vocab = Vocabulary(10, 16, rng)
        cl = CoordLogits.from_logits(vocab.readout(np.zeros((4, 16))))
        assert np.allclose(cl.probs, 0.1, atol=1e-12)

    def test_scaling_keeps_argmax(self, rng):
        vocab = Vocabulary(20, 8, rng)
        latent = rng.standard_normal((4, 8))
        a = np.argmax(vocab.readout(latent), axis=-1)
        b = np.argmax(vocab.readout(3.7 * latent), axis=-1)
        assert np.array_equal(a, b)

    def test_probs_rows_sum_to_one(self, rng):
        vocab = Vocabulary(33, 8, rng)
        cl = CoordLogits.from_logits(vocab.readout(rng.standard_normal((4, 8))))
        assert np.allclose(cl.probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_untied_readout_is_separate(self, rng):
        vocab = Vocabulary(10, 8, rng, tied=False)
        assert vocab.readout_table is not None
        latent = rng.standard_normal((4, 8))
        assert not np.allclose(latent @ vocab.table.value.T, vocab.readout(latent))

    def test_round_trip_classification(self, rng):
        # near-orthogonal random table recovers tokens through embed + readout
        vocab = Vocabulary(50, 256, rng)
        tokens = rng.integers(0, 50, 4)
        logits = vocab.readout(vocab.embed(tokens))
        assert np.array_equal(np.argmax(logits, axis=-1), tokens)


class TestDecodeBox:
    def test_one_hot_corners(self, rng):
        bins = 12
        logits = np.full((4, bins), -1e9)
        for row, tok in enumerate((0, 0, bins - 1, bins - 1)):
            logits[row, tok] = 0.0
        box, conf = decode_box(logits, bins)
        assert (box.x1, box.y1, box.x2, box.y2) == (0.0, 0.0, 1.0, 1.0)
        assert conf == pytest.approx(1.0, abs=1e-9)

    def test_uniform_confidence(self):
        bins = 25
        box, conf = decode_box(np.zeros((4, bins)), bins)
        assert conf == pytest.approx(1.0 / bins, abs=1e-12)

    def test_matches_exhaustive_scan(self, rng):
        bins = 40
        for _ in range(100):
            logits = rng.standard_normal((4, bins))
            box, conf = decode_box(logits, bins)
            cl = CoordLogits.from_logits(logits)
            coords = []
            for row in range(4):
                best, best_p = 0, -1.0
                for b in range(bins):
                    if cl.probs[row, b] > best_p:
                        best, best_p = b, cl.probs[row, b]
                coords.append(best / (bins - 1))
            expect = [min(coords[0], coords[2]), min(coords[1], coords[3]),
                      max(coords[0], coords[2]), max(coords[1], coords[3])]
            assert np.allclose(box.as_array(), expect, atol=1e-12)

    def test_tie_breaks_to_lowest_index(self):
        bins = 6
        logits = np.zeros((4, bins))  # all equal: argmax must pick index 0
        box, _ = decode_box(logits, bins)
        assert box.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]


class TestExpectedBox:
    def test_uniform_is_half(self):
        bins = 11
        probs = np.full((4, bins), 1.0 / bins)
        assert np.allclose(expected_box(probs, bins), 0.5, atol=1e-12)

    def test_one_hot_matches_dequantize(self):
        bins = 9
        probs = np.zeros((4, bins))
        probs[np.arange(4), [0, 3, 5, 8]] = 1.0
        assert np.allclose(expected_box(probs, bins),
                           [dequantize(t, bins) for t in (0, 3, 5, 8)], atol=1e-12)
