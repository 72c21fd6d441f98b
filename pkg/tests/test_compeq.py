import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiebp.afe import AdcConfig, ImpairmentRanges, apply_afe_lane, draw_impairments
from tiebp.compeq import (
    CoefBank,
    LaneFrame,
    ce_filter,
    ce_filter_block,
    dumps_coefbank,
    enforce_constraint,
    init_coefbank,
    load_coefbank,
    loads_coefbank,
    save_coefbank,
    subtract_offset,
)
from tiebp.signal_core import ConfigurationError, ContractViolation, RngStream


def triple_loop(w, g, n0, hist):
    """x[n] = sum_l g[(n0+n) % M, l] * w[n - l], with ``hist`` before the frame."""
    M, L = g.shape
    ext = np.concatenate([hist, w])
    x = np.zeros(w.size)
    for n in range(w.size):
        for l in range(L):
            x[n] += g[(n0 + n) % M, l] * ext[len(hist) + n - l]
    return x


def random_bank(seed, M=4, L=5):
    rng = np.random.default_rng(seed)
    return CoefBank(rng.normal(size=(4, M, L)), rng.normal(size=(4, M)), False)


class TestInit:
    def test_delta_location(self):
        b = init_coefbank(16, 7)
        assert b.l_d == 4
        ref = np.zeros(7)
        ref[4] = 1
        for i in range(4):
            for m in range(16):
                np.testing.assert_array_equal(b.g[i, m], ref)
        assert not b.o_hat.any()
        assert b.slot_is_delta()

    def test_pure_delay(self):
        b = init_coefbank(8, 7)
        w = np.random.default_rng(1).normal(size=100)
        x = ce_filter(LaneFrame(w, 3), b, 2, history=np.zeros(6)).samples
        np.testing.assert_array_equal(x[4:], w[:-4])
        np.testing.assert_array_equal(x[:4], 0)

    @pytest.mark.parametrize("L", [4, 6, 1])
    def test_bad_length(self, L):
        with pytest.raises(ConfigurationError):
            init_coefbank(4, L)

    def test_bad_slot(self):
        with pytest.raises(ConfigurationError):
            init_coefbank(4, 3, slot=(0, 4))


class TestSubtractOffset:
    def test_zero_offsets(self):
        y = LaneFrame(np.arange(10.0), 5)
        np.testing.assert_array_equal(subtract_offset(y, init_coefbank(4, 3), 1).samples, y.samples)

    def test_constant_cancels(self):
        b = init_coefbank(4, 3)
        b.o_hat[2] = 0.7
        out = subtract_offset(LaneFrame(np.full(13, 0.7), 2), b, 2)
        np.testing.assert_array_equal(out.samples, 0)

    def test_ground_truth_roundtrip(self):
        imp = draw_impairments(ImpairmentRanges(offset=(-0.025, 0.025)), 8, RngStream(3))
        adc = AdcConfig(bits=8)
        y = apply_afe_lane(np.full(4000, 0.2), imp, 1, adc, osf=4, osf_T=8, symbol_rate=96e9).samples
        b = init_coefbank(8, 7)
        b.o_hat[:] = imp.offset
        w = subtract_offset(LaneFrame(y), b, 1).samples
        assert np.max(np.abs(w[16:] - 0.2)) <= adc.step


class TestCeFilter:
    def test_hand_example(self):
        b = init_coefbank(2, 3, constraint=False)
        b.g[0, 0] = [1, 0, 0]
        b.g[0, 1] = [0, 0, 1]
        x = ce_filter(LaneFrame([1, 2, 3, 4]), b, 0, history=[0, 0]).samples
        np.testing.assert_array_equal(x, [1, 0, 3, 2])

    @pytest.mark.parametrize("n0", [0, 3, 17])
    def test_triple_loop_oracle(self, n0):
        b = random_bank(2)
        rng = np.random.default_rng(n0)
        w, hist = rng.normal(size=64), rng.normal(size=4)
        x = ce_filter(LaneFrame(w, n0), b, 3, history=hist).samples
        np.testing.assert_allclose(x, triple_loop(w, b.g[3], n0, hist), atol=1e-13)

    def test_missing_history(self):
        with pytest.raises(ContractViolation):
            ce_filter(LaneFrame(np.zeros(8)), init_coefbank(4, 5), 0)
        with pytest.raises(ContractViolation):
            ce_filter(LaneFrame(np.zeros(8)), init_coefbank(4, 5), 0, history=np.zeros(3))

    def test_block_matches_per_lane(self):
        b = random_bank(4)
        ext = np.random.default_rng(5).normal(size=(4, 4 + 40))
        x = ce_filter_block(ext, b, 7)
        for i in range(4):
            np.testing.assert_allclose(x[i], triple_loop(ext[i, 4:], b.g[i], 7, ext[i, :4]), atol=1e-13)

    def test_polyphase_consistency(self):
        # a length-kM frame equals the interleave of each phase's own time-invariant filter output
        M, L = 3, 5
        b = random_bank(6, M, L)
        rng = np.random.default_rng(7)
        w, hist = rng.normal(size=M * 10), rng.normal(size=L - 1)
        x = ce_filter(LaneFrame(w, 0), b, 0, history=hist).samples
        ext = np.concatenate([hist, w])
        for m in range(M):
            full = np.convolve(ext, b.g[0, m])[L - 1 : L - 1 + w.size]
            np.testing.assert_allclose(x[m::M], full[m::M], atol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**32 - 1))
    def test_bilinear(self, a, c, seed):
        rng = np.random.default_rng(seed)
        b1, b2 = random_bank(seed % 1000), random_bank(seed % 1000 + 1)
        w1, w2, h = rng.normal(size=30), rng.normal(size=30), rng.normal(size=4)

        def f(bank, w):
            return ce_filter(LaneFrame(w, 1), bank, 0, history=h).samples

        # linear in w (zero history so the history term does not break superposition)
        z = np.zeros(4)
        lin = lambda bank, w: ce_filter(LaneFrame(w, 1), bank, 0, history=z).samples  # noqa: E731
        np.testing.assert_allclose(lin(b1, a * w1 + c * w2), a * lin(b1, w1) + c * lin(b1, w2), atol=1e-11)
        bs = CoefBank(a * b1.g + c * b2.g, b1.o_hat, False)
        np.testing.assert_allclose(f(bs, w1), a * f(b1, w1) + c * f(b2, w1), atol=1e-11)


class TestConstraint:
    def test_delta_unchanged(self):
        b = init_coefbank(4, 5)
        ref = b.g.copy()
        enforce_constraint(b)
        np.testing.assert_array_equal(b.g, ref)

    def test_restores_only_slot(self):
        b = init_coefbank(4, 5, slot=(2, 1))
        rng = np.random.default_rng(8)
        b.g += rng.normal(size=b.g.shape)
        before = b.g.copy()
        enforce_constraint(b)
        assert b.slot_is_delta()
        mask = np.ones(b.g.shape, bool)
        mask[2, 1] = False
        np.testing.assert_array_equal(b.g[mask], before[mask])

    def test_disabled(self):
        b = init_coefbank(4, 5, constraint=False)
        b.g[0, 0, 0] = 0.3
        enforce_constraint(b)
        assert b.g[0, 0, 0] == 0.3

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_invariant_under_updates(self, seed, steps):
        b = init_coefbank(4, 5)
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            b.g -= 0.1 * rng.normal(size=b.g.shape)
            enforce_constraint(b)
            assert b.slot_is_delta()


class TestSerialization:
    def test_roundtrip_exact(self, tmp_path):
        b = random_bank(9)
        b.constrained_slot = (1, 2)
        p = tmp_path / "bank.coef"
        save_coefbank(b, p)
        c = load_coefbank(p)
        np.testing.assert_array_equal(c.g, b.g)
        np.testing.assert_array_equal(c.o_hat, b.o_hat)
        assert c.constrained_slot == (1, 2) and c.constraint_enabled is False

    def test_row_format(self):
        text = dumps_coefbank(init_coefbank(2, 3))
        lines = text.splitlines()
        assert lines[0] == "# coefbank v1"
        assert lines[1] == "shape 2 3"
        assert "g 0 1 2 1.0" in lines and "o 3 1 0.0" in lines

    def test_incomplete(self):
        text = "\n".join(dumps_coefbank(init_coefbank(2, 3)).splitlines()[:-1])
        with pytest.raises(ConfigurationError):
            loads_coefbank(text)
