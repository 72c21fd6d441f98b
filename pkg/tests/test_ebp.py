import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    adjoint_pair,
    block_loss,
    central_difference,
    ebp_gradients,
    identity_reduction,
    random_bank,
    small_instance,
)
from tiebp.afe import MixedSignalTrims
from tiebp.compeq import ce_filter_block, init_coefbank
from tiebp.ebp import (
    ALPHA,
    AdaptSchedule,
    AdaptTraceWriter,
    backpropagate,
    ce_gradient,
    ce_gradient_block,
    ce_transpose,
    ce_update,
    decimation_gate,
    gain_update,
    gear_shift,
    halving_gears,
    offset_trim_update,
    offset_update,
    parity_energy,
    phase_update,
    remove_null_modes,
    trim_norm,
    upsample_error,
)
from tiebp.rxdsp import DspFilterBank
from tiebp.signal_core import ConfigurationError, ContractViolation
from tiebp.txchain import PAM4_LEVELS


class TestUpsample:
    def test_example(self):
        np.testing.assert_array_equal(upsample_error([3.0, -2.0]), [3.0, 0.0, -2.0, 0.0])

    def test_zero(self):
        assert not upsample_error(np.zeros((4, 5))).any()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=40))
    def test_energy(self, e):
        e = np.array(e)
        assert np.sum(upsample_error(e) ** 2) == pytest.approx(np.sum(e**2), abs=1e-12)


class TestBackpropagate:
    def test_zero(self):
        g = DspFilterBank(np.random.default_rng(0).normal(size=(4, 4, 3)))
        assert not backpropagate(np.zeros((4, 18)), g).any()

    def test_identity(self):
        e = np.random.default_rng(1).normal(size=(4, 20))
        np.testing.assert_array_equal(backpropagate(e, DspFilterBank.identity(3), 18), e[:, :18])

    def test_double_sum_oracle(self):
        rng = np.random.default_rng(2)
        gam = rng.normal(size=(4, 4, 3))
        e = rng.normal(size=(4, 16 + 2))
        got = backpropagate(e, DspFilterBank(gam), 16)
        ref = np.zeros((4, 16))
        for i in range(4):
            for n in range(16):
                for j in range(4):
                    for l in range(3):
                        ref[i, n] += gam[j, i, l] * e[j, n + l]
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_needs_lookahead(self):
        with pytest.raises(ContractViolation):
            backpropagate(np.zeros((4, 10)), DspFilterBank.identity(3), 9)

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_identity(self, seed):
        lhs, rhs = adjoint_pair(seed)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


class TestCeGradient:
    def test_zero_error(self):
        assert not ce_gradient(0.0, [1.0, 2.0, 3.0]).any()

    def test_unit(self):
        np.testing.assert_array_equal(ce_gradient(1.0, [1.0, 0.0, 0.0]), [ALPHA, 0.0, 0.0])

    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_difference(self, seed):
        inst = small_instance(seed)
        bank = random_bank(seed + 10, inst.M, inst.L_g)
        grad, _ = ebp_gradients(inst, bank)
        fd = central_difference(lambda g: block_loss(inst, g, bank.o_hat), bank.g)
        assert np.max(np.abs(fd - grad) / np.abs(grad)) < 1e-5

    def test_block_matches_per_sample(self):
        rng = np.random.default_rng(3)
        e_hat, w = rng.normal(size=(4, 24)), rng.normal(size=(4, 2 + 24))
        got = ce_gradient_block(e_hat, w, 5, 4, average=False)
        ref = np.zeros((4, 4, 3))
        for i in range(4):
            for n in range(24):
                ref[i, (5 + n) % 4] += ce_gradient(e_hat[i, n], w[i, n + 2 - np.arange(3)])
        np.testing.assert_allclose(got, ref, atol=1e-13)
        avg = ce_gradient_block(e_hat, w, 5, 4, average=True)
        np.testing.assert_allclose(avg, ref / 6, atol=1e-13)


class TestCeTranspose:
    def test_adjoint_of_ce(self):
        # <e_hat, CE(w)> = <CE^T(e_hat), w>
        rng = np.random.default_rng(4)
        bank = random_bank(5, 4, 5)
        N = 40
        w = rng.normal(size=(4, 4 + N))
        e_hat = rng.normal(size=(4, N))
        x = ce_filter_block(w, bank, 0)
        pad = np.zeros((4, 4))
        e_w = ce_transpose(np.concatenate([pad, e_hat, pad], axis=1), bank, -4, N + 4)
        assert np.sum(e_hat * x) == pytest.approx(np.sum(e_w * w), abs=1e-12)


class TestCeUpdate:
    def test_no_change(self):
        b = random_bank(0, 4, 3)
        g = b.g.copy()
        ce_update(b, np.zeros_like(g), 0.5)
        np.testing.assert_array_equal(b.g, g)
        ce_update(b, np.ones_like(g), 0.0)
        np.testing.assert_array_equal(b.g, g)

    def test_exact_step(self):
        b = random_bank(1, 4, 3)
        g = b.g.copy()
        grad = np.random.default_rng(2).normal(size=g.shape)
        ce_update(b, grad, 0.25)
        np.testing.assert_array_equal(b.g, g - 0.25 * grad)

    def test_constraint_kept(self):
        b = init_coefbank(4, 3, slot=(1, 2))
        ce_update(b, np.ones_like(b.g), 0.3)
        assert b.slot_is_delta()
        assert b.g[0, 0, 0] == -0.3

    def test_negative(self):
        with pytest.raises(ConfigurationError):
            ce_update(init_coefbank(4, 3), np.zeros((4, 4, 3)), -0.1)


class TestGammaIdentityReduction:
    def test_bit_identical_to_raw_error_lms(self):
        ebp_bank, lms_bank = identity_reduction(10 * 1024)
        np.testing.assert_array_equal(ebp_bank.g, lms_bank.g)
        assert not np.array_equal(ebp_bank.g, init_coefbank(ebp_bank.M, ebp_bank.L_g).g)

    def test_identity_backprop_is_exact_copy(self):
        e = upsample_error(np.random.default_rng(7).normal(size=(4, 5000)))
        np.testing.assert_array_equal(backpropagate(e, DspFilterBank.identity(1)), e)


class TestOffsetUpdate:
    def test_zero(self):
        b = random_bank(0, 4, 3)
        o = b.o_hat.copy()
        offset_update(b, np.zeros((4, 32)), 0, 0.3)
        np.testing.assert_array_equal(b.o_hat, o)

    def test_constant(self):
        b = init_coefbank(4, 3)
        e = np.zeros((4, 32))
        e[2, 1::4] = 0.5  # lane 2, phase 1: 8 samples
        offset_update(b, e, 0, 0.1, average=False)
        assert b.o_hat[2, 1] == pytest.approx(-0.1 * 0.5 * 8)
        b = init_coefbank(4, 3)
        offset_update(b, e, 0, 0.1, average=True)
        assert b.o_hat[2, 1] == pytest.approx(-0.05)
        assert np.count_nonzero(b.o_hat) == 1

    def test_recovers_dc_offsets(self):
        # identity Gamma, data-aided, offsets only.  M is odd so every phase reaches the even-index slicer.
        M, Lg, N = 5, 7, 1000
        rng = np.random.default_rng(8)
        o = rng.uniform(-0.025, 0.025, size=(4, M))
        bank = init_coefbank(M, Lg)
        ld = bank.l_d
        blocks = 60
        a = PAM4_LEVELS[rng.integers(0, 4, size=(4, blocks * N))]
        s = np.zeros((4, blocks * N))
        s[:, ::2] = a[:, : blocks * N // 2]
        n_all = np.arange(blocks * N)
        y = s + o[:, n_all % M] + rng.normal(0, 0.01, size=s.shape)
        yh = np.zeros((4, Lg - 1))
        for b in range(blocks):
            n0 = b * N
            n = n0 + np.arange(N)
            w = np.concatenate([yh, y[:, n0 : n0 + N]], axis=1) - bank.o_hat[:, np.arange(n0 - Lg + 1, n0 + N) % M]
            x = ce_filter_block(w, bank, n0)
            e = np.zeros((4, N))
            k = (n - ld) // 2
            sel = (n % 2 == 0) & (k >= 0)
            e[:, sel] = x[:, sel] - s[:, n[sel] - ld]
            e_hat = backpropagate(e, DspFilterBank.identity(1))
            e_w = ce_transpose(e_hat, bank, n0, N - Lg + 1)
            offset_update(bank, -e_w, n0, 0.5)
            yh = y[:, n0 + N - Lg + 1 : n0 + N]
        assert np.max(np.abs(bank.o_hat - o)) < 1e-3


class TestTrimUpdates:
    def test_zero_error_fixed_point(self):
        t = MixedSignalTrims.neutral(4, 2)
        t.gain += 0.01
        ref = t.copy()
        w = np.random.default_rng(0).normal(size=(4, 66))
        z = np.zeros((4, 64))
        en = parity_energy(DspFilterBank.identity(3))
        gain_update(t, z, w[:, 1:-1], 0, 0.5, norm=trim_norm(en, w[:, 1:-1], 0, 8), null_modes=True)
        phase_update(t, z, w, 0, 0.5, null_modes=True)
        offset_trim_update(t, z, 0, 0.5)
        for k in ("gain", "phase", "offset"):
            np.testing.assert_array_equal(getattr(t, k), getattr(ref, k))

    def test_gain_arithmetic(self):
        t = MixedSignalTrims.neutral(4)
        e, w = np.zeros((4, 1)), np.zeros((4, 1))
        e[0, 0], w[0, 0] = 0.5, 0.2
        gain_update(t, e, w, 0, 0.1)
        assert t.gain[0, 0] == pytest.approx(0.99)
        assert np.count_nonzero(t.gain - 1) == 1

    def test_phase_zero_slope(self):
        t = MixedSignalTrims.neutral(4)
        phase_update(t, np.ones((4, 16)), np.full((4, 18), 0.3), 0, 1.0)
        assert not t.phase.any()

    def test_phase_central_difference(self):
        t = MixedSignalTrims.neutral(2)
        w = np.arange(6.0)[None, :].repeat(4, 0)  # slope w[n+1] - w[n-1] = 2
        e = np.full((4, 4), 0.25)
        phase_update(t, e, w, 0, 0.1)
        np.testing.assert_allclose(t.phase, -0.1 * 0.25 * 2)

    def test_phase_needs_neighbors(self):
        with pytest.raises(ContractViolation):
            phase_update(MixedSignalTrims.neutral(4), np.zeros((4, 8)), np.zeros((4, 9)), 0, 0.1)

    def test_hierarchical_indexing(self):
        # phase trims follow n % M1, gain/offset trims n % (M1*M2)
        t = MixedSignalTrims.neutral(2, 2)
        e = np.zeros((4, 8))
        e[0, 3] = 1.0
        offset_trim_update(t, e, 0, 1.0, average=False)
        assert t.offset[0, 3] == -1.0 and np.count_nonzero(t.offset) == 1
        w = np.ones((4, 10))
        w[0, 6] = 2.0  # w_ext[n + 1] holds sample n, so the slope at n = 4 is w_ext[6] - w_ext[4] = 1
        e2 = np.zeros((4, 8))
        e2[0, 4] = 1.0
        phase_update(t, e2, w, 0, 1.0, average=False)
        assert t.phase[0, 0] == -1.0 and t.phase[0, 1] == 0.0

    def test_negative_steps(self):
        t = MixedSignalTrims.neutral(4)
        z = np.zeros((4, 8))
        with pytest.raises(ConfigurationError):
            gain_update(t, z, z, 0, -1.0)
        with pytest.raises(ConfigurationError):
            phase_update(t, z, np.zeros((4, 10)), 0, -1.0)
        with pytest.raises(ConfigurationError):
            offset_trim_update(t, z, 0, -1.0)


class TestNullModes:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 4, 8, 16]))
    def test_projection(self, seed, P):
        s = np.random.default_rng(seed).normal(size=(4, P))
        r = remove_null_modes(s)
        np.testing.assert_allclose(r.sum(axis=1), 0, atol=1e-12)
        if P % 2 == 0:
            np.testing.assert_allclose(r @ (-1.0) ** np.arange(P), 0, atol=1e-12)
        np.testing.assert_allclose(remove_null_modes(r), r, atol=1e-12)
        # orthogonal projection: the removed part is orthogonal to what remains
        assert abs(np.sum(r * (s - r))) < 1e-10

    def test_parity_energy(self):
        en = parity_energy(DspFilterBank.identity(3, main=1, gain=2.0))
        np.testing.assert_array_equal(en, np.tile([0.0, 4.0], (4, 1)))

    def test_trim_norm(self):
        en = np.tile([1.0, 3.0], (4, 1))
        v = np.full((4, 8), 2.0)
        np.testing.assert_allclose(trim_norm(en, v, 0, 4), np.tile([4.0, 12.0, 4.0, 12.0], (4, 1)))


class TestSchedule:
    def test_gate(self):
        assert all(decimation_gate(b, AdaptSchedule(D_B=1)) for b in range(20))
        s = AdaptSchedule(D_B=256)
        assert [b for b in range(512) if decimation_gate(b, s)] == [0, 256]

    def test_gear_boundaries(self):
        s = AdaptSchedule(gears=[(0, 1e-3, 1e-3, 1e-3, 1e-3), (1000, 1e-4, 1e-4, 1e-4, 1e-4)])
        assert gear_shift(999, s)[0] == 1e-3
        assert gear_shift(1000, s)[0] == 1e-4
        single = AdaptSchedule(gears=[(0, 0.1, 0.2, 0.3, 0.4)])
        assert gear_shift(0, single) == gear_shift(10**6, single) == (0.1, 0.2, 0.3, 0.4)

    def test_halving(self):
        g = halving_gears(0.16, 0.08, 0.5, 0.5, 8, 4)
        assert [r[0] for r in g] == [0, 8, 16, 24]
        for a, b in zip(g, g[1:]):
            np.testing.assert_allclose(np.array(b[1:]) * 2, a[1:])

    def test_empty_table(self):
        with pytest.raises(ConfigurationError):
            gear_shift(0, AdaptSchedule(gears=[]))

    @pytest.mark.parametrize("kw", [dict(N=4), dict(D_B=0), dict(gears=[(5, 1, 1, 1, 1), (0, 1, 1, 1, 1)]),
                                    dict(gears=[(0, -1, 1, 1, 1)])])
    def test_validate(self, kw):
        with pytest.raises(ConfigurationError):
            AdaptSchedule(**kw).validate(15, 7)


class TestTraceWriter:
    def test_rows(self, tmp_path):
        p = tmp_path / "adapt.csv"
        w = AdaptTraceWriter(p, verbose=True)
        w.write(3, 7, "o", np.arange(8.0).reshape(4, 2))
        w.close()
        rows = list(csv.reader(open(p)))
        assert rows[0] == list(AdaptTraceWriter.header)
        assert len(rows) == 9 and rows[1][:5] == ["3", "7", "0", "0", "o"]

    def test_quiet(self, tmp_path):
        p = tmp_path / "adapt.csv"
        w = AdaptTraceWriter(p, verbose=False)
        w.write(0, 0, "o", np.zeros((4, 2)))
        w.close()
        assert not p.exists()
