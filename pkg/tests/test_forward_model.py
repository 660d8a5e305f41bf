import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fixelfit.errors import NumericalError
from fixelfit.forward_model import (
    CalibrationParams,
    ConstrainedTissue,
    ModelConstants,
    TissueParams,
    apply_calibration,
    constrain,
    predict_volume,
    scheme_tensors,
    tissue_signal,
    upsample_bias,
    upsample_bias_log,
    wm_attenuation,
)

DT = torch.float64
CONSTS = ModelConstants()


def _t(x):
    return torch.as_tensor(x, dtype=DT)


def _single_voxel_params(k=2, logits=None, dir_raw=None, s0_raw=0.5413248546129181,
                         f_intra_raw=0.0):
    if logits is None:
        logits = [0.0] * (k + 3)
    if dir_raw is None:
        dir_raw = [[0.0, 0.0, 1.0]] * k
    return TissueParams(
        s0_raw=_t([[[s0_raw]]]),
        fraction_logits=_t([[[logits]]]),
        dir_raw=_t([[[dir_raw]]]),
        f_intra_raw=_t([[[f_intra_raw]]]),
    )


class TestConstrain:
    def test_softmax_symmetry(self):
        ct = constrain(_single_voxel_params(k=2))
        np.testing.assert_allclose(ct.fractions.numpy(), 0.2, atol=1e-12)
        assert float(ct.fractions.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_sigmoid_midpoint(self):
        ct = constrain(_single_voxel_params(f_intra_raw=0.0))
        assert float(ct.f_intra) == pytest.approx(0.5)

    def test_direction_normalization(self):
        ct = constrain(_single_voxel_params(dir_raw=[[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(ct.directions[0, 0, 0, 0].numpy(), [0.6, 0.8, 0.0])

    def test_s0_positive(self):
        ct = constrain(_single_voxel_params(s0_raw=-30.0))
        assert float(ct.s0) > 0.0

    def test_non_finite_rejected(self):
        p = _single_voxel_params()
        p.s0_raw[0, 0, 0] = float("nan")
        with pytest.raises(NumericalError):
            constrain(p)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
    def test_constrained_invariants_hold(self, seed, k):
        rng = np.random.default_rng(seed)
        p = TissueParams(
            s0_raw=_t(rng.normal(0, 3, (2, 2, 1))),
            fraction_logits=_t(rng.normal(0, 3, (2, 2, 1, k + 3))),
            dir_raw=_t(rng.normal(0, 1, (2, 2, 1, k, 3))),
            f_intra_raw=_t(rng.normal(0, 3, (2, 2, 1))),
        )
        ct = constrain(p)
        assert (ct.s0 > 0).all()
        np.testing.assert_allclose(ct.fractions.sum(-1).numpy(), 1.0, atol=1e-6)
        np.testing.assert_allclose(
            ct.directions.norm(dim=-1).numpy(), 1.0, atol=1e-6)
        assert ((ct.f_intra > 0) & (ct.f_intra < 1)).all()


class TestWmAttenuation:
    def test_zero_b(self):
        e = wm_attenuation(_t([0.0, 0.0, 1.0]), _t(0.3), _t([0.0]), _t([[0.0, 0.0, 1.0]]), CONSTS)
        assert float(e) == pytest.approx(1.0)

    def test_perpendicular(self):
        e = wm_attenuation(_t([0.0, 0.0, 1.0]), _t(0.5), _t([1000.0]),
                           _t([[1.0, 0.0, 0.0]]), CONSTS)
        assert float(e) == pytest.approx(0.5 + 0.5 * np.exp(-0.4), abs=1e-10)
        assert float(e) == pytest.approx(0.83516, abs=1e-5)

    def test_parallel_any_f_intra(self):
        for fi in (0.0, 0.3, 1.0):
            e = wm_attenuation(_t([0.0, 0.0, 1.0]), _t(fi), _t([1000.0]),
                               _t([[0.0, 0.0, 1.0]]), CONSTS)
            assert float(e) == pytest.approx(np.exp(-1.7), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_antipodal_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        g = rng.standard_normal((5, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        b = _t(rng.uniform(0, 3000, 5))
        fi = _t(rng.uniform(0, 1))
        e1 = wm_attenuation(_t(d), fi, b, _t(g), CONSTS)
        e2 = wm_attenuation(_t(-d), fi, b, _t(g), CONSTS)
        np.testing.assert_allclose(e1.numpy(), e2.numpy(), rtol=0, atol=1e-15)

    def test_range(self):
        e = wm_attenuation(_t([0.0, 0.0, 1.0]), _t(0.5), _t([0.0, 500.0, 3000.0]),
                           _t([[0.0, 1.0, 0.0]] * 3), CONSTS)
        assert ((e > 0) & (e <= 1)).all()


def _pure_fraction_logits(channel, k=2, mag=40.0):
    logits = [-mag] * (k + 3)
    logits[channel] = mag
    return logits


class TestTissueSignal:
    def _signal(self, logits, b, g, k=2):
        p = _single_voxel_params(k=k, logits=logits)
        ct = constrain(p)
        return tissue_signal(ct, _t(b), _t(g), CONSTS)[0, 0, 0]

    def test_pure_csf(self):
        s = self._signal(_pure_fraction_logits(0), [1000.0], [[1.0, 0.0, 0.0]])
        assert float(s) == pytest.approx(np.exp(-3.0), abs=1e-9)
        assert float(s) == pytest.approx(0.049787, abs=1e-6)

    def test_pure_restricted(self):
        s = self._signal(_pure_fraction_logits(4), [3000.0], [[1.0, 0.0, 0.0]])
        assert float(s) == pytest.approx(np.exp(-0.6), abs=1e-9)
        assert float(s) == pytest.approx(0.548812, abs=1e-6)

    def test_b0_returns_s0_exactly(self, small_scheme, rng):
        p = _single_voxel_params(logits=list(rng.normal(0, 2, 5)))
        ct = constrain(p)
        b, g = scheme_tensors(small_scheme)
        s = tissue_signal(ct, b, g, CONSTS)[0, 0, 0]
        b0_idx = np.where(small_scheme.b0_mask)[0]
        for i in b0_idx:
            assert float(s[i]) == float(ct.s0[0, 0, 0])

    def test_monotone_in_b_for_isotropic_mixture(self):
        # csf + gm + restricted mixture, no WM
        logits = [1.0, 0.5, -40.0, -40.0, 0.7]
        bs = np.linspace(0, 3000, 20)
        s = self._signal(logits, bs.tolist(), [[0.0, 0.0, 1.0]] * 20)
        vals = s.numpy()
        assert np.all(np.diff(vals) <= 1e-15)

    def test_mixture_convexity(self, rng):
        # mixture signal lies within [min, max] of pure-compartment signals
        logits = list(rng.normal(0, 1.5, 5))
        b = [1500.0]
        g = [[0.0, 1.0, 0.0]]
        mixed = float(self._signal(logits, b, g))
        pures = [float(self._signal(_pure_fraction_logits(c), b, g)) for c in range(5)]
        assert min(pures) - 1e-12 <= mixed <= max(pures) + 1e-12


class TestUpsampleBias:
    def test_zero_grid_gives_unity(self):
        field = upsample_bias(torch.zeros((8, 8, 8), dtype=DT), (5, 4, 3))
        np.testing.assert_allclose(field.numpy(), 1.0)

    def test_constant_grid(self):
        field = upsample_bias(torch.full((8, 8, 8), float(np.log(2.0)), dtype=DT), (3, 3, 3))
        np.testing.assert_allclose(field.numpy(), 2.0, rtol=1e-12)

    def test_linear_ramp_midpoint_sqrt2(self):
        grid = torch.zeros((8, 8, 8), dtype=DT)
        ramp = torch.linspace(0.0, float(np.log(2.0)), 8, dtype=DT)
        grid += ramp[:, None, None]
        field = upsample_bias(grid, (9, 1, 1))  # odd size: voxel 4 is the exact midpoint
        assert float(field[4, 0, 0]) == pytest.approx(np.sqrt(2.0), abs=1e-6)

    def test_corner_alignment(self):
        grid = torch.zeros((8, 8, 8), dtype=DT)
        grid[0, 0, 0] = 1.0
        grid[7, 7, 7] = -1.0
        field = upsample_bias_log(grid, (5, 5, 5))
        assert float(field[0, 0, 0]) == pytest.approx(1.0)
        assert float(field[4, 4, 4]) == pytest.approx(-1.0)

    def test_positive_everywhere(self, rng):
        grid = _t(rng.normal(0, 1, (8, 8, 8)))
        field = upsample_bias(grid, (7, 6, 5))
        assert (field > 0).all()


class TestApplyCalibration:
    def _cal(self, n, alpha=0.0, beta=0.0):
        cal = CalibrationParams.identity(n)
        cal.alpha += alpha
        cal.beta += beta
        return cal

    def test_identity_chain(self, rng):
        s = _t(rng.uniform(0, 1, (2, 2, 1, 4)))
        out = apply_calibration(s, self._cal(4), _t(np.ones((2, 2, 1))))
        np.testing.assert_array_equal(out.numpy(), s.numpy())

    def test_scale(self):
        out = apply_calibration(_t([[[[0.5]]]]), self._cal(1, alpha=float(np.log(1.1))),
                                _t(np.ones((1, 1, 1))))
        assert float(out) == pytest.approx(0.55, abs=1e-12)

    def test_offset_only(self):
        out = apply_calibration(_t([[[[0.0]]]]), self._cal(1, beta=0.01),
                                _t(np.ones((1, 1, 1))))
        assert float(out) == pytest.approx(0.01)


class TestPredictVolume:
    def test_identity_cal_equals_tissue_signal(self, small_scheme, rng):
        dims = (2, 3, 1)
        k = 2
        p = TissueParams(
            s0_raw=_t(rng.normal(0.5, 0.2, dims)),
            fraction_logits=_t(rng.normal(0, 1, (*dims, k + 3))),
            dir_raw=_t(rng.standard_normal((*dims, k, 3))),
            f_intra_raw=_t(rng.normal(0, 1, dims)),
        )
        cal = CalibrationParams.identity(small_scheme.n_measurements)
        mask = torch.ones(dims, dtype=torch.bool)
        out = predict_volume(p, cal, small_scheme, CONSTS, mask)
        b, g = scheme_tensors(small_scheme)
        expected = tissue_signal(constrain(p), b, g, CONSTS)
        np.testing.assert_array_equal(out.numpy(), expected.numpy())

    def test_empty_mask_gives_zeros(self, small_scheme):
        p = _single_voxel_params()
        cal = CalibrationParams.identity(small_scheme.n_measurements)
        out = predict_volume(p, cal, small_scheme, CONSTS, torch.zeros((1, 1, 1), dtype=torch.bool))
        np.testing.assert_array_equal(out.numpy(), 0.0)

    def test_voxelwise_independence(self, small_scheme, rng):
        k = 2
        mk = lambda dims, seed: TissueParams(  # noqa: E731
            s0_raw=_t(np.random.default_rng(seed).normal(0.5, 0.2, dims)),
            fraction_logits=_t(np.random.default_rng(seed + 1).normal(0, 1, (*dims, k + 3))),
            dir_raw=_t(np.random.default_rng(seed + 2).standard_normal((*dims, k, 3))),
            f_intra_raw=_t(np.random.default_rng(seed + 3).normal(0, 1, dims)),
        )
        cal = CalibrationParams.identity(small_scheme.n_measurements)
        two = mk((2, 1, 1), 7)
        mask2 = torch.ones((2, 1, 1), dtype=torch.bool)
        joint = predict_volume(two, cal, small_scheme, CONSTS, mask2)
        for v in range(2):
            solo = TissueParams(
                s0_raw=two.s0_raw[v:v + 1],
                fraction_logits=two.fraction_logits[v:v + 1],
                dir_raw=two.dir_raw[v:v + 1],
                f_intra_raw=two.f_intra_raw[v:v + 1],
            )
            single = predict_volume(solo, cal, small_scheme, CONSTS,
                                    torch.ones((1, 1, 1), dtype=torch.bool))
            np.testing.assert_array_equal(joint[v].numpy(), single[0].numpy())
