"""Rprop solver over joint tissue and calibration parameters.

The variant is Rprop without weight backtracking: per scalar, the step
size grows by eta_plus after agreeing gradient signs and shrinks by
eta_minus after a sign flip; on a flip the gradient is treated as zero, so
the parameter holds still for one step and no sign memory carries over.
Sign-based updates make the trajectory invariant to positive rescaling of
the objective, which is what lets heterogeneous parameter groups
(orientations, logits, calibration fields) share one solver.

Whole volumes are fitted as overlapping slabs of slices stitched with
linear ramp weights; fiber directions are taken winner-take-all from the
slab with the larger blend weight because averaging antipodally symmetric
axes is ill-defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .acquisition import AcquisitionScheme, MIN_MEASUREMENTS_FOR_FIT
from .errors import DataError, NumericalError
from .forward_model import (
    BIAS_GRID_SIZE,
    CalibrationParams,
    ModelConstants,
    S0_RAW_FOR_UNIT_SIGNAL,
    TissueParams,
    constrain,
    scheme_tensors,
    upsample_bias_log,
)
from .objective import LossMode, RegWeights, total_objective

SIGMA_INIT = 0.05  # starting noise level in NLL mode (~SNR 20 on normalized data)


def b0_normalize(y: np.ndarray, scheme: AcquisitionScheme, mask: np.ndarray,
                 floor: float = 1e-6):
    """Divide every voxel's signal vector by its mean measured b0.

    Voxels whose b0 falls below the floor are dropped from the mask.
    Returns (normalized data, updated mask).
    """
    if not scheme.b0_mask.any():
        raise DataError("scheme has no b0 measurement to normalize by")
    y = np.asarray(y, dtype=np.float64)
    b0 = y[..., scheme.b0_mask].mean(axis=-1)
    ok = b0 > floor
    safe = np.where(ok, b0, 1.0)
    y_norm = np.where(ok[..., None], y / safe[..., None], 0.0)
    return y_norm, np.asarray(mask, dtype=bool) & ok


@dataclass
class RpropOptions:
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    delta0: float = 0.01
    delta_min: float = 1e-8
    delta_max: float = 1.0


class RpropState:
    """Per-scalar step sizes and previous gradient signs for a parameter dict."""

    def __init__(self, params: dict[str, torch.Tensor], options: RpropOptions | None = None):
        self.options = options or RpropOptions()
        self.step = {k: torch.full_like(v, self.options.delta0) for k, v in params.items()}
        self.prev_sign = {k: torch.zeros_like(v) for k, v in params.items()}


def rprop_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: RpropState):
    """One Rprop update, in place. Returns (params, state)."""
    opt = state.options
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {name}")
            sign = torch.sign(g)
            agree = sign * state.prev_sign[name]
            step = state.step[name]
            step = torch.where(agree > 0, (step * opt.eta_plus).clamp_max(opt.delta_max), step)
            step = torch.where(agree < 0, (step * opt.eta_minus).clamp_min(opt.delta_min), step)
            eff_sign = torch.where(agree < 0, torch.zeros_like(sign), sign)
            p -= eff_sign * step
            state.step[name] = step
            state.prev_sign[name] = eff_sign
    return params, state


@dataclass
class FitConfig:
    """Settings for one fit."""

    n_fibers: int = 2
    mode: LossMode = LossMode.MSE
    weights: RegWeights = field(default_factory=RegWeights)
    constants: ModelConstants = field(default_factory=ModelConstants)
    iterations: int = 300
    slab_size: int = 30
    slab_overlap: int = 5
    seed: int = 0
    calibration_enabled: bool = True
    # Fraction of the iteration budget during which the intensity-transform
    # parameters (bias grid, alpha, beta) stay frozen, so they never absorb
    # the large residuals of a random tissue init.
    calibration_warmup: float = 0.2
    rprop: RpropOptions = field(default_factory=RpropOptions)
    optimizer: str = "rprop"  # or "adam" (reference comparison)
    adam_lr: float = 0.05
    bias_grid_size: int = BIAS_GRID_SIZE

    def validate(self) -> "FitConfig":
        if self.n_fibers < 1:
            raise ValueError("n_fibers must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 < self.slab_overlap < self.slab_size):
            raise ValueError("need 0 < slab_overlap < slab_size")
        if not (0.0 <= self.calibration_warmup < 1.0):
            raise ValueError("calibration_warmup must be in [0, 1)")
        if self.optimizer not in ("rprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.weights.validate()
        self.constants.validate()
        return self


def init_params(dims: tuple[int, int, int], scheme: AcquisitionScheme,
                config: FitConfig, seed: int | None = None,
                mask: np.ndarray | None = None):
    """Seeded initialization of raw tissue and calibration parameters.

    S0 starts at 1 (b0-normalized data), fractions uniform, directions
    uniform on the sphere, f_intra at 0.5, calibration at exact identity.
    """
    if mask is not None and not np.any(mask):
        raise DataError("empty mask")
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    k = config.n_fibers
    dirs = rng.standard_normal((*dims, k, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True).clip(1e-12)
    dt = torch.float64
    tissue = TissueParams(
        s0_raw=torch.full(dims, S0_RAW_FOR_UNIT_SIGNAL, dtype=dt),
        fraction_logits=torch.zeros((*dims, k + 3), dtype=dt),
        dir_raw=torch.from_numpy(dirs).to(dt),
        f_intra_raw=torch.zeros(dims, dtype=dt),
    )
    cal = CalibrationParams.identity(
        scheme.n_measurements, grid_size=config.bias_grid_size, sigma=SIGMA_INIT, dtype=dt
    )
    return tissue, cal


@dataclass
class PatchFit:
    tissue: TissueParams
    cal: CalibrationParams
    trace: list[dict]

    @property
    def initial_objective(self) -> float:
        return self.trace[0]["total"]

    @property
    def final_objective(self) -> float:
        return self.trace[-1]["total"]


def _trainable_keys(config: FitConfig, freeze_calibration: bool) -> list[str]:
    keys = ["s0_raw", "fraction_logits", "dir_raw", "f_intra_raw"]
    if not freeze_calibration:
        if config.calibration_enabled:
            keys += ["bias_grid", "alpha", "beta"]
        if config.mode == LossMode.RICIAN_NLL:
            keys.append("sigma_log")
    return keys


def fit_patch(y, mask, scheme: AcquisitionScheme, config: FitConfig, *,
              tissue_init: TissueParams | None = None,
              cal_init: CalibrationParams | None = None,
              freeze_calibration: bool = False,
              log_bias: torch.Tensor | None = None) -> PatchFit:
    """Fit one patch with a fixed iteration budget.

    The loss trace records the per-term breakdown at the start of every
    iteration. Raises NumericalError on divergence or if the final
    objective exceeds the initial one.
    """
    config.validate()
    y_t = torch.as_tensor(np.asarray(y), dtype=torch.float64)
    mask_t = torch.as_tensor(np.asarray(mask)).bool()
    if y_t.dim() != 4:
        raise DataError(f"patch data must be 4D, got shape {tuple(y_t.shape)}")
    if tuple(mask_t.shape) != tuple(y_t.shape[:3]):
        raise DataError("mask shape does not match data grid")
    if y_t.shape[3] != scheme.n_measurements:
        raise DataError(
            f"data has {y_t.shape[3]} measurements but scheme has {scheme.n_measurements}")
    if scheme.n_measurements < MIN_MEASUREMENTS_FOR_FIT:
        raise DataError(f"need at least {MIN_MEASUREMENTS_FOR_FIT} measurements to fit")
    if not bool(mask_t.any()):
        raise DataError("empty mask")

    dims = tuple(y_t.shape[:3])
    if tissue_init is None or cal_init is None:
        t0, c0 = init_params(dims, scheme, config)
        tissue_init = tissue_init or t0
        cal_init = cal_init or c0

    leaves = {k: v.detach().clone() for k, v in tissue_init.tensors().items()}
    leaves.update({k: v.detach().clone() for k, v in cal_init.tensors().items()})
    train_keys = _trainable_keys(config, freeze_calibration)
    for k in train_keys:
        leaves[k].requires_grad_(True)

    b, g = scheme_tensors(scheme)
    tissue = TissueParams(**{k: leaves[k] for k in ("s0_raw", "fraction_logits", "dir_raw", "f_intra_raw")})
    cal = CalibrationParams(**{k: leaves[k] for k in ("bias_grid", "alpha", "beta", "sigma_log")})

    cal_trainable = (not freeze_calibration) and config.calibration_enabled
    train_params = {k: leaves[k] for k in train_keys}
    state = RpropState(train_params, config.rprop)
    adam = None
    if config.optimizer == "adam":
        adam = torch.optim.Adam(train_params.values(), lr=config.adam_lr)

    # The b0 entries are the normalization reference, so their per-measurement
    # affine stays at identity during fitting.
    ab_live = torch.from_numpy((~scheme.b0_mask).astype(np.float64))
    n_warm = int(round(config.calibration_warmup * config.iterations)) if cal_trainable else 0
    intensity_keys = [k for k in ("bias_grid", "alpha", "beta") if k in train_params]

    trace: list[dict] = []
    for it in range(config.iterations):
        total, breakdown = total_objective(
            tissue, cal, y_t, b, g, config.mode, config.weights, config.constants,
            mask_t, log_bias=log_bias, cal_trainable=cal_trainable,
        )
        trace.append({k: float(v.detach()) for k, v in breakdown.items()})
        grads = torch.autograd.grad(total, list(train_params.values()), allow_unused=True)
        grad_map = {
            k: (gr if gr is not None else torch.zeros_like(train_params[k]))
            for k, gr in zip(train_params, grads)
        }
        if it < n_warm:
            for k in intensity_keys:
                grad_map[k] = torch.zeros_like(grad_map[k])
        else:
            for k in ("alpha", "beta"):
                if k in grad_map:
                    grad_map[k] = grad_map[k] * ab_live
        if adam is not None:
            with torch.no_grad():
                for k, p in train_params.items():
                    p.grad = grad_map[k]
            adam.step()
        else:
            with torch.no_grad():
                data_view = {k: p.data for k, p in train_params.items()}
                rprop_step(data_view, grad_map, state)
        if "bias_grid" in train_params and it >= n_warm:
            # Gauge fix: the constant mode of the log bias field is exactly
            # degenerate with the S0 field, so keep the grid zero-mean.
            with torch.no_grad():
                train_params["bias_grid"] -= train_params["bias_grid"].mean()

    if trace[-1]["total"] > trace[0]["total"]:
        raise NumericalError(
            f"no progress: objective went {trace[0]['total']:.6g} -> {trace[-1]['total']:.6g}")
    return PatchFit(
        tissue=TissueParams(**{k: leaves[k].detach().clone() for k in
                               ("s0_raw", "fraction_logits", "dir_raw", "f_intra_raw")}),
        cal=CalibrationParams(**{k: leaves[k].detach().clone() for k in
                                 ("bias_grid", "alpha", "beta", "sigma_log")}),
        trace=trace,
    )


def plan_slabs(nz: int, slab_size: int, slab_overlap: int) -> list[tuple[int, int]]:
    """Slice ranges [start, stop) covering nz slices with the given overlap."""
    if nz <= slab_size:
        return [(0, nz)]
    step = slab_size - slab_overlap
    return [(s, min(s + slab_size, nz)) for s in range(0, nz - slab_overlap, step)]


@dataclass
class VolumeFit:
    """Constrained full-volume fit results plus calibration and traces."""

    s0: np.ndarray
    fractions: np.ndarray
    directions: np.ndarray
    f_intra: np.ndarray
    bias_field: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sigma_log: float
    bias_grid: np.ndarray
    traces: list[dict]

    @property
    def sigma(self) -> float:
        return float(np.exp(self.sigma_log))

    @property
    def n_fibers(self) -> int:
        return self.directions.shape[3]

    @property
    def wm_fractions(self) -> np.ndarray:
        return self.fractions[..., 2:2 + self.n_fibers]


def _constrained_numpy(fit: PatchFit):
    ct = constrain(fit.tissue)
    return (
        ct.s0.numpy(),
        ct.fractions.numpy(),
        ct.directions.numpy(),
        ct.f_intra.numpy(),
    )


def _slab_weights(slabs: list[tuple[int, int]], nz: int, overlap: int) -> np.ndarray:
    """Blend weight per (slab, z): 1 inside, linear ramps across shared slices."""
    w = np.zeros((len(slabs), nz))
    for i, (z0, z1) in enumerate(slabs):
        wi = np.ones(z1 - z0)
        if i > 0:
            n = min(overlap, z1 - z0)
            wi[:n] = np.arange(1, n + 1) / (n + 1)
        if i < len(slabs) - 1:
            n = min(overlap, z1 - z0)
            wi[len(wi) - n:] = np.arange(n, 0, -1) / (n + 1)
        w[i, z0:z1] = wi
    return w


def fit_volume(y, mask, scheme: AcquisitionScheme, config: FitConfig) -> VolumeFit:
    """Fit a whole volume slab by slab and stitch the overlaps.

    Volume-level parameters (calibration, noise level) are fitted once on
    the full volume in a preliminary pass when more than one slab is
    needed, then frozen for the per-slab tissue fits.
    """
    config.validate()
    y = np.asarray(y)
    mask = np.asarray(mask).astype(bool)
    nz = y.shape[2]
    slabs = plan_slabs(nz, config.slab_size, config.slab_overlap)

    if len(slabs) == 1:
        pf = fit_patch(y, mask, scheme, config)
        s0, fr, dirs, fi = _constrained_numpy(pf)
        log_bias = upsample_bias_log(pf.cal.bias_grid, tuple(y.shape[:3]))
        return VolumeFit(
            s0=s0, fractions=fr, directions=dirs, f_intra=fi,
            bias_field=np.exp(log_bias.numpy()),
            alpha=pf.cal.alpha.numpy(), beta=pf.cal.beta.numpy(),
            sigma_log=float(pf.cal.sigma_log), bias_grid=pf.cal.bias_grid.numpy(),
            traces=[{"slab": [0, nz], "trace": pf.trace}],
        )

    # Volume-level pass for calibration / noise level, then frozen slab fits.
    needs_prelim = config.calibration_enabled or config.mode == LossMode.RICIAN_NLL
    traces: list[dict] = []
    if needs_prelim:
        prelim = fit_patch(y, mask, scheme, config)
        cal = prelim.cal
        traces.append({"slab": "full-volume calibration pass", "trace": prelim.trace})
    else:
        _, cal = init_params(tuple(y.shape[:3]), scheme, config)
    full_log_bias = upsample_bias_log(cal.bias_grid, tuple(y.shape[:3]))

    k = config.n_fibers
    nx, ny = y.shape[0], y.shape[1]
    acc_w = np.zeros(nz)
    weights = _slab_weights(slabs, nz, config.slab_overlap)
    s0 = np.zeros((nx, ny, nz))
    fractions = np.zeros((nx, ny, nz, k + 3))
    f_intra = np.zeros((nx, ny, nz))
    directions = np.zeros((nx, ny, nz, k, 3))
    dir_w = np.zeros(nz)

    for i, (z0, z1) in enumerate(slabs):
        sub_mask = mask[:, :, z0:z1]
        if not sub_mask.any():
            continue
        pf = fit_patch(
            y[:, :, z0:z1], sub_mask, scheme, config,
            cal_init=cal, freeze_calibration=True,
            log_bias=full_log_bias[:, :, z0:z1],
        )
        traces.append({"slab": [z0, z1], "trace": pf.trace})
        ps0, pfr, pdirs, pfi = _constrained_numpy(pf)
        w = weights[i, z0:z1]
        s0[:, :, z0:z1] += ps0 * w
        f_intra[:, :, z0:z1] += pfi * w
        fractions[:, :, z0:z1] += pfr * w[None, None, :, None]
        acc_w[z0:z1] += w
        # winner-take-all for directions
        take = w > dir_w[z0:z1]
        if take.any():
            zsel = np.where(take)[0]
            directions[:, :, z0 + zsel] = pdirs[:, :, zsel]
            dir_w[z0 + zsel] = w[zsel]

    nzw = acc_w.clip(1e-12)
    s0 /= nzw
    f_intra /= nzw
    fractions /= nzw[None, None, :, None]

    return VolumeFit(
        s0=s0, fractions=fractions, directions=directions, f_intra=f_intra,
        bias_field=np.exp(full_log_bias.numpy()),
        alpha=cal.alpha.numpy(), beta=cal.beta.numpy(),
        sigma_log=float(cal.sigma_log), bias_grid=cal.bias_grid.numpy(),
        traces=traces,
    )
