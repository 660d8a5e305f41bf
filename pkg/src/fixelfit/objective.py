"""Total fitting objective: data fidelity plus regularization.

Two data terms are supported. The MSE term is the mean of squared
residuals over masked voxel-measurement pairs. The Rician negative
log-likelihood is the sum over masked pairs of

    log sigma^2 + (y^2 + yhat^2) / (2 sigma^2) - log I0(y yhat / sigma^2),

the correct likelihood for magnitude MRI data; sigma is a learnable
calibration parameter. The sum/mean asymmetry between the two modes is
deliberate and kept as is.

The regularizers all vanish at their neutral configurations and each is
gated by its own weight so any subset can be switched off. Spatial terms
use a 6- or 26-connected neighborhood restricted to the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from .errors import NumericalError
from .forward_model import (
    CalibrationParams,
    ConstrainedTissue,
    ModelConstants,
    TissueParams,
    apply_calibration,
    constrain,
    scheme_tensors,
    tissue_signal,
    upsample_bias_log,
)


class LossMode(str, Enum):
    MSE = "mse"
    RICIAN_NLL = "nll"


@dataclass
class RegWeights:
    """Regularizer weights. Any weight set to 0 disables its term."""

    lambda_sp: float = 0.01
    lambda_rep: float = 0.01
    lambda_sparse: float = 0.02
    tau: float = 0.15
    lambda_orphan: float = 0.01
    lambda_cont: float = 0.005
    lambda_order: float = 0.01
    huber_delta: float = 0.05
    neighborhood: int = 6
    lambda_alpha: float = 1.0
    lambda_beta: float = 1.0
    lambda_bias_l2: float = 0.1
    lambda_bias_tv: float = 0.1

    def validate(self) -> "RegWeights":
        for name in ("lambda_sp", "lambda_rep", "lambda_sparse", "lambda_orphan",
                     "lambda_cont", "lambda_order", "lambda_alpha", "lambda_beta",
                     "lambda_bias_l2", "lambda_bias_tv", "tau", "huber_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.neighborhood not in (6, 26):
            raise ValueError("neighborhood must be 6 or 26")
        return self

    def repulsion_only(self) -> "RegWeights":
        """Tissue priors off except direction repulsion (synthetic-benchmark setting).
        Calibration anchors are kept."""
        return replace(
            self, lambda_sp=0.0, lambda_sparse=0.0, lambda_orphan=0.0,
            lambda_cont=0.0, lambda_order=0.0,
        )


# Smooth gate for the orphan-WM penalty: active where S0 falls below s_low.
ORPHAN_S_LOW = 0.1
ORPHAN_GATE_WIDTH = 0.01

# Power-series / asymptotic-expansion crossover for log I0. The asymptotic
# tail needs x large enough that ~12 terms reach 1e-10 relative accuracy.
_LOG_I0_SPLIT = 30.0
_ASYMPTOTIC_TERMS = 12


def _asymptotic_coeffs(n_terms: int) -> np.ndarray:
    # I0(x) ~ e^x/sqrt(2 pi x) * (1 + sum_k a_k / x^k), a_k = prod((2j-1)^2) / (k! 8^k)
    a = np.zeros(n_terms + 1)
    a[0] = 1.0
    for k in range(1, n_terms + 1):
        a[k] = a[k - 1] * (2 * k - 1) ** 2 / (8.0 * k)
    return a


_ASYM_A = _asymptotic_coeffs(_ASYMPTOTIC_TERMS)


def log_i0(x):
    """log of the modified Bessel function I0, elementwise.

    Power series of I0 for x < 30, asymptotic expansion
    log I0(x) = x - log(2 pi x)/2 + log(1 + 1/(8x) + 9/(128 x^2) + ...)
    above. Accurate to ~1e-10 relative and overflow-free up to x = 1e8.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("log_i0 requires x >= 0")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    small = x < _LOG_I0_SPLIT
    if small.any():
        xs = x[small]
        q = 0.25 * xs * xs
        term = np.ones_like(xs)
        acc = np.ones_like(xs)
        for k in range(1, 130):
            term = term * q / (k * k)
            acc = acc + term
            if np.all(term <= acc * 1e-18):
                break
        out[small] = np.log(acc)
    if (~small).any():
        xl = x[~small]
        series = np.zeros_like(xl)
        for k in range(_ASYMPTOTIC_TERMS, 0, -1):
            series = (series + _ASYM_A[k]) / xl
        out[~small] = xl - 0.5 * np.log(2.0 * np.pi * xl) + np.log1p(series)
    return float(out[0]) if scalar else out


def log_i0_torch(x: torch.Tensor) -> torch.Tensor:
    """Differentiable log I0 for x >= 0 via the scaled Bessel function:
    log I0(x) = x + log(i0e(x)). The backward pass evaluates I1/I0 through
    torch's i1e-based derivative, which stays stable for large x."""
    return x + torch.log(torch.special.i0e(x))


def mse_loss(y_hat, y, mask) -> torch.Tensor:
    """Mean squared residual over masked voxel-measurement pairs."""
    y_hat, y, mask = _as_tensors(y_hat, y, mask)
    if not bool(mask.any()):
        raise ValueError("empty mask")
    r = (y_hat - y)[mask]
    return (r * r).mean()


def rician_nll(y_hat, y, sigma, mask) -> torch.Tensor:
    """Rician negative log-likelihood summed over masked pairs.

    y must be non-negative (magnitude data); y_hat is clamped below at 0
    before evaluation; sigma must be positive.
    """
    y_hat, y, mask = _as_tensors(y_hat, y, mask)
    sigma_t = torch.as_tensor(sigma, dtype=y.dtype)
    if float(sigma_t.detach()) <= 0:
        raise ValueError("sigma must be positive")
    if float(y.min()) < 0:
        raise ValueError("rician_nll requires non-negative data")
    if not bool(mask.any()):
        raise ValueError("empty mask")
    yh = y_hat[mask].clamp_min(0.0)
    ym = y[mask]
    s2 = sigma_t * sigma_t
    term = torch.log(s2) + (ym * ym + yh * yh) / (2.0 * s2) - log_i0_torch(ym * yh / s2)
    return term.sum()


def _as_tensors(*arrays):
    out = []
    dtype = None
    for a in arrays:
        t = torch.as_tensor(a)
        if t.dtype is torch.bool:
            out.append(t)
            continue
        if dtype is None:
            dtype = t.dtype if t.is_floating_point() else torch.float64
        out.append(t.to(dtype) if t.is_floating_point() else t.to(torch.float64))
    return out


_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def _neighbor_offsets(neighborhood: int):
    if neighborhood == 6:
        return _OFFSETS_6
    if neighborhood == 26:
        return _OFFSETS_26
    raise ValueError("neighborhood must be 6 or 26")


def _shift(t: torch.Tensor, off) -> torch.Tensor:
    """Value of t at x + off, zero-filled at the volume border.
    The first three dims are spatial; trailing dims ride along."""
    dx, dy, dz = off
    nx, ny, nz = t.shape[:3]
    out = torch.zeros_like(t)

    def rng(n, d):
        return (max(0, -d), min(n, n - d)), (max(0, d), min(n, n + d))

    (dxa, dxb), (sxa, sxb) = rng(nx, dx)
    (dya, dyb), (sya, syb) = rng(ny, dy)
    (dza, dzb), (sza, szb) = rng(nz, dz)
    if dxa >= dxb or dya >= dyb or dza >= dzb:
        return out
    out[dxa:dxb, dya:dyb, dza:dzb] = t[sxa:sxb, sya:syb, sza:szb]
    return out


def huber(r: torch.Tensor, delta: float) -> torch.Tensor:
    """Elementwise Huber loss: r^2/2 for |r| <= delta, delta(|r| - delta/2) beyond."""
    a = r.abs()
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def spatial_huber_laplacian(fractions: torch.Tensor, mask: torch.Tensor,
                            weights: RegWeights) -> torch.Tensor:
    """Huber-Laplacian spatial coherence over fraction channels.

    Per masked voxel, the residual against the mean of its in-mask
    neighbors is passed through the Huber loss per channel; voxels with no
    in-mask neighbor contribute zero. Normalized by the mask size.
    """
    if weights.lambda_sp == 0.0:
        return fractions.new_zeros(())
    maskf = mask.to(fractions.dtype)
    # f(x) - mean_{x' in N(x)} f(x') accumulated as summed differences, so a
    # spatially constant field yields an exact zero residual
    diff_sum = torch.zeros_like(fractions)
    nbr_cnt = torch.zeros_like(maskf)
    for off in _neighbor_offsets(weights.neighborhood):
        m_sh = _shift(maskf, off)
        f_sh = _shift(fractions, off)
        diff_sum = diff_sum + m_sh[..., None] * (fractions - f_sh)
        nbr_cnt = nbr_cnt + m_sh
    has_nbr = nbr_cnt > 0
    resid = diff_sum / nbr_cnt.clamp_min(1.0)[..., None]
    rho = huber(resid, weights.huber_delta).sum(-1)
    rho = rho * maskf * has_nbr.to(fractions.dtype)
    return weights.lambda_sp * rho.sum() / maskf.sum()


def repulsion(wm_fractions: torch.Tensor, directions: torch.Tensor,
              mask: torch.Tensor, lambda_rep: float) -> torch.Tensor:
    """Direction repulsion: sum over fiber pairs of f_i f_j |d_i . d_j|,
    averaged over the mask."""
    if lambda_rep == 0.0 or directions.shape[-2] < 2:
        return wm_fractions.new_zeros(())
    k = directions.shape[-2]
    per_voxel = wm_fractions.new_zeros(wm_fractions.shape[:-1])
    for i in range(k):
        for j in range(i + 1, k):
            dot = (directions[..., i, :] * directions[..., j, :]).sum(-1)
            per_voxel = per_voxel + wm_fractions[..., i] * wm_fractions[..., j] * dot.abs()
    return lambda_rep * per_voxel[mask].mean()


def minor_fiber_sparsity(wm_fractions: torch.Tensor, mask: torch.Tensor,
                         weights: RegWeights) -> torch.Tensor:
    """L1 shrinkage of fiber fractions below tau; fibers at or above tau are free."""
    if weights.lambda_sparse == 0.0:
        return wm_fractions.new_zeros(())
    minor = wm_fractions * (wm_fractions < weights.tau).to(wm_fractions.dtype)
    return weights.lambda_sparse * minor.sum(-1)[mask].mean()


def orphan_wm(wm_fractions: torch.Tensor, s0: torch.Tensor, mask: torch.Tensor,
              weights: RegWeights) -> torch.Tensor:
    """Suppress WM fractions where S0 is near zero, via a smooth sigmoid gate."""
    if weights.lambda_orphan == 0.0:
        return wm_fractions.new_zeros(())
    gate = torch.sigmoid((ORPHAN_S_LOW - s0) / ORPHAN_GATE_WIDTH)
    return weights.lambda_orphan * (gate * wm_fractions.sum(-1))[mask].mean()


def directional_continuity(directions: torch.Tensor, wm_fractions: torch.Tensor,
                           mask: torch.Tensor, weights: RegWeights) -> torch.Tensor:
    """Neighboring voxels should share fiber directions, fiber matched by index:
    mean over masked neighbor pairs of sum_k f_k f'_k (1 - |d_k . d'_k|)."""
    if weights.lambda_cont == 0.0:
        return wm_fractions.new_zeros(())
    maskf = mask.to(wm_fractions.dtype)
    total = wm_fractions.new_zeros(())
    count = wm_fractions.new_zeros(())
    for off in _neighbor_offsets(weights.neighborhood):
        d_sh = _shift(directions, off)
        f_sh = _shift(wm_fractions * maskf[..., None], off)
        m_sh = _shift(maskf, off)
        dot = (directions * d_sh).sum(-1)  # (X,Y,Z,K)
        pair = (wm_fractions * f_sh * (1.0 - dot.abs())).sum(-1)
        valid = maskf * m_sh
        total = total + (pair * valid).sum()
        count = count + valid.sum()
    if float(count) == 0.0:
        return wm_fractions.new_zeros(())
    return weights.lambda_cont * total / count


def fiber_ordering(wm_fractions: torch.Tensor, mask: torch.Tensor,
                   weights: RegWeights) -> torch.Tensor:
    """Hinge penalty on adjacent fiber fractions that are out of descending order."""
    if weights.lambda_order == 0.0 or wm_fractions.shape[-1] < 2:
        return wm_fractions.new_zeros(())
    gap = (wm_fractions[..., 1:] - wm_fractions[..., :-1]).clamp_min(0.0).sum(-1)
    return weights.lambda_order * gap[mask].mean()


def calibration_penalty(cal: CalibrationParams, log_bias_field: torch.Tensor,
                        weights: RegWeights) -> torch.Tensor:
    """Anchor calibration at identity: L2 on alpha, beta and the bias control
    grid, plus squared-forward-difference smoothness of the upsampled log field."""
    pen = (
        weights.lambda_alpha * (cal.alpha * cal.alpha).sum()
        + weights.lambda_beta * (cal.beta * cal.beta).sum()
        + weights.lambda_bias_l2 * (cal.bias_grid * cal.bias_grid).sum()
    )
    if weights.lambda_bias_tv > 0.0:
        sq_sum = log_bias_field.new_zeros(())
        n = 0
        for axis in range(3):
            if log_bias_field.shape[axis] < 2:
                continue
            d = torch.diff(log_bias_field, dim=axis)
            sq_sum = sq_sum + (d * d).sum()
            n += d.numel()
        if n > 0:
            pen = pen + weights.lambda_bias_tv * sq_sum / n
    return pen


def total_objective(tissue: TissueParams, cal: CalibrationParams,
                    y: torch.Tensor, b: torch.Tensor, g: torch.Tensor,
                    mode: LossMode, weights: RegWeights, consts: ModelConstants,
                    mask: torch.Tensor, *, log_bias: torch.Tensor | None = None,
                    cal_trainable: bool = True):
    """Evaluate the full objective for one patch.

    Returns (total, breakdown): breakdown maps term names to scalar tensors
    and includes 'total'; the named terms sum exactly to the total.
    log_bias overrides the upsampled field (used when calibration is frozen
    and the bias field was precomputed for the whole volume); when
    cal_trainable is false the calibration anchor penalty is skipped.
    """
    ct = constrain(tissue)
    dims = tissue.grid_shape
    if log_bias is None:
        log_bias = upsample_bias_log(cal.bias_grid, dims)
    s = tissue_signal(ct, b, g, consts)
    y_hat = apply_calibration(s, cal, torch.exp(log_bias))

    breakdown: dict[str, torch.Tensor] = {}
    if mode == LossMode.MSE:
        # The optimized term averages over voxels but sums over measurements,
        # so the data term keeps its published weight against the per-voxel
        # regularizer scale. mse_loss itself (and all reporting built on it)
        # stays per voxel-measurement pair.
        breakdown["data"] = mse_loss(y_hat, y, mask) * y.shape[-1]
    elif mode == LossMode.RICIAN_NLL:
        breakdown["data"] = rician_nll(y_hat, y, torch.exp(cal.sigma_log), mask)
    else:
        raise ValueError(f"unknown loss mode {mode}")

    wm_f = ct.wm_fractions
    breakdown["spatial"] = spatial_huber_laplacian(ct.fractions, mask, weights)
    breakdown["repulsion"] = repulsion(wm_f, ct.directions, mask, weights.lambda_rep)
    breakdown["sparsity"] = minor_fiber_sparsity(wm_f, mask, weights)
    breakdown["orphan"] = orphan_wm(wm_f, ct.s0, mask, weights)
    breakdown["continuity"] = directional_continuity(ct.directions, wm_f, mask, weights)
    breakdown["ordering"] = fiber_ordering(wm_f, mask, weights)
    if cal_trainable:
        breakdown["calibration"] = calibration_penalty(cal, log_bias, weights)

    total = sum(breakdown.values())
    if not torch.isfinite(total):
        raise NumericalError("non-finite objective")
    breakdown["total"] = total
    return total, breakdown
