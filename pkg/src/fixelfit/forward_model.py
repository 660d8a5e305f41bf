"""Differentiable forward model: raw parameters -> predicted signals.

Per voxel, the tissue signal is a fraction-weighted mixture of three
mono-exponential isotropic compartments (CSF, GM, restricted) and up to K
stick-and-zeppelin white-matter fibers. A volume-level calibration chain,
yhat_n(x) = exp(alpha_n) * B(x) * S_n(x) + beta_n, with B an exponentiated
trilinearly-upsampled low-resolution grid, maps tissue signal to the
predicted measurement. Everything is written in torch so gradients flow
from the data term back to every raw parameter.

Raw parameters live in unconstrained space: S0 via softplus, fractions via
softmax (channel order [csf, gm, wm_1..wm_K, restricted]), directions via
L2 normalization, f_intra via sigmoid. Downstream code relies on that
channel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .acquisition import AcquisitionScheme
from .errors import NumericalError

# Guard for direction normalization; raw directions are never initialized at 0.
_DIR_NORM_FLOOR = 1e-8

BIAS_GRID_SIZE = 8

# Inverse softplus of 1.0, the S0 init on b0-normalized data.
S0_RAW_FOR_UNIT_SIGNAL = float(np.log(np.expm1(1.0)))


@dataclass
class ModelConstants:
    """Fixed compartment diffusivities in mm^2/s."""

    d_csf: float = 3.0e-3
    d_gm: float = 0.9e-3
    d_res: float = 0.2e-3
    d_par: float = 1.7e-3
    d_perp: float = 0.4e-3

    def validate(self) -> "ModelConstants":
        vals = (self.d_csf, self.d_gm, self.d_res, self.d_par, self.d_perp)
        if any(v <= 0 for v in vals):
            raise ValueError("diffusivities must be strictly positive")
        if self.d_par <= self.d_perp:
            raise ValueError("d_par must exceed d_perp")
        return self


@dataclass
class TissueParams:
    """Raw (unconstrained) per-voxel tissue parameters over a grid.

    Shapes for a grid (nx, ny, nz) with K fibers:
      s0_raw (nx,ny,nz), fraction_logits (nx,ny,nz,K+3),
      dir_raw (nx,ny,nz,K,3), f_intra_raw (nx,ny,nz).
    """

    s0_raw: torch.Tensor
    fraction_logits: torch.Tensor
    dir_raw: torch.Tensor
    f_intra_raw: torch.Tensor

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.s0_raw.shape)  # type: ignore[return-value]

    @property
    def n_fibers(self) -> int:
        return int(self.dir_raw.shape[-2])

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "s0_raw": self.s0_raw,
            "fraction_logits": self.fraction_logits,
            "dir_raw": self.dir_raw,
            "f_intra_raw": self.f_intra_raw,
        }

    def detached(self) -> "TissueParams":
        return TissueParams(**{k: v.detach().clone() for k, v in self.tensors().items()})


@dataclass
class CalibrationParams:
    """Volume-level nuisance parameters.

    bias_grid: (G,G,G) log-domain control points of the bias field.
    alpha, beta: per-measurement log-scale and offset, shape (N,).
    sigma_log: scalar log noise level; sigma = exp(sigma_log).
    All zeros = identity transform.
    """

    bias_grid: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    sigma_log: torch.Tensor

    @classmethod
    def identity(cls, n_measurements: int, grid_size: int = BIAS_GRID_SIZE,
                 sigma: float = 0.05, dtype=torch.float64) -> "CalibrationParams":
        return cls(
            bias_grid=torch.zeros((grid_size,) * 3, dtype=dtype),
            alpha=torch.zeros(n_measurements, dtype=dtype),
            beta=torch.zeros(n_measurements, dtype=dtype),
            sigma_log=torch.tensor(float(np.log(sigma)), dtype=dtype),
        )

    @property
    def sigma(self) -> float:
        return float(torch.exp(self.sigma_log))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "bias_grid": self.bias_grid,
            "alpha": self.alpha,
            "beta": self.beta,
            "sigma_log": self.sigma_log,
        }

    def detached(self) -> "CalibrationParams":
        return CalibrationParams(**{k: v.detach().clone() for k, v in self.tensors().items()})


@dataclass
class ConstrainedTissue:
    """Constrained view of TissueParams: S0 > 0, fractions on the simplex,
    unit fiber directions, f_intra in (0, 1)."""

    s0: torch.Tensor
    fractions: torch.Tensor
    directions: torch.Tensor
    f_intra: torch.Tensor

    @property
    def n_fibers(self) -> int:
        return int(self.directions.shape[-2])

    @property
    def wm_fractions(self) -> torch.Tensor:
        return self.fractions[..., 2:2 + self.n_fibers]


def constrain(params: TissueParams) -> ConstrainedTissue:
    """Map raw parameters to the constrained view. Differentiable everywhere."""
    for name, t in params.tensors().items():
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite value in {name}")
    norm = params.dir_raw.norm(dim=-1, keepdim=True).clamp_min(_DIR_NORM_FLOOR)
    return ConstrainedTissue(
        s0=F.softplus(params.s0_raw),
        fractions=torch.softmax(params.fraction_logits, dim=-1),
        directions=params.dir_raw / norm,
        f_intra=torch.sigmoid(params.f_intra_raw),
    )


def scheme_tensors(scheme: AcquisitionScheme, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Scheme as torch tensors (b_eff, g). b_eff is zeroed at b0 entries so
    the predicted signal there is exactly S0."""
    b = torch.from_numpy(scheme.b_values.copy()).to(dtype)
    b_eff = torch.where(torch.from_numpy(scheme.b0_mask.copy()), torch.zeros_like(b), b)
    g = torch.from_numpy(scheme.directions.copy()).to(dtype)
    return b_eff, g


def wm_attenuation(direction: torch.Tensor, f_intra: torch.Tensor,
                   b: torch.Tensor, g: torch.Tensor,
                   consts: ModelConstants) -> torch.Tensor:
    """Stick-and-zeppelin attenuation for one fiber population.

    direction (..., 3), f_intra broadcastable to (...), b (N,), g (N, 3).
    Returns (..., N): f_intra * exp(-b D_par cos^2) +
    (1 - f_intra) * exp(-b (D_par cos^2 + D_perp sin^2)).
    """
    cos = (direction.unsqueeze(-2) * g).sum(-1)  # (..., N)
    cos2 = cos * cos
    stick = torch.exp(-b * consts.d_par * cos2)
    zeppelin = torch.exp(-b * (consts.d_par * cos2 + consts.d_perp * (1.0 - cos2)))
    fi = torch.as_tensor(f_intra, dtype=direction.dtype)
    while fi.dim() < cos.dim():
        fi = fi.unsqueeze(-1)
    return fi * stick + (1.0 - fi) * zeppelin


def tissue_signal(ct: ConstrainedTissue, b: torch.Tensor, g: torch.Tensor,
                  consts: ModelConstants) -> torch.Tensor:
    """Mixture signal (..., N) for constrained parameters over a scheme."""
    e_csf = torch.exp(-b * consts.d_csf)
    e_gm = torch.exp(-b * consts.d_gm)
    e_res = torch.exp(-b * consts.d_res)

    f = ct.fractions
    iso = f[..., 0:1] * e_csf + f[..., 1:2] * e_gm + f[..., -1:] * e_res

    e_wm = wm_attenuation(ct.directions, ct.f_intra.unsqueeze(-1), b, g, consts)  # (..., K, N)
    wm = (ct.wm_fractions.unsqueeze(-1) * e_wm).sum(-2)
    s = ct.s0.unsqueeze(-1) * (iso + wm)
    # all attenuations are 1 at b = 0, so pin those entries to S0 exactly
    # rather than S0 * (softmax sum) with its last-bit roundoff
    return torch.where(b == 0, ct.s0.unsqueeze(-1), s)


def _axis_coords(n: int, grid_size: int, dtype, device) -> torch.Tensor:
    # Corner alignment: volume corners map to grid corners. A singleton axis
    # samples the grid center.
    if n == 1:
        return torch.full((1,), (grid_size - 1) / 2.0, dtype=dtype, device=device)
    return torch.linspace(0.0, grid_size - 1, n, dtype=dtype, device=device)


def upsample_bias_log(bias_grid: torch.Tensor, dims: tuple[int, int, int]) -> torch.Tensor:
    """Trilinearly upsample the log-domain control grid to the volume shape."""
    gx, gy, gz = bias_grid.shape
    out = bias_grid
    for axis, (n, gsize) in enumerate(zip(dims, (gx, gy, gz))):
        t = _axis_coords(n, gsize, bias_grid.dtype, bias_grid.device)
        i0 = t.floor().clamp(0, gsize - 2).long()
        w = t - i0.to(t.dtype)
        lo = out.index_select(axis, i0)
        hi = out.index_select(axis, i0 + 1)
        shape = [1, 1, 1]
        shape[axis] = n
        w = w.reshape(shape)
        out = lo * (1.0 - w) + hi * w
    return out


def upsample_bias(bias_grid: torch.Tensor, dims: tuple[int, int, int]) -> torch.Tensor:
    """Positive bias field B = exp(upsampled log grid) over the volume."""
    return torch.exp(upsample_bias_log(bias_grid, dims))


def apply_calibration(signal: torch.Tensor, cal: CalibrationParams,
                      bias_at_voxel: torch.Tensor) -> torch.Tensor:
    """Calibration chain: yhat_n = exp(alpha_n) * B(x) * S_n(x) + beta_n."""
    scale = torch.exp(cal.alpha)
    return scale * bias_at_voxel.unsqueeze(-1) * signal + cal.beta


def predict_volume(tissue: TissueParams, cal: CalibrationParams,
                   scheme: AcquisitionScheme, consts: ModelConstants,
                   mask: torch.Tensor) -> torch.Tensor:
    """Predicted volume (nx,ny,nz,N); voxels outside the mask emit zeros."""
    b, g = scheme_tensors(scheme, dtype=tissue.s0_raw.dtype)
    ct = constrain(tissue)
    s = tissue_signal(ct, b, g, consts)
    bias = upsample_bias(cal.bias_grid, tissue.grid_shape)
    y_hat = apply_calibration(s, cal, bias)
    return y_hat * mask.to(y_hat.dtype).unsqueeze(-1)


def predict_from_maps(maps, scheme: AcquisitionScheme,
                      consts: ModelConstants | None = None) -> np.ndarray:
    """Predicted signals from constrained fitted fields (VolumeFit or
    ParamMaps: s0, fractions, directions, f_intra, alpha, beta, bias_field)."""
    consts = consts or ModelConstants()
    dt = torch.float64
    ct = ConstrainedTissue(
        s0=torch.as_tensor(np.asarray(maps.s0), dtype=dt),
        fractions=torch.as_tensor(np.asarray(maps.fractions), dtype=dt),
        directions=torch.as_tensor(np.asarray(maps.directions), dtype=dt),
        f_intra=torch.as_tensor(np.asarray(maps.f_intra), dtype=dt),
    )
    b, g = scheme_tensors(scheme, dt)
    with torch.no_grad():
        s = tissue_signal(ct, b, g, consts)
        scale = torch.exp(torch.as_tensor(np.asarray(maps.alpha), dtype=dt))
        beta = torch.as_tensor(np.asarray(maps.beta), dtype=dt)
        bias = torch.as_tensor(np.asarray(maps.bias_field), dtype=dt)
        y_hat = scale * bias.unsqueeze(-1) * s + beta
    return y_hat.numpy()
