"""Synthetic crossing-fiber benchmark with known ground truth.

Each benchmark voxel holds one or two axially symmetric diffusion tensors
(eigenvalues 1.7/0.3/0.3 x 1e-3 mm^2/s by default, so the radial value is
deliberately below the fitter's zeppelin D_perp). Crossing voxels use two
equal-fraction fibers separated by an exact angle at a random orientation;
Rician noise at a configurable SNR and an optional shared per-measurement
gain perturbation complete the corruption chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionScheme
from .errors import DataError

DEFAULT_ANGLES = tuple(range(15, 91, 5))  # 16 crossing angles
DEFAULT_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)


@dataclass
class PhantomSpec:
    angles_deg: tuple = DEFAULT_ANGLES
    voxels_per_angle: int = 200
    include_single_fiber: bool = True
    snr: float = 30.0
    eigenvalues: tuple = DEFAULT_EIGENVALUES
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if not self.angles_deg:
            raise ValueError("need at least one crossing angle")
        for a in self.angles_deg:
            if not (0.0 < a <= 90.0):
                raise ValueError(f"crossing angle {a} outside (0, 90]")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        e1, e2, e3 = self.eigenvalues
        if not (e1 >= e2 >= e3 > 0):
            raise ValueError("eigenvalues must be positive and descending")
        if e2 != e3:
            raise ValueError("tensors must be axially symmetric (e2 == e3)")
        if self.voxels_per_angle < 1:
            raise ValueError("voxels_per_angle must be >= 1")
        return self

    @property
    def n_voxels(self) -> int:
        n = len(self.angles_deg) * self.voxels_per_angle
        if self.include_single_fiber:
            n += self.voxels_per_angle
        return n


@dataclass
class GroundTruth:
    """Per-voxel true fibers plus volume-level noise/gain truth.

    angles_deg[i] is None for single-fiber control voxels.
    """

    directions: list
    fractions: list
    angles_deg: list
    sigma: float
    gains: np.ndarray | None = None
    grid_shape: tuple = field(default=None)

    @property
    def n_voxels(self) -> int:
        return len(self.directions)


def multi_tensor_signal(directions, fractions, eigenvalues, scheme: AcquisitionScheme) -> np.ndarray:
    """Noise-free S0=1 signal of a mixture of axially symmetric tensors.

    S_n = sum_i f_i exp(-b_n (e_rad + (e_ax - e_rad) (g_n . d_i)^2)).
    """
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    f = np.asarray(fractions, dtype=np.float64).reshape(-1)
    e_ax, e_rad = float(eigenvalues[0]), float(eigenvalues[1])
    if len(eigenvalues) > 2 and eigenvalues[1] != eigenvalues[2]:
        raise ValueError("tensors must be axially symmetric (e2 == e3)")
    cos = scheme.directions @ d.T  # (N, M)
    adc = e_rad + (e_ax - e_rad) * cos * cos
    att = np.exp(-scheme.b_values[:, None] * adc)
    return att @ f


def add_rician_noise(clean: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of clean-plus-complex-Gaussian noise, sigma = 1/snr."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    sigma = 1.0 / snr
    e1 = rng.normal(0.0, sigma, size=clean.shape)
    e2 = rng.normal(0.0, sigma, size=clean.shape)
    return np.sqrt((clean + e1) ** 2 + e2 ** 2)


def gain_perturb(data: np.ndarray, sigma_g: float, rng: np.random.Generator):
    """Scale every voxel's measurement n by a shared gain exp(zeta_n),
    zeta_n ~ N(0, sigma_g^2). Returns (perturbed, gains)."""
    if sigma_g < 0:
        raise ValueError("sigma_g must be >= 0")
    n = data.shape[-1]
    gains = np.exp(rng.normal(0.0, sigma_g, size=n))
    return data * gains, gains


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _perpendicular_unit(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        v = v - (v @ d) * d
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _rotate(v: np.ndarray, axis: np.ndarray, angle_rad: float) -> np.ndarray:
    # Rodrigues rotation of v about a unit axis.
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1.0 - c)


def build_benchmark(spec: PhantomSpec, scheme: AcquisitionScheme):
    """Generate the benchmark volume and its ground truth.

    Voxels are laid out along x in a (V, 1, 1) grid with an all-true mask:
    crossing voxels grouped by angle in the listed order, then the
    single-fiber controls. Deterministic for a fixed seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dirs_per_voxel: list[np.ndarray] = []
    fracs_per_voxel: list[np.ndarray] = []
    angles: list[float | None] = []

    for theta in spec.angles_deg:
        rad = np.deg2rad(theta)
        for _ in range(spec.voxels_per_angle):
            d1 = _random_unit(rng)
            axis = _perpendicular_unit(d1, rng)
            d2 = _rotate(d1, axis, rad)
            dirs_per_voxel.append(np.stack([d1, d2]))
            fracs_per_voxel.append(np.array([0.5, 0.5]))
            angles.append(float(theta))
    if spec.include_single_fiber:
        for _ in range(spec.voxels_per_angle):
            dirs_per_voxel.append(_random_unit(rng)[None, :])
            fracs_per_voxel.append(np.array([1.0]))
            angles.append(None)

    n_vox = len(dirs_per_voxel)
    clean = np.empty((n_vox, scheme.n_measurements))
    for i, (d, f) in enumerate(zip(dirs_per_voxel, fracs_per_voxel)):
        clean[i] = multi_tensor_signal(d, f, spec.eigenvalues, scheme)
    noisy = add_rician_noise(clean, spec.snr, rng)

    data = noisy.reshape(n_vox, 1, 1, scheme.n_measurements)
    truth = GroundTruth(
        directions=dirs_per_voxel,
        fractions=fracs_per_voxel,
        angles_deg=angles,
        sigma=1.0 / spec.snr,
        gains=None,
        grid_shape=(n_vox, 1, 1),
    )
    return data, truth


def write_ground_truth(truth: GroundTruth, path: str) -> None:
    payload = {
        "sigma": truth.sigma,
        "gains": None if truth.gains is None else [float(v) for v in truth.gains],
        "grid_shape": list(truth.grid_shape),
        "angles_deg": truth.angles_deg,
        "directions": [np.asarray(d).tolist() for d in truth.directions],
        "fractions": [np.asarray(f).tolist() for f in truth.fractions],
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def read_ground_truth(path: str) -> GroundTruth:
    with open(path) as f:
        payload = json.load(f)
    try:
        return GroundTruth(
            directions=[np.asarray(d, dtype=np.float64) for d in payload["directions"]],
            fractions=[np.asarray(f, dtype=np.float64) for f in payload["fractions"]],
            angles_deg=payload["angles_deg"],
            sigma=float(payload["sigma"]),
            gains=None if payload["gains"] is None else np.asarray(payload["gains"]),
            grid_shape=tuple(payload["grid_shape"]),
        )
    except KeyError as e:
        raise DataError(f"ground-truth sidecar missing key {e}") from None
