"""Multi-shell acquisition schemes (gradient tables).

A scheme pairs one b-value with one gradient direction per measurement.
Files follow the FSL convention: `.bval` is a single whitespace-separated
row of N numbers, `.bvec` is three rows (x, y, z components).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# Measurements with b below this are treated as unweighted (b0).
B0_THRESHOLD = 50.0

# Fitting needs at least this many measurements; parsing does not.
MIN_MEASUREMENTS_FOR_FIT = 7

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class AcquisitionScheme:
    """Validated gradient table: b-values [s/mm^2], unit directions, b0 flags."""

    b_values: np.ndarray
    directions: np.ndarray
    b0_mask: np.ndarray
    b0_threshold: float = field(default=B0_THRESHOLD)

    @property
    def n_measurements(self) -> int:
        return int(self.b_values.shape[0])

    @property
    def n_b0(self) -> int:
        return int(self.b0_mask.sum())


def make_scheme(b_values, directions, b0_threshold: float = B0_THRESHOLD) -> AcquisitionScheme:
    """Validate raw arrays and build a scheme.

    Non-b0 directions are renormalized to unit length; b0 entries may carry
    the zero vector. Raises DataError on negative b, shape mismatch, or a
    diffusion-weighted entry with a zero-norm direction.
    """
    b = np.asarray(b_values, dtype=np.float64).reshape(-1)
    g = np.asarray(directions, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != 3:
        raise DataError(f"directions must be (N, 3), got {g.shape}")
    if g.shape[0] != b.shape[0]:
        raise DataError(f"{b.shape[0]} b-values but {g.shape[0]} directions")
    if not np.all(np.isfinite(b)) or not np.all(np.isfinite(g)):
        raise DataError("non-finite entry in gradient table")
    if np.any(b < 0):
        raise DataError("negative b-value")

    b0 = b < b0_threshold
    norms = np.linalg.norm(g, axis=1)
    if np.any(~b0 & (norms < 1e-12)):
        idx = int(np.argmax(~b0 & (norms < 1e-12)))
        raise DataError(f"measurement {idx} is diffusion-weighted but has a zero direction")

    g = g.copy()
    # Renormalize only when off by more than the last few bits, so that
    # writing and re-reading a validated scheme is the exact identity.
    fix = ~b0 & (np.abs(norms - 1.0) > 1e-9)
    g[fix] /= norms[fix, None]

    g.setflags(write=False)
    b.setflags(write=False)
    b0.setflags(write=False)
    return AcquisitionScheme(b_values=b, directions=g, b0_mask=b0, b0_threshold=b0_threshold)


def _parse_rows(text: str, what: str) -> list[list[float]]:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        vals = []
        for tok in line.split():
            try:
                vals.append(float(tok))
            except ValueError:
                raise DataError(f"non-numeric token {tok!r} in {what}") from None
        rows.append(vals)
    return rows


def load_scheme(bval_text: str, bvec_text: str) -> AcquisitionScheme:
    """Parse FSL-convention gradient-table text into a validated scheme."""
    bval_rows = _parse_rows(bval_text, "bval")
    if len(bval_rows) != 1:
        raise DataError(f"bval must be one row, got {len(bval_rows)}")
    bvec_rows = _parse_rows(bvec_text, "bvec")
    if len(bvec_rows) != 3:
        raise DataError(f"bvec must be three rows, got {len(bvec_rows)}")
    n = len(bval_rows[0])
    for i, row in enumerate(bvec_rows):
        if len(row) != n:
            raise DataError(f"bvec row {i} has {len(row)} entries, expected {n}")
    directions = np.array(bvec_rows, dtype=np.float64).T
    return make_scheme(bval_rows[0], directions)


def write_scheme(scheme: AcquisitionScheme) -> tuple[str, str]:
    """Render a scheme back to (bval_text, bvec_text), lossless for round trips."""
    bval = " ".join(f"{v:.17g}" for v in scheme.b_values) + "\n"
    bvec = "\n".join(
        " ".join(f"{v:.17g}" for v in scheme.directions[:, ax]) for ax in range(3)
    ) + "\n"
    return bval, bvec


def load_scheme_files(bval_path: str, bvec_path: str) -> AcquisitionScheme:
    for p in (bval_path, bvec_path):
        if not os.path.isfile(p):
            raise DataError(f"gradient table file not found: {p}")
    with open(bval_path) as f:
        bval_text = f.read()
    with open(bvec_path) as f:
        bvec_text = f.read()
    return load_scheme(bval_text, bvec_text)


def write_scheme_files(scheme: AcquisitionScheme, bval_path: str, bvec_path: str) -> None:
    bval_text, bvec_text = write_scheme(scheme)
    with open(bval_path, "w") as f:
        f.write(bval_text)
    with open(bvec_path, "w") as f:
        f.write(bvec_text)


def _pair_energy(p: np.ndarray) -> float:
    # Coulomb energy over points and their antipodes.
    d = p[:, None, :] - p[None, :, :]
    s = p[:, None, :] + p[None, :, :]
    dn = np.linalg.norm(d, axis=-1)
    sn = np.linalg.norm(s, axis=-1)
    iu = np.triu_indices(len(p), k=1)
    return float((1.0 / dn[iu]).sum() + (1.0 / sn[iu]).sum())


def _tangent_forces(p: np.ndarray) -> np.ndarray:
    d = p[:, None, :] - p[None, :, :]
    s = p[:, None, :] + p[None, :, :]
    dn = np.linalg.norm(d, axis=-1)
    sn = np.linalg.norm(s, axis=-1)
    np.fill_diagonal(dn, np.inf)  # no self-repulsion
    f = (d / dn[..., None] ** 3).sum(axis=1) + (s / sn[..., None] ** 3).sum(axis=1)
    # project onto the tangent plane of the sphere
    return f - (f * p).sum(axis=1, keepdims=True) * p


def _disperse_hemisphere(n: int, rng: np.random.Generator, steps: int = 1000) -> np.ndarray:
    """Electrostatic-repulsion relaxation of n points on the upper hemisphere.

    Points repel each other and each other's antipodes, so the resulting set
    is approximately uniform as a set of axes. Deterministic for a fixed rng.
    """
    p = rng.standard_normal((n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p[p[:, 2] < 0] *= -1.0

    step = 0.05
    energy = _pair_energy(p)
    for _ in range(steps):
        f = _tangent_forces(p)
        fmax = np.abs(np.linalg.norm(f, axis=1)).max()
        if fmax == 0.0:
            break
        cand = p + (step / fmax) * f
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        cand[cand[:, 2] < 0] *= -1.0
        cand_energy = _pair_energy(cand)
        if cand_energy < energy:
            p, energy = cand, cand_energy
            step = min(step * 1.2, 0.2)
        else:
            step = max(step * 0.5, 1e-7)
    return p


def synthetic_scheme(shells, dirs_per_shell: int, n_b0: int = 1, seed: int = 0) -> AcquisitionScheme:
    """Build a synthetic multi-shell scheme with near-uniform hemisphere directions.

    Layout: n_b0 unweighted entries first, then each shell's block of
    dirs_per_shell directions. Each shell gets its own relaxed point set.
    """
    shells = list(shells)
    if not shells:
        raise DataError("need at least one shell")
    if dirs_per_shell < 6:
        raise DataError("dirs_per_shell must be at least 6")
    if n_b0 < 0:
        raise DataError("n_b0 must be non-negative")

    rng = np.random.default_rng(seed)
    b_values = [0.0] * n_b0
    directions = [np.zeros(3)] * n_b0
    for b in shells:
        pts = _disperse_hemisphere(dirs_per_shell, rng)
        b_values.extend([float(b)] * dirs_per_shell)
        directions.extend(pts)
    return make_scheme(b_values, np.array(directions))


def shell_partition(scheme: AcquisitionScheme, tol: float = 100.0) -> dict[float, np.ndarray]:
    """Group non-b0 measurement indices into shells by clustering b-values.

    Returns {nominal_b: indices}, nominal_b being the rounded cluster mean.
    Raises DataError if tol <= 0 or two cluster means land closer than 2*tol.
    """
    if tol <= 0:
        raise DataError("tol must be positive")
    idx = np.where(~scheme.b0_mask)[0]
    if idx.size == 0:
        return {}
    order = idx[np.argsort(scheme.b_values[idx], kind="stable")]
    clusters: list[list[int]] = [[int(order[0])]]
    for j in order[1:]:
        cur = clusters[-1]
        if abs(scheme.b_values[j] - np.mean(scheme.b_values[cur])) <= tol:
            cur.append(int(j))
        else:
            clusters.append([int(j)])
    result: dict[float, np.ndarray] = {}
    means = []
    for members in clusters:
        mean = float(np.mean(scheme.b_values[members]))
        nominal = float(round(mean))
        means.append(mean)
        result[nominal] = np.array(sorted(members), dtype=np.intp)
    means.sort()
    for a, b in zip(means, means[1:]):
        if b - a < 2 * tol:
            raise DataError(f"shells at b={a:.1f} and b={b:.1f} are closer than 2*tol")
    return result
