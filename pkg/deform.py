"""
Stationary-velocity-field diffeomorphisms on the periodic 2-D grid.

Maps are stored as displacements from the identity: phi(x) = x + u(x), with
x on pixel centers and coordinates wrapped onto the torus. Channel 0 of every
field moves along rows, channel 1 along columns. Every operation accepts a
single field [2,H,W] or a batch [B,2,H,W].

Direction bookkeeping: warp(T, phi) samples T at phi(x), i.e. the backward
(pull) resampling T o phi. The template-matching terms of both the pairwise
registration energy and the network shape loss are realized this way.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

import gradcore as gc
from gradcore import Tensor
from logger import logger
from validators import GuardError, IntegrityError, ShapeError, validate_grid, validate_steps

FIELD_SIDECAR_VERSION = "CORLD-FIELD v1"
GUARD_LIMIT = 0.5
DEFAULT_STEPS = 6


@dataclass(frozen=True)
class Grid2D:
    height: int
    width: int

    def __post_init__(self):
        validate_grid(self.height, self.width)

    @classmethod
    def of(cls, t: Tensor) -> "Grid2D":
        return cls(int(t.shape[-2]), int(t.shape[-1]))


@dataclass
class VelocityField:
    grid: Grid2D
    values: Tensor

    def __post_init__(self):
        _check_field(self.grid, self.values, "VelocityField")

    def max_magnitude(self) -> float:
        return max_magnitude(self.values.data)


@dataclass
class DeformationField:
    grid: Grid2D
    displacement: Tensor

    def __post_init__(self):
        _check_field(self.grid, self.displacement, "DeformationField")


def _check_field(grid: Grid2D, t: Tensor, what: str) -> None:
    if t.ndim not in (3, 4) or t.shape[-3] != 2 or (t.shape[-2], t.shape[-1]) != (grid.height, grid.width):
        raise ShapeError(f"{what}: expected [2,{grid.height},{grid.width}] (optionally batched), got {t.shape}")


def max_magnitude(values: np.ndarray) -> float:
    """Largest per-pixel vector length of a [..,2,H,W] field"""
    return float(np.sqrt(values[..., 0, :, :] ** 2 + values[..., 1, :, :] ** 2).max())


def _as_batch(t: Tensor) -> Tensor:
    return gc.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def _like(t: Tensor, ref_ndim: int) -> Tensor:
    return gc.reshape(t, t.shape[1:]) if ref_ndim == 3 else t


def identity_grid(grid: Grid2D) -> DeformationField:
    """phi_0 = x"""
    return DeformationField(grid, gc.zeros((2, grid.height, grid.width)))


def compose(phi: DeformationField, psi: DeformationField) -> DeformationField:
    """(phi o psi)(x) = phi(psi(x)) via bilinear interpolation of phi's displacement"""
    if phi.grid != psi.grid or phi.displacement.shape != psi.displacement.shape:
        raise ShapeError(f"compose: grid mismatch {phi.displacement.shape} vs {psi.displacement.shape}")
    u_psi = _as_batch(psi.displacement)
    moved = gc.grid_sample(_as_batch(phi.displacement), u_psi)
    return DeformationField(psi.grid, _like(gc.add(u_psi, moved), psi.displacement.ndim))


def exp_map(v: VelocityField, steps: int = DEFAULT_STEPS) -> DeformationField:
    """Time-1 flow of a stationary velocity by scaling and squaring"""
    validate_steps(steps)
    vmax = v.max_magnitude()
    if vmax / 2 ** steps >= GUARD_LIMIT:
        raise GuardError(
            f"exp_map guard violated: max|v|={vmax:.4g} px with steps={steps} "
            f"gives {vmax / 2 ** steps:.4g} px >= {GUARD_LIMIT} per step"
        )
    u = gc.scalar_mul(_as_batch(v.values), 1.0 / 2 ** steps)
    for _ in range(steps):
        u = gc.add(u, gc.grid_sample(u, u))
    return DeformationField(v.grid, _like(u, v.values.ndim))


def warp(image: Tensor, phi: DeformationField) -> Tensor:
    """Pull image through phi: output(x) = image(phi(x)), periodic bilinear"""
    disp = phi.displacement
    if image.ndim != disp.ndim or image.shape[-2:] != disp.shape[-2:] or (
        image.ndim == 4 and image.shape[0] != disp.shape[0]
    ):
        raise ShapeError(f"warp: image {image.shape} does not match field {disp.shape}")
    return _like(gc.grid_sample(_as_batch(image), _as_batch(disp)), image.ndim)


def _periodic_partials(values: Tensor):
    v = _as_batch(values)
    d_rows = gc.scalar_mul(gc.sub(gc.roll(v, -1, axis=2), gc.roll(v, 1, axis=2)), 0.5)
    d_cols = gc.scalar_mul(gc.sub(gc.roll(v, -1, axis=3), gc.roll(v, 1, axis=3)), 0.5)
    return d_rows, d_cols


def spatial_grad_norm(v: VelocityField) -> Tensor:
    """Mean of squared periodic central-difference partials of both channels"""
    d_rows, d_cols = _periodic_partials(v.values)
    return gc.scalar_mul(gc.add(gc.mean(gc.square(d_rows)), gc.mean(gc.square(d_cols))), 0.5)


def jacobian_det(phi: DeformationField) -> Tensor:
    """Determinant of the central-difference Jacobian of phi at every grid point"""
    u = phi.displacement.data

    def partial(a: np.ndarray, axis: int) -> np.ndarray:
        return 0.5 * (np.roll(a, -1, axis=axis) - np.roll(a, 1, axis=axis))

    ur, uc = u[..., 0, :, :], u[..., 1, :, :]
    row_axis, col_axis = ur.ndim - 2, ur.ndim - 1
    det = (1 + partial(ur, row_axis)) * (1 + partial(uc, col_axis)) - partial(ur, col_axis) * partial(uc, row_axis)
    return Tensor(det.astype(u.dtype))


def random_smooth_velocity(grid: Grid2D, amplitude: float, rng: np.random.Generator,
                           sigma: float = 2.0, batch: Optional[int] = None) -> VelocityField:
    """White noise smoothed by a truncated periodic Gaussian, scaled to max|v| = amplitude"""
    shape = (2, grid.height, grid.width) if batch is None else (batch, 2, grid.height, grid.width)
    noise = rng.standard_normal(shape)
    spatial = (0.0,) * (len(shape) - 2) + (sigma, sigma)
    smooth = gaussian_filter(noise, sigma=spatial, mode="wrap", truncate=3.0)
    if batch is None:
        peak = max_magnitude(smooth)
        smooth = smooth * (amplitude / peak) if peak > 0 else np.zeros(shape)
    else:
        for b in range(batch):
            peak = max_magnitude(smooth[b])
            smooth[b] = smooth[b] * (amplitude / peak) if peak > 0 else 0.0
    return VelocityField(grid, gc.tensor(smooth))


def save_field(path, values: Tensor) -> None:
    """Write a [2,H,W] field as a tensor container plus a sidecar line"""
    from storage import save_tensor

    if values.ndim != 3 or values.shape[0] != 2:
        raise ShapeError(f"save_field: expected [2,H,W], got {values.shape}")
    path = Path(path)
    save_tensor(path, values.data)
    h, w = values.shape[1:]
    path.with_suffix(path.suffix + ".grid").write_text(
        f"{FIELD_SIDECAR_VERSION} {h} {w} periodic-pixel-centers\n", encoding="utf-8"
    )
    logger.debug(f"Saved field {h}x{w} to {path}")


def load_field(path) -> VelocityField:
    from storage import load_tensor

    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".grid").read_text(encoding="utf-8").split()
    if " ".join(sidecar[:2]) != FIELD_SIDECAR_VERSION:
        raise IntegrityError(f"{path}: unsupported field sidecar {' '.join(sidecar[:2])!r}")
    grid = Grid2D(int(sidecar[2]), int(sidecar[3]))
    return VelocityField(grid, gc.tensor(load_tensor(path)))
