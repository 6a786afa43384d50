"""Top-down multi-zoom patch extraction.

A gaze is a relative center ``(x, y)`` in the unit square plus a zoom level
``z >= 0``. The corresponding crop is a square of side ``min(H, W) / 2**z``
centered at ``(x*W, y*H)`` in pixel space, resampled bilinearly to a fixed
``P x P`` output. Because the crop side is defined relative to the image, the
same gaze covers the same portion of the image at any resolution — compute is
set by the glimpse budget, not the pixel count.

Sampling convention (shared by the fast path and the brute-force oracle, by
construction of the math rather than shared code): pixel centers sit at
integer coordinates, output pixel ``j`` samples the source at

    s(j) = (j + 0.5 - P/2) * (C/P) + c_px - 0.5

where ``c_px`` is the gaze center in pixel units. Source samples outside
``[0, H) x [0, W)`` contribute exactly 0 (the crop is padded with black).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GazeCenter",
    "ZoomSchedule",
    "PatchSet",
    "crop_size",
    "zoom_schedule",
    "extract_patch",
    "extract_multizoom",
    "extract_multizoom_batch",
    "extract_vit_grid",
    "bilinear_oracle",
    "resize_bilinear",
]


@dataclass(frozen=True)
class GazeCenter:
    """Relative gaze coordinates, clamped into the unit square."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(min(1.0, max(0.0, self.x))))
        object.__setattr__(self, "y", float(min(1.0, max(0.0, self.y))))


@dataclass(frozen=True)
class ZoomSchedule:
    """Evenly spaced zoom levels from 0 to max_z inclusive."""

    count: int
    max_z: float
    zs: np.ndarray = field(repr=False)

    @property
    def z_norm(self) -> np.ndarray:
        if self.max_z == 0:
            return np.zeros_like(self.zs)
        return self.zs / self.max_z


@dataclass
class PatchSet:
    """One glimpse: M patches sharing a center across the zoom schedule."""

    patches: np.ndarray  # (M, P, P, 3) in [0, 1]
    center: GazeCenter
    schedule: ZoomSchedule

    @property
    def coords(self) -> np.ndarray:
        """(M, 3) rows of (x, y, z_norm), the positional-embedding input."""
        m = self.schedule.count
        out = np.empty((m, 3))
        out[:, 0] = self.center.x
        out[:, 1] = self.center.y
        out[:, 2] = self.schedule.z_norm
        return out


def crop_size(height: int, width: int, z: float) -> float:
    """Side of the square crop at zoom z: min(H, W) / 2**z."""
    if height < 1 or width < 1:
        raise ValueError(f"image dimensions must be >= 1, got {height}x{width}")
    if z < 0:
        raise ValueError(f"zoom level must be >= 0, got {z}")
    return min(height, width) / 2.0 ** z


def zoom_schedule(count: int, max_z: float) -> ZoomSchedule:
    if count < 1:
        raise ValueError(f"patch count must be >= 1, got {count}")
    if max_z < 0:
        raise ValueError(f"max_z must be >= 0, got {max_z}")
    zs = np.linspace(0.0, max_z, count) if count > 1 else np.zeros(1)
    return ZoomSchedule(count=count, max_z=float(max_z), zs=zs)


def _check_image(image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")


def _sample_patches(images: np.ndarray, centers: np.ndarray, zs: np.ndarray,
                    patch: int) -> np.ndarray:
    """Core sampler: (B,H,W,3) images, (B,2) centers, (M,) zooms -> (B,M,P,P,3).

    Fully vectorized; all arithmetic is elementwise, so batching over images
    or zooms is bit-identical to a python loop over the same calls.
    """
    b, h, w, _ = images.shape
    m = zs.shape[0]
    p = patch
    c = np.minimum(h, w) / 2.0 ** np.asarray(zs, dtype=np.float64)  # (M,)
    step = c / p  # source pixels per output pixel

    # Source coordinates per (batch, zoom, output index).
    j = np.arange(p, dtype=np.float64) + 0.5 - p / 2.0  # (P,)
    cx = centers[:, 0].astype(np.float64) * w  # (B,)
    cy = centers[:, 1].astype(np.float64) * h
    sx = j[None, None, :] * step[None, :, None] + cx[:, None, None] - 0.5  # (B,M,P)
    sy = j[None, None, :] * step[None, :, None] + cy[:, None, None] - 0.5

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def gather(yi, xi):
        # (B,M,P) y rows x (B,M,P) x cols -> (B,M,P,P,3); invalid taps are 0
        valid = ((yi[:, :, :, None] >= 0) & (yi[:, :, :, None] < h)
                 & (xi[:, :, None, :] >= 0) & (xi[:, :, None, :] < w))
        ys = np.clip(yi, 0, h - 1)
        xs = np.clip(xi, 0, w - 1)
        bidx = np.arange(b)[:, None, None, None]
        vals = images[bidx, ys[:, :, :, None], xs[:, :, None, :], :]
        return vals * valid[..., None]

    wy0 = (1.0 - fy)[:, :, :, None, None]
    wy1 = fy[:, :, :, None, None]
    wx0 = (1.0 - fx)[:, :, None, :, None]
    wx1 = fx[:, :, None, :, None]
    out = (gather(y0, x0) * (wy0 * wx0)
           + gather(y0, x0 + 1) * (wy0 * wx1)
           + gather(y0 + 1, x0) * (wy1 * wx0)
           + gather(y0 + 1, x0 + 1) * (wy1 * wx1))
    return out.astype(images.dtype)


def extract_patch(image: np.ndarray, center: GazeCenter, z: float, patch: int) -> np.ndarray:
    """Extract one gaze-relative crop, resampled to (patch, patch, 3)."""
    _check_image(image)
    if patch < 1:
        raise ValueError(f"patch side must be >= 1, got {patch}")
    crop_size(image.shape[0], image.shape[1], z)  # validates z
    centers = np.array([[center.x, center.y]])
    return _sample_patches(image[None], centers, np.array([float(z)]), patch)[0, 0]


def extract_multizoom(image: np.ndarray, center: GazeCenter, patch: int,
                      count: int, max_z: float) -> PatchSet:
    """Extract the full zoom pyramid for one gaze center."""
    _check_image(image)
    sched = zoom_schedule(count, max_z)
    centers = np.array([[center.x, center.y]])
    patches = _sample_patches(image[None], centers, sched.zs, patch)[0]
    return PatchSet(patches=patches, center=center, schedule=sched)


def extract_multizoom_batch(images: np.ndarray, centers: np.ndarray, patch: int,
                            count: int, max_z: float) -> np.ndarray:
    """Batched pyramid extraction for same-sized images: -> (B, M, P, P, 3)."""
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (B,H,W,3) images, got shape {images.shape}")
    sched = zoom_schedule(count, max_z)
    return _sample_patches(images, np.asarray(centers), sched.zs, patch)


def extract_vit_grid(image: np.ndarray, patch: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Non-overlapping raster-order P x P tiles with their (row, col) positions."""
    _check_image(image)
    h, w, _ = image.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(
            f"image {h}x{w} not divisible into {patch}x{patch} tiles; resize first"
        )
    tiles = []
    for r in range(h // patch):
        for c in range(w // patch):
            tile = image[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch]
            tiles.append((tile, (r, c)))
    return tiles


def grid_coords(height: int, width: int, patch: int, max_z: float) -> np.ndarray:
    """(n_tiles, 3) rows of (x, y, z_norm) for the fixed-grid tiling.

    Grid tiles all share one zoom: the level whose crop side equals the tile,
    normalized by max_z and clipped into [0, 1].
    """
    z = np.log2(min(height, width) / patch) if patch < min(height, width) else 0.0
    z_norm = min(max(z / max_z, 0.0), 1.0) if max_z > 0 else 0.0
    rows = []
    for r in range(height // patch):
        for c in range(width // patch):
            rows.append([(c + 0.5) * patch / width, (r + 0.5) * patch / height, z_norm])
    return np.array(rows)


def bilinear_oracle(image: np.ndarray, center: GazeCenter, z: float, patch: int) -> np.ndarray:
    """Reference extractor: per-output-pixel loop, direct coordinate math.

    Kept deliberately naive and code-independent from the fast path; tests
    compare the two.
    """
    _check_image(image)
    h, w, _ = image.shape
    c = crop_size(h, w, z)
    step = c / patch
    cx = center.x * w
    cy = center.y * h
    out = np.zeros((patch, patch, 3))
    for jy in range(patch):
        sy = (jy + 0.5 - patch / 2.0) * step + cy - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        for jx in range(patch):
            sx = (jx + 0.5 - patch / 2.0) * step + cx - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            acc = np.zeros(3)
            for dy, wy in ((0, 1.0 - fy), (1, fy)):
                for dx, wx in ((0, 1.0 - fx), (1, fx)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += wy * wx * image[yy, xx]
            out[jy, jx] = acc
    return out.astype(image.dtype)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resize (half-pixel convention, edges clamped)."""
    _check_image(image)
    h, w, _ = image.shape
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)
