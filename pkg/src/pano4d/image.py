"""Panorama / perspective pixel containers and the projection operators between them.

All sampling is bilinear.  Equirectangular reads wrap horizontally across the
seam and clamp vertically at the poles; perspective reads clamp at the image
border.  The heavy paths build ``scipy.sparse`` operators once so that they
can be reused across frames, channels and optimizer iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import scipy.sparse as sp
from PIL import Image

from .geom import Camera, dir_to_equirect, dir_to_pixel, equirect_directions, equirect_pixel_uv

POLE_V = 0.999


def _as_hwc(data) -> np.ndarray:
    a = np.asarray(data)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class EquirectImage:
    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        a = _as_hwc(self.data)
        if a.shape[1] != 2 * a.shape[0]:
            raise ValueError(f"panorama must be 2:1, got {a.shape[1]}x{a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ValueError("panorama contains non-finite values")
        object.__setattr__(self, "data", a)

    height = property(lambda self: self.data.shape[0])
    width = property(lambda self: self.data.shape[1])
    channels = property(lambda self: self.data.shape[2])


@dataclass(frozen=True, eq=False)
class PerspectiveImage:
    """A perspective view; ``camera`` and ``frame`` record where it came from."""

    data: np.ndarray
    camera: Camera | None = None
    frame: int | None = None

    def __post_init__(self):
        a = _as_hwc(self.data)
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", a)

    height = property(lambda self: self.data.shape[0])
    width = property(lambda self: self.data.shape[1])
    channels = property(lambda self: self.data.shape[2])


@dataclass(frozen=True, eq=False)
class PanoVideo:
    frames: list

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a video needs at least one frame")
        shape = self.frames[0].data.shape
        if any(f.data.shape != shape for f in self.frames):
            raise ValueError("all frames must share dimensions")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k) -> EquirectImage:
        return self.frames[k]

    def stack(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


# ---------------------------------------------------------------------------
# bilinear weights

def equirect_bilinear(height: int, width: int, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat texel indices and weights ``(..., 4)`` for bilinear reads at directions ``d``."""
    u, v = dir_to_equirect(d)
    col = (u + 1.0) * 0.5 * width - 0.5
    row = (1.0 - v) * 0.5 * height - 0.5
    c0 = np.floor(col)
    fc = col - c0
    c0 = c0.astype(np.int64)
    row = np.clip(row, 0.0, height - 1.0)
    r0 = np.minimum(np.floor(row).astype(np.int64), max(height - 2, 0))
    fr = row - r0
    r1 = np.minimum(r0 + 1, height - 1)
    c0w = np.mod(c0, width)
    c1w = np.mod(c0 + 1, width)
    idx = np.stack([r0 * width + c0w, r0 * width + c1w, r1 * width + c0w, r1 * width + c1w], axis=-1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    return idx, w


def plane_bilinear(res_h: int, res_w: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices/weights for bilinear reads of a perspective raster at plane coords, edge-clamped."""
    col = np.clip((np.asarray(x) + 1.0) * 0.5 * res_w - 0.5, 0.0, res_w - 1.0)
    row = np.clip((1.0 - np.asarray(y)) * 0.5 * res_h - 0.5, 0.0, res_h - 1.0)
    c0 = np.minimum(np.floor(col).astype(np.int64), max(res_w - 2, 0))
    r0 = np.minimum(np.floor(row).astype(np.int64), max(res_h - 2, 0))
    fc = col - c0
    fr = row - r0
    c1 = np.minimum(c0 + 1, res_w - 1)
    r1 = np.minimum(r0 + 1, res_h - 1)
    idx = np.stack([r0 * res_w + c0, r0 * res_w + c1, r1 * res_w + c0, r1 * res_w + c1], axis=-1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    return idx, w


def _gather(flat: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("...k,...kc->...c", w, flat[idx])


def sample_equirect(img, d: np.ndarray) -> np.ndarray:
    """Bilinear read of a panorama (image or raw ``(H, W, C)`` array) along directions ``d``."""
    data = img.data if isinstance(img, EquirectImage) else _as_hwc(img)
    h, w, c = data.shape
    idx, wt = equirect_bilinear(h, w, d)
    return _gather(data.reshape(-1, c), idx, wt)


def sample_equirect_nearest(img, d: np.ndarray) -> np.ndarray:
    data = img.data if isinstance(img, EquirectImage) else _as_hwc(img)
    h, w, c = data.shape
    u, v = dir_to_equirect(d)
    col = np.mod(np.floor((u + 1.0) * 0.5 * w).astype(np.int64), w)
    row = np.clip(np.floor((1.0 - v) * 0.5 * h).astype(np.int64), 0, h - 1)
    return data[row, col]


# ---------------------------------------------------------------------------
# sparse operators

def perspective_operator(cam: Camera, height: int, width: int) -> sp.csr_matrix:
    """Sparse ``(res_h*res_w, height*width)`` matrix: equirect grid -> perspective raster."""
    idx, w = equirect_bilinear(height, width, cam.rays())
    n = cam.res_h * cam.res_w
    rows = np.repeat(np.arange(n), 4)
    return sp.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(n, height * width))


def _canonical_order(cams) -> list[int]:
    return sorted(range(len(cams)), key=lambda i: cams[i].key())


def splat_operator(cams, height: int, width: int):
    """Per-view splat-back operators and per-texel coverage.

    Returns ``(ops, weight)``: ``ops[k]`` maps camera ``k``'s flattened raster
    to the ``height*width`` equirect grid as bilinear reads at the texels it
    covers; ``weight`` counts the covering views.
    """
    dirs = equirect_directions(height, width).reshape(-1, 3)
    n_tex = len(dirs)
    ops = []
    weight = np.zeros(n_tex)
    for cam in cams:
        x, y, inside = dir_to_pixel(cam, dirs)
        t = np.nonzero(inside)[0]
        idx, w = plane_bilinear(cam.res_h, cam.res_w, x[t], y[t])
        ops.append(sp.csr_matrix((w.reshape(-1), (np.repeat(t, 4), idx.reshape(-1))),
                                 shape=(n_tex, cam.res_h * cam.res_w)))
        weight[t] += 1.0
    return ops, weight.reshape(height, width)


def pole_fill_rows(height: int) -> np.ndarray:
    """Source row for each row; rows beyond ``|v| > 0.999`` copy the nearest in-band row."""
    _, v = equirect_pixel_uv(height, 1)
    v = v[:, 0]
    ok = np.nonzero(np.abs(v) <= POLE_V)[0]
    src = np.arange(height)
    if len(ok) == 0:
        return src
    for r in range(height):
        if abs(v[r]) > POLE_V:
            src[r] = ok[np.argmin(np.abs(ok - r))]
    return src


class SplatBack:
    """Reusable weighted inverse of ``project_perspective`` for a fixed camera set.

    Views are accumulated in a canonical camera order so the result does not
    depend on the order the cameras were given in.
    """

    def __init__(self, cams, height: int, width: int):
        self.cams = list(cams)
        self.height, self.width = height, width
        self.ops, self.weight = splat_operator(self.cams, height, width)
        self.order = _canonical_order(self.cams)
        self.rows = pole_fill_rows(height)

    def __call__(self, views) -> np.ndarray:
        """``views[k]`` is camera ``k``'s raster, ``(res_h, res_w, C)`` or flattened."""
        acc = None
        for k in self.order:
            v = np.asarray(views[k])
            v = v.reshape(self.ops[k].shape[1], -1)
            part = self.ops[k] @ v
            acc = part if acc is None else acc + part
        w = self.weight.reshape(-1, 1)
        out = np.where(w > 0, acc / np.where(w > 0, w, 1.0), 0.0)
        out = out.reshape(self.height, self.width, -1)
        return out[self.rows]

    def coverage(self) -> np.ndarray:
        return self.weight[self.rows]


def project_perspective(img, cam: Camera, frame: int | None = None) -> PerspectiveImage:
    """Perspective view of a panorama: pixel ``(x, y)`` reads the panorama along ``camera_ray``."""
    data = sample_equirect(img, cam.rays())
    return PerspectiveImage(data, camera=cam, frame=frame)


def splat_back(views, out_dims: tuple[int, int]) -> tuple[EquirectImage, np.ndarray]:
    """Weight-normalized average of the views covering each output texel.

    ``views`` is a sequence of ``(PerspectiveImage, Camera)``.  Texels seen by
    no view get weight 0 and value 0.
    """
    if not views:
        raise ValueError("splat_back needs at least one view")
    height, width = out_dims
    cams = [c for _, c in views]
    sb = SplatBack(cams, height, width)
    out = sb([np.asarray(v.data, dtype=np.float64) for v, _ in views])
    return EquirectImage(out), sb.coverage()


# ---------------------------------------------------------------------------
# PNG I/O

def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, data: np.ndarray) -> None:
    a = _as_hwc(data)
    if a.shape[2] == 1:
        Image.fromarray(to_uint8(a[..., 0]), mode="L").save(path)
    else:
        Image.fromarray(to_uint8(a[..., :3]), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG -> float ``(H, W, 3)`` in ``[0, 1]``."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64)
    return a / 255.0


def write_png16(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Single-channel 16-bit PNG of ``data / scale`` clipped to ``[0, 1]``."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    q = np.round(np.clip(a / scale, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_png16(path, scale: float = 1.0) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im, dtype=np.float64)
        peak = 65535.0 if im.mode.startswith("I") else 255.0
    if a.ndim == 3:
        a = a[..., 0]
    return a / peak * scale
