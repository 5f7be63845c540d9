"""Non-neural image and video quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy.ndimage import correlate1d

from .geom import dir_to_pixel
from .image import plane_bilinear

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # zero-padded separable filter; symmetric kernel makes it self-adjoint
    x = correlate1d(x, g, axis=0, mode="constant")
    return correlate1d(x, g, axis=1, mode="constant")


def _as_channels(a: np.ndarray) -> np.ndarray:
    return a[..., None] if a.ndim == 2 else a


def ssim_with_grad(a, b, data_range: float = 1.0, win: int = 11, sigma: float = 1.5):
    """Mean SSIM over pixels and channels, and its gradient with respect to ``a``.

    11x11 Gaussian window (sigma 1.5) applied with zero padding at the border.
    """
    a, b = _check(a, b)
    shape = a.shape
    a = _as_channels(a)
    b = _as_channels(b)
    g = gaussian_window(win, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    total = 0.0
    grad = np.empty_like(a)
    n = a.shape[0] * a.shape[1] * a.shape[2]
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, g), _blur(y, g)
        exx, eyy, exy = _blur(x * x, g), _blur(y * y, g), _blur(x * y, g)
        vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
        a1, a2 = 2 * mx * my + c1, 2 * cxy + c2
        b1, b2 = mx * mx + my * my + c1, vx + vy + c2
        s = a1 * a2 / (b1 * b2)
        total += s.sum()
        ds_dmx = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - s * (2 * mx / b1 - 2 * mx / b2)
        ds_dexx = -s / b2
        ds_dexy = 2 * a1 / (b1 * b2)
        grad[..., ch] = (_blur(ds_dmx, g) + 2 * x * _blur(ds_dexx, g) + y * _blur(ds_dexy, g)) / n
    return total / n, grad.reshape(shape)


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_with_grad(a, b, data_range)[0])


def flicker(frames) -> float:
    """Mean over consecutive pairs of the mean absolute frame difference."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(frames, axis=0)), axis=tuple(range(1, frames.ndim))).mean())


def overlap_consistency(videos, cams) -> dict[tuple[int, int], float]:
    """RMS disagreement of perspective videos on their pairwise frustum overlaps.

    ``videos[k]`` is ``(L, h, w, C)`` (or ``(h, w, C)``) as seen by ``cams[k]``.
    For each pair ``a < b`` the pixels of ``a`` whose rays fall inside ``b``'s
    frustum are compared against bilinear reads of ``b``.
    """
    vids = [np.asarray(v, dtype=np.float64) for v in videos]
    vids = [v[None] if v.ndim == 3 else v for v in vids]
    out = {}
    for ia, ib in combinations(range(len(cams)), 2):
        ca, cb = cams[ia], cams[ib]
        rays = ca.rays().reshape(-1, 3)
        x, y, inside = dir_to_pixel(cb, rays)
        sel = np.nonzero(inside)[0]
        if len(sel) == 0:
            continue
        idx, w = plane_bilinear(cb.res_h, cb.res_w, x[sel], y[sel])
        va = vids[ia].reshape(len(vids[ia]), -1, vids[ia].shape[-1])[:, sel]
        vb = vids[ib].reshape(len(vids[ib]), -1, vids[ib].shape[-1])
        read = np.einsum("pk,lpkc->lpc", w, vb[:, idx])
        out[(ia, ib)] = float(np.sqrt(np.mean((va - read) ** 2)))
    return out


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    flicker: float
    flicker_reference: float | None = None
    per_frame_psnr: list = field(default_factory=list)
    overlap_rms: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["overlap_rms"] = {f"{a}-{b}": v for (a, b), v in self.overlap_rms.items()}
        return d


def compare_videos(frames, reference) -> MetricsReport:
    """PSNR/SSIM averaged over frames plus the flicker of both sequences."""
    frames = np.asarray(frames, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    _check(frames, reference)
    per = [psnr(a, b) for a, b in zip(frames, reference)]
    ss = [ssim(a, b) for a, b in zip(frames, reference)]
    return MetricsReport(psnr=float(np.mean(per)), ssim=float(np.mean(ss)), flicker=flicker(frames),
                         flicker_reference=flicker(reference), per_frame_psnr=per)


def pearson(a, b) -> float:
    a, b = _check(a, b)
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0
