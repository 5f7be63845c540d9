"""3D Gaussian sets and a differentiable tile rasterizer (CPU, numba).

Projection follows the perspective cameras of :mod:`pano4d.geom`: a camera at
``pos`` looking along ``cam.axis`` maps camera-space ``(xc, yc, zc)`` to pixel
column ``fx * xc / zc + cx`` and row ``-fy * yc / zc + cy``.  Screen
covariances come from the local affine (EWA) approximation plus a small
dilation.  Compositing is front to back over a global depth sort; the
backward pass walks each pixel's list back to front.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import os

import numba as nb
import numpy as np

from .geom import Camera
from .image import EquirectImage, sample_equirect

if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "omp"  # the bundled TBB is too old and only triggers a warning

TILE = 16
N_GRAD = 10  # mean2d(2) conic(3) opacity(1) color(3) dist(1)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class GaussianSet:
    positions: np.ndarray      # (N, 3)
    quats: np.ndarray          # (N, 4) w, x, y, z
    log_scales: np.ndarray     # (N, 3)
    colors: np.ndarray         # (N, 3) in [0, 1]
    opacity_logits: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.positions)
        shapes = [(self.positions, (n, 3)), (self.quats, (n, 4)), (self.log_scales, (n, 3)),
                  (self.colors, (n, 3)), (self.opacity_logits, (n,))]
        for a, s in shapes:
            if a.shape != s:
                raise ValueError(f"GaussianSet field has shape {a.shape}, expected {s}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(a.copy() for a in self.arrays()))

    def arrays(self) -> tuple:
        return self.positions, self.quats, self.log_scales, self.colors, self.opacity_logits

    def normalize(self) -> None:
        """Renormalize quaternions and clamp colours in place."""
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(*(a[idx] for a in self.arrays()))

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


@dataclass
class GaussianGrads:
    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    def arrays(self) -> tuple:
        return self.positions, self.quats, self.log_scales, self.colors, self.opacity_logits


@dataclass(frozen=True)
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    cutoff: float = 1e-4          # a pixel stops compositing once its transmittance drops below this
    far: float = 100.0            # depth where nothing was hit
    near: float = 0.01            # cull Gaussians closer than this along the axis
    dilation: float = 0.3         # added to screen covariance diagonal, pixels²
    alpha_min: float = 1.0 / 255.0
    sigma_cut: float = 3.0
    frustum_margin: float = 1.3   # cull centres outside this multiple of the half-extent

    def __post_init__(self):
        if not 0.0 < self.cutoff < 1.0:
            raise ValueError("cutoff must lie in (0, 1)")

    @property
    def alpha_max(self) -> float:
        # an opaque Gaussian leaves at most `cutoff` transmittance for anything behind it
        return 1.0 - self.cutoff


# ---------------------------------------------------------------------------
# geometry helpers

def quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _rot_grad_to_quat(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Chain ``dL/dR`` back to the (unnormalized) quaternion."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], -1)
    return (gq - qn * np.sum(qn * gq, -1, keepdims=True)) / norm


def intrinsics(cam: Camera) -> tuple[float, float, float, float]:
    fx = cam.focal * cam.res_w / cam.plane_size[0]
    fy = cam.focal * cam.res_h / cam.plane_size[1]
    return fx, fy, (cam.res_w - 1) / 2.0, (cam.res_h - 1) / 2.0


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (only visible ones kept)."""
    index: np.ndarray   # (M,) into the GaussianSet, in depth order
    cam_pts: np.ndarray  # (M, 3)
    mean2d: np.ndarray  # (M, 2) column, row
    cov2d: np.ndarray   # (M, 2, 2)
    conic: np.ndarray   # (M, 3) a, b, c of the inverse covariance
    opacity: np.ndarray
    colors: np.ndarray
    dist: np.ndarray
    J: np.ndarray       # (M, 2, 3)
    R: np.ndarray       # (M, 3, 3)
    rect: np.ndarray    # (M, 4) tile x0, y0, x1, y1 (exclusive)


def project(g: GaussianSet, pos, cam: Camera, settings: RenderSettings) -> Projection:
    pos = np.asarray(pos, dtype=np.float64)
    W = cam.basis  # rows right, up, axis
    fx, fy, cx, cy = intrinsics(cam)
    rel = g.positions - pos
    c = rel @ W.T
    # near plane plus a widened frustum: centres far off-screen but barely in front of
    # the camera would otherwise project to huge footprints
    lim_x = settings.frustum_margin * 0.5 * cam.plane_size[0] / cam.focal
    lim_y = settings.frustum_margin * 0.5 * cam.plane_size[1] / cam.focal
    keep = np.nonzero((c[:, 2] > settings.near) & (np.abs(c[:, 0]) <= lim_x * c[:, 2])
                      & (np.abs(c[:, 1]) <= lim_y * c[:, 2]))[0]
    c = c[keep]
    zc = c[:, 2]
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = fx / zc
    J[:, 0, 2] = -fx * c[:, 0] / zc ** 2
    J[:, 1, 1] = -fy / zc
    J[:, 1, 2] = fy * c[:, 1] / zc ** 2
    R = quat_to_rot(g.quats[keep])
    M = R * np.exp(g.log_scales[keep])[:, None, :]
    T = J @ W
    cov = T @ (M @ np.swapaxes(M, 1, 2)) @ np.swapaxes(T, 1, 2)
    cov[:, 0, 0] += settings.dilation
    cov[:, 1, 1] += settings.dilation
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], -1)
    mean = np.stack([fx * c[:, 0] / zc + cx, -fy * c[:, 1] / zc + cy], -1)
    # bounding box of the truncated footprint
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    rad = np.ceil(settings.sigma_cut * np.sqrt(lam))
    tw = (cam.res_w + TILE - 1) // TILE
    th = (cam.res_h + TILE - 1) // TILE
    x0 = np.clip(np.floor((mean[:, 0] - rad) / TILE), 0, tw).astype(np.int64)
    x1 = np.clip(np.floor((mean[:, 0] + rad) / TILE) + 1, 0, tw).astype(np.int64)
    y0 = np.clip(np.floor((mean[:, 1] - rad) / TILE), 0, th).astype(np.int64)
    y1 = np.clip(np.floor((mean[:, 1] + rad) / TILE) + 1, 0, th).astype(np.int64)
    vis = (x1 > x0) & (y1 > y0)
    # global depth sort, ties broken by storage index
    order = np.lexsort((keep, zc))
    order = order[vis[order]]
    sel = keep[order]
    return Projection(
        index=sel, cam_pts=c[order], mean2d=mean[order], cov2d=cov[order], conic=conic[order],
        opacity=g.opacities[sel], colors=g.colors[sel],
        dist=np.linalg.norm(rel[sel], axis=1), J=J[order], R=R[order],
        rect=np.stack([x0, y0, x1, y1], -1)[order],
    )


# ---------------------------------------------------------------------------
# kernels

@nb.njit(cache=True)
def _tile_lists(rect, n_tiles_x, n_tiles):
    counts = np.zeros(n_tiles + 1, np.int64)
    for i in range(rect.shape[0]):
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                counts[ty * n_tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], np.int64)
    for i in range(rect.shape[0]):  # depth order is preserved within each tile
        for ty in range(rect[i, 1], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 2]):
                t = ty * n_tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return ptr, ids


@nb.njit(cache=True, inline="always")
def _alpha(mean, conic, opac, k, px, py, alpha_min, alpha_max, cut2):
    dx = px - mean[k, 0]
    dy = py - mean[k, 1]
    q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
    if q > cut2:
        return 0.0, dx, dy, False
    a = opac[k] * np.exp(-0.5 * q)
    if a < alpha_min:
        return 0.0, dx, dy, False
    if a > alpha_max:
        return alpha_max, dx, dy, True  # clamped: no gradient to the footprint
    return a, dx, dy, True


@nb.njit(cache=True, parallel=True)
def _forward(ptr, ids, mean, conic, opac, colors, dist, W, H, ntx, alpha_min, alpha_max, cutoff, cut2):
    rgb = np.zeros((H, W, 3))
    acc_d = np.zeros((H, W))
    acc_w = np.zeros((H, W))
    trans = np.ones((H, W))
    last = np.zeros((H, W), np.int64)
    n_tiles = ptr.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        for py in range(ty * TILE, min(H, ty * TILE + TILE)):
            for px in range(tx * TILE, min(W, tx * TILE + TILE)):
                T = 1.0
                n = 0
                r = 0.0
                g = 0.0
                b = 0.0
                sd = 0.0
                sw = 0.0
                for e in range(ptr[t], ptr[t + 1]):
                    k = ids[e]
                    a, _, _, ok = _alpha(mean, conic, opac, k, float(px), float(py), alpha_min, alpha_max, cut2)
                    if not ok:
                        continue
                    w = a * T
                    r += w * colors[k, 0]
                    g += w * colors[k, 1]
                    b += w * colors[k, 2]
                    sd += w * dist[k]
                    sw += w
                    T = T * (1.0 - a)
                    n = e - ptr[t] + 1
                    if T < cutoff:
                        break
                rgb[py, px, 0] = r
                rgb[py, px, 1] = g
                rgb[py, px, 2] = b
                acc_d[py, px] = sd
                acc_w[py, px] = sw
                trans[py, px] = T
                last[py, px] = n
    return rgb, acc_d, acc_w, trans, last




@nb.njit(cache=True, parallel=True)
def _backward(ptr, ids, mean, conic, opac, colors, dist, W, H, ntx, alpha_min, alpha_max, cut2,
              trans, last, g_rgb, g_num, g_w, g_T):
    """Per tile-list entry gradients, columns ordered as ``N_GRAD`` describes.

    Per pixel the kernel outputs are ``C = sum w_i c_i``, ``A = sum w_i d_i``,
    ``S = sum w_i`` and the final transmittance ``T``; ``g_*`` are their
    upstream gradients.  Each entry row is written by exactly one tile.
    """
    out = np.zeros((ids.shape[0], N_GRAD))
    n_tiles = ptr.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        for py in range(ty * TILE, min(H, ty * TILE + TILE)):
            for px in range(tx * TILE, min(W, tx * TILE + TILE)):
                n = last[py, px]
                if n == 0:
                    continue
                T = trans[py, px]
                gr, gg, gb = g_rgb[py, px, 0], g_rgb[py, px, 1], g_rgb[py, px, 2]
                gn = g_num[py, px]
                gw = g_w[py, px]
                gT = g_T[py, px] * T
                # what the entries behind the current one composite to, per unit transmittance
                br = 0.0
                bgc = 0.0
                bb = 0.0
                bd = 0.0
                bw = 0.0
                for e in range(ptr[t] + n - 1, ptr[t] - 1, -1):
                    k = ids[e]
                    a, dx, dy, ok = _alpha(mean, conic, opac, k, float(px), float(py), alpha_min, alpha_max, cut2)
                    if not ok:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    out[e, 6] += w * gr
                    out[e, 7] += w * gg
                    out[e, 8] += w * gb
                    out[e, 9] += w * gn
                    dA = T * (gr * (colors[k, 0] - br) + gg * (colors[k, 1] - bgc) + gb * (colors[k, 2] - bb)
                              + gn * (dist[k] - bd) + gw * (1.0 - bw)) - gT / (1.0 - a)
                    br = a * colors[k, 0] + (1.0 - a) * br
                    bgc = a * colors[k, 1] + (1.0 - a) * bgc
                    bb = a * colors[k, 2] + (1.0 - a) * bb
                    bd = a * dist[k] + (1.0 - a) * bd
                    bw = a + (1.0 - a) * bw
                    if a >= alpha_max:
                        continue
                    out[e, 5] += dA * a / opac[k]
                    gq = -0.5 * a * dA
                    out[e, 0] -= gq * 2.0 * (conic[k, 0] * dx + conic[k, 1] * dy)
                    out[e, 1] -= gq * 2.0 * (conic[k, 1] * dx + conic[k, 2] * dy)
                    out[e, 2] += gq * dx * dx
                    out[e, 3] += gq * 2.0 * dx * dy
                    out[e, 4] += gq * dy * dy
    return out


# ---------------------------------------------------------------------------
# public API

@dataclass
class RenderResult:
    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    # forward state kept for the backward pass
    proj: Projection = field(repr=False)
    tiles: tuple = field(repr=False)
    raw: tuple = field(repr=False)


def _setup(cam: Camera):
    ntx = (cam.res_w + TILE - 1) // TILE
    nty = (cam.res_h + TILE - 1) // TILE
    return ntx, nty


def rasterize(g: GaussianSet, pos, cam: Camera, settings: RenderSettings = RenderSettings()) -> RenderResult:
    """Render colour, expected ray distance and coverage from ``pos`` through ``cam``.

    An empty (or fully culled) set renders the background with depth
    ``settings.far`` and alpha 0.
    """
    proj = project(g, pos, cam, settings)
    ntx, nty = _setup(cam)
    ptr, ids = _tile_lists(proj.rect, ntx, ntx * nty)
    rgb, acc_d, acc_w, trans, last = _forward(
        ptr, ids, proj.mean2d, proj.conic, proj.opacity, proj.colors, proj.dist,
        cam.res_w, cam.res_h, ntx, settings.alpha_min, settings.alpha_max, settings.cutoff,
        settings.sigma_cut ** 2)
    bg = np.asarray(settings.background, dtype=np.float64)
    out_rgb = rgb + trans[..., None] * bg
    hit = acc_w > 0
    depth = np.where(hit, acc_d / np.where(hit, acc_w, 1.0), settings.far)
    return RenderResult(out_rgb, depth, 1.0 - trans, proj, (ptr, ids), (acc_d, acc_w, trans, last))


def rasterize_backward(g: GaussianSet, pos, cam: Camera, settings: RenderSettings, res: RenderResult,
                       d_rgb=None, d_depth=None, d_alpha=None) -> GaussianGrads:
    """Gradients of a scalar loss w.r.t. every parameter group of ``g``.

    ``res`` must be the result of ``rasterize`` on the same inputs.
    """
    H, W = cam.res_h, cam.res_w
    proj = res.proj
    acc_d, acc_w, trans, last = res.raw
    d_rgb = np.zeros((H, W, 3)) if d_rgb is None else np.asarray(d_rgb, dtype=np.float64).reshape(H, W, 3)
    d_depth = np.zeros((H, W)) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(H, W)
    d_alpha = np.zeros((H, W)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(H, W)
    bg = np.asarray(settings.background, dtype=np.float64)
    hit = acc_w > 0
    inv = np.where(hit, 1.0 / np.where(hit, acc_w, 1.0), 0.0)
    g_num = d_depth * inv
    g_w = -d_depth * acc_d * inv * inv
    g_T = d_rgb @ bg - d_alpha
    ntx, _ = _setup(cam)
    ptr, ids = res.tiles
    ent = _backward(ptr, ids, proj.mean2d, proj.conic, proj.opacity, proj.colors, proj.dist,
                    W, H, ntx, settings.alpha_min, settings.alpha_max, settings.sigma_cut ** 2,
                    trans, last, np.ascontiguousarray(d_rgb), g_num, g_w, g_T)
    m = len(proj.index)
    gp = np.zeros((m, N_GRAD))
    np.add.at(gp, ids, ent)  # sequential in entry order: deterministic
    return _chain_3d(g, np.asarray(pos, dtype=np.float64), cam, proj, gp)


def _chain_3d(g: GaussianSet, pos, cam: Camera, proj: Projection, gp: np.ndarray) -> GaussianGrads:
    n = len(g)
    out = GaussianGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n))
    idx = proj.index
    if len(idx) == 0:
        return out
    Wr = cam.basis
    fx, fy, _, _ = intrinsics(cam)
    c = proj.cam_pts
    xc, yc, zc = c[:, 0], c[:, 1], c[:, 2]
    J, R = proj.J, proj.R
    s = np.exp(g.log_scales[idx])
    M = R * s[:, None, :]
    Sig = M @ np.swapaxes(M, 1, 2)
    T = J @ Wr

    # conic -> screen covariance
    a, b, cc = proj.conic.T
    Q = np.stack([np.stack([a, b], -1), np.stack([b, cc], -1)], -2)
    GQ = np.stack([np.stack([gp[:, 2], 0.5 * gp[:, 3]], -1), np.stack([0.5 * gp[:, 3], gp[:, 4]], -1)], -2)
    G2 = -Q @ GQ @ Q
    # screen covariance -> 3D covariance and Jacobian
    GSig = np.swapaxes(T, 1, 2) @ G2 @ T
    GT = 2.0 * G2 @ T @ Sig
    GJ = GT @ Wr.T

    # camera-space point: projected mean and Jacobian entries
    gm_u, gm_v = gp[:, 0], gp[:, 1]
    gc = np.zeros((len(idx), 3))
    gc[:, 0] = gm_u * fx / zc
    gc[:, 1] = -gm_v * fy / zc
    gc[:, 2] = -gm_u * fx * xc / zc ** 2 + gm_v * fy * yc / zc ** 2
    gc[:, 0] += GJ[:, 0, 2] * (-fx / zc ** 2)
    gc[:, 1] += GJ[:, 1, 2] * (fy / zc ** 2)
    gc[:, 2] += (GJ[:, 0, 0] * (-fx / zc ** 2) + GJ[:, 0, 2] * (2.0 * fx * xc / zc ** 3)
                 + GJ[:, 1, 1] * (fy / zc ** 2) + GJ[:, 1, 2] * (-2.0 * fy * yc / zc ** 3))
    rel = g.positions[idx] - pos
    gpos = gc @ Wr + gp[:, 9:10] * rel / proj.dist[:, None]

    # 3D covariance -> rotation and log-scales
    GM = 2.0 * GSig @ M
    gls = np.einsum("nij,nij->nj", GM, R) * s
    GR = GM * s[:, None, :]
    gq = _rot_grad_to_quat(g.quats[idx], GR)

    o = proj.opacity
    out.positions[idx] = gpos
    out.quats[idx] = gq
    out.log_scales[idx] = gls
    out.colors[idx] = gp[:, 6:9]
    out.opacity_logits[idx] = gp[:, 5] * o * (1.0 - o)
    return out


# ---------------------------------------------------------------------------
# initialization

def unproject_init(pano, depth, sampling, *, scale_factor: float = 0.7, opacity: float = 0.9) -> GaussianSet:
    """One isotropic Gaussian per sphere sample, placed at the sampled depth.

    The scale is ``scale_factor * spacing * depth`` so neighbouring Gaussians
    overlap at every distance.
    """
    pano_data = pano.data if isinstance(pano, EquirectImage) else np.asarray(pano, dtype=np.float64)
    depth_data = depth.data if isinstance(depth, EquirectImage) else np.asarray(depth, dtype=np.float64)
    if depth_data.ndim == 3:
        depth_data = depth_data[..., 0]
    if pano_data.shape[:2] != depth_data.shape:
        raise ValueError("pano and depth must share dimensions")
    d = sampling.points
    r = sample_equirect(depth_data[..., None], d)[:, 0]
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise ValueError("depth must be positive and finite")
    col = np.clip(sample_equirect(pano_data, d)[:, :3], 0.0, 1.0)
    n = len(d)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    ls = np.repeat(np.log(scale_factor * sampling.spacing * r)[:, None], 3, axis=1)
    logit = np.full(n, np.log(opacity / (1.0 - opacity)))
    return GaussianSet(d * r[:, None], quats, ls, col, logit)


# ---------------------------------------------------------------------------
# PLY

PLY_FIELDS = ("x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "r", "g", "b", "opacity")
_PLY_DTYPE = np.dtype([(f, "<f4") for f in PLY_FIELDS])


def write_ply(path, g: GaussianSet) -> None:
    """Binary little-endian PLY, one float32 property per parameter.

    ``sx..sz`` hold log scales and ``opacity`` holds the logit.
    """
    header = ["ply", "format binary_little_endian 1.0", "comment pano4d gaussian set",
              f"element vertex {len(g)}"]
    header += [f"property float {f}" for f in PLY_FIELDS]
    header.append("end_header")
    rec = np.empty(len(g), dtype=_PLY_DTYPE)
    flat = np.concatenate([g.positions, g.quats, g.log_scales, g.colors, g.opacity_logits[:, None]], axis=1)
    for i, f in enumerate(PLY_FIELDS):
        rec[f] = flat[:, i]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> GaussianSet:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    count = None
    props = []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] != "float":
                raise ValueError(f"{path}: unsupported property type {parts[1]}")
            props.append(parts[2])
    if count is None or tuple(props) != PLY_FIELDS:
        raise ValueError(f"{path}: unexpected vertex layout {props}")
    body = raw[end + len(b"end_header\n"):]
    if len(body) != count * _PLY_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=_PLY_DTYPE)
    flat = np.stack([rec[f].astype(np.float64) for f in PLY_FIELDS], axis=1)
    return GaussianSet(flat[:, 0:3].copy(), flat[:, 3:7].copy(), flat[:, 7:10].copy(),
                       flat[:, 10:13].copy(), flat[:, 13].copy())
