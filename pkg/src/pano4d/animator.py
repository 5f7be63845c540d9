"""Panoramic denoiser: spherical latent field, project / denoise / fuse loop.

A latent field stores one ``L*c`` vector per icosphere sample (frame-major:
entry ``k*c + ch`` is channel ``ch`` of frame ``k``).  Each step projects it
into every camera of the fan, lets a perspective denoiser take one step per
view, and averages the bilinear reads of the denoised views back onto each
sphere point.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .external import FileHandshake
from .geom import Camera, SphereSampling, dir_to_pixel, icosphere_samples
from .image import (
    EquirectImage,
    PanoVideo,
    PerspectiveImage,
    SplatBack,
    _canonical_order,
    plane_bilinear,
    project_perspective,
    write_png,
    write_png16,
)

log = logging.getLogger(__name__)

LATENT_DTYPE = np.float32


class CoverageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data types

@dataclass
class SphericalLatentField:
    sampling: SphereSampling
    values: np.ndarray  # (N, L*c)
    step_index: int
    frames: int
    channels: int

    def __post_init__(self):
        if self.frames < 1 or self.channels < 1:
            raise ValueError("frames and channels must be >= 1")
        if self.values.shape != (len(self.sampling), self.frames * self.channels):
            raise ValueError("values do not match sampling and L*c")


@dataclass(frozen=True)
class DenoiseSchedule:
    total_steps: int = 25

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def check_mask(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, EquirectImage) else np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("animation mask must be binary")
    return m


# ---------------------------------------------------------------------------
# codecs

class Codec(Protocol):
    downsample: int
    channels: int

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


class IdentityCodec:
    """Average-pools by ``downsample`` on encode, nearest-upsamples on decode.

    With ``downsample = 1`` encode and decode are exact inverses.
    """

    def __init__(self, downsample: int = 1, channels: int = 3):
        self.downsample = downsample
        self.channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        a = np.asarray(image, dtype=np.float64)
        s = self.downsample
        if s == 1:
            return a.copy()
        h, w, c = a.shape
        return a[: h - h % s, : w - w % s].reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        s = self.downsample
        a = np.asarray(latent, dtype=np.float64)
        return a if s == 1 else np.repeat(np.repeat(a, s, axis=0), s, axis=1)


# ---------------------------------------------------------------------------
# perspective denoisers

class PerspectiveDenoiser(Protocol):
    """One reverse-diffusion step on a perspective latent ``(p_h, p_w, L*c)``."""

    concurrent_safe: bool

    def step(self, z: np.ndarray, cond: PerspectiveImage, t: int, mask: np.ndarray, *, view: int = 0) -> np.ndarray: ...


def _frames_target(static: np.ndarray, frames: int) -> np.ndarray:
    return np.tile(static, (1, 1, frames))


class IdentityDenoiser:
    """Blends every frame toward the encoded conditioning image; reaches it exactly at ``t = 1``."""

    concurrent_safe = True

    def __init__(self, codec: Codec, frames: int):
        self.codec = codec
        self.frames = frames

    def step(self, z, cond, t, mask, *, view=0):
        target = _frames_target(self.codec.encode(cond.data), self.frames).astype(z.dtype)
        return z + (target - z) / t


class FlowFieldDenoiser:
    """Denoiser with a known answer: drives each view toward a target video.

    The per-view target is the encoded projection of ``target`` (a
    ``PanoVideo``).  Each step forms a clean-latent estimate
    ``x0 = target + stochasticity * (z - target)`` inside the mask (outside it
    the estimate is the target itself) and moves ``z`` to
    ``x0 + (t - 1) / t * (z - x0)``.  With ``stochasticity = 0`` this is the
    straight line from ``z`` to the target, reached exactly after the last
    step; a positive value keeps part of the input noise in the result, so
    differently seeded views disagree the way independent samplers do.
    """

    concurrent_safe = True

    def __init__(self, target: PanoVideo, codec: Codec, stochasticity: float = 0.0):
        self.target = target
        self.codec = codec
        self.stochasticity = stochasticity
        self._cache: dict = {}

    @classmethod
    def from_flow(cls, pano, mask, frames: int, codec: Codec, axis=None, angle_per_frame: float = 0.05,
                  stochasticity: float = 0.0) -> "FlowFieldDenoiser":
        return cls(advect_panorama(pano, mask, frames, axis, angle_per_frame), codec, stochasticity)

    def target_latent(self, cam: Camera) -> np.ndarray:
        key = cam.key()
        if key not in self._cache:
            frames = [self.codec.encode(project_perspective(f, cam).data) for f in self.target.frames]
            self._cache[key] = np.concatenate(frames, axis=-1).astype(LATENT_DTYPE)
        return self._cache[key]

    def step(self, z, cond, t, mask, *, view=0):
        if cond.camera is None:
            raise ValueError("FlowFieldDenoiser needs conditioning images that carry their camera")
        target = self.target_latent(cond.camera).astype(z.dtype)
        eta = self.stochasticity
        if eta:
            m = np.asarray(mask, dtype=z.dtype)[..., None] if np.ndim(mask) == 2 else np.asarray(mask, z.dtype)
            x0 = target + eta * m * (z - target)
        else:
            x0 = target
        return x0 + (t - 1) / t * (z - x0)


class ExternalProcessDenoiser:
    """Delegates each view step to an external process over the file handshake."""

    concurrent_safe = False

    def __init__(self, directory=None, frames: int = 14, channels: int = 9, timeout: float = 60.0,
                 retries: int = 2):
        self.link = FileHandshake(directory, timeout, retries)
        self.frames = frames
        self.channels = channels
        self._written: set = set()

    def _inputs(self, cond: PerspectiveImage, mask: np.ndarray, view: int) -> tuple[str, str]:
        cpath = self.link.directory / f"cond_{view}.png"
        mpath = self.link.directory / f"mask_{view}.png"
        if view not in self._written:
            write_png(cpath, cond.data)
            write_png16(mpath, np.asarray(mask, dtype=np.float64))
            self._written.add(view)
        return str(mpath), str(cpath)

    def step(self, z, cond, t, mask, *, view=0):
        mask_path, cond_path = self._inputs(cond, mask, view)
        meta = dict(step=int(t), view=int(view), L=self.frames, c=self.channels,
                    mask_path=mask_path, cond_image_path=cond_path)
        out = self.link.request(f"{t}_{view}", z, meta)
        if out.shape != z.shape:
            raise RuntimeError(f"external denoiser returned shape {out.shape}, expected {z.shape}")
        return out.astype(z.dtype)

    def close(self) -> None:
        self.link.close()


def advect_panorama(pano, mask, frames: int, axis=None, angle_per_frame: float = 0.05) -> PanoVideo:
    """Procedural target video: the masked region swirls about ``axis``.

    Frame ``k`` reads the panorama along directions rotated by
    ``-k * angle_per_frame`` (a rigid rotation is a divergence-free flow on
    the sphere); texels outside the mask stay fixed.
    """
    from .geom import equirect_directions, rotation_about
    from .image import sample_equirect

    data = pano.data if isinstance(pano, EquirectImage) else np.asarray(pano, dtype=np.float64)
    m = check_mask(mask)
    h, w = m.shape
    d = equirect_directions(h, w)
    if axis is None:
        # rotate about the mask's mean direction
        axis = (d * m[..., None]).reshape(-1, 3).sum(axis=0)
        if np.linalg.norm(axis) == 0:
            axis = np.array([0.0, 1.0, 0.0])
    out = []
    for k in range(frames):
        R = rotation_about(np.asarray(axis, float), -k * angle_per_frame)
        moved = sample_equirect(data, d @ R.T)
        out.append(EquirectImage(np.where(m[..., None] > 0, moved, data)))
    return PanoVideo(out)


# ---------------------------------------------------------------------------
# projection / fusion operators

def default_per_face(cams, downsample: int = 1, factor: float = 1.5) -> int:
    pixels = sum((c.res_h // downsample) * (c.res_w // downsample) for c in cams)
    return max(1, int(round(factor * pixels / 20)))


def init_latent(sampling: SphereSampling, frames: int, channels: int, seed, steps: int = 25) -> SphericalLatentField:
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((len(sampling), frames * channels), dtype=np.float64).astype(LATENT_DTYPE)
    return SphericalLatentField(sampling, values, steps, frames, channels)


class LatentProjector:
    """Sparse resampling between sphere points and a fixed camera fan's latent grids.

    ``project`` uses inverse-geodesic-distance weights over the 4 nearest
    sphere points; ``fuse`` averages bilinear reads of every covering view.
    """

    K = 4

    def __init__(self, sampling: SphereSampling, cams, latent_res: tuple[int, int] | None = None):
        self.sampling = sampling
        self.cams = [c if latent_res is None else c.with_resolution(latent_res[1], latent_res[0]) for c in cams]
        self.order = _canonical_order(self.cams)
        pts = sampling.points
        tree = cKDTree(pts)
        self.project_ops = []
        for cam in self.cams:
            n = cam.res_h * cam.res_w
            idx, w = _knn_weights(sampling, cam.rays().reshape(-1, 3), tree)
            rows = np.repeat(np.arange(n), self.K)
            self.project_ops.append(sp.csr_matrix((w.reshape(-1).astype(LATENT_DTYPE), (rows, idx.reshape(-1))),
                                                  shape=(n, len(pts))))
        counts = np.zeros(len(pts))
        parts = []
        for cam in self.cams:
            x, y, inside = dir_to_pixel(cam, pts)
            sel = np.nonzero(inside)[0]
            parts.append((sel, x[sel], y[sel]))
            counts[sel] += 1
        if np.any(counts == 0):
            raise CoverageError(f"{int(np.sum(counts == 0))} sphere points are not covered by any view")
        self.cover = counts
        self.fuse_ops = []
        for cam, (sel, x, y) in zip(self.cams, parts):
            idx, w = plane_bilinear(cam.res_h, cam.res_w, x, y)
            w = w / counts[sel, None]
            self.fuse_ops.append(sp.csr_matrix((w.reshape(-1).astype(LATENT_DTYPE), (np.repeat(sel, 4), idx.reshape(-1))),
                                               shape=(len(pts), cam.res_h * cam.res_w)))

    def project(self, values: np.ndarray, k: int) -> np.ndarray:
        cam = self.cams[k]
        return (self.project_ops[k] @ values).reshape(cam.res_h, cam.res_w, -1)

    def fuse(self, views) -> np.ndarray:
        acc = None
        for k in self.order:
            part = self.fuse_ops[k] @ views[k].reshape(self.fuse_ops[k].shape[1], -1)
            acc = part if acc is None else acc + part
        return acc


def _knn_weights(sampling: SphereSampling, rays: np.ndarray, tree: cKDTree | None = None):
    tree = tree or cKDTree(sampling.points)
    chord, idx = tree.query(rays, k=LatentProjector.K)
    geo = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    if np.any(geo[:, 0] > 2.0 * sampling.spacing):
        raise CoverageError("a latent cell has no sphere point within twice the sampling spacing")
    w = 1.0 / np.maximum(geo, 1e-12)
    return idx, w / w.sum(axis=1, keepdims=True)


def project_latent(field: SphericalLatentField, cam: Camera) -> np.ndarray:
    """Perspective latent grid of ``field`` for one camera (4-NN inverse-distance weights)."""
    idx, w = _knn_weights(field.sampling, cam.rays().reshape(-1, 3))
    out = np.einsum("pk,pkc->pc", w, field.values[idx].astype(np.float64))
    return out.reshape(cam.res_h, cam.res_w, -1)


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class AnimationResult:
    video: PanoVideo
    field: SphericalLatentField
    view_latents: list  # last denoiser output per view, (p_h, p_w, L*c)
    cams: list


class PanoramicDenoiser:
    """Runs the project -> denoise -> fuse loop for one panorama."""

    def __init__(self, pano, mask, denoiser: PerspectiveDenoiser, codec: Codec, cams, *,
                 frames: int, sampling: SphereSampling | None = None, schedule: DenoiseSchedule | None = None,
                 workers: int = 1):
        self.workers = workers if getattr(denoiser, "concurrent_safe", False) else 1
        self.pano = pano if isinstance(pano, EquirectImage) else EquirectImage(pano)
        self.mask = check_mask(mask)
        if self.mask.shape != self.pano.data.shape[:2]:
            raise ValueError("mask and panorama dimensions differ")
        self.denoiser = denoiser
        self.codec = codec
        self.cams = list(cams)
        self.frames = frames
        self.schedule = schedule or DenoiseSchedule()
        expected = getattr(denoiser, "expected_steps", None)
        if expected is not None and expected != self.schedule.total_steps:
            raise ValueError(f"denoiser expects {expected} steps, schedule has {self.schedule.total_steps}")
        ds = codec.downsample
        self.latent_res = (self.cams[0].res_h // ds, self.cams[0].res_w // ds)
        if sampling is None:
            sampling = icosphere_samples(default_per_face(self.cams, ds))
        self.sampling = sampling
        self.projector = LatentProjector(sampling, self.cams, self.latent_res)
        self.conds = [project_perspective(self.pano, c) for c in self.cams]
        lat_mask = [project_perspective(self.mask[..., None], c).data[..., 0] for c in self.projector.cams]
        self.view_masks = [(m > 0.5).astype(np.float64) for m in lat_mask]

    def fuse_step(self, field: SphericalLatentField) -> tuple[SphericalLatentField, list]:
        t = field.step_index
        if t < 1:
            raise ValueError("latent field is already clean")

        def one(k):
            z = self.projector.project(field.values, k)
            z2 = self.denoiser.step(z, self.conds[k], t, self.view_masks[k], view=k)
            if z2.shape != z.shape:
                raise RuntimeError("denoiser changed the latent shape")
            return np.asarray(z2, dtype=LATENT_DTYPE)

        views = range(len(self.cams))
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                outs = list(ex.map(one, views))
        else:
            outs = [one(k) for k in views]
        # the fusion below is the barrier: all views are in before any point is updated
        values = self.projector.fuse(outs).astype(LATENT_DTYPE)
        return SphericalLatentField(field.sampling, values, t - 1, field.frames, field.channels), outs

    def decode(self, field: SphericalLatentField) -> PanoVideo:
        """Splat the clean field back to an equirect latent grid and decode each frame."""
        h = self.pano.height // self.codec.downsample
        sb = SplatBack(self.projector.cams, h, 2 * h)
        grid = sb([self.projector.project(field.values, k) for k in range(len(self.cams))])
        static = self.codec.decode(self.codec.encode(self.pano.data))
        keep = self.mask[..., None] == 0
        c = field.channels
        frames = []
        for k in range(field.frames):
            img = self.codec.decode(grid[..., k * c:(k + 1) * c])
            frames.append(EquirectImage(np.where(keep, static, img)))
        return PanoVideo(frames)

    def run(self, seed) -> AnimationResult:
        field = init_latent(self.sampling, self.frames, self.codec.channels, seed, self.schedule.total_steps)
        outs = []
        while field.step_index > 0:
            field, outs = self.fuse_step(field)
            log.debug("fused step %d", field.step_index + 1)
        return AnimationResult(self.decode(field), field, outs, self.projector.cams)


def fuse_step(field, pano, mask, denoiser, codec, cams) -> SphericalLatentField:
    pd = PanoramicDenoiser(pano, mask, denoiser, codec, cams, frames=field.frames, sampling=field.sampling)
    return pd.fuse_step(field)[0]


def animate(pano, mask, denoiser, codec, schedule: DenoiseSchedule, cams, seed, *, frames: int,
            sampling: SphereSampling | None = None, workers: int = 1) -> PanoVideo:
    pd = PanoramicDenoiser(pano, mask, denoiser, codec, cams, frames=frames, sampling=sampling, schedule=schedule,
                           workers=workers)
    return pd.run(seed).video


def animate_independent(pano, mask, denoiser, codec, schedule: DenoiseSchedule, cams, seed, *, frames: int) -> list:
    """Baseline: denoise every view on its own, each from its own noise draw.

    Returns the decoded perspective videos ``(L, p_H, p_W, C)`` per camera.
    """
    pano = pano if isinstance(pano, EquirectImage) else EquirectImage(pano)
    m = check_mask(mask)
    ds = codec.downsample
    rng = np.random.default_rng(seed)
    videos = []
    for k, cam in enumerate(cams):
        cond = project_perspective(pano, cam)
        lat_cam = cam.with_resolution(cam.res_w // ds, cam.res_h // ds)
        vm = (project_perspective(m[..., None], lat_cam).data[..., 0] > 0.5).astype(np.float64)
        z = rng.standard_normal((lat_cam.res_h, lat_cam.res_w, frames * codec.channels)).astype(LATENT_DTYPE)
        for t in range(schedule.total_steps, 0, -1):
            z = np.asarray(denoiser.step(z, cond, t, vm, view=k), dtype=LATENT_DTYPE)
        videos.append(decode_views([z], codec, frames)[0])
    return videos


def decode_views(latents, codec: Codec, frames: int) -> list:
    """Decode per-view latents ``(p_h, p_w, L*c)`` into ``(L, p_H, p_W, C)`` videos."""
    c = codec.channels
    out = []
    for z in latents:
        z = np.asarray(z, dtype=np.float64)
        out.append(np.stack([codec.decode(z[..., k * c:(k + 1) * c]) for k in range(frames)]))
    return out
