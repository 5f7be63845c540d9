"""Spatial-temporal geometry alignment.

Per-view, per-frame monocular depths are fused into one panoramic depth map
per frame.  Every view ``i`` and frame ``k`` gets a scale ``alpha`` (through
softplus) and a per-pixel shift grid ``beta``; the panoramic depth grids,
scales and shifts are optimized jointly with Adam on

    depth: mse(softplus(alpha) * theta - P_i S_k + beta)
    scale: mse(alpha^k - alpha^{k-1}) + mse(softplus(alpha) - 1)
    shift: TV(beta) + mse(beta^k - beta^{k-1})

averaged over views and summed over frames.  ``P_i`` is the bilinear
perspective read of the equirect depth grid for camera ``i`` and ``theta`` is
the monocular depth converted to distance along the ray.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .external import FileHandshake
from .geom import Camera
from .image import EquirectImage, PanoVideo, PerspectiveImage, SplatBack, perspective_operator, project_perspective, write_png

log = logging.getLogger(__name__)

TV_EPS = 1e-6


class AlignmentDiverged(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# depth models

class MonoDepth(Protocol):
    def estimate(self, image: PerspectiveImage) -> np.ndarray: ...


def _view_seed(cam: Camera, seed: int) -> int:
    return zlib.crc32(np.round(cam.axis, 9).astype("<f8").tobytes()) ^ (seed * 2654435761 % 2 ** 32)


class SyntheticDepth:
    """Ground-truth planar depth of a ``SyntheticScene`` with per-view affine corruption.

    View ``i`` returns ``scale_i * z + shift_i(x, y)`` where ``scale_i`` is
    drawn from ``scale_range`` and ``shift_i`` is a smooth low-order field
    whose peak magnitude is ``shift_amplitude`` times the median depth.  The
    corruption depends only on the camera axis and ``seed``.  Needs the
    conditioning image to carry its camera and frame.
    """

    def __init__(self, scene, scale_range=(0.7, 1.4), shift_amplitude: float = 0.1, seed: int = 0,
                 supersample: int = 1):
        self.scene = scene
        self.scale_range = scale_range
        self.shift_amplitude = shift_amplitude
        self.seed = seed
        self.supersample = supersample
        self._median: float | None = None

    def corruption(self, cam: Camera) -> tuple[float, np.ndarray]:
        rng = np.random.default_rng(_view_seed(cam, self.seed))
        scale = rng.uniform(*self.scale_range)
        x, y = cam.pixel_xy()
        a = rng.uniform(-1, 1, size=3)
        f = a[0] + a[1] * x + a[2] * y
        f /= max(np.abs(f).max(), 1e-12)
        return scale, f

    def median_depth(self) -> float:
        if self._median is None:
            _, dist = self.scene.panorama(0, 64, 128, supersample=1)
            self._median = float(np.median(dist))
        return self._median

    def estimate(self, image: PerspectiveImage) -> np.ndarray:
        cam, frame = image.camera, image.frame
        if cam is None or frame is None:
            raise ValueError("SyntheticDepth needs images that carry their camera and frame")
        _, _, z = self.scene.perspective(cam, frame, supersample=self.supersample)
        scale, f = self.corruption(cam)
        return scale * z + self.shift_amplitude * self.median_depth() * f


class ExternalDepth:
    """Monocular depth from an external process over the file handshake."""

    def __init__(self, directory=None, timeout: float = 60.0, retries: int = 2):
        self.link = FileHandshake(directory, timeout, retries)
        self._n = 0

    def estimate(self, image: PerspectiveImage) -> np.ndarray:
        name = f"depth_{self._n}"
        self._n += 1
        path = self.link.directory / f"{name}.png"
        write_png(path, image.data)
        out = self.link.request(name, None, dict(image_path=str(path), frame=image.frame))
        if out.shape[:2] != image.data.shape[:2]:
            raise RuntimeError(f"external depth returned {out.shape}, expected {image.data.shape[:2]}")
        return out.reshape(image.data.shape[:2]).astype(np.float64)

    def close(self) -> None:
        self.link.close()


# ---------------------------------------------------------------------------
# config / state

@dataclass
class AlignConfig:
    lambda_depth: float = 1.0
    lambda_scale: float = 0.1
    lambda_shift: float = 0.01
    iters: int = 3000
    warmup: int = 1500
    lr_depth: float = 1e-2   # in units of the median depth
    lr_alpha: float = 1e-2
    lr_beta: float = 1e-4    # in units of the median depth; slow, so warmup fits depth and scales first
    far_factor: float = 100.0
    lr_final: float = 1.0    # cosine decay of every learning rate down to this fraction
    depth_unit: float = 10.0  # median depth after normalization; sets the balance against the unit-free scale term
    depth_downsample: int = 4
    patience: int = 100

    def __post_init__(self):
        if min(self.lambda_depth, self.lambda_scale, self.lambda_shift) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.warmup <= self.iters:
            raise ValueError("warmup must lie in [0, iters]")


@dataclass
class AlignmentState:
    depth: np.ndarray   # (N_d, L) flattened equirect depth grids
    alpha: np.ndarray   # (V, L)
    beta: np.ndarray    # (V, L, p_h, p_w)

    def copy(self) -> "AlignmentState":
        return AlignmentState(self.depth.copy(), self.alpha.copy(), self.beta.copy())


@dataclass
class AlignResult:
    depths: list            # L EquirectImage, one channel
    state: AlignmentState
    history: list = field(default_factory=list)       # objective with the active weights
    full_history: list = field(default_factory=list)  # objective with the final weights
    scale: float = 1.0      # median used to normalize depths


# ---------------------------------------------------------------------------
# geometry helpers

def rescale_depth(z_depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Planar z-depth to distance along each pixel's unit ray."""
    cos = cam.rays() @ cam.axis
    return np.asarray(z_depth, dtype=np.float64) / cos


def tv_with_grad(b: np.ndarray, eps: float = TV_EPS) -> tuple[float, np.ndarray]:
    """Smoothed anisotropic TV over the last two axes, averaged over the leading ones."""
    lead = int(np.prod(b.shape[:-2]))
    dy = np.diff(b, axis=-2)
    dx = np.diff(b, axis=-1)
    sy = np.sqrt(dy * dy + eps)
    sx = np.sqrt(dx * dx + eps)
    ny = max(dy.shape[-2] * dy.shape[-1], 1)
    nx = max(dx.shape[-2] * dx.shape[-1], 1)
    val = (sy.sum() / ny + sx.sum() / nx) / lead
    g = np.zeros_like(b)
    gy = dy / sy / (ny * lead)
    gx = dx / sx / (nx * lead)
    g[..., 1:, :] += gy
    g[..., :-1, :] -= gy
    g[..., :, 1:] += gx
    g[..., :, :-1] -= gx
    return float(val), g


class AlignProblem:
    """Cached operators and targets for one alignment run.

    ``theta[i]`` is ``(p_h*p_w, L)``: rescaled, normalized depth of view ``i``.
    """

    def __init__(self, theta: np.ndarray, cams, grid: tuple[int, int]):
        self.cams = list(cams)
        self.grid = grid
        self.theta = theta
        self.V, self.npix, self.L = theta.shape
        self.ops = [perspective_operator(c, *grid) for c in self.cams]
        self.ops_t = [op.T.tocsr() for op in self.ops]
        self.res = (self.cams[0].res_h, self.cams[0].res_w)

    def losses(self, st: AlignmentState, need_grad: bool = True):
        """Per-term objective values (summed over frames) and their gradients."""
        V, L = self.V, self.L
        sa = softplus(st.alpha)
        sg = sigmoid(st.alpha)
        beta = st.beta.reshape(V, L, -1)
        g_depth_S = np.zeros_like(st.depth)
        g_depth_a = np.zeros_like(st.alpha)
        g_depth_b = np.zeros_like(beta)
        l_depth = 0.0
        norm = 1.0 / (V * self.npix)
        for i in range(V):
            r = sa[i] * self.theta[i] + beta[i].T - self.ops[i] @ st.depth
            l_depth += float(np.sum(r * r)) * norm
            if need_grad:
                dr = 2.0 * norm * r
                g_depth_b[i] = dr.T
                g_depth_a[i] = np.sum(dr * self.theta[i], axis=0) * sg[i]
                g_depth_S -= self.ops_t[i] @ dr

        # scale: temporal term on consecutive frames plus the pull toward unit scale
        da = np.diff(st.alpha, axis=1)
        l_scale = float(np.sum(da * da)) / V + float(np.sum((sa - 1.0) ** 2)) / V
        g_scale_a = 2.0 * (sa - 1.0) * sg / V
        g_scale_a[:, 1:] += 2.0 * da / V
        g_scale_a[:, :-1] -= 2.0 * da / V

        # shift: TV per (view, frame) plus the temporal term
        tv, g_tv = tv_with_grad(st.beta)
        l_shift = tv * L  # tv_with_grad averages over (V, L); the objective sums frames
        g_shift_b = g_tv * L
        db = np.diff(beta, axis=1)
        l_shift += float(np.sum(db * db)) * norm
        gdb = 2.0 * norm * db
        g_shift_b = g_shift_b.reshape(V, L, -1)
        g_shift_b[:, 1:] += gdb
        g_shift_b[:, :-1] -= gdb

        vals = (l_depth, l_scale, l_shift)
        grads = dict(
            depth=(g_depth_S, g_depth_a, g_depth_b.reshape(st.beta.shape)),
            scale=(np.zeros_like(st.depth), g_scale_a, np.zeros_like(st.beta)),
            shift=(np.zeros_like(st.depth), np.zeros_like(st.alpha), g_shift_b.reshape(st.beta.shape)),
        )
        return vals, grads


def objective(vals, weights) -> float:
    return float(sum(w * v for w, v in zip(weights, vals)))


def _combine(grads, weights):
    out = None
    for w, key in zip(weights, ("depth", "scale", "shift")):
        if w == 0:
            continue
        g = [w * x for x in grads[key]]
        out = g if out is None else [a + b for a, b in zip(out, g)]
    return out


class Adam:
    def __init__(self, lrs, b1=0.9, b2=0.999, eps=1e-8):
        self.lrs, self.b1, self.b2, self.eps = lrs, b1, b2, eps
        self.factor = 1.0
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, self.lrs):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.factor * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# driver

def estimate_views(video: PanoVideo, cams, depth_model: MonoDepth) -> np.ndarray:
    """Rescaled monocular depth for every (view, frame): ``(V, L, p_h, p_w)``."""
    out = np.empty((len(cams), len(video), cams[0].res_h, cams[0].res_w))
    for k, frame in enumerate(video.frames):
        for i, cam in enumerate(cams):
            d = np.asarray(depth_model.estimate(project_perspective(frame, cam, frame=k)), dtype=np.float64)
            if d.shape != out.shape[2:] or not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValueError(f"depth model returned an invalid grid for view {i}, frame {k}")
            out[i, k] = rescale_depth(d, cam)
    return out


def initial_state(theta: np.ndarray, cams, grid: tuple[int, int]) -> AlignmentState:
    V, L, ph, pw = theta.shape
    sb = SplatBack(cams, *grid)
    views = [theta[i].transpose(1, 2, 0) for i in range(V)]
    S = np.log(2.0) * sb(views).reshape(-1, L)
    return AlignmentState(S, np.zeros((V, L)), np.zeros((V, L, ph, pw)))


def align(video: PanoVideo, cams, depth_model: MonoDepth, config: AlignConfig | None = None,
          theta: np.ndarray | None = None, callback=None) -> AlignResult:
    """Fused panoramic depth maps, one per frame, at ``1/depth_downsample`` resolution.

    ``callback(iteration, state)`` is called before every update; depths in
    ``state`` are normalized by the median of ``theta``.
    """
    cfg = config or AlignConfig()
    if len(video) == 0:
        raise ValueError("empty video")
    H = video[0].height
    grid = (max(1, H // cfg.depth_downsample), 2 * max(1, H // cfg.depth_downsample))
    if theta is None:
        theta = estimate_views(video, cams, depth_model)
    unit = cfg.depth_unit
    scale = float(np.median(theta)) / unit
    far = cfg.far_factor * unit
    # normalize to the working unit and give far/sky texels a finite value
    th = np.minimum(theta / scale, far)
    V, L, ph, pw = th.shape
    prob = AlignProblem(th.reshape(V, L, -1).transpose(0, 2, 1).copy(), cams, grid)
    st = initial_state(th, cams, grid)
    full_w = (cfg.lambda_depth, cfg.lambda_scale, cfg.lambda_shift)
    opt = Adam([cfg.lr_depth * unit, cfg.lr_alpha, cfg.lr_beta * unit])
    history, full_history = [], []
    rising, prev = 0, np.inf
    for it in range(cfg.iters + 1):
        warm = it < cfg.warmup
        w = (cfg.lambda_depth, 0.0, 0.0) if warm else full_w
        vals, grads = prob.losses(st, need_grad=it < cfg.iters)
        loss = objective(vals, w)
        history.append(loss)
        full_history.append(objective(vals, full_w))
        if not np.isfinite(loss):
            raise AlignmentDiverged(f"non-finite loss at iteration {it}")
        rising = rising + 1 if loss > prev else 0
        prev = loss
        if rising >= cfg.patience:
            raise AlignmentDiverged(
                f"loss increased for {rising} consecutive iterations (iteration {it}, loss {loss:.6g}, "
                f"depth {vals[0]:.3g}, scale {vals[1]:.3g}, shift {vals[2]:.3g})")
        if it == cfg.iters:
            break
        if callback is not None:
            callback(it, st)
        if it % 500 == 0:
            log.info("align iter %d: loss %.6g", it, loss)
        opt.factor = cfg.lr_final + (1.0 - cfg.lr_final) * 0.5 * (1.0 + np.cos(np.pi * it / cfg.iters))
        opt.step([st.depth, st.alpha, st.beta], _combine(grads, w))
    floor = 1e-3 * unit
    S = np.clip(st.depth, floor, far)
    depths = [EquirectImage(scale * S[:, k].reshape(grid)[..., None]) for k in range(L)]
    return AlignResult(depths, st, history, full_history, scale)
