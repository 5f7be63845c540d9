"""Dynamic panoramic lifting: fit one Gaussian set per timestamp to a panoramic video.

Timestamps are optimized in order.  ``G_0`` starts from the unprojected first
frame; every later set starts from its converged predecessor, which is then
frozen and only enters through the temporal term.  Each iteration trains on
one fan view (a shuffled cycle over the views), so every per-view mean in the
objective is estimated stochastically.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .geom import Camera, equirect_directions, icosphere_samples
from .image import EquirectImage, PanoVideo, project_perspective, sample_equirect
from .metrics import psnr, ssim_with_grad
from .splat import GaussianGrads, GaussianSet, RenderSettings, rasterize, rasterize_backward, unproject_init

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-8


class LiftDiverged(RuntimeError):
    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class LiftConfig:
    lambda_rgb: float = 1.0
    lambda_temporal: float = 0.05
    lambda_sem: float = 0.05
    lambda_geo: float = 0.05
    ssim_mix: float = 0.8           # weight on L1; SSIM gets the rest
    iters: int = 10000              # per timestamp
    # disturbance range alpha switches to alpha_values[j] at alpha_steps[j];
    # the first switch also ends the direct-supervision stage
    alpha_steps: tuple = (5400, 6600, 9000)
    alpha_values: tuple = (0.05, 0.1, 0.2)
    lr_position: float = 1.6e-4     # times the scene extent, decays to lr_position_final
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    per_face: int = 1000            # icosphere density of the initial set
    init_scale: float = 0.7

    def __post_init__(self):
        for k in ("lambda_rgb", "lambda_temporal", "lambda_sem", "lambda_geo"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if not 0.0 <= self.ssim_mix <= 1.0:
            raise ValueError("ssim_mix must lie in [0, 1]")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        steps = list(self.alpha_steps)
        if len(steps) != len(self.alpha_values) or not steps:
            raise ValueError("alpha_steps and alpha_values must have the same nonzero length")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("alpha_steps must be increasing")

    @property
    def stage2_start(self) -> int:
        return self.alpha_steps[0]

    def alpha_at(self, it: int) -> float:
        a = 0.0
        for s, v in zip(self.alpha_steps, self.alpha_values):
            if it >= s:
                a = v
        return a

    def with_budget(self, iters: int) -> "LiftConfig":
        """Same schedule with every iteration threshold scaled to ``iters``."""
        f = iters / self.iters
        steps = tuple(int(round(s * f)) for s in self.alpha_steps)
        return replace(self, iters=iters, alpha_steps=steps)


# ---------------------------------------------------------------------------
# feature extraction

class FeatureExtractor(Protocol):
    def features(self, image: np.ndarray) -> np.ndarray: ...

    def backward(self, image: np.ndarray, grad: np.ndarray) -> np.ndarray: ...


class PyramidFeatures:
    """Concatenated 4x4 patch means of a 3-level 2x pyramid.

    Level ``l`` patch means equal means over ``(4 * 2**l)``-pixel blocks of the
    input, so the map is linear and its adjoint spreads each gradient evenly
    over the block.  Rows/columns beyond a multiple of the block are ignored.
    """

    def __init__(self, levels: int = 3, patch: int = 4):
        self.blocks = [patch * 2 ** l for l in range(levels)]

    def features(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        out = []
        for b in self.blocks:
            h, w = img.shape[0] // b, img.shape[1] // b
            out.append(img[: h * b, : w * b].reshape(h, b, w, b, -1).mean(axis=(1, 3)).ravel())
        return np.concatenate(out)

    def backward(self, image: np.ndarray, grad: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        out = np.zeros(img.shape)
        pos = 0
        for b in self.blocks:
            h, w = img.shape[0] // b, img.shape[1] // b
            n = h * w * img.shape[2]
            g = grad[pos:pos + n].reshape(h, 1, w, 1, -1) / (b * b)
            out[: h * b, : w * b] += np.broadcast_to(g, (h, b, w, b, img.shape[2])).reshape(h * b, w * b, -1)
            pos += n
        return out


# ---------------------------------------------------------------------------
# image-level loss terms, each returning (value, gradient(s))

def loss_rgb(render: np.ndarray, target: np.ndarray, mix: float = 0.8):
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"dimension mismatch: {render.shape} vs {target.shape}")
    diff = render - target
    l1 = float(np.mean(np.abs(diff)))
    g = mix * np.sign(diff) / diff.size
    val = mix * l1
    if mix < 1.0:
        s, gs = ssim_with_grad(render, target)
        val += (1.0 - mix) * (1.0 - s)
        g = g - (1.0 - mix) * gs
    return val, g


def loss_mse(render: np.ndarray, reference: np.ndarray):
    diff = np.asarray(render, dtype=np.float64) - reference
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def cosine_loss(fa: np.ndarray, fb: np.ndarray):
    """``1 - cos(fa, fb)`` and its gradients with respect to both vectors."""
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0 or nb == 0:
        return 1.0, np.zeros_like(fa), np.zeros_like(fb)
    c = float(fa @ fb / (na * nb))
    ga = -(fb / (na * nb) - c * fa / na ** 2)
    gb = -(fa / (na * nb) - c * fb / nb ** 2)
    return 1.0 - c, ga, gb


def pearson_loss(rendered: np.ndarray, target: np.ndarray):
    """``1 - Pearson(rendered, target)`` and its gradient w.r.t. ``rendered``.

    A (near) constant rendered or target depth contributes 1 with zero
    gradient.
    """
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = r.size
    rc = r - r.mean()
    tc = t - t.mean()
    vr = float(np.mean(rc * rc))
    vt = float(np.mean(tc * tc))
    if vr < VAR_FLOOR or vt < VAR_FLOOR:
        log.info("zero-variance depth in geometric loss; contributing 1 with no gradient")
        return 1.0, np.zeros_like(r)
    s = np.sqrt(vr * vt)
    p = float(np.mean(rc * tc)) / s
    g = -(tc / (n * s) - p * rc / (n * vr))
    return 1.0 - p, g


# ---------------------------------------------------------------------------
# Gaussian-level loss terms

def _zero_grads(g: GaussianSet) -> GaussianGrads:
    return GaussianGrads(*(np.zeros_like(a) for a in g.arrays()))


def _accumulate(acc: GaussianGrads, other: GaussianGrads, w: float = 1.0) -> None:
    for a, b in zip(acc.arrays(), other.arrays()):
        a += w * b


ORIGIN = np.zeros(3)


def loss_temporal(g: GaussianSet, prev: GaussianSet, cams, settings: RenderSettings = RenderSettings(),
                  prev_renders=None):
    """Mean over views of the mean squared difference between the two sets' renders."""
    total = 0.0
    grads = _zero_grads(g)
    for k, cam in enumerate(cams):
        ref = prev_renders[k] if prev_renders is not None else rasterize(prev, ORIGIN, cam, settings).rgb
        r = rasterize(g, ORIGIN, cam, settings)
        v, d = loss_mse(r.rgb, ref)
        total += v / len(cams)
        _accumulate(grads, rasterize_backward(g, ORIGIN, cam, settings, r, d), 1.0 / len(cams))
    return total, grads


def loss_sem(g: GaussianSet, cams, extractor, deltas, settings: RenderSettings = RenderSettings()):
    """Mean over views of ``1 - cos`` between features of the origin and displaced renders.

    ``deltas[k]`` is the camera displacement for view ``k``.
    """
    total = 0.0
    grads = _zero_grads(g)
    for cam, delta in zip(cams, deltas):
        v, gr = _sem_view(g, cam, extractor, np.asarray(delta, float), settings)
        total += v / len(cams)
        _accumulate(grads, gr, 1.0 / len(cams))
    return total, grads


def _sem_view(g, cam, extractor, delta, settings, r0=None):
    r0 = rasterize(g, ORIGIN, cam, settings) if r0 is None else r0
    r1 = rasterize(g, delta, cam, settings)
    v, ga, gb = cosine_loss(extractor.features(r0.rgb), extractor.features(r1.rgb))
    grads = rasterize_backward(g, ORIGIN, cam, settings, r0, extractor.backward(r0.rgb, ga))
    _accumulate(grads, rasterize_backward(g, delta, cam, settings, r1, extractor.backward(r1.rgb, gb)))
    return v, grads


def loss_geo(g: GaussianSet, cams, depth_targets, settings: RenderSettings = RenderSettings()):
    """Mean over views of ``1 - Pearson(rendered depth, target depth)``."""
    total = 0.0
    grads = _zero_grads(g)
    for cam, tgt in zip(cams, depth_targets):
        r = rasterize(g, ORIGIN, cam, settings)
        v, d = pearson_loss(r.depth, tgt)
        total += v / len(cams)
        _accumulate(grads, rasterize_backward(g, ORIGIN, cam, settings, r, d_depth=d), 1.0 / len(cams))
    return total, grads


# ---------------------------------------------------------------------------
# optimizer

class GaussianAdam:
    """Adam over the five parameter groups; quaternions renormalized and colours clamped after each step."""

    def __init__(self, lrs, b1=0.9, b2=0.999, eps=1e-15):
        self.lrs = list(lrs)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, g: GaussianSet, grads: GaussianGrads) -> None:
        params = g.arrays()
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, gr, m, v, lr in zip(params, grads.arrays(), self.m, self.v, self.lrs):
            m *= self.b1
            m += (1 - self.b1) * gr
            v *= self.b2
            v += (1 - self.b2) * gr * gr
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        g.normalize()


# ---------------------------------------------------------------------------
# driver

@dataclass
class FrameLog:
    frame: int
    psnr: float
    final_terms: dict
    history: list = field(repr=False, default_factory=list)


@dataclass
class LiftResult:
    sets: list
    logs: list

    @property
    def psnr(self) -> list:
        return [f.psnr for f in self.logs]


def view_targets(frame: EquirectImage, cams) -> list:
    return [project_perspective(frame, c).data[..., :3] for c in cams]


def depth_view_targets(depth: np.ndarray, cams) -> list:
    d = np.asarray(depth, dtype=np.float64)
    d = d[..., None] if d.ndim == 2 else d
    return [sample_equirect(d, c.rays())[..., 0] for c in cams]


def resample_depth(depth: np.ndarray, height: int, width: int) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.shape[:2] == (height, width):
        return d
    return sample_equirect(d[..., None] if d.ndim == 2 else d, equirect_directions(height, width))[..., 0]


def training_psnr(g: GaussianSet, targets, cams, settings: RenderSettings) -> float:
    return float(np.mean([psnr(np.clip(rasterize(g, ORIGIN, c, settings).rgb, 0, 1), t)
                          for c, t in zip(cams, targets)]))


def fit_timestamp(g: GaussianSet, targets, cams, config: LiftConfig, rng: np.random.Generator, *,
                  prev_renders=None, depth_targets=None, extractor=None,
                  settings: RenderSettings = RenderSettings(), extent: float = 1.0,
                  callback: Callable | None = None) -> list:
    """Optimize ``g`` in place for ``config.iters`` iterations; returns the per-iteration term trace."""
    opt = GaussianAdam([config.lr_position * extent, config.lr_rotation, config.lr_scale,
                        config.lr_color, config.lr_opacity])
    lr0 = config.lr_position * extent
    lr1 = config.lr_position_final * extent
    use_sem = config.lambda_sem > 0 and extractor is not None
    use_geo = config.lambda_geo > 0 and depth_targets is not None
    use_tmp = config.lambda_temporal > 0 and prev_renders is not None
    trace = []
    order = np.array([], dtype=int)
    for it in range(config.iters):
        if len(order) == 0:
            order = rng.permutation(len(cams))
        k, order = int(order[0]), order[1:]
        frac = it / max(config.iters - 1, 1)
        opt.lrs[0] = float(np.exp((1 - frac) * np.log(lr0) + frac * np.log(lr1)))
        stage2 = it >= config.stage2_start
        # sample the displacement every iteration so the stream does not depend on the stage
        delta = rng.uniform(-1.0, 1.0, 3) * config.alpha_at(it)

        cam = cams[k]
        r = rasterize(g, ORIGIN, cam, settings)
        terms = {}
        v, d_rgb = loss_rgb(r.rgb, targets[k], config.ssim_mix)
        terms["rgb"] = v
        d_rgb = config.lambda_rgb * d_rgb
        d_depth = None
        if use_tmp:
            v, d = loss_mse(r.rgb, prev_renders[k])
            terms["temporal"] = v
            d_rgb = d_rgb + config.lambda_temporal * d
        if stage2 and use_geo:
            v, d = pearson_loss(r.depth, depth_targets[k])
            terms["geo"] = v
            d_depth = config.lambda_geo * d
        grads = rasterize_backward(g, ORIGIN, cam, settings, r, d_rgb, d_depth)
        if stage2 and use_sem:
            v, gs = _sem_view(g, cam, extractor, delta, settings, r0=r)
            terms["sem"] = v
            _accumulate(grads, gs, config.lambda_sem)
        total = (config.lambda_rgb * terms["rgb"] + config.lambda_temporal * terms.get("temporal", 0.0)
                 + config.lambda_geo * terms.get("geo", 0.0) + config.lambda_sem * terms.get("sem", 0.0))
        terms["total"] = total
        trace.append(terms)
        if not np.isfinite(total) or not all(np.all(np.isfinite(a)) for a in grads.arrays()):
            raise LiftDiverged(f"non-finite loss at iteration {it}", trace[-50:])
        opt.step(g, grads)
        if callback is not None:
            callback(it, g, terms)
    return trace


def lift(video: PanoVideo, depths, cams, config: LiftConfig = LiftConfig(), extractor=None, *,
         seed: int = 0, settings: RenderSettings = RenderSettings(), callback: Callable | None = None) -> LiftResult:
    """Fit ``len(video)`` Gaussian sets, one per frame, in timestamp order.

    ``depths[t]`` is the panoramic ray-distance map of frame ``t`` (any 2:1
    resolution).  ``callback(t, it, g, terms)`` is called after every step.
    """
    depths = [np.asarray(d, dtype=np.float64) for d in depths]
    if len(depths) != len(video):
        raise ValueError(f"{len(video)} frames but {len(depths)} depth maps")
    extractor = PyramidFeatures() if extractor is None else extractor
    rng = np.random.default_rng(seed)
    frame0 = video[0]
    d0 = resample_depth(depths[0], frame0.height, frame0.width)
    g = unproject_init(frame0, d0, icosphere_samples(config.per_face), scale_factor=config.init_scale)
    extent = float(np.median(np.linalg.norm(g.positions, axis=1)))
    sets, logs = [], []
    prev_renders = None
    for t in range(len(video)):
        targets = view_targets(video[t], cams)
        dt = depth_view_targets(depths[t], cams)
        cb = None if callback is None else (lambda it, gg, terms, t=t: callback(t, it, gg, terms))
        trace = fit_timestamp(g, targets, cams, config, rng, prev_renders=prev_renders, depth_targets=dt,
                              extractor=extractor, settings=settings, extent=extent, callback=cb)
        frozen = g.copy()
        p = training_psnr(frozen, targets, cams, settings)
        log.info("frame %d: training PSNR %.2f dB", t, p)
        sets.append(frozen)
        logs.append(FrameLog(t, p, trace[-1], trace))
        prev_renders = [rasterize(frozen, ORIGIN, c, settings).rgb for c in cams]
        g = frozen.copy()
    return LiftResult(sets, logs)


def config_dict(config: LiftConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()}
