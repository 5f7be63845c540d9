"""Procedural ground-truth scene: a textured room sphere and a moving blob.

Everything is ray traced analytically, so colour, ray distance and planar
depth are available for any camera position, direction and frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, camera_ray, equirect_directions, normalize
from .image import EquirectImage, PanoVideo


@dataclass
class SyntheticScene:
    room_radius: float = 4.0
    room_center: tuple = (0.5, -0.7, 0.3)
    texture_freq: float = 2.0
    blob_radius: float = 0.55
    blob_start: tuple = (0.2, 2.2, 0.1)
    blob_velocity: tuple = (0.07, 0.0, 0.03)
    blob_color: tuple = (0.85, 0.45, 0.3)
    n_frames: int = 4
    seed: int = 0
    _waves: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        # per channel: 4 plane waves (direction, phase, amplitude)
        dirs = normalize(rng.normal(size=(3, 4, 3)))
        phase = rng.uniform(0, 2 * np.pi, size=(3, 4))
        amp = rng.uniform(0.05, 0.1, size=(3, 4))
        self._waves = np.concatenate([dirs, phase[..., None], amp[..., None]], axis=-1)
        if np.linalg.norm(self.room_center) >= self.room_radius:
            raise ValueError("the origin must lie inside the room")

    # -- geometry ---------------------------------------------------------

    def blob_center(self, frame: int) -> np.ndarray:
        return np.asarray(self.blob_start, float) + frame * np.asarray(self.blob_velocity, float)

    def room_color(self, p: np.ndarray) -> np.ndarray:
        w = normalize(p - np.asarray(self.room_center, float))
        out = np.full(w.shape[:-1] + (3,), 0.5)
        for ch in range(3):
            for d0, d1, d2, ph, a in self._waves[ch]:
                out[..., ch] += a * np.sin(self.texture_freq * (w @ np.array([d0, d1, d2])) * np.pi + ph)
        return out

    def blob_shade(self, p: np.ndarray, frame: int) -> np.ndarray:
        n = normalize(p - self.blob_center(frame))
        light = normalize(np.array([-0.3, -0.6, 0.75]))
        lam = 0.65 + 0.3 * (n @ light)
        return lam[..., None] * np.asarray(self.blob_color, float)

    def trace(self, origins: np.ndarray, dirs: np.ndarray, frame: int):
        """Colour, ray distance and blob-hit flag for rays ``origins + t * dirs``."""
        dirs = normalize(dirs)
        o = np.broadcast_to(np.asarray(origins, float), dirs.shape)
        oc = o - np.asarray(self.room_center, float)
        b = np.sum(dirs * oc, -1)
        c = np.sum(oc * oc, -1) - self.room_radius ** 2
        t_room = -b + np.sqrt(np.maximum(b * b - c, 0.0))
        ob = o - self.blob_center(frame)
        b2 = np.sum(dirs * ob, -1)
        c2 = np.sum(ob * ob, -1) - self.blob_radius ** 2
        disc = b2 * b2 - c2
        t_blob = -b2 - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc > 0) & (t_blob > 0) & (t_blob < t_room)
        t = np.where(hit, t_blob, t_room)
        p = o + t[..., None] * dirs
        rgb = np.where(hit[..., None], self.blob_shade(p, frame), self.room_color(p))
        return np.clip(rgb, 0.0, 1.0), t, hit

    # -- renders ------------------------------------------------------------

    def panorama(self, frame: int, height: int, width: int, supersample: int = 2):
        """``(rgb, ray distance)`` panoramas seen from the origin."""
        rgb = np.zeros((height, width, 3))
        s = supersample
        for i in range(s):
            for j in range(s):
                u = (np.arange(width) + (j + 0.5) / s) / width * 2 - 1
                v = 1 - (np.arange(height) + (i + 0.5) / s) / height * 2
                uu, vv = np.meshgrid(u, v)
                lon, lat = np.pi * uu, 0.5 * np.pi * vv
                d = np.stack([np.cos(lat) * np.sin(lon), np.cos(lat) * np.cos(lon), np.sin(lat)], -1)
                rgb += self.trace(np.zeros(3), d, frame)[0]
        _, dist, _ = self.trace(np.zeros(3), equirect_directions(height, width), frame)
        return rgb / (s * s), dist

    def video(self, height: int, width: int, supersample: int = 2) -> tuple[PanoVideo, np.ndarray]:
        frames, depths = [], []
        for k in range(self.n_frames):
            rgb, dist = self.panorama(k, height, width, supersample)
            frames.append(EquirectImage(rgb))
            depths.append(dist)
        return PanoVideo(frames), np.stack(depths)

    def perspective(self, cam: Camera, frame: int, position=(0.0, 0.0, 0.0), supersample: int = 2):
        """``(rgb, ray distance, planar depth)`` for a camera placed at ``position``."""
        pos = np.asarray(position, float)
        rgb = np.zeros((cam.res_h, cam.res_w, 3))
        s = supersample
        for i in range(s):
            for j in range(s):
                x = (np.arange(cam.res_w) + (j + 0.5) / s) / cam.res_w * 2 - 1
                y = 1 - (np.arange(cam.res_h) + (i + 0.5) / s) / cam.res_h * 2
                xx, yy = np.meshgrid(x, y)
                rgb += self.trace(pos, camera_ray(cam, xx, yy), frame)[0]
        rays = cam.rays()
        _, dist, _ = self.trace(pos, rays, frame)
        zdepth = dist * (rays @ cam.axis)
        return rgb / (s * s), dist, zdepth

    def mask(self, height: int, width: int, margin_deg: float = 4.0) -> np.ndarray:
        """Binary panorama mask covering the blob footprint over all frames."""
        d = equirect_directions(height, width)
        m = np.zeros((height, width), bool)
        for k in range(self.n_frames):
            c = self.blob_center(k)
            dist = np.linalg.norm(c)
            half = np.arcsin(min(1.0, self.blob_radius / dist)) + np.radians(margin_deg)
            m |= (d @ (c / dist)) >= np.cos(half)
        return m.astype(np.float64)
