"""Sphere, equirectangular and pinhole-camera coordinate systems.

Directions are plain ``(..., 3)`` float arrays of unit vectors; every function
here is vectorized over the leading axes.  Equirectangular coordinates
``(u, v)`` live in ``[-1, 1]^2`` with ``u`` the signed azimuth (``u = 0`` looks
down +y, ``u > 0`` towards +x) and ``v`` the elevation (``v = 1`` is the +z
pole).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])
_POLE_EPS = 1e-6


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n == 0.0, 1.0, n)


def dir_to_equirect(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map unit directions to equirectangular ``(u, v)``.

    ``v = (2/pi) arcsin z``; ``u = atan2(x, y) / pi`` which equals
    ``(1/pi) arccos(y / sqrt(1 - z^2))`` on the ``x >= 0`` hemisphere and
    carries the sign of ``x`` elsewhere.  The antimeridian maps to ``u = +1``
    and the poles to ``u = 0``.
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    v = (2.0 / np.pi) * np.arcsin(np.clip(z, -1.0, 1.0))
    u = np.arctan2(x, y) / np.pi
    u = np.where(u <= -1.0, 1.0, u)
    return u, v


def equirect_to_dir(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lon = np.pi * u
    lat = 0.5 * np.pi * v
    c = np.cos(lat)
    return np.stack([c * np.sin(lon), c * np.cos(lon), np.sin(lat)], axis=-1)


def equirect_pixel_uv(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(u, v)`` of texel centers for an ``height x width`` panorama (row 0 at the top)."""
    u = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    v = 1.0 - (np.arange(height) + 0.5) / height * 2.0
    return np.meshgrid(u, v)


def equirect_directions(height: int, width: int) -> np.ndarray:
    u, v = equirect_pixel_uv(height, width)
    return equirect_to_dir(u, v)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera centred at the origin.

    ``plane_size`` is the extent of the image plane placed at distance
    ``focal`` along ``axis``; normalized plane coordinates ``(x, y)`` run over
    ``[-1, 1]^2`` with ``y = +1`` at the top row.
    """

    axis: np.ndarray
    focal: float = 0.6
    plane_size: tuple[float, float] = (0.6, 0.6)
    res_w: int = 64
    res_h: int = 64
    roll: float = 0.0
    up_hint: np.ndarray | None = None
    _basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        axis = normalize(np.asarray(self.axis, dtype=np.float64).reshape(3))
        object.__setattr__(self, "axis", axis)
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if min(self.plane_size) <= 0:
            raise ValueError("plane_size must be positive")
        object.__setattr__(self, "plane_size", (float(self.plane_size[0]), float(self.plane_size[1])))
        object.__setattr__(self, "_basis", camera_basis(axis, self.up_hint, self.roll))

    @property
    def right(self) -> np.ndarray:
        return self._basis[0]

    @property
    def up(self) -> np.ndarray:
        return self._basis[1]

    @property
    def basis(self) -> np.ndarray:
        """Rows ``(right, up, axis)``: the world-to-camera rotation."""
        return self._basis

    @property
    def fov_deg(self) -> tuple[float, float]:
        sx, sy = self.plane_size
        return (
            float(np.degrees(2.0 * np.arctan(0.5 * sx / self.focal))),
            float(np.degrees(2.0 * np.arctan(0.5 * sy / self.focal))),
        )

    def with_resolution(self, res_w: int, res_h: int | None = None) -> "Camera":
        return Camera(self.axis, self.focal, self.plane_size, res_w,
                      res_w if res_h is None else res_h, self.roll, self.up_hint)

    def pixel_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized plane coordinates of pixel centers, each ``(res_h, res_w)``."""
        x = (np.arange(self.res_w) + 0.5) / self.res_w * 2.0 - 1.0
        y = 1.0 - (np.arange(self.res_h) + 0.5) / self.res_h * 2.0
        return np.meshgrid(x, y)

    def rays(self) -> np.ndarray:
        x, y = self.pixel_xy()
        return camera_ray(self, x, y)

    def key(self) -> tuple:
        return (tuple(np.round(self.axis, 12)), self.focal, self.plane_size, self.res_w, self.res_h)


def camera_basis(axis: np.ndarray, up_hint: np.ndarray | None = None, roll: float = 0.0) -> np.ndarray:
    """Right/up/forward rows; up lies in the plane spanned by ``axis`` and world z."""
    axis = normalize(axis)
    ref = WORLD_UP if up_hint is None else normalize(np.asarray(up_hint, dtype=np.float64))
    up = ref - np.dot(ref, axis) * axis
    n = np.linalg.norm(up)
    if n < _POLE_EPS:
        if up_hint is None:
            raise ValueError("camera axis is parallel to world z; pass an explicit up_hint")
        raise ValueError("up_hint is parallel to the camera axis")
    up = up / n
    right = np.cross(axis, up)
    if roll:
        c, s = np.cos(roll), np.sin(roll)
        right, up = c * right + s * up, -s * right + c * up
    return np.stack([right, up, axis])


def camera_ray(cam: Camera, x, y) -> np.ndarray:
    """Unit ray through normalized plane coordinates ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = cam.plane_size
    r = (cam.focal * cam.axis
         + (0.5 * sx * x)[..., None] * cam.right
         + (0.5 * sy * y)[..., None] * cam.up)
    return normalize(r)


def dir_to_pixel(cam: Camera, d: np.ndarray, *, margin: float = 0.0):
    """Project directions onto the camera plane.

    Returns ``(x, y, inside)``; ``inside`` is False behind the camera or
    outside ``[-1 - margin, 1 + margin]^2`` (``x, y`` are then meaningless).
    """
    d = np.asarray(d, dtype=np.float64)
    cam_d = d @ cam.basis.T
    zc = cam_d[..., 2]
    front = zc > 1e-12
    safe = np.where(front, zc, 1.0)
    sx, sy = cam.plane_size
    x = cam_d[..., 0] / safe * cam.focal / (0.5 * sx)
    y = cam_d[..., 1] / safe * cam.focal / (0.5 * sy)
    lim = 1.0 + margin
    inside = front & (np.abs(x) <= lim) & (np.abs(y) <= lim)
    return x, y, inside


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit-circumradius icosahedron vertices ``(12, 3)`` and outward faces ``(20, 3)``."""
    p = (1.0 + 5.0 ** 0.5) / 2.0
    verts = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return normalize(verts), faces


def face_centroids() -> np.ndarray:
    verts, faces = icosahedron()
    return normalize(verts[faces].mean(axis=1))


@dataclass(frozen=True, eq=False)
class SphereSampling:
    points: np.ndarray   # (N, 3) unit vectors
    face_id: np.ndarray  # (N,) int in [0, 20)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> float:
        """Mean angular spacing assuming an even covering of the sphere."""
        return float(np.sqrt(4.0 * np.pi / len(self.points)))


def _face_barycentrics(per_face: int) -> np.ndarray:
    # centroids of the n^2 sub-triangles of an n-subdivided face, thinned evenly
    n = int(np.ceil(np.sqrt(per_face)))
    pts = []
    for i in range(n):
        for j in range(n - i):
            pts.append((i + 1.0 / 3.0, j + 1.0 / 3.0))
            if i + j < n - 1:
                pts.append((i + 2.0 / 3.0, j + 2.0 / 3.0))
    b = np.asarray(pts) / n
    if len(b) > per_face:
        keep = np.round(np.linspace(0, len(b) - 1, per_face)).astype(int)
        b = b[keep]
    return b


def icosphere_samples(per_face: int, rotation: np.ndarray | None = None) -> SphereSampling:
    """Evenly sample every icosahedron face and project the points onto the sphere.

    ``rotation`` (3x3) orients the base icosahedron; the result is exactly the
    rotated default point set.
    """
    if per_face < 1:
        raise ValueError("per_face must be >= 1")
    verts, faces = icosahedron()
    b = _face_barycentrics(per_face)
    tri = verts[faces]                       # (20, 3, 3)
    a = tri[:, 0][:, None]
    p = a + b[None, :, :1] * (tri[:, 1] - tri[:, 0])[:, None] + b[None, :, 1:] * (tri[:, 2] - tri[:, 0])[:, None]
    points = normalize(p.reshape(-1, 3))
    if rotation is not None:
        points = points @ np.asarray(rotation, dtype=np.float64).T
    face_id = np.repeat(np.arange(len(faces)), len(b))
    return SphereSampling(points, face_id)


def plane_size_for_fov(fov_deg: float, focal: float = 0.6) -> float:
    return 2.0 * focal * np.tan(np.radians(fov_deg) / 2.0)


def camera_fan(fov_deg: float = 80.0, res: int = 64, focal: float = 0.6) -> list[Camera]:
    """Twenty square cameras looking through the icosahedron face centroids."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError("fov_deg must lie in (0, 180)")
    s = plane_size_for_fov(fov_deg, focal)
    return [Camera(c, focal, (s, s), res, res) for c in face_centroids()]


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Numerically stable angle between direction arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(cross, np.sum(a * b, axis=-1))


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = normalize(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * kx @ kx
