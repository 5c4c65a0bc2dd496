"""Deterministic software renderer and frame codec for the testbed server.

The scene is a single cube seen from above at a fixed tilt through an
orthographic camera. Each face has its own color and a checker texture, and
the top face carries an off-center marker, so every distinct rotation angle
produces a distinct image.
"""
from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_RESOLUTION = (256, 256)
TILT_DEGREES = 35.0
CHECKS = 6

FACE_COLORS = {
    "+x": (220, 60, 50),
    "-x": (60, 170, 80),
    "+y": (230, 200, 70),
    "-y": (120, 120, 120),
    "+z": (60, 90, 220),
    "-z": (200, 90, 200),
}
BACKGROUND = (24, 24, 32)
LIGHT = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])

# face name -> (origin corner, u edge, v edge, outward normal) on the unit cube [-1, 1]^3
_FACES = {
    "+x": ((1, -1, -1), (0, 0, 2), (0, 2, 0), (1, 0, 0)),
    "-x": ((-1, -1, 1), (0, 0, -2), (0, 2, 0), (-1, 0, 0)),
    "+y": ((-1, 1, -1), (2, 0, 0), (0, 0, 2), (0, 1, 0)),
    "-y": ((-1, -1, 1), (2, 0, 0), (0, 0, -2), (0, -1, 0)),
    "+z": ((-1, -1, 1), (2, 0, 0), (0, 2, 0), (0, 0, 1)),
    "-z": ((1, -1, -1), (-2, 0, 0), (0, 2, 0), (0, 0, -1)),
}


def normalize_angle(angle: float) -> float:
    a = round(float(angle) % 360.0, 9)
    return 0.0 if a >= 360.0 else a


def _view_matrix(angle_degrees: float) -> np.ndarray:
    yaw = math.radians(angle_degrees)
    tilt = math.radians(TILT_DEGREES)
    ry = np.array([
        [math.cos(yaw), 0, math.sin(yaw)],
        [0, 1, 0],
        [-math.sin(yaw), 0, math.cos(yaw)],
    ])
    rx = np.array([
        [1, 0, 0],
        [0, math.cos(tilt), -math.sin(tilt)],
        [0, math.sin(tilt), math.cos(tilt)],
    ])
    return rx @ ry


def render_scene(angle_degrees: float, resolution: tuple[int, int] = DEFAULT_RESOLUTION) -> np.ndarray:
    """Render the cube rotated by ``angle_degrees`` about the vertical axis.

    Returns a fresh ``(height, width, 3)`` uint8 array.
    """
    width, height = resolution
    return _render_cached(normalize_angle(angle_degrees), int(width), int(height)).copy()


# the scene is deterministic and the server only visits a few dozen angles
@lru_cache(maxsize=512)
def _render_cached(angle: float, width: int, height: int) -> np.ndarray:
    view = _view_matrix(angle)
    scale = 0.9 * min(width, height) / (2 * math.sqrt(3))
    cx, cy = width / 2.0, height / 2.0

    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND

    for name, (origin, eu, ev, normal) in _FACES.items():
        n = view @ np.asarray(normal, float)
        if n[2] <= 1e-9:
            continue
        o = view @ np.asarray(origin, float)
        u = view @ np.asarray(eu, float)
        v = view @ np.asarray(ev, float)
        # screen space: x right, y down
        o2 = np.array([cx + scale * o[0], cy - scale * o[1]])
        u2 = np.array([scale * u[0], -scale * u[1]])
        v2 = np.array([scale * v[0], -scale * v[1]])
        det = u2[0] * v2[1] - u2[1] * v2[0]
        if abs(det) < 1e-9:
            continue
        corners = np.array([o2, o2 + u2, o2 + v2, o2 + u2 + v2])
        x0, y0 = np.maximum(np.floor(corners.min(axis=0)).astype(int), 0)
        x1 = min(int(np.ceil(corners[:, 0].max())) + 1, width)
        y1 = min(int(np.ceil(corners[:, 1].max())) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        px, py = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        dx, dy = px - o2[0], py - o2[1]
        fu = (dx * v2[1] - dy * v2[0]) / det
        fv = (u2[0] * dy - u2[1] * dx) / det
        inside = (fu >= 0) & (fu < 1) & (fv >= 0) & (fv < 1)
        if not inside.any():
            continue
        shade = 0.55 + 0.45 * max(0.0, float(n @ LIGHT))
        checker = ((np.floor(fu * CHECKS) + np.floor(fv * CHECKS)) % 2)[inside]
        color = np.asarray(FACE_COLORS[name], float) * shade
        texel = color[None, :] * (0.7 + 0.3 * checker[:, None])
        if name == "+y":
            marker = ((fu > 0.08) & (fu < 0.3) & (fv > 0.08) & (fv < 0.3))[inside]
            texel[marker] = (250, 250, 250)
        img[y0:y1, x0:x1][inside] = np.clip(np.rint(texel), 0, 255).astype(np.uint8)
    img.flags.writeable = False
    return img


@dataclass
class ServerSceneState:
    angle_degrees: float = 0.0
    rotation_step: float = 5.0
    resolution: tuple[int, int] = DEFAULT_RESOLUTION

    def __post_init__(self):
        self.angle_degrees = normalize_angle(self.angle_degrees)

    def rotate(self, degrees: float) -> None:
        self.angle_degrees = normalize_angle(self.angle_degrees + degrees)

    def render(self) -> np.ndarray:
        return render_scene(self.angle_degrees, self.resolution)


class FrameDecodeError(ValueError):
    pass


LOSSLESS = "lossless"
JPEG = "jpeg"
CODECS = (LOSSLESS, JPEG)

_RAW_MAGIC = b"IRF1"
_RAW_HEADER = struct.Struct(">4sHHB")


def encode_frame(pixels: np.ndarray, codec: str = LOSSLESS, quality: int = 75) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w, c = pixels.shape
    if codec == LOSSLESS:
        body = zlib.compress(np.ascontiguousarray(pixels).tobytes(), 1)
        return _RAW_HEADER.pack(_RAW_MAGIC, w, h, c) + body
    if codec == JPEG:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(pixels, "RGB").save(buf, format="JPEG", quality=quality)
        return buf.getvalue()
    raise ValueError(f"unknown codec {codec!r}; expected one of {CODECS}")


def decode_frame(data: bytes) -> np.ndarray:
    data = bytes(data)
    if data[:4] == _RAW_MAGIC:
        if len(data) < _RAW_HEADER.size:
            raise FrameDecodeError("truncated frame header")
        _, w, h, c = _RAW_HEADER.unpack_from(data)
        try:
            raw = zlib.decompress(data[_RAW_HEADER.size:])
        except zlib.error as exc:
            raise FrameDecodeError(f"corrupt frame body: {exc}") from None
        if len(raw) != w * h * c:
            raise FrameDecodeError(f"frame body is {len(raw)} bytes, expected {w * h * c}")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).copy()
    if data[:2] == b"\xff\xd8":
        from PIL import Image, UnidentifiedImageError

        try:
            img = Image.open(io.BytesIO(data))
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        except (UnidentifiedImageError, OSError) as exc:
            raise FrameDecodeError(f"corrupt jpeg frame: {exc}") from None
    raise FrameDecodeError("unrecognised frame encoding")
