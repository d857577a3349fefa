"""Rasterize trajectory frames for embedding and UI streaming."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTrajectory, ImageTooSmall

DEFAULT_IMAGE_SIZE = 224
DEFAULT_TRAIL_DECAY = 0.85
MIN_IMAGE_SIZE = 32

# 3x3 splat: exp(-(dx^2 + dy^2) / 2) for dx, dy in {-1, 0, 1}.
_SPLAT = np.array(
    [[np.exp(-1.0), np.exp(-0.5), np.exp(-1.0)],
     [np.exp(-0.5), 1.0, np.exp(-0.5)],
     [np.exp(-1.0), np.exp(-0.5), np.exp(-1.0)]]
)


@dataclass
class ImageRGB:
    width: int
    height: int
    pixels: bytes  # row-major 8-bit RGB

    def __post_init__(self):
        if len(self.pixels) != self.width * self.height * 3:
            raise ValueError("pixel buffer length does not match dimensions")

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3
        )

    @staticmethod
    def from_array(arr: np.ndarray) -> "ImageRGB":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        h, w, _ = arr.shape
        return ImageRGB(w, h, arr.tobytes())


def select_frames(trajectory, k: int) -> list[int]:
    """k frame indices evenly spaced over the last half, final frame always
    included. Early frames reflect random initialization, so they are skipped."""
    n = len(trajectory.frames)
    if n == 0:
        raise EmptyTrajectory("trajectory has no frames")
    if k < 1:
        raise ValueError("k must be >= 1")
    start = (n - 1) // 2
    last = n - 1
    window = last - start + 1
    if k >= window:
        return list(range(start, last + 1))
    if k == 1:
        return [last]
    picks = np.linspace(start, last, k)
    return sorted({int(round(p)) for p in picks})


def rasterize_frame(positions, size: int = DEFAULT_IMAGE_SIZE,
                    trail: ImageRGB | None = None,
                    decay: float = DEFAULT_TRAIL_DECAY) -> ImageRGB:
    """Splat agents as 3x3 gaussian dots on black; optionally max-blend a
    decayed previous image underneath (motion trails)."""
    if size < MIN_IMAGE_SIZE:
        raise ImageTooSmall(f"size {size} < {MIN_IMAGE_SIZE}")
    canvas = np.zeros((size, size), dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    for k in range(positions.shape[0]):
        cx = int(np.floor(positions[k, 0] * size + 0.5)) % size
        cy = int(np.floor(positions[k, 1] * size + 0.5)) % size
        for dy in (-1, 0, 1):
            row = (cy + dy) % size
            for dx in (-1, 0, 1):
                col = (cx + dx) % size
                w = _SPLAT[dy + 1, dx + 1] * 255.0
                if w > canvas[row, col]:
                    canvas[row, col] = w
    fresh = canvas.astype(np.uint8)
    if trail is not None:
        faded = (trail.as_array().astype(np.float64) * decay).astype(np.uint8)
        rgb = np.maximum(faded, fresh[:, :, None])
    else:
        rgb = np.repeat(fresh[:, :, None], 3, axis=2)
    return ImageRGB.from_array(rgb)


def render_trail_sequence(frames_positions, size: int = DEFAULT_IMAGE_SIZE,
                          decay: float = DEFAULT_TRAIL_DECAY) -> ImageRGB:
    """Splat a run of frames oldest-first with decaying trails."""
    image = None
    for positions in frames_positions:
        image = rasterize_frame(positions, size, trail=image, decay=decay)
    if image is None:
        raise EmptyTrajectory("no frames to render")
    return image


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    chunk = tag + payload
    return struct.pack(">I", len(payload)) + chunk + struct.pack(
        ">I", zlib.crc32(chunk) & 0xFFFFFFFF
    )


def encode_png(image: ImageRGB) -> bytes:
    """Minimal RGB8 PNG writer (filter 0 on every scanline)."""
    raw = bytearray()
    stride = image.width * 3
    for y in range(image.height):
        raw.append(0)
        raw.extend(image.pixels[y * stride:(y + 1) * stride])
    header = struct.pack(
        ">IIBBBBB", image.width, image.height, 8, 2, 0, 0, 0
    )
    return b"".join([
        b"\x89PNG\r\n\x1a\n",
        _png_chunk(b"IHDR", header),
        _png_chunk(b"IDAT", zlib.compress(bytes(raw), 9)),
        _png_chunk(b"IEND", b""),
    ])
