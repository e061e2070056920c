"""Radiance images and their on-disk formats.

Pixel data is linear radiance, nominal range [0, 1] but unclamped above.
PNG output is for viewing only (sRGB-encoded, 8 bit); PFM keeps exact
little-endian float32 values and is what the training path reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA = 2.2


@dataclass(frozen=True)
class RadianceImage:
    """H x W x C array of linear radiance, C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWxC with C in {{1,3}}, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def validate_linear(self) -> "RadianceImage":
        """Check the linear-radiance invariants (finite, non-negative)."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError("radiance image contains non-finite values")
        if np.any(self.data < 0.0):
            raise ValueError("linear radiance must be non-negative")
        return self

    @staticmethod
    def zeros(height: int, width: int, channels: int = 3) -> "RadianceImage":
        return RadianceImage(np.zeros((height, width, channels)))


# ---------------------------------------------------------------------------
# PFM: little-endian float32, linear, unclamped
# ---------------------------------------------------------------------------

def write_pfm(path, img: RadianceImage) -> None:
    data = np.ascontiguousarray(img.data.astype("<f4"))
    color = img.channels == 3
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{img.width} {img.height}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).tobytes())  # PFM rows run bottom-to-top


def read_pfm(path) -> RadianceImage:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        width, height = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(width * height * channels * 4)
        if len(raw) != width * height * channels * 4:
            raise ValueError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
    return RadianceImage(np.flipud(data).astype(float))


# ---------------------------------------------------------------------------
# PNG: 8-bit sRGB-ish view (gamma 1/2.2), for humans
# ---------------------------------------------------------------------------

def write_png(path, img: RadianceImage) -> None:
    from PIL import Image

    lin = np.clip(img.data, 0.0, 1.0)
    encoded = np.round(255.0 * lin ** (1.0 / GAMMA)).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(encoded[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(encoded, mode="RGB").save(path)


def read_png(path) -> RadianceImage:
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=float) / 255.0
    return RadianceImage(arr ** GAMMA)
