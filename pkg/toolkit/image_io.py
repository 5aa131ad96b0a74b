"""
Image file I/O.

Two formats:
  .png   8-bit lossless PNG for viewing (quantised, so not an exact round-trip)
  .mfid  raw float format: b"MFID", u32 height, u32 width, u32 channels,
         little-endian float32 payload in row-major HxWxC order
"""

import os

import numpy as np
from PIL import Image as PILImage

from numerics import check_image
from toolkit_utils import CorruptFileError, atomic_write_bytes

RAW_MAGIC = b"MFID"
_HEADER = np.dtype([("height", "<u4"), ("width", "<u4"), ("channels", "<u4")])


def encode_raw(x):
    x = check_image(x)
    h, w, c = x.shape
    header = np.array([(h, w, c)], dtype=_HEADER).tobytes()
    return RAW_MAGIC + header + x.astype("<f4").tobytes()


def decode_raw(data, path="<bytes>"):
    if data[:4] != RAW_MAGIC:
        raise CorruptFileError(f"{path}: not an MFID image")
    header = np.frombuffer(data, dtype=_HEADER, count=1, offset=4)[0]
    h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    offset = 4 + _HEADER.itemsize
    expected = h * w * c * 4
    if len(data) - offset != expected:
        raise CorruptFileError(f"{path}: payload is {len(data) - offset} bytes, expected {expected}")
    payload = np.frombuffer(data, dtype="<f4", offset=offset)
    return payload.reshape(h, w, c).astype(np.float64)


def write_raw(path, x):
    atomic_write_bytes(path, encode_raw(x))


def read_raw(path):
    with open(path, "rb") as f:
        return decode_raw(f.read(), path)


def write_png(path, x):
    x = check_image(x)
    pixels = np.round(x * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    PILImage.fromarray(pixels).save(path, format="PNG")


def read_png(path):
    with PILImage.open(path) as img:
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels[:, :, :3]


def read_image(path):
    """Read either format, chosen by extension."""
    if path.lower().endswith(".png"):
        return read_png(path)
    return read_raw(path)
