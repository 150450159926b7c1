"""PNG interchange for the CLI and wire boundaries.

The raster layer works on decoded buffers only; everything entering or
leaving the process is lossless RGBA PNG (masks: single-channel PNG).
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .raster import ImageBuffer, Mask


def encode_png(image: ImageBuffer) -> bytes:
    out = io.BytesIO()
    image.to_pil().save(out, format="PNG")
    return out.getvalue()


def decode_png(data: bytes) -> ImageBuffer:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return ImageBuffer.from_pil(im)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ValueError(f"not a decodable PNG image: {exc}") from exc


def encode_mask_png(mask: Mask) -> bytes:
    arr = np.where(mask.values, 255, 0).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(arr, mode="L").save(out, format="PNG")
    return out.getvalue()


def decode_mask_png(data: bytes) -> Mask:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return Mask(np.asarray(im.convert("L")) > 0)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ValueError(f"not a decodable PNG mask: {exc}") from exc


def load_image(path: str | Path) -> ImageBuffer:
    return decode_png(Path(path).read_bytes())


def save_image(image: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))
