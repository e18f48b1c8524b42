"""Image loading and content digests.

Images are handled as uint8 RGB numpy arrays everywhere in the pipeline.
Digests hash the decoded raster (mode, size, pixel bytes) rather than the
encoded file, so a PNG re-encoded by a different library still keys the
same replay cassette entry.
"""

from __future__ import annotations

import base64
import hashlib
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image


class ImageReadError(ValueError):
    """The file could not be opened or decoded as an image."""


def _as_uint8_rgb(array: np.ndarray) -> np.ndarray:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ImageReadError(f"expected HxW or HxWx3 image data, got shape {arr.shape}")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64)), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def raster_digest(array: np.ndarray) -> str:
    arr = _as_uint8_rgb(array)
    h = hashlib.sha256()
    h.update(f"rgb8:{arr.shape[0]}x{arr.shape[1]}:".encode("ascii"))
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ImageRef:
    """A decoded image plus its content digest and (optional) source path."""

    array: np.ndarray
    digest: str
    source_path: Optional[str] = None

    @classmethod
    def from_path(cls, path: str) -> "ImageRef":
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"))
        except FileNotFoundError:
            raise ImageReadError(f"image file not found: {path}")
        except OSError as exc:
            raise ImageReadError(f"cannot decode image {path}: {exc}")
        arr = _as_uint8_rgb(arr)
        return cls(array=arr, digest=raster_digest(arr), source_path=path)

    @classmethod
    def from_array(cls, array: np.ndarray, source_path: Optional[str] = None) -> "ImageRef":
        arr = _as_uint8_rgb(array)
        return cls(array=arr, digest=raster_digest(arr), source_path=source_path)

    @property
    def size(self) -> tuple[int, int]:
        """(height, width)."""
        return self.array.shape[0], self.array.shape[1]

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.array).save(buf, format="PNG")
        return buf.getvalue()

    def data_url(self) -> str:
        encoded = base64.b64encode(self.png_bytes()).decode("ascii")
        return f"data:image/png;base64,{encoded}"

    def resized_to(self, height: int, width: int) -> "ImageRef":
        """Bilinear resample; used to align a reference with its distorted image."""
        img = Image.fromarray(self.array).resize((width, height), Image.BILINEAR)
        return ImageRef.from_array(np.asarray(img), source_path=self.source_path)
