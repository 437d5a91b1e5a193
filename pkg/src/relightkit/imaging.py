"""Linear-radiance images, masks, and their on-disk formats.

A linear image is a float64 ``(H, W, 3)`` array of non-negative, finite
relative radiance. A mask is a boolean ``(H, W)`` array where ``True`` marks a
valid (static) pixel. Linear imagery lives in scanline float32 RGB EXR files,
masks in 8-bit single-channel PNG files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import OpenEXR
from PIL import Image

GAMMA = 2.2


class ImageFormatError(ValueError):
    """Raised when an image file or array violates the expected format."""


def as_linear_image(data, *, name: str = "image") -> np.ndarray:
    """Validate ``data`` as a linear image and return it as float64."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageFormatError(f"{name}: empty image {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageFormatError(f"{name}: non-finite pixel values")
    if np.any(arr < 0):
        raise ImageFormatError(f"{name}: negative radiance")
    return arr


def as_mask(mask, shape: tuple[int, int] | None = None, *, name: str = "mask") -> np.ndarray:
    """Validate ``mask`` as a boolean ``(H, W)`` array matching ``shape``."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ImageFormatError(f"{name}: expected shape (H, W), got {arr.shape}")
    if shape is not None and arr.shape != tuple(shape[:2]):
        raise ImageFormatError(f"{name}: shape {arr.shape} does not match image {tuple(shape[:2])}")
    return arr.astype(bool)


def _exr_header() -> dict:
    return {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}


def _read_exr_channels(path: Path) -> dict[str, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"no such EXR file: {path}")
    try:
        with OpenEXR.File(str(path), separate_channels=True) as f:
            return {name: np.array(ch.pixels) for name, ch in f.channels().items()}
    except FileNotFoundError:
        raise
    except Exception as exc:  # OpenEXR raises bare RuntimeError/Exception on bad headers
        raise ImageFormatError(f"{path}: unreadable EXR ({exc})") from exc


def read_exr(path) -> np.ndarray:
    """Read an RGB EXR as a validated float64 linear image."""
    path = Path(path)
    channels = _read_exr_channels(path)
    if set(channels) != {"R", "G", "B"}:
        raise ImageFormatError(f"{path}: expected exactly R, G, B channels, got {sorted(channels)}")
    rgb = np.stack([channels[c] for c in "RGB"], axis=-1).astype(np.float64)
    return as_linear_image(rgb, name=str(path))


def write_exr(path, image) -> None:
    """Write a linear image as a scanline float32 RGB EXR."""
    img = as_linear_image(image)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    rgb = np.ascontiguousarray(img.astype(np.float32))
    with OpenEXR.File(_exr_header(), {"RGB": rgb}) as f:
        f.write(str(path))


def read_exr_scalar(path) -> np.ndarray:
    """Read a single-channel (``Y``) EXR as a float64 ``(H, W)`` array."""
    path = Path(path)
    channels = _read_exr_channels(path)
    if len(channels) != 1:
        raise ImageFormatError(f"{path}: expected one channel, got {sorted(channels)}")
    (data,) = channels.values()
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ImageFormatError(f"{path}: non-finite pixel values")
    return data


def write_exr_scalar(path, data) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ImageFormatError("scalar EXR payload must be a finite (H, W) array")
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    with OpenEXR.File(_exr_header(), {"Y": np.ascontiguousarray(arr.astype(np.float32))}) as f:
        f.write(str(path))


def read_mask(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG mask; any nonzero byte is valid."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            data = np.array(im)
    except OSError as exc:
        raise ImageFormatError(f"{path}: unreadable PNG ({exc})") from exc
    if mode not in ("L", "1") or data.ndim != 2:
        raise ImageFormatError(f"{path}: mask must be single-channel, got mode {mode}")
    return data != 0


def write_mask(path, mask) -> None:
    arr = as_mask(mask)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    Image.fromarray(np.where(arr, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def tone_map_for_metrics(hdr) -> np.ndarray:
    """Global per-channel Reinhard ``x / (1 + x)`` followed by 1/2.2 gamma.

    Output lies in ``[0, 1]`` and is non-decreasing in the input.
    """
    x = as_linear_image(hdr)
    return (x / (1.0 + x)) ** (1.0 / GAMMA)
