"""Image and raw-latent file I/O.

Images travel as [3, H, W] float tensors in [0, 1] and persist as PNG.
Latents persist as a fixed 8-field little-endian uint32 header (magic,
version, N, C, H, W, dtype code, reserved) followed by raw little-endian
float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..errors import DatasetError

LATENT_MAGIC = 0x46534C54
LATENT_VERSION = 1
LATENT_DTYPE_F32 = 1
_HEADER = struct.Struct("<8I")


def save_png(image, path: str | Path) -> None:
    """Write a [3, H, W] tensor or [H, W, 3] array in [0, 1] as PNG."""
    if isinstance(image, torch.Tensor):
        array = image.detach().cpu().numpy()
        if array.ndim == 3 and array.shape[0] == 3:
            array = array.transpose(1, 2, 0)
    else:
        array = np.asarray(image)
    array = np.clip(array, 0.0, 1.0)
    Image.fromarray((array * 255.0 + 0.5).astype(np.uint8)).save(Path(path))


def load_png(path: str | Path) -> torch.Tensor:
    """Read a PNG as a [3, H, W] float tensor in [0, 1]."""
    with Image.open(Path(path)) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def write_latent(latent: torch.Tensor, path: str | Path) -> None:
    """Persist a [N, C, H, W] float latent batch."""
    if latent.dim() != 4:
        raise DatasetError(f"latent to write must be [N, C, H, W], got {list(latent.shape)}")
    n, c, h, w = latent.shape
    header = _HEADER.pack(LATENT_MAGIC, LATENT_VERSION, n, c, h, w, LATENT_DTYPE_F32, 0)
    data = latent.detach().cpu().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(header + data)


def read_latent(path: str | Path) -> torch.Tensor:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read latent file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DatasetError(f"latent file {path} is truncated (no header)")
    magic, version, n, c, h, w, dtype_code, _ = _HEADER.unpack_from(blob)
    if magic != LATENT_MAGIC:
        raise DatasetError(f"latent file {path} has wrong magic {magic:#x}")
    if version != LATENT_VERSION:
        raise DatasetError(f"latent file {path} has unsupported version {version}")
    if dtype_code != LATENT_DTYPE_F32:
        raise DatasetError(f"latent file {path} has unsupported dtype code {dtype_code}")
    expected = _HEADER.size + 4 * n * c * h * w
    if len(blob) != expected:
        raise DatasetError(f"latent file {path} has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).copy()
    return torch.from_numpy(data).reshape(n, c, h, w)


def image_to_latent(image: torch.Tensor, latent_channels: int, latent_size: int) -> torch.Tensor:
    """Area-pool an image into the latent grid; channels beyond the image's are zero."""
    if image.dim() != 3:
        raise DatasetError(f"image must be [C, H, W], got {list(image.shape)}")
    pooled = F.adaptive_avg_pool2d(image.unsqueeze(0), (latent_size, latent_size))[0]
    channels = [pooled[i % pooled.shape[0]] for i in range(min(latent_channels, pooled.shape[0]))]
    while len(channels) < latent_channels:
        channels.append(torch.zeros(latent_size, latent_size, dtype=image.dtype))
    return torch.stack(channels, dim=0)


def latent_preview(latent: torch.Tensor) -> torch.Tensor:
    """Min-max normalize the first three channels of a [C, H, W] latent for PNG preview."""
    rgb = latent[:3] if latent.shape[0] >= 3 else latent[:1].expand(3, -1, -1)
    lo, hi = rgb.min(), rgb.max()
    if float(hi - lo) < 1e-12:
        return torch.zeros_like(rgb)
    return (rgb - lo) / (hi - lo)
