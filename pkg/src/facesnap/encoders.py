"""Pluggable stand-in encoders for face identity and image-detail features.

The real recognition / vision backbones live behind this interface; the
shipped implementations are deterministic seeded random linear maps that are
differentiable end to end, which is all the training objective needs. The
``kind`` field of EncoderSpec is the extension point for real adapters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError, ShapeMismatchError

#: canonical spatial size the face crop is resized to before the identity map
CANONICAL_CROP = 32

#: spatial grid the crop is resized to for patch tokens (grid**2 patches + 1 global)
PATCH_GRID = 16

DEFAULT_BBOX = (0.25, 0.2, 0.75, 0.85)


@dataclass(frozen=True)
class EncoderSpec:
    """Which stub encoder to use, its seed, and its output width."""

    kind: str
    seed: int = 0
    out_dim: int = 512

    def __post_init__(self):
        if self.kind not in ("stub-id", "stub-clip"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.out_dim <= 0:
            raise ConfigError(f"encoder out_dim must be positive, got {self.out_dim}")


@dataclass(frozen=True)
class FaceCrop:
    """Cropped face region plus its source box and latent-resolution mask."""

    region: torch.Tensor          # [C, h, w]
    bbox: tuple[float, float, float, float]
    mask: torch.Tensor            # [1, H_l, W_l], values in [0, 1]


@lru_cache(maxsize=64)
def _stub_matrix(in_dim: int, out_dim: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(out_dim, in_dim, generator=g, dtype=torch.float64) / in_dim**0.5


def bbox_to_mask(
    bbox: tuple[float, float, float, float],
    image_hw: tuple[int, int],
    latent_hw: tuple[int, int],
) -> torch.Tensor:
    """Soft box mask: binary rectangle at pixel resolution, area-averaged to the latent grid."""
    x0, y0, x1, y1 = bbox
    h, w = image_hw
    full = torch.zeros(1, 1, h, w)
    r0, r1 = int(round(y0 * h)), int(round(y1 * h))
    c0, c1 = int(round(x0 * w)), int(round(x1 * w))
    full[:, :, r0:r1, c0:c1] = 1.0
    pooled = F.adaptive_avg_pool2d(full, latent_hw)
    return pooled[0]


def detect_and_crop(
    image: torch.Tensor,
    bbox: tuple[float, float, float, float] | None = None,
    latent_hw: tuple[int, int] = (16, 16),
) -> FaceCrop:
    """Crop the face box from a [C, H, W] image (default box if none given).

    The crop is a plain slice, so gradients flow back into ``image``; the mask
    is the box footprint at latent resolution.
    """
    if image.dim() != 3:
        raise ShapeMismatchError("image", "[C, H, W]", list(image.shape))
    if bbox is None:
        bbox = DEFAULT_BBOX
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0 and 0.0 <= x1 <= 1.0 and 0.0 <= y1 <= 1.0):
        raise DegenerateInputError(f"bbox must lie in [0,1]^2, got {bbox}")
    _, h, w = image.shape
    r0, r1 = int(round(y0 * h)), int(round(y1 * h))
    c0, c1 = int(round(x0 * w)), int(round(x1 * w))
    if r1 <= r0 or c1 <= c0:
        raise DegenerateInputError(f"bbox {bbox} has zero area at {h}x{w}")
    region = image[:, r0:r1, c0:c1]
    mask = bbox_to_mask((x0, y0, x1, y1), (h, w), latent_hw).to(image.dtype)
    return FaceCrop(region=region, bbox=(x0, y0, x1, y1), mask=mask)


def _resize(region: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(
        region.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )[0]


def face_embed(crop: FaceCrop, spec: EncoderSpec) -> torch.Tensor:
    """Unit-norm identity embedding of a crop via the seeded random linear stub."""
    if spec.kind != "stub-id":
        raise ConfigError(f"face_embed requires kind 'stub-id', got {spec.kind!r}")
    flat = _resize(crop.region, CANONICAL_CROP).reshape(-1)
    weight = _stub_matrix(flat.shape[0], spec.out_dim, spec.seed).to(flat.dtype)
    vec = weight @ flat
    norm = vec.norm()
    if float(norm.detach()) < 1e-12:
        raise DegenerateInputError("face embedding collapsed to the zero vector")
    return vec / norm


def face_embed_batch(latents: torch.Tensor, spec: EncoderSpec) -> torch.Tensor:
    """Full-frame identity embeddings for a [N, C, H, W] batch (used by the ID loss)."""
    if spec.kind != "stub-id":
        raise ConfigError(f"face_embed_batch requires kind 'stub-id', got {spec.kind!r}")
    if latents.dim() != 4:
        raise ShapeMismatchError("latent batch", "[N, C, H, W]", list(latents.shape))
    resized = F.interpolate(
        latents, size=(CANONICAL_CROP, CANONICAL_CROP), mode="bilinear", align_corners=False
    )
    flat = resized.reshape(latents.shape[0], -1)
    weight = _stub_matrix(flat.shape[1], spec.out_dim, spec.seed).to(flat.dtype)
    vecs = flat @ weight.T
    norms = vecs.norm(dim=1, keepdim=True)
    if float(norms.detach().min()) < 1e-12:
        raise DegenerateInputError("a face embedding collapsed to the zero vector")
    return vecs / norms


def clip_grid(crop: FaceCrop, spec: EncoderSpec, patch_grid: int = PATCH_GRID) -> torch.Tensor:
    """Detail token grid: patch_grid^2 per-patch tokens plus one mean-pooled global token.

    Returns [patch_grid**2 + 1, out_dim]; row 0 is the global token. The
    default grid yields the conventional 257 tokens.
    """
    if spec.kind != "stub-clip":
        raise ConfigError(f"clip_grid requires kind 'stub-clip', got {spec.kind!r}")
    grid = _resize(crop.region, patch_grid)                      # [C, g, g]
    patches = grid.permute(1, 2, 0).reshape(patch_grid * patch_grid, -1)
    weight = _stub_matrix(patches.shape[1], spec.out_dim, spec.seed).to(patches.dtype)
    tokens = patches @ weight.T
    global_token = tokens.mean(dim=0, keepdim=True)
    return torch.cat([global_token, tokens], dim=0)


def face_sim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of two identity embeddings, in [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeMismatchError("embedding pair", list(a.shape), list(b.shape))
    na, nb = a.norm(), b.norm()
    if float(na.detach()) < 1e-12 or float(nb.detach()) < 1e-12:
        raise DegenerateInputError("cosine similarity of a zero-norm embedding is undefined")
    return float(((a / na) @ (b / nb)).detach())
