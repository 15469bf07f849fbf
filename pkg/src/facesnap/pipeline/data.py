"""Dataset ingestion and the synthetic data generator.

A dataset root holds manifest.json plus one raw latent file and two face
parameter files per item. The synthetic generator renders the landmark
control image of a random face and pools it into a procedural latent whose
last channel carries an identity texture derived from the shape coefficients,
so identity is recoverable from the latent alone and training runs with zero
external data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import landmarks as lm3d
from ..encoders import bbox_to_mask
from ..errors import DatasetError
from .config import TrainConfig
from .imaging import read_latent, save_png, write_latent

MANIFEST_VERSION = 1

_CAPTION_STYLES = ("studio", "outdoor", "candid", "formal", "profile", "closeup")


@dataclass(frozen=True)
class SynthRanges:
    """Sampling ranges for random face parameters (radians / normalized units)."""

    yaw: float = 0.6
    pitch: float = 0.35
    roll: float = 0.3
    translate: float = 0.12
    scale_lo: float = 0.85
    scale_hi: float = 1.15
    shape_std: float = 1.0
    expr_std: float = 1.0


@dataclass
class Sample:
    """One training item: clean latent, caption context, face box/mask, face params."""

    item_id: str
    latent: torch.Tensor           # [C, H_l, W_l]
    ctx: torch.Tensor              # [1, width]
    bbox: tuple[float, float, float, float]
    mask: torch.Tensor             # [1, H_l, W_l]
    source_params: lm3d.FaceParams
    drive_params: lm3d.FaceParams | None
    caption: str


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from string parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def caption_to_context(caption: str, width: int, seed: int) -> torch.Tensor:
    """Deterministic [1, width] context vector for a caption string."""
    g = torch.Generator().manual_seed(stable_seed("caption", seed, caption))
    return torch.randn(1, width, generator=g) / width**0.5


def random_params(rng: np.random.Generator, config: TrainConfig,
                  ranges: SynthRanges) -> lm3d.FaceParams:
    return lm3d.FaceParams(
        shape=rng.normal(0.0, ranges.shape_std, config.shape_dim),
        pose=lm3d.Pose(
            yaw=float(rng.uniform(-ranges.yaw, ranges.yaw)),
            pitch=float(rng.uniform(-ranges.pitch, ranges.pitch)),
            roll=float(rng.uniform(-ranges.roll, ranges.roll)),
            tx=float(rng.uniform(-ranges.translate, ranges.translate)),
            ty=float(rng.uniform(-ranges.translate, ranges.translate)),
            scale=float(rng.uniform(ranges.scale_lo, ranges.scale_hi)),
        ),
        expression=rng.normal(0.0, ranges.expr_std, config.expr_dim),
    )


def identity_texture(shape_vec: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Smooth [size, size] pattern in (-1, 1) that is a deterministic function of the shape vector."""
    rng = np.random.default_rng(stable_seed("texture", seed))
    k = shape_vec.shape[0]
    freq = rng.uniform(0.5, 2.5, (k, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, k)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    waves = np.cos(2.0 * np.pi * (freq[:, 0, None, None] * xs + freq[:, 1, None, None] * ys)
                   + phase[:, None, None])
    return np.tanh((shape_vec[:, None, None] * waves).sum(axis=0) / np.sqrt(k))


def render_photo(params: lm3d.FaceParams, basis: lm3d.MorphableBasis, size: int) -> np.ndarray:
    """The item's 'photograph': its own landmarks rendered at image resolution."""
    mesh = lm3d.synthesize_mesh(params, basis)
    lm = lm3d.project_landmarks(mesh, basis)
    return lm3d.rasterize_control(lm, size, size)


def build_latent(params: lm3d.FaceParams, basis: lm3d.MorphableBasis,
                 config: TrainConfig, noise_rng: np.random.Generator) -> torch.Tensor:
    """Procedural clean latent: pooled photo channels plus an identity-texture channel."""
    photo = torch.from_numpy(render_photo(params, basis, config.image_size)).float()
    pooled = F.avg_pool2d(
        photo.permute(2, 0, 1).unsqueeze(0),
        kernel_size=config.image_size // config.latent_size,
    )[0] * 3.0
    texture = torch.from_numpy(
        identity_texture(params.shape, config.latent_size, config.basis_seed)
    ).float() * 0.8
    c = config.latent_channels
    channels = [pooled[i % 3] for i in range(max(c - 1, 0))][: c - 1]
    channels.append(texture)
    latent = torch.stack(channels, dim=0)
    noise = torch.from_numpy(
        noise_rng.normal(0.0, 0.05, latent.shape).astype(np.float32))
    return latent + noise


def _jittered_bbox(rng: np.random.Generator) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = 0.25, 0.2, 0.75, 0.85
    jitter = rng.uniform(-0.05, 0.05, 4)
    x0 = float(np.clip(x0 + jitter[0], 0.0, 0.4))
    y0 = float(np.clip(y0 + jitter[1], 0.0, 0.4))
    x1 = float(np.clip(x1 + jitter[2], 0.6, 1.0))
    y1 = float(np.clip(y1 + jitter[3], 0.6, 1.0))
    return (x0, y0, x1, y1)


def synthesize_dataset(root: str | Path, count: int, config: TrainConfig, seed: int = 0,
                       ranges: SynthRanges = SynthRanges()) -> list[str]:
    """Write a synthetic dataset under root; returns the item ids."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    basis = lm3d.default_basis(config.shape_dim, config.expr_dim, config.basis_seed)
    items = []
    for i in range(count):
        rng = np.random.default_rng(stable_seed("item", seed, i))
        item_id = f"item{i:04d}"
        source = random_params(rng, config, ranges)
        drive = random_params(rng, config, ranges)
        latent = build_latent(source, basis, config, rng)
        caption = (f"{_CAPTION_STYLES[i % len(_CAPTION_STYLES)]} portrait of person "
                   f"{item_id}")
        bbox = _jittered_bbox(rng)
        write_latent(latent.unsqueeze(0), root / f"{item_id}.lat")
        lm3d.save_params(source, root / f"{item_id}.src.json")
        lm3d.save_params(drive, root / f"{item_id}.drv.json")
        items.append({
            "id": item_id,
            "latent": f"{item_id}.lat",
            "source_params": f"{item_id}.src.json",
            "drive_params": f"{item_id}.drv.json",
            "caption": caption,
            "bbox": list(bbox),
        })
    manifest = {"format_version": MANIFEST_VERSION, "items": items}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [it["id"] for it in items]


def load_dataset(root: str | Path, config: TrainConfig) -> list[Sample]:
    """Read every manifest item into memory; deterministic manifest order."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(
            f"manifest {manifest_path} has format_version "
            f"{manifest.get('format_version')!r}, expected {MANIFEST_VERSION}")
    samples = []
    for entry in manifest.get("items", []):
        item_id = entry.get("id", "<unnamed>")
        try:
            latent = read_latent(root / entry["latent"])[0]
            if latent.shape != (config.latent_channels, config.latent_size, config.latent_size):
                raise DatasetError(
                    f"latent shape {list(latent.shape)} does not match config "
                    f"[{config.latent_channels}, {config.latent_size}, {config.latent_size}]")
            source = lm3d.load_params(root / entry["source_params"])
            drive = lm3d.load_params(root / entry["drive_params"]) \
                if entry.get("drive_params") else None
            bbox = tuple(float(v) for v in entry["bbox"])
            caption = entry["caption"]
        except (KeyError, ValueError, DatasetError, OSError) as exc:
            raise DatasetError(f"dataset item {item_id!r}: {exc}") from exc
        samples.append(Sample(
            item_id=item_id,
            latent=latent,
            ctx=caption_to_context(caption, config.width, config.seed),
            bbox=bbox,
            mask=bbox_to_mask(bbox, (config.image_size,) * 2, (config.latent_size,) * 2),
            source_params=source,
            drive_params=drive,
            caption=caption,
        ))
    return samples


def synthesize_eval_set(root: str | Path, n_ids: int, n_poses: int, config: TrainConfig,
                        seed: int = 0, ranges: SynthRanges = SynthRanges()) -> None:
    """Write reference images + params (ids/) and driving pose templates (poses/)."""
    root = Path(root)
    ids_dir = root / "ids"
    poses_dir = root / "poses"
    ids_dir.mkdir(parents=True, exist_ok=True)
    poses_dir.mkdir(parents=True, exist_ok=True)
    basis = lm3d.default_basis(config.shape_dim, config.expr_dim, config.basis_seed)
    for i in range(n_ids):
        rng = np.random.default_rng(stable_seed("eval-id", seed, i))
        params = random_params(rng, config, ranges)
        save_png(render_photo(params, basis, config.image_size), ids_dir / f"id{i:03d}.png")
        lm3d.save_params(params, ids_dir / f"id{i:03d}.json")
    for j in range(n_poses):
        rng = np.random.default_rng(stable_seed("eval-pose", seed, j))
        params = random_params(rng, config, ranges)
        lm3d.save_params(params, poses_dir / f"pose{j:03d}.json")
