"""Training loop: mixer + control branch optimized against the frozen base denoiser.

Every source of randomness in a run flows through one torch.Generator whose
state is checkpointed, so an interrupted-and-resumed run retraces the
uninterrupted one bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .. import landmarks as lm3d
from ..diffusion import (
    DenoisingUNet,
    NoiseSchedule,
    add_noise,
    cfg_dropout,
    id_loss,
    lightning_generate,
    masked_diffusion_loss,
    total_loss,
    LossBreakdown,
)
from ..encoders import EncoderSpec, clip_grid, detect_and_crop, face_embed, face_embed_batch
from ..errors import CorruptCheckpointError, DatasetError, TrainingDivergedError
from ..ffrnet import FFRNet
from ..mixer import AttributeMixer
from .checkpoint import load_container, save_container
from .config import TrainConfig, config_from_text, config_hash, config_to_text
from .data import Sample, render_photo, stable_seed


@dataclass
class TrainState:
    config: TrainConfig
    sched: NoiseSchedule
    basis: lm3d.MorphableBasis
    mixer: AttributeMixer
    unet: DenoisingUNet
    ffrnet: FFRNet | None
    optimizer: torch.optim.AdamW | None
    generator: torch.Generator
    id_spec: EncoderSpec
    clip_spec: EncoderSpec
    step: int = 0


@dataclass
class Batch:
    """Stacked per-item tensors for one optimizer step."""

    z0: torch.Tensor          # [B, C, H_l, W_l]
    ctx: torch.Tensor         # [B, 1, width]
    mask: torch.Tensor        # [B, 1, H_l, W_l]
    control: torch.Tensor     # [B, 3, image, image]
    f_id: torch.Tensor        # [B, id_dim]
    f_clip: torch.Tensor      # [B, clip_tokens, clip_dim]
    ref_embed: torch.Tensor   # [B, id_dim]


@dataclass
class PreparedData:
    """Whole-dataset tensors precomputed once (controls, crops, embeddings are static)."""

    z0: torch.Tensor
    ctx: torch.Tensor
    mask: torch.Tensor
    control: torch.Tensor
    f_id: torch.Tensor
    f_clip: torch.Tensor
    ref_embed: torch.Tensor
    item_ids: list = field(default_factory=list)

    def __len__(self):
        return self.z0.shape[0]

    def batch(self, idx: torch.Tensor) -> Batch:
        return Batch(
            z0=self.z0[idx], ctx=self.ctx[idx], mask=self.mask[idx],
            control=self.control[idx], f_id=self.f_id[idx], f_clip=self.f_clip[idx],
            ref_embed=self.ref_embed[idx],
        )


def build_modules(config: TrainConfig):
    """Deterministically seeded mixer / base denoiser / control branch / schedule / basis."""
    mixer = AttributeMixer(
        id_dim=config.id_dim, clip_dim=config.clip_dim, width=config.width,
        id_tokens=config.id_tokens, clip_tokens=config.clip_tokens,
        out_tokens=config.mix_tokens, heads=config.heads, depth=config.decoder_depth,
        seed=stable_seed("mixer", config.seed),
    )
    unet = DenoisingUNet(
        latent_channels=config.latent_channels, channels=config.unet_channels,
        ctx_dim=config.width, groups=config.norm_groups,
        seed=stable_seed("unet", config.seed),
    )
    ffrnet = FFRNet.from_base(unet, seed=stable_seed("ffrnet", config.seed)) \
        if config.use_ffrnet else None
    sched = NoiseSchedule.linear(
        config.timesteps, config.beta_start, config.beta_end, config.schedule_ref_steps)
    basis = lm3d.default_basis(config.shape_dim, config.expr_dim, config.basis_seed)
    return mixer, unet, ffrnet, sched, basis


def trainable_named_parameters(state: TrainState):
    """(name, parameter) pairs of everything the optimizer owns, in sorted-name order."""
    named = [(f"mixer.{n}", p) for n, p in state.mixer.named_parameters()]
    if state.ffrnet is not None:
        named += [(f"ffrnet.{n}", p) for n, p in state.ffrnet.named_parameters()]
    named.sort(key=lambda item: item[0])
    return named


def init_state(config: TrainConfig) -> TrainState:
    mixer, unet, ffrnet, sched, basis = build_modules(config)
    unet.requires_grad_(False)
    state = TrainState(
        config=config, sched=sched, basis=basis, mixer=mixer, unet=unet, ffrnet=ffrnet,
        optimizer=None, generator=torch.Generator().manual_seed(
            stable_seed("train-loop", config.seed)),
        id_spec=EncoderSpec("stub-id", seed=stable_seed("id-enc", config.seed),
                            out_dim=config.id_dim),
        clip_spec=EncoderSpec("stub-clip", seed=stable_seed("clip-enc", config.seed),
                              out_dim=config.clip_dim),
    )
    params = [p for _, p in trainable_named_parameters(state)]
    state.optimizer = torch.optim.AdamW(
        params, lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay)
    return state


def control_image_for(sample: Sample, basis, config: TrainConfig) -> torch.Tensor:
    """Render the spatial control for a sample according to the configured control mode."""
    size = config.image_size
    if config.control_mode == "none":
        return torch.zeros(3, size, size)
    drive = sample.drive_params if sample.drive_params is not None else sample.source_params
    if config.control_mode == "drive":
        photo = render_photo(drive, basis, size)
    else:  # predictor
        _, photo = lm3d.predict_landmarks(sample.source_params, drive, basis, size, size)
    return torch.from_numpy(photo).float().permute(2, 0, 1)


@torch.no_grad()
def prepare_samples(state: TrainState, samples: list[Sample]) -> PreparedData:
    if not samples:
        raise DatasetError("cannot prepare an empty dataset")
    config = state.config
    latent_hw = (config.latent_size, config.latent_size)
    z0 = torch.stack([s.latent for s in samples])
    f_id_rows, f_clip_rows, controls = [], [], []
    for s in samples:
        crop = detect_and_crop(s.latent, s.bbox, latent_hw)
        f_id_rows.append(face_embed(crop, state.id_spec))
        f_clip_rows.append(clip_grid(crop, state.clip_spec, config.patch_grid))
        controls.append(control_image_for(s, state.basis, config))
    return PreparedData(
        z0=z0,
        ctx=torch.stack([s.ctx for s in samples]),
        mask=torch.stack([s.mask for s in samples]),
        control=torch.stack(controls),
        f_id=torch.stack(f_id_rows),
        f_clip=torch.stack(f_clip_rows),
        ref_embed=face_embed_batch(z0, state.id_spec),
        item_ids=[s.item_id for s in samples],
    )


def fused_features(state: TrainState, f_id: torch.Tensor, f_clip: torch.Tensor) -> torch.Tensor:
    """Conditioning tokens per the configured feature mode."""
    mode = state.config.feature_mode
    if mode == "mixer":
        return state.mixer(f_id, f_clip)
    if mode == "id":
        return state.mixer.project_id(f_id)
    if mode == "clip":
        return state.mixer.project_clip(f_clip)
    return torch.cat(
        [state.mixer.project_id(f_id), state.mixer.project_clip(f_clip)], dim=1)


def compute_losses(state: TrainState, batch: Batch, ctx: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, x_T: torch.Tensor | None):
    """Masked denoising loss plus (when x_T is given) the lightning-branch identity loss.

    Returns (backward tensor, LossBreakdown); raises TrainingDivergedError on a
    non-finite term, naming it.
    """
    config = state.config
    fused = fused_features(state, batch.f_id, batch.f_clip)
    if config.use_ffrnet:
        base_ctx = torch.cat([ctx, fused], dim=1) if config.base_id_attention else ctx
        ffr = state.ffrnet
    else:
        base_ctx = torch.cat([ctx, fused], dim=1)
        ffr = None

    z_t = add_noise(batch.z0, t, eps, state.sched)
    residuals = ffr(batch.control, z_t, t, fused) if ffr is not None else None
    eps_pred = state.unet(z_t, t, base_ctx, residuals)
    l_diff_t = masked_diffusion_loss(eps, eps_pred, batch.mask, normalize=config.mask_norm)
    if not math.isfinite(float(l_diff_t.detach())):
        raise TrainingDivergedError(
            f"masked diffusion loss became non-finite at step {state.step}")

    if x_T is not None:
        z0_hat = lightning_generate(
            state.unet, ffr, batch.control, fused, base_ctx, x_T, state.sched,
            steps=config.lightning_steps)
        gen_embed = face_embed_batch(z0_hat, state.id_spec)
        l_id_t = torch.stack(
            [id_loss(batch.ref_embed[i], gen_embed[i]) for i in range(gen_embed.shape[0])]
        ).mean()
        if not math.isfinite(float(l_id_t.detach())):
            raise TrainingDivergedError(
                f"identity loss became non-finite at step {state.step}")
        loss = l_diff_t + config.lambda_id * l_id_t
        breakdown = total_loss(float(l_diff_t.detach()), float(l_id_t.detach()), config.lambda_id)
    else:
        loss = l_diff_t
        breakdown = total_loss(float(l_diff_t.detach()), 0.0, config.lambda_id)
    return loss, breakdown


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step on the trainable modules; the base denoiser never changes."""
    config = state.config
    g = state.generator
    b = batch.z0.shape[0]
    t = torch.randint(0, config.timesteps, (b,), generator=g)
    eps = torch.randn(batch.z0.shape, generator=g)
    ctx = cfg_dropout(batch.ctx, state.unet.null_ctx.detach(), config.cfg_dropout_p, g)
    with_id = config.lambda_id > 0 and state.step % config.id_loss_every_n == 0
    x_T = torch.randn(batch.z0.shape, generator=g) if with_id else None

    state.optimizer.zero_grad(set_to_none=True)
    loss, breakdown = compute_losses(state, batch, ctx, t, eps, x_T)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def sample_batch(state: TrainState, prep: PreparedData) -> Batch:
    idx = torch.randint(0, len(prep), (state.config.batch_size,), generator=state.generator)
    return prep.batch(idx)


def run_training(state: TrainState, prep: PreparedData, steps: int,
                 log_every: int = 0) -> list[LossBreakdown]:
    history = []
    for _ in range(steps):
        batch = sample_batch(state, prep)
        _, breakdown = train_step(state, batch)
        history.append(breakdown)
        if log_every and state.step % log_every == 0:
            print(f"step {state.step}: l_diff={breakdown.l_diff:.4f} "
                  f"l_id={breakdown.l_id:.4f} l_total={breakdown.l_total:.4f}")
    return history


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_train_state(state: TrainState, path) -> None:
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in state.unet.state_dict().items():
        tensors[f"model/unet.{name}"] = tensor
    for name, tensor in state.mixer.state_dict().items():
        tensors[f"model/mixer.{name}"] = tensor
    if state.ffrnet is not None:
        for name, tensor in state.ffrnet.state_dict().items():
            tensors[f"model/ffrnet.{name}"] = tensor
    for name, param in trainable_named_parameters(state):
        slot = state.optimizer.state.get(param)
        if slot:
            tensors[f"optim/{name}/step"] = torch.as_tensor(slot["step"])
            tensors[f"optim/{name}/exp_avg"] = slot["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = slot["exp_avg_sq"]
    tensors["rng/train"] = state.generator.get_state()
    meta = {
        "kind": "facesnap-train-state",
        "step": state.step,
        "config_ini": config_to_text(state.config),
        "config_hash": config_hash(state.config),
    }
    save_container(path, meta, tensors)


def restore_train_state(path) -> TrainState:
    meta, tensors = load_container(path)
    if meta.get("kind") != "facesnap-train-state":
        raise CorruptCheckpointError(
            f"checkpoint {path} is not a training checkpoint (kind={meta.get('kind')!r})")
    if "config_ini" not in meta or "step" not in meta:
        raise CorruptCheckpointError(f"checkpoint {path} header is missing required keys")
    config = config_from_text(meta["config_ini"])
    if config_hash(config) != meta.get("config_hash"):
        raise CorruptCheckpointError(f"checkpoint {path}: config hash does not match its content")
    state = init_state(config)

    def module_dict(prefix: str) -> dict:
        plen = len(prefix)
        return {name[plen:]: t for name, t in tensors.items() if name.startswith(prefix)}

    try:
        state.unet.load_state_dict(module_dict("model/unet."), strict=True)
        state.mixer.load_state_dict(module_dict("model/mixer."), strict=True)
        if state.ffrnet is not None:
            state.ffrnet.load_state_dict(module_dict("model/ffrnet."), strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"checkpoint {path}: {exc}") from exc
    for name, param in trainable_named_parameters(state):
        key = f"optim/{name}/exp_avg"
        if key in tensors:
            state.optimizer.state[param] = {
                "step": tensors[f"optim/{name}/step"],
                "exp_avg": tensors[key],
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"],
            }
    if "rng/train" not in tensors:
        raise CorruptCheckpointError(f"checkpoint {path}: missing training RNG state")
    state.generator.set_state(tensors["rng/train"])
    state.step = int(meta["step"])
    return state
