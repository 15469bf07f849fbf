"""Toy latent-diffusion core.

A small conv/cross-attention UNet predicts the noise added by a linear-beta
forward process. The training objective masks the denoising MSE to the face
region and adds an identity term computed on a few-step deterministically
sampled generation ("lightning" branch). Inference uses classifier-free
guidance with a learned null text embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateInputError, ShapeMismatchError
from .mixer import seeded_linear


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative signal level alpha_bar."""

    betas: torch.Tensor
    alpha_bar: torch.Tensor

    def __post_init__(self):
        if self.betas.dim() != 1 or self.betas.numel() < 1:
            raise ShapeMismatchError("betas", "[T]", list(self.betas.shape))
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.betas.numel() > 1 and not bool((self.betas.diff() > 0).all()):
            raise ValueError("betas must be strictly increasing")
        if self.alpha_bar.numel() > 1 and not bool((self.alpha_bar.diff() < 0).all()):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return self.betas.numel()

    @classmethod
    def linear(cls, timesteps: int = 100, start: float = 1e-4, end: float = 2e-2,
               ref_steps: int = 1000) -> "NoiseSchedule":
        """Reference linear schedule compressed to ``timesteps`` steps.

        The endpoint betas are scaled by ref_steps/timesteps so the terminal
        signal level matches the ref_steps-long schedule (near-pure noise at
        t = T-1 even for short schedules).
        """
        if timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {timesteps}")
        scale = ref_steps / timesteps
        if end * scale >= 1.0:
            raise ValueError(
                f"terminal beta {end * scale:.3f} leaves (0, 1); use more timesteps "
                f"(> {int(end * ref_steps)}) or a smaller beta_end")
        betas = torch.linspace(start * scale, end * scale, timesteps, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        return cls(betas=betas.float(), alpha_bar=alpha_bar.float())


def _gather_alpha_bar(sched: NoiseSchedule, t) -> torch.Tensor:
    if isinstance(t, int):
        if not 0 <= t < sched.timesteps:
            raise ValueError(f"timestep {t} out of range [0, {sched.timesteps})")
        return sched.alpha_bar[t]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= sched.timesteps):
        raise ValueError(
            f"timesteps [{int(t.min())}, {int(t.max())}] out of range [0, {sched.timesteps})"
        )
    return sched.alpha_bar[t].reshape(-1, 1, 1, 1)


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward process: z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if z0.shape != eps.shape:
        raise ShapeMismatchError("noise tensor", list(z0.shape), list(eps.shape))
    ab = _gather_alpha_bar(sched, t).to(z0.dtype)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def masked_diffusion_loss(
    eps: torch.Tensor,
    eps_pred: torch.Tensor,
    mask: torch.Tensor,
    normalize: str = "all",
) -> torch.Tensor:
    """Squared error between masked noise and masked prediction.

    normalize="all" divides by the total element count (mask area does not
    change the loss scale); normalize="area" divides by the masked element
    count instead.
    """
    if eps.shape != eps_pred.shape:
        raise ShapeMismatchError("noise prediction", list(eps.shape), list(eps_pred.shape))
    if mask.dim() != eps.dim() or mask.shape[0] != eps.shape[0] or mask.shape[1] != 1 \
            or mask.shape[2:] != eps.shape[2:]:
        raise ShapeMismatchError("face mask", f"[{eps.shape[0]}, 1, {tuple(eps.shape[2:])}]",
                                 list(mask.shape))
    diff = eps * mask - eps_pred * mask
    if normalize == "all":
        return diff.pow(2).mean()
    if normalize == "area":
        denom = mask.expand_as(eps).sum().clamp_min(1e-12)
        return diff.pow(2).sum() / denom
    raise ValueError(f"normalize must be 'all' or 'area', got {normalize!r}")


def id_loss(ref_embed: torch.Tensor, gen_embed: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of two identity embeddings; in [0, 2]."""
    if ref_embed.shape != gen_embed.shape:
        raise ShapeMismatchError("embedding pair", list(ref_embed.shape), list(gen_embed.shape))
    na, nb = ref_embed.norm(), gen_embed.norm()
    if float(na.detach()) < 1e-12 or float(nb.detach()) < 1e-12:
        raise DegenerateInputError("identity loss of a zero-norm embedding is undefined")
    return 1.0 - (ref_embed / na) @ (gen_embed / nb)


@dataclass(frozen=True)
class LossBreakdown:
    """Reported loss terms; l_total is accumulated as l_diff + lambda_id * l_id exactly."""

    l_diff: float
    l_id: float
    l_total: float
    lambda_id: float


def total_loss(l_diff: float, l_id: float, lambda_id: float) -> LossBreakdown:
    if lambda_id < 0:
        raise ValueError(f"lambda_id must be >= 0, got {lambda_id}")
    l_diff = float(l_diff)
    l_id = float(l_id)
    return LossBreakdown(
        l_diff=l_diff, l_id=l_id, l_total=l_diff + lambda_id * l_id, lambda_id=lambda_id
    )


def cfg_dropout(
    ctx: torch.Tensor,
    null_ctx: torch.Tensor,
    p: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Independently replace each batch item's context with the null embedding with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    if ctx.dim() != 3:
        raise ShapeMismatchError("context", "[N, T, dim]", list(ctx.shape))
    draws = torch.rand(ctx.shape[0], generator=generator) < p
    if not bool(draws.any()):
        return ctx
    out = ctx.clone()
    out[draws] = null_ctx.to(ctx.dtype).expand(ctx.shape[1], -1)
    return out


# ---------------------------------------------------------------------------
# UNet building blocks
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer timesteps, [N] -> [N, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def seeded_conv(in_ch: int, out_ch: int, kernel: int, generator: torch.Generator,
                stride: int = 1, padding: int = 0) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding)
    bound = 1.0 / math.sqrt(in_ch * kernel * kernel)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        conv.bias.uniform_(-bound, bound, generator=generator)
    return conv


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv twice with an additive per-channel timestep shift."""

    def __init__(self, in_ch, out_ch, temb_dim, groups, generator):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = seeded_conv(in_ch, out_ch, 3, generator, padding=1)
        self.temb_proj = seeded_linear(temb_dim, out_ch, generator)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = seeded_conv(out_ch, out_ch, 3, generator, padding=1)
        self.skip = seeded_conv(in_ch, out_ch, 1, generator) if in_ch != out_ch else nn.Identity()

    def forward(self, h, temb):
        x = self.conv1(F.silu(self.norm1(h)))
        x = x + self.temb_proj(temb)[:, :, None, None]
        x = self.conv2(F.silu(self.norm2(x)))
        return x + self.skip(h)


class SpatialCrossAttention(nn.Module):
    """Single-head attention from spatial positions onto a context token sequence."""

    def __init__(self, channels, ctx_dim, groups, generator):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = seeded_linear(channels, channels, generator)
        self.to_k = seeded_linear(ctx_dim, channels, generator)
        self.to_v = seeded_linear(ctx_dim, channels, generator)
        self.to_out = seeded_linear(channels, channels, generator)

    def forward(self, h, ctx):
        n, c, height, width = h.shape
        tokens = self.norm(h).reshape(n, c, height * width).transpose(1, 2)
        q = self.to_q(tokens)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(weights @ v)
        return h + out.transpose(1, 2).reshape(n, c, height, width)


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, ctx_dim, temb_dim, groups, generator, downsample):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim, groups, generator)
        self.attn = SpatialCrossAttention(out_ch, ctx_dim, groups, generator)
        self.down = seeded_conv(out_ch, out_ch, 3, generator, stride=2, padding=1) if downsample else None

    def forward(self, h, temb, ctx):
        h = self.attn(self.res(h, temb), ctx)
        skip = h
        if self.down is not None:
            h = self.down(h)
        return h, skip


class MiddleBlock(nn.Module):
    def __init__(self, channels, ctx_dim, temb_dim, groups, generator):
        super().__init__()
        self.res1 = ResBlock(channels, channels, temb_dim, groups, generator)
        self.attn = SpatialCrossAttention(channels, ctx_dim, groups, generator)
        self.res2 = ResBlock(channels, channels, temb_dim, groups, generator)

    def forward(self, h, temb, ctx):
        return self.res2(self.attn(self.res1(h, temb), ctx), temb)


class UNetTrunk(nn.Module):
    """Input conv, encoder stages and middle block: the half a control branch copies."""

    def __init__(self, latent_channels, channels, ctx_dim, groups, generator):
        super().__init__()
        self.latent_channels = latent_channels
        self.channels = tuple(channels)
        self.sin_dim = channels[0]
        temb_dim = channels[0] * 4
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(
            seeded_linear(self.sin_dim, temb_dim, generator),
            nn.SiLU(),
            seeded_linear(temb_dim, temb_dim, generator),
        )
        self.conv_in = seeded_conv(latent_channels, channels[0], 3, generator, padding=1)
        stages = []
        prev = channels[0]
        for i, ch in enumerate(channels):
            stages.append(EncoderStage(prev, ch, ctx_dim, temb_dim, groups, generator,
                                       downsample=i < len(channels) - 1))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.middle = MiddleBlock(channels[-1], ctx_dim, temb_dim, groups, generator)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(t, self.sin_dim).to(next(self.parameters()).dtype))

    def forward(self, z, t, ctx, hint=None):
        temb = self.time_embedding(t)
        h = self.conv_in(z)
        if hint is not None:
            h = h + hint
        skips = []
        for stage in self.stages:
            h, skip = stage(h, temb, ctx)
            skips.append(skip)
        mid = self.middle(h, temb, ctx)
        return skips, mid, temb


class DecoderStage(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, ctx_dim, temb_dim, groups, generator, upsample):
        super().__init__()
        self.res = ResBlock(in_ch + skip_ch, out_ch, temb_dim, groups, generator)
        self.attn = SpatialCrossAttention(out_ch, ctx_dim, groups, generator)
        self.up = seeded_conv(out_ch, out_ch, 3, generator, padding=1) if upsample else None

    def forward(self, h, skip, temb, ctx):
        h = self.attn(self.res(torch.cat([h, skip], dim=1), temb), ctx)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class DenoisingUNet(nn.Module):
    """Noise predictor over latents, conditioned on a timestep and a context sequence.

    ``forward`` optionally accepts a list of R+1 additive residuals matching
    the encoder skip features plus the middle-block output (a control branch's
    injection points).
    """

    def __init__(self, latent_channels=4, channels=(32, 48, 64), ctx_dim=64,
                 groups=4, seed=0):
        super().__init__()
        for ch in channels:
            if ch % groups != 0:
                raise ValueError(f"norm groups ({groups}) must divide every channel count {channels}")
        g = torch.Generator().manual_seed(seed)
        self.trunk = UNetTrunk(latent_channels, channels, ctx_dim, groups, g)
        self.ctx_dim = ctx_dim
        temb_dim = self.trunk.temb_dim
        dec = []
        prev = channels[-1]
        for i in reversed(range(len(channels))):
            dec.append(DecoderStage(prev, channels[i], channels[i], ctx_dim, temb_dim,
                                    groups, g, upsample=i > 0))
            prev = channels[i]
        self.dec_stages = nn.ModuleList(dec)
        self.out_norm = nn.GroupNorm(groups, channels[0])
        self.out_conv = seeded_conv(channels[0], latent_channels, 3, g, padding=1)
        self.null_ctx = nn.Parameter(torch.randn(1, ctx_dim, generator=g) * 0.02)

    def null_context(self, batch: int, tokens: int = 1) -> torch.Tensor:
        return self.null_ctx.expand(tokens, -1).unsqueeze(0).expand(batch, -1, -1)

    @staticmethod
    def _as_batch_t(t, batch: int) -> torch.Tensor:
        if isinstance(t, int):
            return torch.full((batch,), t, dtype=torch.long)
        t = torch.as_tensor(t, dtype=torch.long)
        return t.expand(batch) if t.dim() == 0 else t

    def forward(self, z_t, t, ctx, residuals=None):
        if z_t.dim() != 4 or z_t.shape[1] != self.trunk.latent_channels:
            raise ShapeMismatchError(
                "latent", f"[N, {self.trunk.latent_channels}, H, W]", list(z_t.shape))
        t = self._as_batch_t(t, z_t.shape[0])
        skips, mid, temb = self.trunk(z_t, t, ctx)
        if residuals is not None:
            expected = [tuple(s.shape) for s in skips] + [tuple(mid.shape)]
            actual = [tuple(r.shape) for r in residuals]
            if actual != expected:
                raise ShapeMismatchError("control residuals", expected, actual)
            skips = [s + r for s, r in zip(skips, residuals[:-1])]
            mid = mid + residuals[-1]
        h = mid
        for stage, skip in zip(self.dec_stages, reversed(skips)):
            h = stage(h, skip, temb, ctx)
        return self.out_conv(F.silu(self.out_norm(h)))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def _sample_timesteps(sched: NoiseSchedule, steps: int) -> torch.Tensor:
    if steps < 1:
        raise ValueError(f"sampling steps must be >= 1, got {steps}")
    return torch.linspace(sched.timesteps - 1, 0, steps).round().long()


def _predict_x0(x, eps, ab_t):
    return (x - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()


def lightning_generate(unet, ffr, control, fused, ctx, x_T, sched, steps: int = 4):
    """Few-step deterministic generation with the gradient graph retained.

    Each step predicts the clean latent from the current noise estimate and
    re-noises to the next (lower) timestep; the final step returns the clean
    prediction itself. With steps=1 this is exactly the single-step x0
    formula at t = T-1.
    """
    timesteps = _sample_timesteps(sched, steps)
    x = x_T
    for i, t in enumerate(timesteps):
        t_int = int(t)
        residuals = ffr(control, x, t_int, fused) if ffr is not None else None
        eps = unet(x, t_int, ctx, residuals)
        ab_t = sched.alpha_bar[t_int].to(x.dtype)
        x0 = _predict_x0(x, eps, ab_t)
        if i == len(timesteps) - 1:
            x = x0
        else:
            ab_next = sched.alpha_bar[int(timesteps[i + 1])].to(x.dtype)
            x = ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * eps
    return x


@torch.no_grad()
def guided_sample(unet, ffr, control, fused, ctx, sched, steps, guidance_scale,
                  generator=None, x_T=None, ctx_uncond=None, latent_hw=None):
    """Classifier-free-guided deterministic sampling.

    eps = eps_uncond + g (eps_cond - eps_uncond) per step; the unconditional
    branch swaps the text context for the learned null embedding but keeps the
    control-branch residuals. Deterministic given the generator / x_T.
    """
    if guidance_scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {guidance_scale}")
    if x_T is None:
        if latent_hw is None:
            raise ValueError("guided_sample needs x_T or latent_hw to draw the initial noise")
        n = ctx.shape[0]
        x_T = torch.randn(
            (n, unet.trunk.latent_channels, latent_hw[0], latent_hw[1]), generator=generator
        )
    if ctx_uncond is None:
        ctx_uncond = unet.null_context(ctx.shape[0], ctx.shape[1])
    timesteps = _sample_timesteps(sched, steps)
    x = x_T
    for i, t in enumerate(timesteps):
        t_int = int(t)
        residuals = ffr(control, x, t_int, fused) if ffr is not None else None
        eps_cond = unet(x, t_int, ctx, residuals)
        eps_uncond = unet(x, t_int, ctx_uncond, residuals)
        eps = eps_uncond + guidance_scale * (eps_cond - eps_uncond)
        ab_t = sched.alpha_bar[t_int].to(x.dtype)
        x0 = _predict_x0(x, eps, ab_t)
        if i == len(timesteps) - 1:
            x = x0
        else:
            ab_next = sched.alpha_bar[int(timesteps[i + 1])].to(x.dtype)
            x = ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * eps
    return x
