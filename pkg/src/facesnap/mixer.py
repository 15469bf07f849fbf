"""Facial attribute fusion.

Projects an abstract identity embedding and a grid of detail tokens to a
shared width, fuses them with cross-attention (identity tokens as queries,
the concatenation of both token sets as keys/values), and distills the
result into a short fused sequence through a learnable-query transformer
decoder. No positional encodings are used anywhere, so the fused output is
invariant to permutations of the key/value tokens.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError


def seeded_linear(in_features: int, out_features: int, generator: torch.Generator) -> nn.Linear:
    """Linear layer with uniform fan-in init drawn from an explicit generator."""
    layer = nn.Linear(in_features, out_features)
    bound = 1.0 / math.sqrt(in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)
    return layer


def scaled_dot_attention(q, k, v, heads, return_weights=False):
    """softmax(QK^T / sqrt(d_head)) V over already-projected q/k/v of shape [N, T, width]."""
    n, tq, width = q.shape
    tk = k.shape[1]
    dh = width // heads
    q = q.reshape(n, tq, heads, dh).transpose(1, 2)
    k = k.reshape(n, tk, heads, dh).transpose(1, 2)
    v = v.reshape(n, tk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(n, tq, width)
    return (out, weights) if return_weights else (out, None)


class CrossAttention(nn.Module):
    """Single projected attention: q from one sequence, k/v from another."""

    def __init__(self, width: int, heads: int, generator: torch.Generator):
        super().__init__()
        if width % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide width ({width})")
        self.width = width
        self.heads = heads
        self.to_q = seeded_linear(width, width, generator)
        self.to_k = seeded_linear(width, width, generator)
        self.to_v = seeded_linear(width, width, generator)
        self.to_out = seeded_linear(width, width, generator)

    def forward(self, query_tokens, kv_tokens, return_weights=False):
        if query_tokens.shape[-1] != self.width:
            raise ShapeMismatchError("attention query width", self.width, query_tokens.shape[-1])
        if kv_tokens.shape[-1] != self.width:
            raise ShapeMismatchError("attention key/value width", self.width, kv_tokens.shape[-1])
        if query_tokens.shape[0] != kv_tokens.shape[0]:
            raise ShapeMismatchError("attention batch size", query_tokens.shape[0], kv_tokens.shape[0])
        out, weights = scaled_dot_attention(
            self.to_q(query_tokens), self.to_k(kv_tokens), self.to_v(kv_tokens),
            self.heads, return_weights,
        )
        out = self.to_out(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, width: int, generator: torch.Generator, expansion: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            seeded_linear(width, expansion * width, generator),
            nn.GELU(),
            seeded_linear(expansion * width, width, generator),
        )

    def forward(self, x):
        return self.net(x)


class DecoderLayer(nn.Module):
    """Pre-norm transformer decoder layer: self-attention, cross-attention, feed-forward."""

    def __init__(self, width: int, heads: int, generator: torch.Generator):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = CrossAttention(width, heads, generator)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = CrossAttention(width, heads, generator)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = FeedForward(width, generator)

    def forward(self, x, kv_tokens):
        h = self.norm_self(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm_cross(x), kv_tokens)
        x = x + self.ff(self.norm_ff(x))
        return x


class AttributeMixer(nn.Module):
    """Fuses an identity vector and a detail-token grid into a short conditioning sequence.

    Stages:
      1. project_id:   identity vector -> ``id_tokens`` tokens of ``width`` (dense map + reshape)
      2. project_clip: per-token linear map of the detail grid to ``width``
      3. fuse:         cross-attention, queries = id tokens, keys/values = concat(id, detail)
      4. decode:       learnable queries attend to the fused tokens through ``depth`` decoder layers

    All weights are initialised from ``seed`` (uniform fan-in for linear maps; the learnable
    queries from a standard normal scaled by 0.02) so two mixers built with the same arguments
    are bit-identical.
    """

    def __init__(
        self,
        id_dim: int = 512,
        clip_dim: int = 64,
        width: int = 64,
        id_tokens: int = 20,
        clip_tokens: int = 257,
        out_tokens: int = 16,
        heads: int = 1,
        depth: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        if width % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide width ({width})")
        self.id_dim = id_dim
        self.clip_dim = clip_dim
        self.width = width
        self.id_tokens = id_tokens
        self.clip_tokens = clip_tokens
        self.out_tokens = out_tokens

        g = torch.Generator().manual_seed(seed)
        self.proj_id = seeded_linear(id_dim, id_tokens * width, g)
        self.proj_clip = seeded_linear(clip_dim, width, g)
        self.fuse_attn = CrossAttention(width, heads, g)
        self.decoder = nn.ModuleList(DecoderLayer(width, heads, g) for _ in range(depth))
        self.queries = nn.Parameter(
            torch.randn(out_tokens, width, generator=g) * 0.02
        )

    def project_id(self, id_vec: torch.Tensor) -> torch.Tensor:
        """Map [N, id_dim] (or [id_dim]) identity vectors to [N, id_tokens, width]."""
        if id_vec.dim() == 1:
            id_vec = id_vec.unsqueeze(0)
        if id_vec.dim() != 2 or id_vec.shape[-1] != self.id_dim:
            raise ShapeMismatchError("identity embedding", f"[N, {self.id_dim}]", list(id_vec.shape))
        out = self.proj_id(id_vec)
        return out.reshape(id_vec.shape[0], self.id_tokens, self.width)

    def project_clip(self, clip_tokens: torch.Tensor) -> torch.Tensor:
        """Map [N, clip_tokens, clip_dim] (or unbatched) detail grids to [N, clip_tokens, width]."""
        if clip_tokens.dim() == 2:
            clip_tokens = clip_tokens.unsqueeze(0)
        if clip_tokens.dim() != 3 or clip_tokens.shape[1] != self.clip_tokens \
                or clip_tokens.shape[-1] != self.clip_dim:
            raise ShapeMismatchError(
                "detail token grid",
                f"[N, {self.clip_tokens}, {self.clip_dim}]",
                list(clip_tokens.shape),
            )
        return self.proj_clip(clip_tokens)

    def fuse(self, id_proj: torch.Tensor, clip_proj: torch.Tensor, return_weights=False):
        """Cross-attention fusion: id tokens query the concatenated id+detail tokens."""
        if id_proj.shape[-1] != self.width or clip_proj.shape[-1] != self.width:
            raise ShapeMismatchError(
                "fusion input width", self.width, (id_proj.shape[-1], clip_proj.shape[-1])
            )
        if id_proj.shape[0] != clip_proj.shape[0]:
            raise ShapeMismatchError("fusion batch size", id_proj.shape[0], clip_proj.shape[0])
        kv = torch.cat([id_proj, clip_proj], dim=1)
        return self.fuse_attn(id_proj, kv, return_weights=return_weights)

    def decode(self, fused_tokens: torch.Tensor) -> torch.Tensor:
        """Distill fused tokens into [N, out_tokens, width] via the learnable-query decoder."""
        if fused_tokens.dim() != 3 or fused_tokens.shape[-1] != self.width:
            raise ShapeMismatchError(
                "decoder key/value width", f"[N, T, {self.width}]", list(fused_tokens.shape)
            )
        x = self.queries.unsqueeze(0).expand(fused_tokens.shape[0], -1, -1)
        for layer in self.decoder:
            x = layer(x, fused_tokens)
        return x

    def forward(self, id_vec: torch.Tensor, clip_tokens: torch.Tensor) -> torch.Tensor:
        """Full fusion: returns the [N, out_tokens, width] conditioning sequence."""
        pre = self.fuse(self.project_id(id_vec), self.project_clip(clip_tokens))
        return self.decode(pre)
