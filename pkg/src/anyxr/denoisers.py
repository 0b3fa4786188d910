"""Conditional noise predictors and the environment encoders used for
cross-modal attention between parallel sampling chains.

Every cross-modal (``xmod``) attention layer starts with a zero output
projection, so a freshly built joint model computes exactly what the
single-modality model computes.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError
from .nn import Module
from .tensor import Tensor


def _as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _context(x, dtype) -> Tensor:
    """Lift ``[B, d]`` or ``[B, P, d]`` into an attention context ``[B, P, d]``."""
    x = _as_tensor(x, dtype)
    return x.reshape(x.shape[0], 1, x.shape[1]) if x.ndim == 2 else x


class TimeCondEmbed(Module):
    """MLP over sinusoidal timestep features concatenated with the prompt."""

    def __init__(self, d_cond: int, d_out: int, rng, d_time: int = 32):
        self.fc1 = nn.Linear(d_time + d_cond, d_out, rng)
        self.fc2 = nn.Linear(d_out, d_out, rng)
        self._d_time = d_time

    def __call__(self, t: np.ndarray, cond: Tensor) -> Tensor:
        te = Tensor(nn.timestep_embedding(t, self._d_time, cond.dtype))
        return self.fc2(T.silu(self.fc1(T.concat([te, cond], axis=1))))


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, d_emb: int, rng, groups: int = 8):
        self.n1 = nn.GroupNorm(groups, c_in)
        self.c1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.emb = nn.Linear(d_emb, c_out, rng)
        self.n2 = nn.GroupNorm(groups, c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, rng)
        if c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, rng)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.c1(T.silu(self.n1(x)))
        h = h + self.emb(T.silu(emb)).reshape(emb.shape[0], -1, 1, 1)
        h = self.c2(T.silu(self.n2(h)))
        skip = self.skip(x) if hasattr(self, "skip") else x
        return skip + h


def _spatial_attend(x: Tensor, layer: nn.CrossAttention, ctx: Tensor) -> Tensor:
    n, c, h, w = x.shape
    tokens = x.reshape(n, c, h * w).swap_last()
    out = layer(tokens, ctx)
    return x + out.swap_last().reshape(n, c, h, w)


class CrossModalAttention(Module):
    """Zero-initialized attention from feature tokens to a partner's environment
    tokens. A learned query position table lets it write spatially varying
    content even though the partner context carries no pixel grid."""

    def __init__(self, d_query: int, d_s: int, n_query: int, rng, heads: int = 1):
        self.pos = nn._param(rng.standard_normal((n_query, d_query)) * 0.5)
        self.attn = nn.CrossAttention(d_query, d_s, rng, heads=heads, zero_out=True)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        return self.attn(query + self.pos, context)


class ImageUNet(Module):
    """Two-resolution UNet over ``[c_z, s, s]`` latents (``s`` divisible by 2)."""

    def __init__(self, rng: np.random.Generator, c_z: int = 4, width: int = 32, d_p: int = 128,
                 d_s: int = 64, d_emb: int = 128, latent_side: int = 8):
        w = width
        self.temb = TimeCondEmbed(d_p, d_emb, rng)
        self.conv_in = nn.Conv2d(c_z, w, 3, rng)
        self.down = ResBlock(w, w, d_emb, rng)
        self.attn_hi = nn.CrossAttention(w, d_p, rng)
        self.downsample = nn.Conv2d(w, 2 * w, 3, rng, stride=2, pad=1)
        self.mid = ResBlock(2 * w, 2 * w, d_emb, rng)
        self.attn_lo = nn.CrossAttention(2 * w, d_p, rng)
        self.upconv = nn.Conv2d(2 * w, w, 3, rng)
        self.up = ResBlock(2 * w, w, d_emb, rng)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, c_z, 3, rng)
        # cross-modal layers draw from a child stream so the rest of the init
        # does not depend on them
        xr = np.random.default_rng(rng.integers(2 ** 63))
        lo = (latent_side + 1) // 2
        self.xmod_hi = CrossModalAttention(w, d_s, latent_side * latent_side, xr)
        self.xmod_lo = CrossModalAttention(2 * w, d_s, lo * lo, xr)
        self._c_z = c_z
        self._side = latent_side

    def __call__(self, z_t, t, cond, env_ctx=None) -> Tensor:
        z = _as_tensor(z_t)
        if z.ndim != 4 or z.shape[1] != self._c_z or z.shape[2:] != (self._side, self._side):
            raise ContractError(f"latent shape {z.shape} does not fit this UNet")
        cond = _as_tensor(cond, z.dtype)
        if cond.ndim != 2 or cond.shape[0] != z.shape[0]:
            raise ContractError(f"condition shape {cond.shape} does not match batch {z.shape[0]}")
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        emb = self.temb(t, cond)
        ctx = _context(cond, z.dtype)
        env = None if env_ctx is None else _context(env_ctx, z.dtype)

        h = self.down(self.conv_in(z), emb)
        h = _spatial_attend(h, self.attn_hi, ctx)
        if env is not None:
            h = _spatial_attend(h, self.xmod_hi, env)
        skip = h
        h = self.mid(self.downsample(h), emb)
        h = _spatial_attend(h, self.attn_lo, ctx)
        if env is not None:
            h = _spatial_attend(h, self.xmod_lo, env)
        h = self.upconv(T.upsample2x(h))
        h = self.up(T.concat([h, skip], axis=1), emb)
        return self.conv_out(T.silu(self.norm_out(h)))


class FCResBlock(Module):
    def __init__(self, hidden: int, d_emb: int, rng, groups: int = 8):
        self.n1 = nn.GroupNorm(groups, hidden)
        self.fc1 = nn.Linear(hidden, hidden, rng)
        self.emb = nn.Linear(d_emb, hidden, rng)
        self.n2 = nn.GroupNorm(groups, hidden)
        self.fc2 = nn.Linear(hidden, hidden, rng)

    def __call__(self, h: Tensor, emb: Tensor) -> Tensor:
        a = self.fc1(T.silu(self.n1(h))) + self.emb(T.silu(emb))
        return h + self.fc2(T.silu(self.n2(a)))


class TextDenoiser(Module):
    """Fully connected residual denoiser over ``d_t`` latents, hidden width ``4 d_t``."""

    def __init__(self, rng: np.random.Generator, d_t: int = 64, d_p: int = 128, d_s: int = 64,
                 depth: int = 2, d_emb: int = 128, groups: int = 8):
        hidden = 4 * d_t
        self.temb = TimeCondEmbed(d_p, d_emb, rng)
        self.fc_in = nn.Linear(d_t, hidden, rng)
        self.blocks = [FCResBlock(hidden, d_emb, rng, groups) for _ in range(depth)]
        self.attn = [nn.CrossAttention(hidden, d_p, rng, d_inner=d_t) for _ in range(depth)]
        self.xmod = [nn.CrossAttention(hidden, d_s, rng, d_inner=d_t, zero_out=True) for _ in range(depth)]
        self.norm_out = nn.GroupNorm(groups, hidden)
        self.head = nn.Linear(hidden, d_t, rng)
        self._d_t = d_t

    def __call__(self, z_t, t, cond, env_ctx=None) -> Tensor:
        z = _as_tensor(z_t)
        if z.ndim != 2 or z.shape[1] != self._d_t:
            raise ContractError(f"text latent shape {z.shape} != [n, {self._d_t}]")
        cond = _as_tensor(cond, z.dtype)
        if cond.ndim != 2 or cond.shape[0] != z.shape[0]:
            raise ContractError(f"condition shape {cond.shape} does not match batch {z.shape[0]}")
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = self.temb(t, cond)
        ctx = _context(cond, z.dtype)
        env = None if env_ctx is None else _context(env_ctx, z.dtype)
        h = self.fc_in(z)
        for blk, attn, xmod in zip(self.blocks, self.attn, self.xmod):
            h = blk(h, emb)
            h = h + attn(h.reshape(n, 1, -1), ctx).reshape(n, -1)
            if env is not None:
                h = h + xmod(h.reshape(n, 1, -1), env).reshape(n, -1)
        return self.head(self.norm_out(h))


class EnvEncoder(Module):
    """Projects an in-flight latent into the shared ``d_s`` space.

    ``__call__`` gives the unit-norm shared vector used by the contrastive
    term. ``context`` gives the tokens a partner chain attends to: for image
    latents one token per cell of a stride-2 feature map (plus a learned
    position table), for text latents the shared vector itself.
    """

    def __init__(self, rng: np.random.Generator, latent_shape: tuple, d_s: int = 64, width: int = 32):
        self._latent_shape = tuple(latent_shape)
        if len(self._latent_shape) == 3:
            c, h, w = self._latent_shape
            n_tok = ((h + 1) // 2) * ((w + 1) // 2)
            self.conv = nn.Conv2d(c, width, 3, rng)
            self.down = nn.Conv2d(width, width, 3, rng, stride=2, pad=1)
            self.proj = nn.Linear(width * n_tok, d_s, rng)
            self.tok = nn.Linear(width, d_s, rng)
            self.tok_pos = nn._param(rng.standard_normal((n_tok, d_s)) * 0.02)
        else:
            self.proj = nn.Linear(self._latent_shape[0], d_s, rng)

    def encode(self, z) -> tuple[Tensor, Tensor]:
        """``(shared [B, d_s], tokens [B, N, d_s])``."""
        z = _as_tensor(z)
        if tuple(z.shape[1:]) != self._latent_shape:
            raise ContractError(f"latent geometry {z.shape[1:]} != {self._latent_shape}")
        n = z.shape[0]
        if z.ndim == 4:
            h = T.silu(self.down(T.silu(self.conv(z))))
            shared = nn.l2_normalize(self.proj(h.reshape(n, -1)))
            tokens = self.tok(h.reshape(n, h.shape[1], -1).swap_last()) + self.tok_pos
            return shared, tokens
        shared = nn.l2_normalize(self.proj(z))
        return shared, shared.reshape(n, 1, -1)

    def __call__(self, z) -> Tensor:
        return self.encode(z)[0]

    def context(self, z) -> Tensor:
        return self.encode(z)[1]


def unet_forward(net: ImageUNet, z_t, t, cond, env_ctx=None) -> Tensor:
    return net(z_t, t, cond, env_ctx)


def fcres_forward(net: TextDenoiser, z_t, t, cond, env_ctx=None) -> Tensor:
    return net(z_t, t, cond, env_ctx)


def env_encode(enc: EnvEncoder, z_t) -> Tensor:
    return enc(z_t)
