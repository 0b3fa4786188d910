"""Network building blocks, parameter store and the AdamW optimizer."""
from __future__ import annotations

import fnmatch
import zlib
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent init stream per component, stable under adding components."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# functional composites
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out + b if b is not None else out


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) to zero mean and unit variance.

    ``x`` is ``[N, C, ...]``; ``gain`` and ``bias`` are ``[C]``.
    """
    if eps <= 0:
        raise ContractError("group_norm eps must be positive")
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    rest = x.shape[2:]
    g = x.reshape(n, groups, -1)
    mu = g.mean(axis=-1, keepdims=True)
    xc = g - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = (xc / T.sqrt(var + eps)).reshape(x.shape)
    bshape = (1, c) + (1,) * len(rest)
    return xhat * gain.reshape(bshape) + bias.reshape(bshape)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * gain + bias


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    return x.reshape(*lead, length, heads, d // heads).transpose(
        *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    nl = len(lead)
    return x.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, length, heads * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``[..., L, d]`` inputs.

    ``mask`` is an additive array broadcastable to ``[..., heads, L_q, L_k]``.
    """
    if k.shape[-2] < 1:
        raise ContractError("attention needs a non-empty context")
    dh = q.shape[-1] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = (qh @ kh.swap_last()) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor._wrap(mask.astype(scores.dtype))
    return _merge_heads(T.softmax(scores, axis=-1) @ vh)


def cross_attention(query: Tensor, context: Tensor, proj_q: Tensor, proj_k: Tensor,
                    proj_v: Tensor, proj_out: Tensor, heads: int = 1) -> Tensor:
    """Attend from ``query [.., L_q, d]`` to ``context [.., L_c, d_c]``."""
    if context.ndim < 2 or context.shape[-2] < 1:
        raise ContractError("cross_attention needs at least one context row")
    if query.shape[-1] != proj_q.shape[0] or context.shape[-1] != proj_k.shape[0]:
        raise ShapeError("projection input dims do not match query/context")
    return attention(query @ proj_q, context @ proj_k, context @ proj_v, heads) @ proj_out


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9, dtype=np.float32), k=1)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``[len(t), dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Container whose Tensor attributes are its parameters.

    Child modules (and lists of them) are walked in attribute order, giving
    dotted parameter names such as ``down.0.conv1.w``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> Module:
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        scale = 0.0 if zero else np.sqrt(1.0 / n_in)
        self.w = _param(rng.standard_normal((n_in, n_out)) * scale)
        if bias:
            self.b = _param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, getattr(self, "b", None))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, zero: bool = False):
        scale = 0.0 if zero else np.sqrt(1.0 / (c_in * k * k))
        self.w = _param(rng.standard_normal((c_out, c_in, k, k)) * scale)
        self.b = _param(np.zeros(c_out))
        self._stride = stride
        self._pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, self._stride, self._pad)
        return y + self.b.reshape(1, -1, 1, 1)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ShapeError(f"{channels} channels not divisible into {groups} groups")
        self.gain = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self._groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self._groups, self.gain, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class CrossAttention(Module):
    """q/k/v/out projections; ``zero_out`` starts the block as an exact no-op."""

    def __init__(self, d_query: int, d_context: int, rng: np.random.Generator, heads: int = 1,
                 d_inner: int | None = None, zero_out: bool = False):
        d_inner = d_inner or d_query
        self.q = _param(rng.standard_normal((d_query, d_inner)) / np.sqrt(d_query))
        self.k = _param(rng.standard_normal((d_context, d_inner)) / np.sqrt(d_context))
        self.v = _param(rng.standard_normal((d_context, d_inner)) / np.sqrt(d_context))
        scale = 0.0 if zero_out else 1.0 / np.sqrt(d_inner)
        self.out = _param(rng.standard_normal((d_inner, d_query)) * scale)
        self.out_b = _param(np.zeros(d_query))
        self._heads = heads

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        y = cross_attention(query, context, self.q, self.k, self.v, self.out, self._heads)
        return y + self.out_b


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        return self.proj(attention(q, k, v, self._heads, mask))


class TransformerBlock(Module):
    """Pre-norm attention + MLP block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(T.silu(self.fc1(self.ln2(x))))


# ---------------------------------------------------------------------------
# parameter store + optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with a freeze mask and AdamW moment buffers.

    Moment buffers exist exactly for the trainable names; changing the mask
    resets the optimizer state.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]]):
        self.params: dict[str, Tensor] = {}
        for name, p in params:
            if name in self.params:
                raise ContractError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.trainable: dict[str, bool] = {n: True for n in self.params}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.reset_optimizer()

    @classmethod
    def from_module(cls, module: Module, prefix: str = "") -> ParamStore:
        return cls(module.named_parameters(prefix))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def match(self, patterns: Iterable[str]) -> list[str]:
        return [n for n in self.params if any(fnmatch.fnmatchcase(n, p) for p in patterns)]

    def set_trainable(self, patterns: Iterable[str]) -> list[str]:
        """Make exactly the names matching ``patterns`` trainable."""
        patterns = list(patterns)
        for p in patterns:
            if not any(fnmatch.fnmatchcase(n, p) for n in self.params):
                raise ContractError(f"freeze pattern {p!r} matches no parameter")
        selected = set(self.match(patterns))
        for name, t in self.params.items():
            self.trainable[name] = name in selected
            t.requires_grad = name in selected
            t.grad = None
        self.reset_optimizer()
        return [n for n in self.params if n in selected]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self.trainable.items() if flag]

    def reset_optimizer(self) -> None:
        self.step = 0
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.trainable_names()}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.trainable_names()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].grad for n in self.trainable_names()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        missing = [n for n in self.params if n not in state]
        if strict and missing:
            raise ContractError(f"state is missing parameters: {missing[:5]}")
        loaded = []
        for name, arr in state.items():
            if name not in self.params:
                if strict:
                    raise ContractError(f"unexpected parameter {name!r}")
                continue
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=self.params[name].dtype)
            loaded.append(name)
        return loaded


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray] | None = None, lr: float = 1e-3,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> ParamStore:
    """One AdamW update of every trainable parameter, in place.

    Weight decay is decoupled: ``theta *= 1 - lr * wd`` before the Adam step.
    """
    if grads is None:
        grads = store.grads()
    b1, b2 = betas
    step = store.step + 1
    updates = {}
    for name in store.trainable_names():
        g = grads.get(name)
        p = store.params[name]
        if g is None:
            raise ContractError(f"no gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        updates[name] = g
    for name, g in updates.items():
        p = store.params[name]
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        data = p.data * (1 - lr * weight_decay) if weight_decay else p.data
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    store.step = step
    return store
