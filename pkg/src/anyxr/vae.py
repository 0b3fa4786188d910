"""Autoencoders that define the diffusion latent spaces.

The image VAE compresses ``[1, S, S]`` to ``[c_z, S/4, S/4]``; the text VAE
maps a token sequence to a ``d_t`` vector and decodes it autoregressively,
with the latent injected as a prefix state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import Module
from .prompt_encoders import BOS, EOS, MAX_LEN, PAD, pad_batch
from .tensor import Tensor


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_var: Tensor

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mu.shape).astype(self.mu.dtype)
        return self.mu + T.exp(self.log_var * 0.5) * Tensor(eps)


def kl_standard_normal(post: GaussianPosterior) -> Tensor:
    """Closed-form KL(N(mu, var) || N(0, 1)) averaged over latent elements."""
    mu, lv = post.mu, post.log_var
    return ((mu * mu + T.exp(lv) - lv - 1.0) * 0.5).mean()


def vae_loss(x, x_hat: Tensor, post: GaussianPosterior, beta_kl: float) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input {x.shape}")
    return nn.mse(x_hat, x) + beta_kl * kl_standard_normal(post)


# ---------------------------------------------------------------------------
# image VAE
# ---------------------------------------------------------------------------

class _ResConv(Module):
    def __init__(self, ch: int, rng):
        self.n1 = nn.GroupNorm(8, ch)
        self.c1 = nn.Conv2d(ch, ch, 3, rng)
        self.n2 = nn.GroupNorm(8, ch)
        self.c2 = nn.Conv2d(ch, ch, 3, rng)

    def __call__(self, x):
        h = self.c1(T.silu(self.n1(x)))
        return x + self.c2(T.silu(self.n2(h)))


class ImageVAE(Module):
    def __init__(self, rng: np.random.Generator, c_z: int = 4, width: int = 32):
        w, w_hi = width, 8
        self.e_d1 = nn.Conv2d(1, w, 3, rng, stride=2, pad=1)
        self.e_d2 = nn.Conv2d(w, w, 3, rng, stride=2, pad=1)
        self.e_res = _ResConv(w, rng)
        self.e_norm = nn.GroupNorm(8, w)
        self.e_out = nn.Conv2d(w, 2 * c_z, 3, rng)
        self.d_in = nn.Conv2d(c_z, w, 3, rng)
        self.d_res = _ResConv(w, rng)
        self.d_u1 = nn.Conv2d(w, w, 3, rng)
        self.d_u2 = nn.Conv2d(w, w_hi, 3, rng)
        self.d_norm = nn.GroupNorm(4, w_hi)
        self.d_out = nn.Conv2d(w_hi, 1, 3, rng)
        self._c_z = c_z

    def encode(self, x) -> GaussianPosterior:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 4 or x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"image VAE needs [n, 1, H, W] with H, W divisible by 4, got {x.shape}")
        h = T.silu(self.e_d1(x))
        h = self.e_res(self.e_d2(h))
        h = self.e_out(T.silu(self.e_norm(h)))
        c = self._c_z
        return GaussianPosterior(h[:, :c], h[:, c:])

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        if z.ndim != 4 or z.shape[1] != self._c_z:
            raise ShapeError(f"expected latent [n, {self._c_z}, h, w], got {z.shape}")
        h = self.d_res(self.d_in(z))
        h = T.silu(self.d_u1(T.upsample2x(h)))
        h = self.d_u2(T.upsample2x(h))
        return T.sigmoid(self.d_out(T.silu(self.d_norm(h))))


def fit_image_vae(vae: ImageVAE, store: nn.ParamStore, images: np.ndarray, opt, seed: int,
                  stage: str, beta_kl: float = 1e-4, on_epoch=None) -> list[float]:
    from .training import run_epochs

    def step(idx, rng):
        x = images[idx]
        post = vae.encode(x)
        return vae_loss(x, vae.decode(post.sample(rng)), post, beta_kl)

    return run_epochs(store, len(images), step, opt, seed, stage, on_epoch)


def encode_images_mean(vae: ImageVAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([vae.encode(images[i:i + batch_size]).mu.data
                           for i in range(0, len(images), batch_size)])


def decode_images(vae: ImageVAE, latents: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([vae.decode(latents[i:i + batch_size]).data
                           for i in range(0, len(latents), batch_size)])


# ---------------------------------------------------------------------------
# text VAE
# ---------------------------------------------------------------------------

class TextVAE(Module):
    def __init__(self, vocab_size: int, rng: np.random.Generator, d_t: int = 64, width: int = 64,
                 heads: int = 4, depth: int = 2, max_len: int = MAX_LEN):
        self.tok = nn._param(rng.standard_normal((vocab_size, width)) * 0.1)
        self.pos = nn._param(rng.standard_normal((max_len + 1, width)) * 0.02)
        self.enc = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.enc_ln = nn.LayerNorm(width)
        self.to_post = nn.Linear(width, 2 * d_t, rng)
        self.prefix = nn.Linear(d_t, width, rng)
        self.dec = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.dec_ln = nn.LayerNorm(width)
        self.logits = nn.Linear(width, vocab_size, rng)
        self._vocab_size = vocab_size
        self._d_t = d_t
        self._max_len = max_len

    def _check(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self._vocab_size):
            raise ContractError("token id outside the vocabulary")

    def encode(self, ids: np.ndarray, lengths: np.ndarray) -> GaussianPosterior:
        ids = np.asarray(ids)
        self._check(ids)
        n, length = ids.shape
        x = T.embedding(self.tok, ids) + self.pos[:length]
        mask = nn.causal_mask(length)
        for blk in self.enc:
            x = blk(x, mask)
        h = self.to_post(self.enc_ln(x[np.arange(n), np.asarray(lengths) - 1]))
        return GaussianPosterior(h[:, :self._d_t], h[:, self._d_t:])

    def decoder_logits(self, z, ids: np.ndarray) -> Tensor:
        """Logits for next-token prediction; position i sees the prefix and ``ids[:i+1]``."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        ids = np.asarray(ids)
        self._check(ids)
        n, length = ids.shape
        pre = self.prefix(z).reshape(n, 1, -1)
        x = T.concat([pre, T.embedding(self.tok, ids)], axis=1) + self.pos[:length + 1]
        mask = nn.causal_mask(length + 1)
        for blk in self.dec:
            x = blk(x, mask)
        return self.logits(self.dec_ln(x[:, 1:]))

    def reconstruction_loss(self, z, ids: np.ndarray) -> Tensor:
        """Token cross-entropy for predicting ``ids[1:]`` from ``ids[:-1]``; pads ignored."""
        ids = np.asarray(ids)
        logits = self.decoder_logits(z, ids[:, :-1])
        target = ids[:, 1:]
        keep = target != PAD
        n, length = target.shape
        rows, cols = np.nonzero(keep)
        logp = T.log_softmax(logits, axis=-1)
        return -(logp[rows, cols, target[rows, cols]].mean())

    def decode_greedy(self, z, max_len: int = MAX_LEN) -> list[list[int]]:
        if max_len > self._max_len:
            raise ContractError(f"max_len must be <= {self._max_len}")
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)
        n = z.shape[0]
        seqs = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        while seqs.shape[1] < max_len and not done.all():
            nxt = self.decoder_logits(z, seqs).data[:, -1].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
        out = []
        for row in seqs:
            row = list(row)
            if EOS in row:
                row = row[:row.index(EOS) + 1]
            out.append([int(i) for i in row])
        return out


def text_vae_loss(vae: TextVAE, ids: np.ndarray, lengths: np.ndarray, rng, beta_kl: float = 1e-2) -> Tensor:
    post = vae.encode(ids, lengths)
    return vae.reconstruction_loss(post.sample(rng), ids) + beta_kl * kl_standard_normal(post)


def fit_text_vae(vae: TextVAE, store: nn.ParamStore, token_seqs: Sequence[Sequence[int]], opt,
                 seed: int, beta_kl: float = 1e-2, on_epoch=None) -> list[float]:
    from .training import run_epochs

    def step(idx, rng):
        ids, lengths = pad_batch([token_seqs[i] for i in idx])
        return text_vae_loss(vae, ids, lengths, rng, beta_kl)

    return run_epochs(store, len(token_seqs), step, opt, seed, "vae_text", on_epoch)


def encode_text_mean(vae: TextVAE, token_seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(token_seqs), batch_size):
        ids, lengths = pad_batch(token_seqs[i:i + batch_size])
        out.append(vae.encode(ids, lengths).mu.data)
    return np.concatenate(out)


def token_accuracy(decoded: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]) -> float:
    """Fraction of reference positions reproduced at the same index."""
    hits = total = 0
    for d, r in zip(decoded, truth):
        total += len(r)
        hits += sum(1 for a, b in zip(d, r) if a == b)
    return hits / total if total else float("nan")


def vae_train_step(vae, store: nn.ParamStore, batch, beta_kl: float, opt, rng: np.random.Generator) -> float:
    """One optimizer step on a single batch; frozen parameters are left untouched."""
    from .errors import NumericError
    from .tensor import GradTape

    if len(batch) == 0:
        raise ContractError("empty batch")
    store.zero_grad()
    with GradTape() as tape:
        if isinstance(vae, ImageVAE):
            post = vae.encode(batch)
            loss = vae_loss(batch, vae.decode(post.sample(rng)), post, beta_kl)
        else:
            ids, lengths = pad_batch(batch)
            loss = text_vae_loss(vae, ids, lengths, rng, beta_kl)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite VAE loss")
    if store.trainable_names():
        tape.backward(loss)
        nn.adamw_step(store, lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay)
    return value


class ImageAutoencoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` returns posterior-mean latents,
    ``inverse_transform`` decodes them."""

    def __init__(self, c_z: int = 4, width: int = 32, beta_kl: float = 1e-4, lr: float = 1e-3,
                 weight_decay: float = 1e-4, epochs: int = 30, batch_size: int = 32, seed: int = 0):
        self.c_z = c_z
        self.width = width
        self.beta_kl = beta_kl
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        from .training import OptimConfig

        X = np.asarray(X, dtype=np.float32)
        self.vae_ = ImageVAE(nn.component_rng(self.seed, "vae_image"), self.c_z, self.width)
        store = nn.ParamStore.from_module(self.vae_)
        opt = OptimConfig(self.lr, self.weight_decay, epochs=self.epochs, batch_size=self.batch_size)
        self.loss_history_ = fit_image_vae(self.vae_, store, X, opt, self.seed, "vae_image", self.beta_kl)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "vae_")
        return encode_images_mean(self.vae_, np.asarray(X, dtype=np.float32))

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "vae_")
        return decode_images(self.vae_, np.asarray(Z, dtype=np.float32))
