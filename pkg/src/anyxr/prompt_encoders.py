"""Prompt encoders for images and reports, the shared embedding space and the
symmetric InfoNCE objective that aligns them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from . import tensor as T
from .errors import ContractError, DataError
from .nn import Module
from .synth import tokenize_words
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 77


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocab {path}: {exc}") from exc
        return cls(list(RESERVED) + lines)


def build_vocab(corpus: Sequence[str]) -> Vocab:
    """Lowercased word/punctuation tokens, ids assigned by first occurrence."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    tokens = list(RESERVED)
    seen = set(tokens)
    for text in corpus:
        for tok in tokenize_words(text):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    return Vocab(tokens)


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> list[int]:
    ids = [BOS] + [vocab.index.get(t, UNK) for t in tokenize_words(text)] + [EOS]
    return ids[:max_len]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    words = [vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
    return " ".join(words)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class ImagePromptEncoder(Module):
    """Patch-embedding transformer shared by frontal and lateral views."""

    def __init__(self, image_size: int, rng: np.random.Generator, d_p: int = 128, width: int = 64,
                 heads: int = 4, depth: int = 2, patch: int = 4):
        if image_size % patch:
            raise ContractError("image size must be a multiple of the patch size")
        n_patches = (image_size // patch) ** 2
        self.patch_embed = nn.Linear(patch * patch, width, rng)
        self.pos = nn._param(rng.standard_normal((n_patches, width)) * 0.02)
        self.blocks = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.ln = nn.LayerNorm(width)
        self.head = nn.Linear(width, d_p, rng)
        self._patch = patch
        self._size = image_size

    def features(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        n, _, h, w = x.shape
        p = self._patch
        g = h // p
        patches = x.reshape(n, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(n, g * g, p * p)
        tok = self.patch_embed(patches) + self.pos
        for blk in self.blocks:
            tok = blk(tok)
        return self.ln(tok).mean(axis=1)

    def __call__(self, images) -> Tensor:
        return nn.l2_normalize(self.head(self.features(images)))


class TextPromptEncoder(Module):
    """Causal transformer over report tokens; the final (EOS) state is pooled."""

    def __init__(self, vocab_size: int, rng: np.random.Generator, d_p: int = 128, width: int = 64,
                 heads: int = 4, depth: int = 2, max_len: int = MAX_LEN):
        self.embed = nn._param(rng.standard_normal((vocab_size, width)) * 0.1)
        self.pos = nn._param(rng.standard_normal((max_len, width)) * 0.02)
        self.blocks = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.ln = nn.LayerNorm(width)
        self.head = nn.Linear(width, d_p, rng)
        self._vocab_size = vocab_size

    def __call__(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.min() < 0 or ids.max() >= self._vocab_size:
            raise ContractError("token id outside the vocabulary")
        n, length = ids.shape
        x = T.embedding(self.embed, ids) + self.pos[:length]
        mask = nn.causal_mask(length)
        for blk in self.blocks:
            x = blk(x, mask)
        last = x[np.arange(n), np.asarray(lengths) - 1]
        return nn.l2_normalize(self.head(self.ln(last)))


class PromptEncoders(Module):
    def __init__(self, image_size: int, vocab_size: int, seed: int, d_p: int = 128, width: int = 64,
                 heads: int = 4, depth: int = 2):
        self.image = ImagePromptEncoder(image_size, nn.component_rng(seed, "prompt.image"), d_p, width, heads, depth)
        self.text = TextPromptEncoder(vocab_size, nn.component_rng(seed, "prompt.text"), d_p, width, heads, depth)


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2] != images.shape[3]:
        raise ContractError(f"expected square single-channel images, got {images.shape}")
    if images.min() < 0 or images.max() > 1:
        raise ContractError("images must be normalized to [0, 1]")
    return images


def encode_image(enc: ImagePromptEncoder, images, batch_size: int = 256) -> np.ndarray:
    images = _check_images(images)
    return np.concatenate([enc(images[i:i + batch_size]).data
                           for i in range(0, len(images), batch_size)])


def encode_text(enc: TextPromptEncoder, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    if seqs and isinstance(seqs[0], (int, np.integer)):
        seqs = [seqs]
    out = []
    for i in range(0, len(seqs), batch_size):
        ids, lengths = pad_batch(seqs[i:i + batch_size])
        out.append(enc(ids, lengths).data)
    return np.concatenate(out)


def image_features(enc: ImagePromptEncoder, images, batch_size: int = 256) -> np.ndarray:
    """Pre-projection pooled features; the generic FID backbone."""
    images = _check_images(images)
    return np.concatenate([enc.features(images[i:i + batch_size]).data
                           for i in range(0, len(images), batch_size)])


# ---------------------------------------------------------------------------
# losses / combination
# ---------------------------------------------------------------------------

def infonce(h_a: Tensor, h_b: Tensor, tau: float) -> Tensor:
    """Mean over rows of -log softmax_j(h_a[i] . h_b[j] / tau)[i]."""
    logits = (h_a @ h_b.swap_last()) * (1.0 / tau)
    n = logits.shape[0]
    return -(T.log_softmax(logits, axis=1)[np.arange(n), np.arange(n)].mean())


def infonce_symmetric(h_a, h_b, tau: float = 0.07) -> Tensor:
    h_a = h_a if isinstance(h_a, Tensor) else Tensor(np.asarray(h_a))
    h_b = h_b if isinstance(h_b, Tensor) else Tensor(np.asarray(h_b))
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if h_a.shape != h_b.shape:
        raise ContractError(f"batch shapes differ: {h_a.shape} vs {h_b.shape}")
    if h_a.shape[0] < 2:
        raise ContractError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    return infonce(h_a, h_b, tau) + infonce(h_b, h_a, tau)


def combine_conditions(embeddings: Sequence, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted sum of unit embeddings, renormalized. Works row-wise on batches."""
    if not embeddings:
        raise ContractError("need at least one embedding")
    if weights is None:
        weights = [1.0 / len(embeddings)] * len(embeddings)
    if len(weights) != len(embeddings):
        raise ContractError("one weight per embedding")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ContractError("weights must sum to 1")
    total = sum(w * np.asarray(e, dtype=np.float64) for w, e in zip(weights, embeddings))
    norm = np.linalg.norm(total, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ContractError("combined condition is the zero vector")
    return (total / norm).astype(np.float32)


def retrieval_accuracy(queries: np.ndarray, keys: np.ndarray, batch_size: int = 32) -> float:
    """In-batch top-1 accuracy of matching row i of ``queries`` to row i of ``keys``."""
    hits = total = 0
    for s in range(0, len(queries) - batch_size + 1, batch_size):
        sim = queries[s:s + batch_size] @ keys[s:s + batch_size].T
        hits += int((sim.argmax(axis=1) == np.arange(batch_size)).sum())
        total += batch_size
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# stage A training
# ---------------------------------------------------------------------------

def fit_bridging(enc: PromptEncoders, store: nn.ParamStore, frontal: np.ndarray, lateral: np.ndarray,
                 token_seqs: Sequence[Sequence[int]], opt, seed: int, tau: float = 0.07,
                 on_epoch=None) -> list[float]:
    """Align both image views with their reports: CL(F, R) + CL(L, R)."""
    from .training import run_epochs

    def step(idx, rng):
        ids, lengths = pad_batch([token_seqs[i] for i in idx])
        h_r = enc.text(ids, lengths)
        h_f = enc.image(frontal[idx])
        h_l = enc.image(lateral[idx])
        return infonce_symmetric(h_f, h_r, tau) + infonce_symmetric(h_l, h_r, tau)

    return run_epochs(store, len(token_seqs), step, opt, seed, "bridging", on_epoch)


class BridgingAligner(BaseEstimator):
    """Contrastively aligned image/report prompt encoders.

    ``fit(images, reports)`` takes paired frontal images ``[n, 1, S, S]``
    and report strings (plus optional lateral views); ``transform_images``
    and ``transform_reports`` return unit embeddings.
    """

    def __init__(self, d_p: int = 128, width: int = 64, heads: int = 4, depth: int = 2,
                 tau: float = 0.07, lr: float = 1e-3, weight_decay: float = 1e-4,
                 epochs: int = 30, batch_size: int = 32, seed: int = 0):
        self.d_p = d_p
        self.width = width
        self.heads = heads
        self.depth = depth
        self.tau = tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, images, reports, lateral=None):
        from .training import OptimConfig

        images = _check_images(images)
        lateral = images if lateral is None else _check_images(lateral)
        if len(reports) != len(images):
            raise ContractError("one report per image")
        self.vocab_ = build_vocab(reports)
        self.encoders_ = PromptEncoders(images.shape[-1], len(self.vocab_), self.seed, self.d_p,
                                        self.width, self.heads, self.depth)
        store = nn.ParamStore.from_module(self.encoders_)
        opt = OptimConfig(self.lr, self.weight_decay, epochs=self.epochs, batch_size=self.batch_size)
        seqs = [tokenize(r, self.vocab_) for r in reports]
        self.loss_history_ = fit_bridging(self.encoders_, store, images, lateral, seqs, opt, self.seed, self.tau)
        return self

    def transform_images(self, images) -> np.ndarray:
        check_is_fitted(self, "encoders_")
        return encode_image(self.encoders_.image, images)

    def transform_reports(self, reports: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "encoders_")
        return encode_text(self.encoders_.text, [tokenize(r, self.vocab_) for r in reports])
