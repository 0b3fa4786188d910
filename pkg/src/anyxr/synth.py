"""Procedural frontal/lateral/report triplets with known condition factors.

Also hosts the rule-based report labeler used to score factual correctness.
"""
from __future__ import annotations

import csv
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, DataError

CONDITIONS = ("enlarged_heart", "effusion", "opacity", "device")
POSITIVE, NEGATIVE, UNMENTIONED = 1, 0, None
TEST_FRACTION = 0.2

# (positive variants, negative variants); every variant carries the keyword.
_SENTENCES = {
    "enlarged_heart": (
        ["there is an enlarged heart .", "mildly enlarged heart .",
         "cardiac silhouette shows an enlarged heart ."],
        ["no enlarged heart .", "no evidence of enlarged heart .", "no enlarged heart is identified ."],
    ),
    "effusion": (
        ["there is a pleural effusion .", "small pleural effusion is present .",
         "moderate right pleural effusion ."],
        ["no pleural effusion .", "no evidence of effusion .", "no effusion is identified ."],
    ),
    "opacity": (
        ["there is a focal opacity in the lung .", "patchy opacity is seen .",
         "new opacity at the lung base ."],
        ["no focal opacity .", "lungs are clear without opacity .", "no new opacity ."],
    ),
    "device": (
        ["a support device is present .", "there is a support device .",
         "support device projects over the chest ."],
        ["no support device .", "negative for support device .", "no support device is seen ."],
    ),
}
_CLOSING_NORMAL = ["no acute findings .", "no acute findings in the chest ."]
_CLOSING_ABNORMAL = ["otherwise unremarkable .", "no other acute process ."]

_KEYWORDS = {
    "enlarged_heart": ("enlarged", "heart"),
    "effusion": ("effusion",),
    "opacity": ("opacity",),
    "device": ("support", "device"),
}
_NEGATIONS = (("no",), ("without",), ("negative", "for"))
NEGATION_WINDOW = 5


FactorVector = tuple  # one of POSITIVE / NEGATIVE / UNMENTIONED per condition


def _check_factors(factors: Sequence) -> tuple:
    factors = tuple(factors)
    if len(factors) != len(CONDITIONS):
        raise ContractError(f"expected {len(CONDITIONS)} factors, got {len(factors)}")
    for f in factors:
        if f not in (POSITIVE, NEGATIVE, UNMENTIONED):
            raise ContractError(f"invalid factor state {f!r}")
    return factors


# ---------------------------------------------------------------------------
# report grammar and labeler
# ---------------------------------------------------------------------------

def tokenize_words(text: str) -> list[str]:
    return re.findall(r"\w+|[^\w\s]", text.lower())


def make_report(factors: Sequence, rng: np.random.Generator) -> str:
    factors = _check_factors(factors)
    parts = []
    for name, state in zip(CONDITIONS, factors):
        if state is UNMENTIONED:
            continue
        pos, neg = _SENTENCES[name]
        options = pos if state == POSITIVE else neg
        parts.append(options[rng.integers(len(options))])
    closing = _CLOSING_ABNORMAL if POSITIVE in factors else _CLOSING_NORMAL
    parts.append(closing[rng.integers(len(closing))])
    return " ".join(parts)


def _find(tokens: list[str], phrase: tuple) -> list[int]:
    k = len(phrase)
    return [i for i in range(len(tokens) - k + 1) if tuple(tokens[i:i + k]) == phrase]


def _negated(tokens: list[str], start: int) -> bool:
    window = tokens[max(0, start - NEGATION_WINDOW):start]
    return any(_find(window, cue) for cue in _NEGATIONS)


def extract_labels(report: str) -> FactorVector:
    """Keyword + negation-window labeler.

    A mention preceded (within the same sentence) by "no", "without" or
    "negative for" is negative; any other mention is positive; no mention
    leaves the condition unmentioned.
    """
    sentences = []
    current: list[str] = []
    for tok in tokenize_words(report):
        if tok == ".":
            sentences.append(current)
            current = []
        else:
            current.append(tok)
    sentences.append(current)
    labels = []
    for name in CONDITIONS:
        state = UNMENTIONED
        for sent in sentences:
            for start in _find(sent, _KEYWORDS[name]):
                if _negated(sent, start):
                    state = NEGATIVE if state is UNMENTIONED else state
                else:
                    state = POSITIVE
        labels.append(state)
    return tuple(labels)


def factors_to_array(factors: Sequence) -> np.ndarray:
    """POSITIVE/NEGATIVE/UNMENTIONED -> 1.0/0.0/nan."""
    return np.array([np.nan if f is UNMENTIONED else float(f) for f in factors])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewParams:
    heart_width: float       # fraction of the thorax width (frontal) or depth (lateral)
    effusion: bool
    opacity_height: float | None
    device: bool


@dataclass(frozen=True)
class RenderParams:
    scale: float
    dx: float
    dy: float
    body: float
    lung: float
    noise: float
    opacity_side: int
    frontal: ViewParams
    lateral: ViewParams


def render_params(seed: int, factors: Sequence) -> RenderParams:
    """Deterministic per-(seed, factors) geometry shared by both views."""
    f = _check_factors(factors)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    scale = rng.uniform(0.9, 1.05)
    dx, dy = rng.uniform(-0.05, 0.05, size=2)
    body = rng.uniform(0.30, 0.40)
    lung = rng.uniform(0.08, 0.14)
    side = int(rng.integers(2)) * 2 - 1
    height = rng.uniform(-0.45, 0.05)
    enlarged = f[0] == POSITIVE
    opacity = height if f[2] == POSITIVE else None
    frontal = ViewParams(0.61 if enlarged else 0.35, f[1] == POSITIVE, opacity, f[3] == POSITIVE)
    lateral = ViewParams(0.49 if enlarged else 0.29, f[1] == POSITIVE, opacity, f[3] == POSITIVE)
    return RenderParams(scale, dx, dy, body, lung, 0.015, side, frontal, lateral)


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _soft(d: np.ndarray, size: int) -> np.ndarray:
    # ~1 px soft edge
    return 0.5 * (1 + np.tanh(d * size / 2.0))


def _ellipse(u, v, cx, cy, ax, ay, size):
    r = np.sqrt(((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2)
    return _soft((1 - r) * min(ax, ay), size)


def _paint(img, mask, value):
    return img * (1 - mask) + value * mask


def _render_frontal(p: RenderParams, size: int) -> np.ndarray:
    u, v = _grid(size)
    s, vp = p.scale, p.frontal
    img = np.zeros((size, size))
    img = _paint(img, _ellipse(u, v, p.dx, 0.05 + p.dy, 0.85 * s, 0.95 * s, size), p.body)
    lungs = np.zeros_like(img)
    for sgn in (-1, 1):
        lungs = np.maximum(lungs, _ellipse(u, v, p.dx + sgn * 0.36 * s, -0.1 + p.dy, 0.26 * s, 0.55 * s, size))
    img = _paint(img, lungs, p.lung)
    thorax = 2 * (0.36 + 0.26) * s
    hw = vp.heart_width * thorax / 2
    img = _paint(img, _ellipse(u, v, p.dx + 0.06 * s, 0.28 + p.dy, hw, 0.22 * s, size), 0.62)
    if vp.effusion:
        base = -0.1 + p.dy + 0.55 * s
        img = _paint(img, lungs * _soft(v - (base - 0.32 * s), size), 0.55)
    if vp.opacity_height is not None:
        cx = p.dx + p.opacity_side * 0.36 * s
        cy = vp.opacity_height + p.dy
        img = img + 0.45 * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * 0.12 ** 2)) * lungs
    if vp.device:
        box = _soft(0.1 - np.abs(u - (p.dx - 0.45 * s)), size) * _soft(0.07 - np.abs(v - (-0.62 + p.dy)), size)
        img = _paint(img, box, 0.95)
    return img


def _render_lateral(p: RenderParams, size: int) -> np.ndarray:
    u, v = _grid(size)
    s, vp = p.scale, p.lateral
    img = np.zeros((size, size))
    img = _paint(img, _ellipse(u, v, 0.5 * p.dx, 0.05 + p.dy, 0.7 * s, 0.95 * s, size), p.body)
    lung = _ellipse(u, v, 0.02, -0.1 + p.dy, 0.42 * s, 0.55 * s, size)
    img = _paint(img, lung, p.lung)
    depth = 2 * 0.7 * s
    hd = vp.heart_width * depth / 2
    img = _paint(img, _ellipse(u, v, -0.45 * s + hd, 0.3 + p.dy, hd, 0.22 * s, size), 0.62)
    if vp.effusion:
        base = -0.1 + p.dy + 0.55 * s
        img = _paint(img, lung * _soft(v - (base - 0.32 * s), size) * _soft(u + 0.05, size), 0.55)
    if vp.opacity_height is not None:
        cx = 0.02 + p.opacity_side * 0.15 * s
        cy = vp.opacity_height + p.dy
        img = img + 0.45 * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * 0.12 ** 2)) * lung
    if vp.device:
        box = _soft(0.09 - np.abs(u - (-0.5 * s)), size) * _soft(0.08 - np.abs(v - (-0.62 + p.dy)), size)
        img = _paint(img, box, 0.95)
    return img


@dataclass
class TripletSample:
    id: str
    frontal: np.ndarray          # [1, S, S] in [0, 1]
    lateral: np.ndarray
    report: str
    factors: FactorVector
    split: str = "train"
    params: RenderParams | None = field(default=None, repr=False)


def gen_triplet(seed: int, factors: Sequence, size: int = 32, id: str = "s0",
                split: str = "train") -> TripletSample:
    if size < 16:
        raise ContractError("image size must be >= 16")
    factors = _check_factors(factors)
    p = render_params(seed, factors)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    views = []
    for render in (_render_frontal, _render_lateral):
        img = render(p, size) + rng.normal(0.0, p.noise, (size, size))
        views.append(np.clip(img, 0.0, 1.0).astype(np.float32)[None])
    report = make_report(factors, rng)
    return TripletSample(id, views[0], views[1], report, factors, split, p)


def heart_ratio(params: RenderParams, view: str = "frontal") -> float:
    """Cardiac width over thorax width (frontal) or depth (lateral)."""
    return getattr(params, view).heart_width


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def sample_factors(rng: np.random.Generator, prevalence: Sequence[float],
                   unmentioned: float = 0.5) -> FactorVector:
    out = []
    for p in prevalence:
        if rng.random() < p:
            out.append(POSITIVE)
        elif rng.random() < unmentioned:
            out.append(UNMENTIONED)
        else:
            out.append(NEGATIVE)
    return tuple(out)


def split_for(index: int, n: int) -> str:
    """Contiguous id blocks: the last ``TEST_FRACTION`` of ids form the test split."""
    n_train = n - int(round(n * TEST_FRACTION)) if n > 1 else n
    return "train" if index < n_train else "test"


def sample_id(index: int) -> str:
    return f"s{index:05d}"


def save_png(path: Path, img: np.ndarray, bits: int = 16) -> None:
    arr = np.clip(np.asarray(img).reshape(img.shape[-2:]), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def write_meta(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split", *CONDITIONS])
        for row in rows:
            w.writerow([row["id"], row["split"],
                        *("" if f is UNMENTIONED else int(f) for f in row["factors"])])


def read_meta(path: Path) -> list[dict]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            factors = tuple(UNMENTIONED if rec[c] == "" else int(rec[c]) for c in CONDITIONS)
            rows.append({"id": rec["id"], "split": rec["split"], "factors": factors})
    return rows


def _write_one(out: Path, i: int, n: int, seed: int, prevalence, size: int, unmentioned: float) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
    factors = sample_factors(rng, prevalence, unmentioned)
    sid = sample_id(i)
    trip = gen_triplet(int(rng.integers(2 ** 31)), factors, size, sid, split_for(i, n))
    save_png(out / "frontal" / f"{sid}.png", trip.frontal)
    save_png(out / "lateral" / f"{sid}.png", trip.lateral)
    (out / "reports" / f"{sid}.txt").write_text(trip.report + "\n", encoding="utf-8")
    return {"id": sid, "split": trip.split, "factors": factors}


def gen_dataset(n: int, seed: int, prevalence, out_dir, size: int = 32,
                unmentioned: float = 0.5, workers: int = 1) -> list[dict]:
    """Write ``n`` triplets in the dataset directory format; returns the manifest rows.

    Each sample depends only on ``(seed, index)``, so the output is the same
    for any ``workers``.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if np.isscalar(prevalence):
        prevalence = [float(prevalence)] * len(CONDITIONS)
    prevalence = [float(p) for p in prevalence]
    if len(prevalence) != len(CONDITIONS) or any(not 0 <= p <= 1 for p in prevalence):
        raise ContractError("prevalence must give one value in [0, 1] per condition")
    out = Path(out_dir)
    try:
        for sub in ("frontal", "lateral", "reports"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    job = partial(_write_one, out, n=n, seed=seed, prevalence=prevalence, size=size, unmentioned=unmentioned)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(job, range(n)))
    else:
        rows = [job(i) for i in range(n)]
    write_meta(out / "meta.csv", rows)
    return rows


def presence(factors: Sequence) -> np.ndarray:
    """Visual ground truth: a condition is drawn iff it is positive."""
    return np.array([1.0 if f == POSITIVE else 0.0 for f in factors], dtype=np.float32)


__all__ = [
    "CONDITIONS", "POSITIVE", "NEGATIVE", "UNMENTIONED", "TripletSample", "RenderParams",
    "gen_triplet", "gen_dataset", "extract_labels", "make_report", "render_params",
    "read_meta", "write_meta", "sample_factors", "split_for", "presence",
]
