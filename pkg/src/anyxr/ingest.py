"""Image preprocessing and dataset-directory loading.

Pipeline order per image: respace -> invert (MONOCHROME1) -> bit-depth
normalize -> zero-pad to square -> bilinear resize.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, DataError
from .synth import CONDITIONS, factors_to_array, read_meta

TARGET_SPACING = (0.139, 0.139)
SUPPORTED_BITS = (8, 10, 12, 16)
SPACING_RTOL = 1e-6


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray                       # integer [H, W]
    bits: int = 8
    photometric: str = "MONO2"               # MONO1 | MONO2
    spacing: tuple[float, float] | None = None

    def __post_init__(self):
        if self.photometric not in ("MONO1", "MONO2"):
            raise DataError(f"unknown photometric interpretation {self.photometric!r}")
        if self.spacing is not None and min(self.spacing) <= 0:
            raise DataError("pixel spacing must be positive")


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes with aligned corners."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.linspace(0.0, n_in - 1.0, n_out)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h, out_h)
    c0, c1, fc = coords(w, out_w)
    top = arr[..., r0, :] * (1 - fr)[:, None] + arr[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def respace(img: RawImage, target: tuple[float, float] = TARGET_SPACING) -> RawImage:
    if min(target) <= 0:
        raise ConfigError("target spacing must be positive")
    if img.spacing is None:
        raise DataError("image has no pixel spacing")
    h, w = img.pixels.shape
    dims = []
    for old_n, old_s, new_s in zip((h, w), img.spacing, target):
        if abs(old_s - new_s) <= SPACING_RTOL * new_s:
            dims.append(old_n)
        else:
            dims.append(max(1, int(round(old_n * old_s / new_s))))
    if tuple(dims) == (h, w):
        return replace(img, spacing=tuple(target))
    out = resize_bilinear(img.pixels, *dims)
    out = np.clip(np.round(out), 0, 2 ** img.bits - 1).astype(img.pixels.dtype)
    return replace(img, pixels=out, spacing=tuple(target))


def invert_if_mono1(img: RawImage) -> RawImage:
    if img.photometric != "MONO1":
        return img
    top = 2 ** img.bits - 1
    return replace(img, pixels=(top - img.pixels.astype(np.int64)).astype(img.pixels.dtype),
                   photometric="MONO2")


def normalize_bitdepth(img: RawImage) -> np.ndarray:
    if img.bits not in SUPPORTED_BITS:
        raise DataError(f"unsupported bit depth {img.bits}")
    return (img.pixels.astype(np.float64) / (2 ** img.bits - 1)).astype(np.float32)


def pad_square_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Zero-pad the short axis symmetrically (extra pixel trailing), then resize.

    Accepts ``[H, W]`` or ``[1, H, W]``; returns ``[1, out, out]``.
    """
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[0]
    h, w = arr.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    padded = np.pad(arr, ((top, side - h - top), (left, side - w - left)))
    if side != out_size:
        padded = resize_bilinear(padded, out_size, out_size)
    return np.clip(padded, 0.0, 1.0).astype(np.float32)[None]


def preprocess(img: RawImage, out_size: int, target: tuple[float, float] = TARGET_SPACING) -> np.ndarray:
    if img.spacing is not None:
        img = respace(img, target)
    return pad_square_resize(normalize_bitdepth(invert_if_mono1(img)), out_size)


class XRayPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer turning RawImages into ``[n, 1, S, S]`` arrays."""

    def __init__(self, out_size: int = 32, target_spacing: tuple = TARGET_SPACING):
        self.out_size = out_size
        self.target_spacing = target_spacing

    def fit(self, X, y=None):
        if self.out_size < 1:
            raise ConfigError("out_size must be >= 1")
        self.n_features_in_ = 1
        return self

    def transform(self, X: Sequence[RawImage]) -> np.ndarray:
        return np.stack([preprocess(img, self.out_size, tuple(self.target_spacing)) for img in X])


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def read_png(path: Path) -> tuple[np.ndarray, int]:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a grayscale image")
    bits = 16 if (mode.startswith("I") or arr.dtype == np.uint16 or arr.max(initial=0) > 255) else 8
    if arr.dtype.kind == "i":
        arr = arr.astype(np.uint16 if bits == 16 else np.uint8)
    return arr, bits


def read_spacing(path: Path) -> dict[str, dict]:
    out = {}
    if not path.exists():
        return out
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out[rec["id"]] = {
                "spacing": (float(rec["row_mm"]), float(rec["col_mm"])),
                "photometric": rec.get("photometric") or "MONO2",
                "bits": int(rec["bits"]) if rec.get("bits") else None,
            }
    return out


def _load_view(root: Path, view: str, sid: str, size: int, sidecar: dict | None,
               target) -> np.ndarray:
    raw_path = root / view / f"{sid}.npy"
    if raw_path.exists():
        return pad_square_resize(np.load(raw_path), size)
    path = root / view / f"{sid}.png"
    if not path.exists():
        raise DataError(f"sample {sid}: missing file {view}/{sid}.png")
    pixels, bits = read_png(path)
    if sidecar is None:
        return pad_square_resize(normalize_bitdepth(RawImage(pixels, bits)), size)
    img = RawImage(pixels, sidecar["bits"] or bits, sidecar["photometric"], sidecar["spacing"])
    return preprocess(img, size, target)


def load_sample(root, sid: str, size: int = 32, target=TARGET_SPACING,
                _meta: dict | None = None, _spacing: dict | None = None) -> dict:
    """Load one preprocessed triplet entry; absent modality folders are skipped."""
    root = Path(root)
    spacing = read_spacing(root / "spacing.csv") if _spacing is None else _spacing
    if _meta is None:
        _meta = {r["id"]: r for r in read_meta(root / "meta.csv")}
    if sid not in _meta:
        raise DataError(f"sample {sid} not listed in meta.csv")
    row = _meta[sid]
    entry = {"id": sid, "split": row["split"], "factors": row["factors"]}
    for view in ("frontal", "lateral"):
        if (root / view).is_dir():
            entry[view] = _load_view(root, view, sid, size, spacing.get(sid), target)
    if (root / "reports").is_dir():
        rpath = root / "reports" / f"{sid}.txt"
        if not rpath.exists():
            raise DataError(f"sample {sid}: missing file reports/{sid}.txt")
        entry["report"] = rpath.read_text(encoding="utf-8").strip()
    return entry


@dataclass
class TripletData:
    ids: list[str]
    split: np.ndarray
    factors: list[tuple]
    frontal: np.ndarray | None = None
    lateral: np.ndarray | None = None
    reports: list[str] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labels(self) -> np.ndarray:
        """``[n, K]`` with 1/0 and nan for unmentioned."""
        return np.stack([factors_to_array(f) for f in self.factors]) if self.ids else \
            np.zeros((0, len(CONDITIONS)))

    def subset(self, idx) -> TripletData:
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return TripletData(
            [self.ids[i] for i in idx], self.split[idx], [self.factors[i] for i in idx],
            pick(self.frontal), pick(self.lateral),
            None if self.reports is None else [self.reports[i] for i in idx])

    def where(self, split: str) -> TripletData:
        return self.subset(np.flatnonzero(self.split == split))


def load_dataset(root, size: int = 32, split: str | None = None, target=TARGET_SPACING) -> TripletData:
    root = Path(root)
    if not (root / "meta.csv").exists():
        raise DataError(f"{root} has no meta.csv")
    rows = read_meta(root / "meta.csv")
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    meta = {r["id"]: r for r in rows}
    spacing = read_spacing(root / "spacing.csv")
    entries = [load_sample(root, r["id"], size, target, meta, spacing) for r in rows]
    data = TripletData([e["id"] for e in entries], np.array([e["split"] for e in entries]),
                       [e["factors"] for e in entries])
    if entries:
        for view in ("frontal", "lateral"):
            if view in entries[0]:
                setattr(data, view, np.stack([e[view] for e in entries]).astype(np.float32))
        if "report" in entries[0]:
            data.reports = [e["report"] for e in entries]
    return data
