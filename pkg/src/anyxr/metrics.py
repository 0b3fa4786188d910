"""Evaluation kernels: FID, corpus BLEU, AUROC and masked multi-label F1."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, UndefinedMetricError
from .settings import GenerationSetting
from .synth import CONDITIONS, POSITIVE, extract_labels, tokenize_words

COV_SHRINK = 1e-6
BLEU_EPS = 1e-9
METRIC_GROUPS = {
    "fid": ("fid_oracle", "fid_generic"),
    "bleu": ("bleu1", "bleu2", "bleu3", "bleu4"),
    "auroc": ("auroc",),
    "f1": ("f1", "report_f1"),
}
CSV_HEADER = ("metric", "setting", "class", "value")


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > 1e-8 * scale:
        raise ContractError("matrix is not symmetric")
    w, q = np.linalg.eigh((m + m.T) / 2)
    if w.min(initial=0.0) < -1e-8 * scale:
        raise ContractError(f"matrix is not PSD (min eigenvalue {w.min():.3g})")
    root = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    return (root + root.T) / 2


@dataclass
class FeatureSet:
    features: np.ndarray
    backbone: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.shape[0] < 2:
            raise ContractError("need at least two samples to estimate a covariance")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.features.mean(axis=0)
        cov = np.atleast_2d(np.cov(self.features, rowvar=False, ddof=1))
        return mu, cov


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    if real.backbone != gen.backbone:
        raise ContractError(f"backbone mismatch: {real.backbone} vs {gen.backbone}")
    if real.features.shape[1] != gen.features.shape[1]:
        raise ContractError("feature dimensions differ")
    mu_r, cov_r = real.moments()
    mu_g, cov_g = gen.moments()
    eye = np.eye(len(mu_r)) * COV_SHRINK
    cov_r, cov_g = cov_r + eye, cov_g + eye
    root_r = sqrtm_psd(cov_r)
    mid = root_r @ cov_g @ root_r
    cross = sqrtm_psd((mid + mid.T) / 2)
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = 4) -> float:
    """Corpus BLEU with one reference per candidate and add-epsilon smoothing."""
    if max_n not in (1, 2, 3, 4):
        raise ContractError("max_n must be 1..4")
    if len(candidates) != len(references):
        raise ContractError("candidates and references differ in length")
    if not candidates:
        raise DataError("empty corpus")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    score = 1.0
    for n in range(1, max_n + 1):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matched += sum(min(cnt, rc[g]) for g, cnt in cc.items())
            total += max(len(cand) - n + 1, 0)
        p = matched / total if matched else BLEU_EPS
        score *= p ** (1.0 / max_n)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return score * bp


# ---------------------------------------------------------------------------
# AUROC / F1
# ---------------------------------------------------------------------------

def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auroc(scores, labels, mask=None) -> float:
    """Mann-Whitney AUROC; ties count one half. ``mask`` marks usable rows."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    keep = ~np.isnan(labels)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    s, y = scores[keep], labels[keep] > 0.5
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = _average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class ClassScores:
    per_class: dict[str, float]
    micro: float
    macro: float
    weighted: float
    excluded: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        out = list(self.per_class.items())
        return out + [("micro", self.micro), ("macro", self.macro), ("weighted", self.weighted)]


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_suite(preds, labels, classes: Sequence[str] | None = None) -> ClassScores:
    """Per-class F1 over rows with a ground truth, plus micro/macro/weighted.

    ``labels`` holds 1/0 with nan for missing; ``preds`` is binary.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ContractError("preds and labels must be equal-shape [n, K] arrays")
    classes = list(classes or [str(k) for k in range(labels.shape[1])])
    per, support, excluded = {}, {}, []
    tp_all = fp_all = fn_all = 0
    for k, name in enumerate(classes):
        keep = ~np.isnan(labels[:, k])
        if not keep.any():
            excluded.append(name)
            continue
        y = labels[keep, k] > 0.5
        p = preds[keep, k] > 0.5
        tp, fp, fn = int((y & p).sum()), int((~y & p).sum()), int((y & ~p).sum())
        per[name] = _f1(tp, fp, fn)
        support[name] = tp + fn
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    if not per:
        raise UndefinedMetricError("every class is fully masked")
    macro = float(np.mean(list(per.values())))
    total = sum(support.values())
    weighted = sum(per[c] * support[c] for c in per) / total if total else 0.0
    return ClassScores(per, _f1(tp_all, fp_all, fn_all), macro, float(weighted), excluded)


def auroc_suite(scores, labels, classes: Sequence[str] | None = None) -> ClassScores:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    classes = list(classes or [str(k) for k in range(labels.shape[1])])
    per, support, excluded = {}, {}, []
    for k, name in enumerate(classes):
        try:
            per[name] = auroc(scores[:, k], labels[:, k])
        except UndefinedMetricError:
            excluded.append(name)
            continue
        support[name] = int(np.nansum(labels[:, k] > 0.5))
    if not per:
        raise UndefinedMetricError("no class has both positives and negatives")
    macro = float(np.mean(list(per.values())))
    weighted = float(sum(per[c] * support[c] for c in per) / sum(support.values()))
    idx = [classes.index(c) for c in per]
    micro = auroc(scores[:, idx].reshape(-1), labels[:, idx].reshape(-1))
    return ClassScores(per, micro, macro, weighted, excluded)


# ---------------------------------------------------------------------------
# report + evaluation driver
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add(self, metric: str, setting: str, value: float, cls: str = "") -> None:
        self.rows.append((metric, setting, cls, float(value)))

    def get(self, metric: str, setting: str | None = None, cls: str = "") -> float:
        for m, s, c, v in self.rows:
            if m == metric and c == cls and (setting is None or s == setting):
                return v
        raise KeyError((metric, setting, cls))

    def select(self, groups: Iterable[str]) -> MetricsReport:
        names = set()
        for g in groups:
            if g not in METRIC_GROUPS:
                raise ConfigError(f"unknown metric group {g!r}; choose from {sorted(METRIC_GROUPS)}")
            names.update(METRIC_GROUPS[g])
        return MetricsReport([r for r in self.rows if r[0] in names])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for m, s, c, v in self.rows:
                w.writerow([m, s, c, repr(v)])

    @classmethod
    def from_csv(cls, path) -> MetricsReport:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise DataError(f"unexpected metrics header {header}")
            return cls([(m, s, c, float(v)) for m, s, c, v in reader])


def report_predictions(reports: Sequence[str]) -> np.ndarray:
    """Binary positive-mention matrix from the rule-based labeler."""
    return np.array([[1.0 if f == POSITIVE else 0.0 for f in extract_labels(r)] for r in reports])


def read_provenance(root: Path) -> list[dict] | None:
    path = Path(root) / "generation.csv"
    if not path.exists():
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def evaluate_generation(real_dir, gen_dir, settings=None, oracle=None,
                        encoders: Callable[[np.ndarray], np.ndarray] | None = None,
                        metrics: Sequence[str] = ("fid", "bleu", "auroc", "f1"),
                        size: int = 32) -> MetricsReport:
    """Score a generated directory against the held-out real split.

    ``oracle`` needs ``predict_proba`` and ``transform`` (penultimate
    features); ``encoders`` maps images to generic-backbone features.
    Without a ``generation.csv`` the generated directory is treated as a
    real set and compared split-for-split (setting ``real``).
    """
    from .ingest import load_dataset

    for g in metrics:
        if g not in METRIC_GROUPS:
            raise ConfigError(f"unknown metric group {g!r}")
    real = load_dataset(real_dir, size, split="test")
    prov = read_provenance(gen_dir)
    if prov is None:
        gen = load_dataset(gen_dir, size, split="test")
        groups = {"real": (gen, list(gen.ids), [m for m, a in
                           (("F", gen.frontal), ("L", gen.lateral), ("T", gen.reports)) if a is not None])}
    else:
        gen_all = load_dataset(gen_dir, size)
        by_id = {i: k for k, i in enumerate(gen_all.ids)}
        groups = {}
        for rec in prov:
            groups.setdefault(rec["setting"], []).append(rec)
        parsed = {}
        for name, recs in groups.items():
            setting = GenerationSetting.parse(name)
            if settings is not None and str(setting) not in {str(GenerationSetting.parse(s)) for s in settings}:
                continue
            sub = gen_all.subset([by_id[r["id"]] for r in recs])
            parsed[str(setting)] = (sub, [r["source_id"] for r in recs], list(setting.targets))
        groups = parsed
    real_by_id = {i: k for k, i in enumerate(real.ids)}
    out = MetricsReport()
    for setting, (gen, sources, targets) in groups.items():
        joint = len(targets) > 1
        for target in targets:
            label = f"{setting}[{target}]" if joint else setting
            if target in ("F", "L"):
                view = "frontal" if target == "F" else "lateral"
                g_img, r_img = getattr(gen, view), getattr(real, view)
                if g_img is None:
                    raise DataError(f"{gen_dir} has no {view} images for setting {setting}")
                if "fid" in metrics:
                    if oracle is not None:
                        out.add("fid_oracle", label, fid(FeatureSet(oracle.transform(r_img), "oracle"),
                                                         FeatureSet(oracle.transform(g_img), "oracle")))
                    if encoders is not None:
                        out.add("fid_generic", label, fid(FeatureSet(encoders(r_img), "generic"),
                                                          FeatureSet(encoders(g_img), "generic")))
                if oracle is not None and ("auroc" in metrics or "f1" in metrics):
                    proba = oracle.predict_proba(g_img)
                    labels = gen.labels
                    if "auroc" in metrics:
                        suite = auroc_suite(proba, labels, CONDITIONS)
                        for cls, v in suite.rows():
                            out.add("auroc", label, v, cls)
                    if "f1" in metrics:
                        suite = f1_suite(proba > oracle.threshold, labels, CONDITIONS)
                        for cls, v in suite.rows():
                            out.add("f1", label, v, cls)
            else:
                if gen.reports is None:
                    raise DataError(f"{gen_dir} has no reports for setting {setting}")
                if "bleu" in metrics:
                    missing = [s for s in sources if s not in real_by_id]
                    if missing:
                        raise DataError(f"reference reports missing for {missing[:3]}")
                    refs = [tokenize_words(real.reports[real_by_id[s]]) for s in sources]
                    cands = [tokenize_words(r) for r in gen.reports]
                    for n in range(1, 5):
                        out.add(f"bleu{n}", label, bleu(cands, refs, n))
                if "f1" in metrics:
                    suite = f1_suite(report_predictions(gen.reports), gen.labels, CONDITIONS)
                    for cls, v in suite.rows():
                        out.add("report_f1", label, v, cls)
    return out
