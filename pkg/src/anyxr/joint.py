"""Stage orchestration, joint objectives, lockstep sampling.

A run directory holds ``vocab.txt``, ``checkpoints/<stage>.adxr`` and
``logs/<stage>_loss.csv``. Every checkpoint stores the full tensor table;
when a stage starts, the tensors owned by each stage in its prerequisites'
provenance are copied in, and everything else keeps its seeded init.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .checkpoint import checkpoint_load, checkpoint_save
from .config import STAGES, Config
from .denoisers import EnvEncoder, ImageUNet, TextDenoiser
from .diffusion import NoiseSchedule, chain_rng, ddpm_step, eps_loss, make_schedule
from .errors import ConfigError, ContractError, DataError, NumericError, PreconditionError
from .ingest import TripletData
from .nn import Module, ParamStore
from .prompt_encoders import (PromptEncoders, Vocab, build_vocab, combine_conditions, detokenize,
                              encode_image, encode_text, fit_bridging, infonce_symmetric, tokenize)
from .settings import MODALITIES, GenerationSetting
from .tensor import Tensor
from .training import OptimConfig, run_epochs
from .vae import (ImageVAE, TextVAE, decode_images, encode_images_mean, encode_text_mean,
                  fit_image_vae, fit_text_vae)

log = logging.getLogger(__name__)

# parameter-name suffix of each modality's branch
BRANCH = {"F": "F", "L": "L", "T": "R"}
CHAIN_ID = {m: i for i, m in enumerate(MODALITIES)}
CKPT_SUFFIX = ".adxr"


@dataclass(frozen=True)
class StagePlan:
    name: str
    prereqs: tuple[str, ...]
    trainable: tuple[str, ...]
    buffers: tuple[str, ...] = ()

    def owned(self, store: ParamStore) -> list[str]:
        """Names whose values this stage produces."""
        return store.match(self.trainable + self.buffers)


# ``[!x]*`` keeps the zero-initialized cross-modal layers out of stage B
PLANS: dict[str, StagePlan] = {p.name: p for p in (
    StagePlan("bridging", (), ("prompt.*",)),
    StagePlan("vae_image_F", (), ("vae_F.*",)),
    StagePlan("vae_image_L", (), ("vae_L.*",)),
    StagePlan("vae_text", (), ("vae_R.*",)),
    StagePlan("ldm_F", ("bridging", "vae_image_F"), ("unet_F.[!x]*",), ("scale_F",)),
    StagePlan("ldm_L", ("bridging", "vae_image_L"), ("unet_L.[!x]*",), ("scale_L",)),
    StagePlan("ldm_R", ("bridging", "vae_text"), ("unet_R.[!x]*",), ("scale_R",)),
    StagePlan("joint_FL", ("ldm_F", "ldm_L"), ("env_F.*", "env_L.*", "unet_F.xmod*", "unet_L.xmod*")),
    StagePlan("joint_FR", ("joint_FL", "ldm_R"), ("env_R.*", "unet_R.xmod*")),
)}
MODEL_STAGES = tuple(PLANS)


class ModelBundle(Module):
    """Every network of the any-to-any model, built deterministically from the config seed."""

    def __init__(self, cfg: Config, vocab_size: int):
        seed = cfg["run"]["seed"]
        m = cfg["model"]
        size = cfg["data"]["image_size"]
        rng = lambda name: nn.component_rng(seed, name)
        self.prompt = PromptEncoders(size, vocab_size, seed, m["d_p"], m["encoder_width"], m["heads"], m["depth"])
        self.vae_F = ImageVAE(rng("vae_F"), m["c_z"])
        self.vae_L = ImageVAE(rng("vae_L"), m["c_z"])
        self.vae_R = TextVAE(vocab_size, rng("vae_R"), m["d_t"], m["encoder_width"], m["heads"], m["depth"])
        side = size // 4
        self.unet_F = ImageUNet(rng("unet_F"), m["c_z"], m["unet_width"], m["d_p"], m["d_s"], latent_side=side)
        self.unet_L = ImageUNet(rng("unet_L"), m["c_z"], m["unet_width"], m["d_p"], m["d_s"], latent_side=side)
        self.unet_R = TextDenoiser(rng("unet_R"), m["d_t"], m["d_p"], m["d_s"])
        lat = (m["c_z"], side, side)
        self.env_F = EnvEncoder(rng("env_F"), lat, m["d_s"])
        self.env_L = EnvEncoder(rng("env_L"), lat, m["d_s"])
        self.env_R = EnvEncoder(rng("env_R"), (m["d_t"],), m["d_s"])
        for b in ("F", "L", "R"):
            setattr(self, f"scale_{b}", Tensor(np.ones(1, dtype=np.float32)))
        self._latent_shape = {"F": lat, "L": lat, "T": (m["d_t"],)}
        self._trained: set[str] = set()

    def denoiser(self, modality: str):
        return getattr(self, f"unet_{BRANCH[modality]}")

    def env(self, modality: str) -> EnvEncoder:
        return getattr(self, f"env_{BRANCH[modality]}")

    def scale(self, modality: str) -> float:
        return float(getattr(self, f"scale_{BRANCH[modality]}").data[0])

    def latent_shape(self, modality: str) -> tuple:
        return self._latent_shape[modality]

    def require(self, stages: Sequence[str]) -> None:
        missing = [s for s in stages if s not in self._trained]
        if missing:
            raise PreconditionError(f"weights of stage(s) {', '.join(missing)} are not loaded")


def schedule_from(cfg: Config) -> NoiseSchedule:
    d = cfg["diffusion"]
    return make_schedule(d["steps"], d["beta_start"], d["beta_end"])


def optim_from(cfg: Config, stage: str) -> OptimConfig:
    s = cfg.stage(stage)
    return OptimConfig(lr=s["lr"], weight_decay=s["weight_decay"], betas=(s["beta1"], s["beta2"]),
                       eps=s["eps"], epochs=s["epochs"], batch_size=s["batch_size"])


# ---------------------------------------------------------------------------
# run directory plumbing
# ---------------------------------------------------------------------------

def checkpoint_path(run_dir, stage: str) -> Path:
    return Path(run_dir) / "checkpoints" / f"{stage}{CKPT_SUFFIX}"


def load_or_build_vocab(run_dir, reports: Sequence[str] | None) -> Vocab:
    path = Path(run_dir) / "vocab.txt"
    if path.exists():
        return Vocab.load(path)
    if not reports:
        raise DataError("no reports available to build the vocabulary")
    vocab = build_vocab(reports)
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    return vocab


def _check_compatible(meta: dict, cfg: Config, path: Path) -> None:
    saved = meta.get("config", {})
    if saved.get("model") != cfg["model"] or \
            saved.get("data", {}).get("image_size") != cfg["data"]["image_size"]:
        raise ConfigError(f"{path} was trained with a different model configuration")
    if meta.get("seed") != cfg["run"]["seed"]:
        raise ConfigError(f"{path} was trained with seed {meta.get('seed')}, config has {cfg['run']['seed']}")


def load_stages(bundle: ModelBundle, store: ParamStore, stages: Sequence[str], run_dir, cfg: Config,
                current: str | None = None) -> list[str]:
    """Copy in the tensors produced by every stage in the given checkpoints' provenance."""
    source: dict[str, str] = {}
    provenance: list[str] = []
    for stage in stages:
        path = checkpoint_path(run_dir, stage)
        if not path.exists():
            raise PreconditionError(f"stage {current or '?'} requires stage {stage}: missing {path}")
        tensors, meta = checkpoint_load(path)
        if meta.get("stage") != stage:
            raise PreconditionError(f"{path} holds stage {meta.get('stage')!r}, expected {stage!r}")
        if current is not None and current in meta.get("provenance", []):
            raise PreconditionError(f"{path} already contains stage {current}; refusing to consume a later checkpoint")
        _check_compatible(meta, cfg, path)
        for done in meta["provenance"]:
            for name in PLANS[done].owned(store):
                if name not in tensors:
                    raise PreconditionError(f"{path} lacks tensor {name}")
                if name in source:
                    if not np.array_equal(store[name].data, tensors[name]):
                        raise PreconditionError(
                            f"{name} differs between checkpoints {source[name]} and {stage}")
                    continue
                store[name].data = tensors[name].astype(store[name].dtype)
                source[name] = stage
            if done not in provenance:
                provenance.append(done)
    bundle._trained.update(provenance)
    return provenance


def existing_stages(run_dir) -> list[str]:
    return [s for s in MODEL_STAGES if checkpoint_path(run_dir, s).exists()]


def load_run(run_dir, cfg: Config) -> tuple[ModelBundle, Vocab]:
    """Bundle with every checkpoint found in ``run_dir`` merged in."""
    vocab = load_or_build_vocab(run_dir, None)
    bundle = ModelBundle(cfg, len(vocab))
    store = ParamStore.from_module(bundle)
    stages = existing_stages(run_dir)
    if not stages:
        raise PreconditionError(f"{run_dir} holds no checkpoints")
    load_stages(bundle, store, stages, run_dir, cfg)
    return bundle, vocab


# ---------------------------------------------------------------------------
# joint objectives
# ---------------------------------------------------------------------------

@dataclass
class JointTerms:
    first: Tensor
    second: Tensor
    contrastive: Tensor

    @property
    def total(self) -> Tensor:
        return self.first + self.second + self.contrastive


def joint_terms(bundle: ModelBundle, pair: tuple[str, str], z0: dict, cond: dict, t: np.ndarray,
                eps: dict, sched: NoiseSchedule, tau: float) -> JointTerms:
    """Both epsilon losses with the partner's environment tokens injected, plus
    InfoNCE over the two shared encodings. ``t`` is shared by the pair."""
    from .diffusion import q_sample

    a, b = pair
    z_t = {m: Tensor(q_sample(z0[m], t, eps[m], sched)) for m in pair}
    enc = {m: bundle.env(m).encode(z_t[m]) for m in pair}
    v = {m: enc[m][0] for m in pair}
    la = eps_loss(bundle.denoiser(a), z0[a], t, eps[a], cond[a], enc[b][1], sched)
    lb = eps_loss(bundle.denoiser(b), z0[b], t, eps[b], cond[b], enc[a][1], sched)
    return JointTerms(la, lb, infonce_symmetric(v[a], v[b], tau))


def joint_loss_fl(bundle, z0, cond, t, eps, sched, tau: float = 0.07) -> Tensor:
    bundle.require(["ldm_F", "ldm_L"])
    return joint_terms(bundle, ("F", "L"), z0, cond, t, eps, sched, tau).total


def joint_loss_fr(bundle, z0, cond, t, eps, sched, tau: float = 0.07) -> Tensor:
    bundle.require(["joint_FL", "ldm_R"])
    return joint_terms(bundle, ("F", "T"), z0, cond, t, eps, sched, tau).total


# ---------------------------------------------------------------------------
# per-stage data preparation + training
# ---------------------------------------------------------------------------

@dataclass
class StageContext:
    bundle: ModelBundle
    store: ParamStore
    data: TripletData
    cfg: Config
    vocab: Vocab
    opt: OptimConfig
    seed: int
    _cache: dict = field(default_factory=dict)

    @property
    def seqs(self) -> list[list[int]]:
        if "seqs" not in self._cache:
            self._cache["seqs"] = [tokenize(r, self.vocab) for r in self.data.reports]
        return self._cache["seqs"]

    def prompt(self, modality: str) -> np.ndarray:
        key = f"prompt_{modality}"
        if key not in self._cache:
            p = self.bundle.prompt
            if modality == "T":
                self._cache[key] = encode_text(p.text, self.seqs)
            else:
                self._cache[key] = encode_image(p.image, self.view(modality))
        return self._cache[key]

    def view(self, modality: str) -> np.ndarray:
        arr = self.data.frontal if modality == "F" else self.data.lateral
        if arr is None:
            raise DataError(f"training data has no {'frontal' if modality == 'F' else 'lateral'} images")
        return arr

    def latents(self, modality: str) -> np.ndarray:
        """Scaled clean latents (posterior means times the stored scale)."""
        key = f"z_{modality}"
        if key not in self._cache:
            b = self.bundle
            if modality == "T":
                z = encode_text_mean(b.vae_R, self.seqs)
            else:
                z = encode_images_mean(getattr(b, f"vae_{modality}"), self.view(modality))
            self._cache[key] = (z * b.scale(modality)).astype(np.float32)
        return self._cache[key]


def _set_scale(ctx: StageContext, modality: str) -> None:
    """Store 1/std of the clean training latents so diffusion sees unit scale."""
    b = ctx.bundle
    getattr(b, f"scale_{BRANCH[modality]}").data[:] = 1.0
    ctx._cache.pop(f"z_{modality}", None)
    std = float(ctx.latents(modality).std())
    if not np.isfinite(std) or std <= 0:
        raise NumericError(f"degenerate {modality} latents (std {std})")
    getattr(b, f"scale_{BRANCH[modality]}").data[:] = 1.0 / std
    ctx._cache.pop(f"z_{modality}", None)


def _train_ldm(ctx: StageContext, modality: str, stage: str, on_epoch) -> list[float]:
    _set_scale(ctx, modality)
    sched = schedule_from(ctx.cfg)
    z0 = ctx.latents(modality)
    net = ctx.bundle.denoiser(modality)
    if modality == "T":
        # reports are generated from either image view
        views = np.stack([ctx.prompt("F"), ctx.prompt("L")])
    else:
        views = ctx.prompt("T")[None]

    def step(idx, rng):
        t = rng.integers(1, sched.T + 1, size=len(idx))
        eps = rng.standard_normal(z0[idx].shape).astype(np.float32)
        pick = rng.integers(0, len(views), size=len(idx))
        return eps_loss(net, z0[idx], t, eps, views[pick, idx], None, sched)

    return run_epochs(ctx.store, len(z0), step, ctx.opt, ctx.seed, stage, on_epoch)


def _train_joint(ctx: StageContext, pair: tuple[str, str], stage: str, on_epoch) -> list[float]:
    sched = schedule_from(ctx.cfg)
    tau = ctx.cfg["contrastive"]["tau"]
    z0 = {m: ctx.latents(m) for m in pair}
    if pair == ("F", "L"):
        cond = {m: ctx.prompt("T") for m in pair}
        loss_fn = joint_loss_fl
    else:
        cond = {m: ctx.prompt("L") for m in pair}
        loss_fn = joint_loss_fr

    def step(idx, rng):
        t = rng.integers(1, sched.T + 1, size=len(idx))
        eps = {m: rng.standard_normal(z0[m][idx].shape).astype(np.float32) for m in pair}
        return loss_fn(ctx.bundle, {m: z0[m][idx] for m in pair}, {m: cond[m][idx] for m in pair},
                       t, eps, sched, tau)

    return run_epochs(ctx.store, len(ctx.data), step, ctx.opt, ctx.seed, stage, on_epoch)


def _run_stage(stage: str, ctx: StageContext, on_epoch) -> list[float]:
    b, cfg = ctx.bundle, ctx.cfg
    if stage == "bridging":
        return fit_bridging(b.prompt, ctx.store, ctx.view("F"), ctx.view("L"), ctx.seqs, ctx.opt,
                            ctx.seed, cfg["contrastive"]["tau"], on_epoch)
    if stage in ("vae_image_F", "vae_image_L"):
        m = stage[-1]
        return fit_image_vae(getattr(b, f"vae_{m}"), ctx.store, ctx.view(m), ctx.opt, ctx.seed, stage,
                             cfg["vae"]["beta_kl_image"], on_epoch)
    if stage == "vae_text":
        return fit_text_vae(b.vae_R, ctx.store, ctx.seqs, ctx.opt, ctx.seed, cfg["vae"]["beta_kl_text"], on_epoch)
    if stage.startswith("ldm_"):
        return _train_ldm(ctx, {"F": "F", "L": "L", "R": "T"}[stage[-1]], stage, on_epoch)
    if stage == "joint_FL":
        return _train_joint(ctx, ("F", "L"), stage, on_epoch)
    if stage == "joint_FR":
        return _train_joint(ctx, ("F", "T"), stage, on_epoch)
    raise ConfigError(f"unknown stage {stage!r}")


def write_loss_log(path, stage: str, history: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, stage, repr(float(v))])


def prepare_stage(stage: str, cfg: Config, data: TripletData, run_dir) -> StageContext:
    """Build the bundle, load prerequisites and apply the stage's freeze mask."""
    if stage not in PLANS:
        raise ConfigError(f"unknown stage {stage!r}; valid stages: {', '.join(MODEL_STAGES)}")
    plan = PLANS[stage]
    for p in plan.prereqs:
        if not checkpoint_path(run_dir, p).exists():
            raise PreconditionError(f"stage {stage} requires stage {p} to be trained first")
    vocab = load_or_build_vocab(run_dir, data.reports)
    bundle = ModelBundle(cfg, len(vocab))
    store = ParamStore.from_module(bundle)
    load_stages(bundle, store, plan.prereqs, run_dir, cfg, current=stage)
    store.set_trainable(plan.trainable)
    return StageContext(bundle, store, data, cfg, vocab, optim_from(cfg, stage), cfg["run"]["seed"])


def _drop_stale(run_dir, stage: str) -> None:
    """Retraining a stage invalidates every later checkpoint built on it."""
    for later in MODEL_STAGES:
        path = checkpoint_path(run_dir, later)
        if later == stage or not path.exists():
            continue
        _, meta = checkpoint_load(path)
        if stage in meta.get("provenance", []):
            log.warning("removing stale checkpoint %s (built on the previous %s)", path, stage)
            path.unlink()


def train_stage(stage: str, cfg: Config, data: TripletData, run_dir, on_epoch=None) -> Path:
    """Train one stage on ``data`` (the training split) and write its checkpoint."""
    run_dir = Path(run_dir)
    ctx = prepare_stage(stage, cfg, data, run_dir)
    log.info("stage %s: %d trainable tensors", stage, len(ctx.store.trainable_names()))
    history = _run_stage(stage, ctx, on_epoch)
    write_loss_log(run_dir / "logs" / f"{stage}_loss.csv", stage, history)
    provenance = sorted(ctx.bundle._trained | {stage}, key=STAGES.index)
    out = checkpoint_path(run_dir, stage)
    out.parent.mkdir(parents=True, exist_ok=True)
    _drop_stale(run_dir, stage)
    checkpoint_save(ctx.store.state_dict(), out, {
        "stage": stage, "provenance": provenance, "config": ctx.cfg.values,
        "seed": ctx.seed, "vocab_size": len(ctx.vocab)})
    return out


# ---------------------------------------------------------------------------
# conditions + lockstep sampling
# ---------------------------------------------------------------------------

def source_conditions(bundle: ModelBundle, vocab: Vocab, sources: Sequence[str], data: TripletData) -> np.ndarray:
    """Uniformly combined prompt embeddings of the source modalities, ``[n, d_p]``."""
    parts = []
    for m in sources:
        if m == "T":
            if data.reports is None:
                raise DataError("source reports are missing")
            parts.append(encode_text(bundle.prompt.text, [tokenize(r, vocab) for r in data.reports]))
        else:
            arr = data.frontal if m == "F" else data.lateral
            if arr is None:
                raise DataError(f"source {m} images are missing")
            parts.append(encode_image(bundle.prompt.image, arr))
    return combine_conditions(parts)


@dataclass
class JointSample:
    latents: dict[str, np.ndarray]     # scaled latents as produced by the chains
    outputs: dict[str, object]         # decoded images [n, 1, S, S] or report strings


def joint_sample_latents(bundle: ModelBundle, targets: Sequence[str], condition, sched: NoiseSchedule,
                         seed: int) -> dict[str, np.ndarray]:
    """Run one chain per target in lockstep; each chain attends to the environment
    tokens of every other chain's pre-update latent at the same step."""
    targets = list(targets)
    for m in targets:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}")
    if len(set(targets)) != len(targets) or not targets:
        raise ConfigError("targets must be a non-empty set of modalities")
    condition = np.asarray(condition, dtype=np.float32)
    n = condition.shape[0]
    rngs = {m: chain_rng(seed, CHAIN_ID[m]) for m in targets}
    z = {m: rngs[m].standard_normal((n,) + bundle.latent_shape(m)).astype(np.float32) for m in targets}
    for t in range(sched.T, 0, -1):
        env = {m: bundle.env(m).context(z[m]).data for m in targets} if len(targets) > 1 else {}
        tt = np.full(n, t)
        new = {}
        for m in targets:
            partners = [env[p] for p in targets if p != m]
            ctx = np.concatenate(partners, axis=1) if partners else None
            eps_hat = bundle.denoiser(m)(Tensor(z[m]), tt, condition, ctx).data
            noise = rngs[m].standard_normal(z[m].shape).astype(np.float32) if t > 1 else np.zeros_like(z[m])
            new[m] = ddpm_step(z[m], eps_hat, t, sched, noise)
            if not np.all(np.isfinite(new[m])):
                raise NumericError(f"chain {m} diverged at step t={t}")
        z = new
    return z


def decode_latents(bundle: ModelBundle, vocab: Vocab, modality: str, latents: np.ndarray):
    unscaled = latents / bundle.scale(modality)
    if modality == "T":
        return [detokenize(s, vocab) for s in bundle.vae_R.decode_greedy(unscaled)]
    return decode_images(getattr(bundle, f"vae_{modality}"), unscaled.astype(np.float32))


def joint_sample(bundle: ModelBundle, vocab: Vocab, targets: Sequence[str], condition,
                 sched: NoiseSchedule, seed: int) -> JointSample:
    z = joint_sample_latents(bundle, targets, condition, sched, seed)
    return JointSample(z, {m: decode_latents(bundle, vocab, m, z[m]) for m in targets})


def generate(bundle: ModelBundle, vocab: Vocab, setting: GenerationSetting, sources: TripletData,
             sched: NoiseSchedule, seed: int) -> JointSample:
    needed = {"F": "ldm_F", "L": "ldm_L", "T": "ldm_R"}
    bundle.require(["bridging"] + [needed[m] for m in setting.targets])
    cond = source_conditions(bundle, vocab, setting.sources, sources)
    return joint_sample(bundle, vocab, setting.targets, cond, sched, seed)


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class AnyToAnyGenerator(BaseEstimator):
    """Train every stage into ``run_dir`` with ``fit``; sample with ``generate``."""

    def __init__(self, run_dir: str = "run", config: Config | None = None,
                 stages: tuple[str, ...] = MODEL_STAGES):
        self.run_dir = run_dir
        self.config = config
        self.stages = stages

    def _cfg(self) -> Config:
        return self.config if self.config is not None else Config()

    def fit(self, data: TripletData, y=None):
        for stage in self.stages:
            train_stage(stage, self._cfg(), data, self.run_dir)
        self.bundle_, self.vocab_ = load_run(self.run_dir, self._cfg())
        return self

    def generate(self, setting, sources: TripletData, seed: int = 0) -> JointSample:
        if not hasattr(self, "bundle_"):
            raise ContractError("call fit before generate")
        setting = setting if isinstance(setting, GenerationSetting) else GenerationSetting.parse(setting)
        return generate(self.bundle_, self.vocab_, setting, sources, schedule_from(self._cfg()), seed)
