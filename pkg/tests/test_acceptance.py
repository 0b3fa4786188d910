"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-9 share one desk-scale pipeline (2,000 synthetic triplets at
32 px, every stage at its default settings), built once per session and
timed stage by stage.
"""
import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from anyxr import joint, nn
from anyxr.checkpoint import checkpoint_load
from anyxr.config import Config
from anyxr.diffusion import ddpm_step, eps_loss, make_schedule, q_sample
from anyxr.ingest import load_dataset
from anyxr.metrics import FeatureSet, auroc, auroc_suite, bleu, f1_suite, fid, report_predictions
from anyxr.oracle import OracleClassifier, oracle_training_set
from anyxr.prompt_encoders import encode_image, encode_text, retrieval_accuracy, tokenize
from anyxr.settings import GenerationSetting
from anyxr.synth import (CONDITIONS, NEGATIVE, POSITIVE, UNMENTIONED, extract_labels, gen_dataset, gen_triplet,
                         presence, tokenize_words)
from anyxr.tensor import grad_check
from anyxr.vae import decode_images, encode_images_mean, encode_text_mean, token_accuracy
from gradcases import DENOISERS, PRIMITIVES, TOLERANCE, UNET_PARAMETERS, unet_parameter_case
from tinyrun import TINY_CONFIG

pytestmark = pytest.mark.slow

DESK_N = 2000
N_IMAGE_EVAL = 256
N_PAIR_EVAL = 128
MINUTES = 60.0


# ---------------------------------------------------------------------------
# criteria that need no training
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite(acceptance_log):
    start = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    failures = []
    cases = list(PRIMITIVES.items()) + list(DENOISERS.items())
    for (name, build), dtype in itertools.product(cases, (np.float64, np.float32)):
        err = grad_check(*build(dtype))
        worst[dtype] = max(worst[dtype], err)
        if err >= TOLERANCE[dtype]:
            failures.append(f"{name}/{np.dtype(dtype).name}={err:.1e}")
    for name in UNET_PARAMETERS:
        err = grad_check(*unet_parameter_case(name))
        worst[np.float64] = max(worst[np.float64], err)
        if err >= TOLERANCE[np.float64]:
            failures.append(f"unet.{name}/float64={err:.1e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 2 * MINUTES
    detail = (f"{len(PRIMITIVES)} primitives + {len(DENOISERS)} networks in both precisions, "
              f"{len(UNET_PARAMETERS)} UNet weight tensors in 64-bit; worst 64-bit {worst[np.float64]:.1e}, "
              f"worst 32-bit {worst[np.float32]:.1e}; {elapsed:.0f}s")
    if failures:
        detail += "; failing: " + ", ".join(failures)
    assert acceptance_log(1, "gradient suite", ok, detail)


def test_criterion_2_diffusion_oracles(acceptance_log):
    start = time.perf_counter()
    sched = make_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((64, 4, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    inverse_err = float(np.abs(ddpm_step(q_sample(z0, 1, eps, sched), eps, 1, sched, np.zeros_like(z0)) - z0).max())
    n, worst = 100_000, 0.0
    for t in (1, 10, 50, 100):
        ab = sched.alpha_bar[t - 1]
        zt = q_sample(np.full(n, 0.7), t, rng.standard_normal(n), sched)
        var = 1 - ab
        worst = max(worst, abs(zt.mean() - np.sqrt(ab) * 0.7) / np.sqrt(var / n),
                    abs(zt.var() - var) / (var * np.sqrt(2 / (n - 1))))
    elapsed = time.perf_counter() - start
    ok = inverse_err <= 1e-5 and worst < 3 and elapsed < MINUTES
    assert acceptance_log(2, "diffusion oracles", ok,
                          f"t=1 inverse max error {inverse_err:.1e}; worst moment deviation {worst:.2f} sigma "
                          f"over 1e5 draws; {elapsed:.1f}s")


def _pair_count(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def test_criterion_3_metric_oracles(acceptance_log):
    checks = {}
    # analytic Gaussians: two points per set give an exact mean and variance
    h = 1 / np.sqrt(2)
    checks["fid 1-D mean shift"] = abs(fid(FeatureSet([-h, h], "o"), FeatureSet([3 - h, 3 + h], "o")) - 9.0) <= 1e-3
    checks["fid 1-D variance"] = abs(fid(FeatureSet([-2 * h, 2 * h], "o"), FeatureSet([-h, h], "o")) - 1.0) <= 1e-3
    s1, s2 = np.array([1.0, 2.0]), np.array([3.0, 0.5])
    a = np.array([[s1[0], 0], [-s1[0], 0], [0, s1[1]], [0, -s1[1]]]) * np.sqrt(1.5)
    b = np.array([[s2[0], 0], [-s2[0], 0], [0, s2[1]], [0, -s2[1]]]) * np.sqrt(1.5) + [1.0, -2.0]
    closed = 5.0 + float(np.sum((s1 - s2) ** 2))
    checks["fid diagonal closed form"] = abs(fid(FeatureSet(a, "o"), FeatureSet(b, "o")) - closed) <= 1e-3
    feats = FeatureSet(np.random.default_rng(0).standard_normal((64, 8)), "o")
    checks["fid(A,A)"] = fid(feats, feats) <= 1e-6
    rng = np.random.default_rng(1)
    exhaustive = True
    for n in range(2, 13):
        scores = rng.integers(0, 4, n) / 4
        for bits in itertools.product((0, 1), repeat=n):
            if 0 < sum(bits) < n and auroc(scores, bits) != _pair_count(scores, bits):
                exhaustive = False
    checks["auroc exhaustive n<=12"] = exhaustive
    checks["bleu 2/7"] = bleu(["the the the the the the the".split()], ["the cat is on the mat".split()], 1) == 2 / 7
    preds = np.array([[1, 1], [1, 0], [1, 0], [0, 0], [0, 0]])
    labels = np.array([[1, 1], [1, 1], [0, np.nan], [1, 0], [0, np.nan]])
    s = f1_suite(preds, labels, ["A", "B"])
    checks["f1 hand example"] = (s.per_class == {"A": 2 / 3, "B": 2 / 3} and s.micro == 6 / 9 and s.macro == 2 / 3
                                 and abs(s.weighted - 2 / 3) < 1e-15)
    failed = [k for k, v in checks.items() if not v]
    assert acceptance_log(3, "metric oracles", not failed,
                          f"{len(checks) - len(failed)}/{len(checks)} golden checks hold"
                          + (f"; failing: {', '.join(failed)}" if failed else ""))


def test_criterion_4_synthetic_round_trip(acceptance_log, tmp_path):
    states = (POSITIVE, NEGATIVE, UNMENTIONED)
    mismatches = 0
    combos = list(itertools.product(states, repeat=len(CONDITIONS)))
    for f in combos:
        for seed in range(6):
            if extract_labels(gen_triplet(seed, f, size=16).report) != f:
                mismatches += 1
    rows = gen_dataset(500, 9, 0.4, tmp_path, size=16)
    train = {r["id"] for r in rows if r["split"] == "train"}
    test = {r["id"] for r in rows if r["split"] == "test"}
    ok = mismatches == 0 and len(combos) == 81 and not (train & test) and train and test
    assert acceptance_log(4, "synthetic-data round trip", ok,
                          f"{len(combos)} factor combinations x 6 seeds, {mismatches} mismatches; "
                          f"{len(train)} train / {len(test)} test ids, overlap {len(train & test)}")


# ---------------------------------------------------------------------------
# desk-scale pipeline
# ---------------------------------------------------------------------------

@dataclass
class Desk:
    cfg: Config
    run: object
    train: object
    test: object
    seconds: dict = field(default_factory=dict)
    oracle: OracleClassifier | None = None


def _timed(desk, name, fn):
    start = time.perf_counter()
    out = fn()
    desk.seconds[name] = time.perf_counter() - start
    print(f"desk stage {name}: {desk.seconds[name]:.0f}s", flush=True)
    return out


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = Config()
    gen_dataset(DESK_N, 0, cfg["data"]["prevalence"], root / "data", cfg["data"]["image_size"],
                cfg["data"]["unmentioned"])
    data = load_dataset(root / "data", cfg["data"]["image_size"])
    d = Desk(cfg, root / "run", data.where("train"), data.where("test"))
    for stage in ("bridging", "vae_image_F", "vae_image_L", "vae_text", "ldm_F", "ldm_L", "ldm_R"):
        _timed(d, stage, lambda: joint.train_stage(stage, cfg, d.train, d.run))
    opt = cfg.stage("oracle")
    d.oracle = _timed(d, "oracle", lambda: OracleClassifier(
        lr=opt["lr"], weight_decay=opt["weight_decay"], epochs=opt["epochs"], batch_size=opt["batch_size"],
        seed=cfg["run"]["seed"]).fit(*oracle_training_set(d.train.frontal, d.train.lateral, d.train.factors)))
    for stage in ("joint_FL", "joint_FR"):
        _timed(d, stage, lambda: joint.train_stage(stage, cfg, d.train, d.run))
    return d


def _bundle(desk, stages):
    vocab = joint.load_or_build_vocab(desk.run, None)
    bundle = joint.ModelBundle(desk.cfg, len(vocab))
    store = nn.ParamStore.from_module(bundle)
    joint.load_stages(bundle, store, stages, desk.run, desk.cfg)
    return bundle, store, vocab


def test_criterion_5_bridging_retrieval(acceptance_log, desk):
    bundle, _, vocab = _bundle(desk, ["bridging"])
    hf = encode_image(bundle.prompt.image, desk.test.frontal)
    hr = encode_text(bundle.prompt.text, [tokenize(r, vocab) for r in desk.test.reports])
    r2f, f2r = retrieval_accuracy(hr, hf), retrieval_accuracy(hf, hr)
    need = 5 / 32
    secs = desk.seconds["bridging"]
    ok = min(r2f, f2r) >= need and secs <= 10 * MINUTES
    assert acceptance_log(5, "stage A retrieval", ok,
                          f"report->frontal {r2f:.3f}, frontal->report {f2r:.3f} at batch 32 "
                          f"(need >= {need:.3f}); trained in {secs / MINUTES:.1f} min")


def _generate(bundle, vocab, desk, setting, n):
    sources = desk.test.subset(np.arange(n))
    return joint.generate(bundle, vocab, GenerationSetting.parse(setting), sources,
                          joint.schedule_from(desk.cfg), desk.cfg["run"]["seed"]), sources


def test_criterion_6_image_ldm(acceptance_log, desk):
    bundle, _, vocab = _bundle(desk, ["bridging", "ldm_F", "ldm_L"])
    orc = desk.oracle
    noise = np.random.default_rng(0).random((N_IMAGE_EVAL, 1, 32, 32)).astype(np.float32)
    parts, ok = [], True
    xt, yt = oracle_training_set(desk.test.frontal, desk.test.lateral, desk.test.factors)
    real_auc = auroc_suite(orc.predict_proba(xt), yt, CONDITIONS)
    oracle_ok = min(real_auc.per_class.values()) >= 0.95
    parts.append(f"oracle on real: min per-class AUROC {min(real_auc.per_class.values()):.3f}")
    for m, view in (("F", "frontal"), ("L", "lateral")):
        sample, sources = _generate(bundle, vocab, desk, f"T→{m}", N_IMAGE_EVAL)
        real = FeatureSet(orc.transform(getattr(desk.test, view)), "oracle")
        f_gen = fid(real, FeatureSet(orc.transform(sample.outputs[m]), "oracle"))
        f_noise = fid(real, FeatureSet(orc.transform(noise), "oracle"))
        secs = desk.seconds[f"ldm_{m}"]
        ok &= f_gen <= 0.2 * f_noise and secs <= 15 * MINUTES
        part = f"T→{m} FID {f_gen:.3g} vs noise {f_noise:.3g} (ratio {f_gen / f_noise:.3f}), {secs / MINUTES:.1f} min"
        if m == "F":
            factual = auroc_suite(orc.predict_proba(sample.outputs[m]), sources.labels, CONDITIONS).macro
            ok &= factual >= 0.7
            part += f", factual macro AUROC {factual:.3f}"
        parts.append(part)
    ok &= oracle_ok
    assert acceptance_log(6, "stage B image LDM", ok, "; ".join(parts))


def test_criterion_7_text_ldm(acceptance_log, desk):
    bundle, _, vocab = _bundle(desk, ["bridging", "ldm_R"])
    sample, sources = _generate(bundle, vocab, desk, "F+L→T", N_IMAGE_EVAL)
    cands = [tokenize_words(r) for r in sample.outputs["T"]]
    refs = [tokenize_words(r) for r in sources.reports]
    b1 = bleu(cands, refs, 1)
    # negative control: the same reports with every word remapped by a fixed vocabulary permutation
    words = sorted({w for c in cands + refs for w in c})
    perm = dict(zip(words, np.random.default_rng(0).permutation(words)))
    b1_shuffled = bleu([[perm[w] for w in c] for c in cands], refs, 1)
    f1 = f1_suite(report_predictions(sample.outputs["T"]), sources.labels, CONDITIONS).micro
    secs = desk.seconds["ldm_R"]
    ok = b1 >= 0.25 and b1_shuffled < 0.1 and f1 >= 0.6 and secs <= 15 * MINUTES
    assert acceptance_log(7, "stage B text LDM", ok,
                          f"BLEU-1 {b1:.3f} (need >= 0.25), shuffled-vocabulary BLEU-1 {b1_shuffled:.3f} "
                          f"(need < 0.1, {len(words)}-word vocabulary), report F1 micro {f1:.3f}; "
                          f"{secs / MINUTES:.1f} min")


def test_criterion_8_zero_init_and_pairing(acceptance_log, desk):
    sched = joint.schedule_from(desk.cfg)
    bundle, _, vocab = _bundle(desk, ["bridging", "ldm_F", "ldm_L", "ldm_R"])
    ev = desk.test.subset(np.arange(16))
    rng = np.random.default_rng(3)
    z0 = {m: (encode_images_mean(getattr(bundle, f"vae_{m}"), getattr(ev, v)) * bundle.scale(m)).astype(np.float32)
          for m, v in (("F", "frontal"), ("L", "lateral"))}
    z0["T"] = (encode_text_mean(bundle.vae_R, [tokenize(r, vocab) for r in ev.reports]) *
               bundle.scale("T")).astype(np.float32)
    cond = {m: joint.source_conditions(bundle, vocab, [s], ev) for m, s in (("F", "T"), ("L", "T"), ("T", "L"))}
    t = rng.integers(1, sched.T + 1, 16)
    eps = {m: rng.standard_normal(z0[m].shape).astype(np.float32) for m in z0}
    identical = True
    for pair in (("F", "L"), ("F", "T")):
        terms = joint.joint_terms(bundle, pair, z0, cond, t, eps, sched, desk.cfg["contrastive"]["tau"])
        for m, term in zip(pair, (terms.first, terms.second)):
            alone = eps_loss(bundle.denoiser(m), z0[m], t, eps[m], cond[m], None, sched)
            identical &= term.data.tobytes() == alone.data.tobytes()
        c = cond["F"][:4]
        together = joint.joint_sample_latents(bundle, list(pair), c, sched, 5)
        for m in pair:
            identical &= together[m].tobytes() == joint.joint_sample_latents(bundle, [m], c, sched, 5)[m].tobytes()

    trained, _, vocab = _bundle(desk, ["bridging", "joint_FL"])
    ev = desk.test.subset(np.arange(N_PAIR_EVAL))
    pair_cond = joint.source_conditions(trained, vocab, ["T"], ev)
    z = joint.joint_sample_latents(trained, ["F", "L"], pair_cond, sched, desk.cfg["run"]["seed"])
    ef, el = trained.env_F(z["F"]).data, trained.env_L(z["L"]).data
    matched = (ef * el).sum(1)
    shuffled = (ef * np.roll(el, 1, axis=0)).sum(1)
    pair_auc = auroc(np.concatenate([matched, shuffled]), np.r_[np.ones(N_PAIR_EVAL), np.zeros(N_PAIR_EVAL)])
    secs = desk.seconds["joint_FL"]
    ok = identical and pair_auc >= 0.8 and secs <= 15 * MINUTES
    assert acceptance_log(8, "stage C zero-init + pairing", ok,
                          f"pre-training losses and samples bit-identical: {identical}; matched vs shuffled "
                          f"pair AUROC {pair_auc:.3f} over {N_PAIR_EVAL} pairs (need >= 0.8); "
                          f"joint_FL trained in {secs / MINUTES:.1f} min")


def _changed(before, after, names):
    return {n for n in names if before[n].astype(np.float32).tobytes() != after[n].astype(np.float32).tobytes()}


def test_criterion_9_freeze_audit(acceptance_log, desk):
    # "before" is each stage's starting point: the merge of its prerequisite checkpoints
    _, store, _ = _bundle(desk, joint.PLANS["joint_FL"].prereqs)
    before_fl = store.state_dict()
    _, store, _ = _bundle(desk, joint.PLANS["joint_FR"].prereqs)
    before_fr = store.state_dict()
    after_fl, _ = checkpoint_load(joint.checkpoint_path(desk.run, "joint_FL"))
    after_fr, _ = checkpoint_load(joint.checkpoint_path(desk.run, "joint_FR"))
    names = sorted(before_fl)
    changed_fl = _changed(before_fl, after_fl, names)
    allowed = set(store.match(joint.PLANS["joint_FL"].trainable))
    groups = {g: any(n.startswith(g) for n in changed_fl) for g in ("env_F.", "env_L.", "unet_F.xmod", "unet_L.xmod")}
    f_branch = [n for n in names if n.split(".")[0] in ("vae_F", "unet_F", "env_F", "scale_F")]
    changed_fr_f = _changed(before_fr, after_fr, f_branch)
    changed_fr = _changed(before_fr, after_fr, names)
    fr_allowed = set(store.match(joint.PLANS["joint_FR"].trainable))
    ok = changed_fl <= allowed and all(groups.values()) and not changed_fr_f and changed_fr <= fr_allowed
    assert acceptance_log(9, "freeze-policy audit", ok,
                          f"joint_FL changed {len(changed_fl)} tensors, {len(changed_fl - allowed)} outside "
                          f"the env_F/env_L encoders and F/L cross-modal layers, groups touched "
                          f"{sum(groups.values())}/4; joint_FR changed {len(changed_fr)} tensors, "
                          f"{len(changed_fr_f)} of {len(f_branch)} F-branch tensors, "
                          f"{len(changed_fr - fr_allowed)} outside env_R and the R cross-modal layers")


# ---------------------------------------------------------------------------
# end-to-end determinism through the command line
# ---------------------------------------------------------------------------

def _end_to_end(root):
    from anyxr.cli import main

    root.mkdir()
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    data, run = str(root / "data"), str(root / "run")
    assert main(["synth", "--n", "60", "--seed", "4", "--config", str(cfg), "--out", data]) == 0
    for stage in joint.MODEL_STAGES + ("oracle",):
        assert main(["train", "--stage", stage, "--data", data, "--out", run, "--config", str(cfg)]) == 0
    gens = []
    for src, tgt in (("T", "F"), ("F,L", "T"), ("T", "F,L")):
        out = str(root / f"gen_{src}_{tgt}".replace(",", ""))
        assert main(["generate", "--from", src, "--to", tgt, "--run", run, "--data", data, "--n", "8",
                     "--out", out]) == 0
        gens.append(out)
    csv_path = root / "metrics.csv"
    assert main(["evaluate", "--real", data, "--gen", *gens, "--oracle", f"{run}/checkpoints/oracle.adxr",
                 "--run", run, "--config", str(cfg), "--out", str(csv_path)]) == 0
    return csv_path.read_bytes()


def test_criterion_10_end_to_end_determinism(acceptance_log, tmp_path):
    start = time.perf_counter()
    first = _end_to_end(tmp_path / "a")
    second = _end_to_end(tmp_path / "b")
    rows = first.decode().count("\n") - 1
    ok = first == second and rows > 0
    assert acceptance_log(10, "determinism", ok,
                          f"two synth->train(all stages)->generate->evaluate runs, {rows} metric rows, "
                          f"CSVs byte-identical: {first == second}; {time.perf_counter() - start:.0f}s")


# ---------------------------------------------------------------------------
# training-run examples that ride on the desk pipeline
# ---------------------------------------------------------------------------

def test_image_vae_reconstruction_mse(desk):
    bundle, _, _ = _bundle(desk, ["vae_image_F", "vae_image_L"])
    for m, view in (("F", "frontal"), ("L", "lateral")):
        x = getattr(desk.test, view)
        vae = getattr(bundle, f"vae_{m}")
        assert float(((decode_images(vae, encode_images_mean(vae, x)) - x) ** 2).mean()) < 0.01


def test_text_vae_round_trip(desk):
    bundle, _, vocab = _bundle(desk, ["vae_text"])
    seqs = [tokenize(r, vocab) for r in desk.test.reports]
    assert token_accuracy(bundle.vae_R.decode_greedy(encode_text_mean(bundle.vae_R, seqs)), seqs) >= 0.8


def test_oracle_separates_real_conditions(desk):
    x = desk.test.frontal
    y = np.stack([presence(f) for f in desk.test.factors])
    scores = auroc_suite(desk.oracle.predict_proba(x), y, CONDITIONS)
    assert scores.macro >= 0.95
    assert min(scores.per_class.values()) >= 0.95


def test_noise_fid_is_five_times_model_fid(desk):
    bundle, _, vocab = _bundle(desk, ["bridging", "ldm_F"])
    sample, _ = _generate(bundle, vocab, desk, "T→F", 128)
    real = FeatureSet(desk.oracle.transform(desk.test.frontal), "oracle")
    noise = np.random.default_rng(1).random((128, 1, 32, 32)).astype(np.float32)
    assert fid(real, FeatureSet(desk.oracle.transform(noise), "oracle")) >= \
        5 * fid(real, FeatureSet(desk.oracle.transform(sample.outputs["F"]), "oracle"))


def test_joint_losses_decrease(desk):
    import csv

    for stage in ("joint_FL", "joint_FR"):
        with open(desk.run / "logs" / f"{stage}_loss.csv") as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        assert losses[-1] < losses[0], stage
