"""End-to-end acceptance criteria.

Each test prints one PASS/FAIL line with the measured numbers; the lines are
repeated in the terminal summary. The training criteria share a handful of
desk-scale runs built once per module, roughly 25 minutes on one CPU core.
"""

import hashlib
import math
import shutil

import numpy as np
import pytest
import torch

from lipvox.audio import Waveform
from lipvox.cli import main
from lipvox.config import EvalConfig, TrainConfig
from lipvox.corpus import Corpus, generate_corpus
from lipvox.embedders import SPEAKER_DIM, SurrogateConfig, pretrain_surrogates, speaker_embed
from lipvox.inference import LipToSpeechModel, evaluation_windows, eval_corpus, generative_strength, sample_mels
from lipvox.losses import LossWeights, critic_input_gradient, kl_gaussian, wgan_losses
from lipvox.metrics import FeatureSet, fdsd, frechet_distance, kdsd, sed, unique_percentage
from lipvox.models import SIGMA_MAX, SIGMA_MIN, Critic, LipToSpeechNet, Projection, SpeechDecoder, temporal_upsample
from lipvox.training import finetune, train

# Desk-scale training setup shared by the training criteria.
EPOCHS = 40


def desk_config(**kw):
    base = dict(batch_size=4, learning_rate=5e-4, weights=LossWeights(lambda_r=800.0),
                max_epochs=EPOCHS, patience_epochs=EPOCHS, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def acc_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def surrogates(acc_root):
    corpus = Corpus(generate_corpus(24, 4, 3.0, seed=5, root=acc_root / "surrogate_corpus"))
    return pretrain_surrogates(corpus, SurrogateConfig(seed=0))


@pytest.fixture(scope="module")
def corpus_split(acc_root):
    # 4 speakers x 10 utterances; the first 8 of each speaker train, the last 2 are held out
    manifest = generate_corpus(4, 10, 3.0, seed=7, root=acc_root / "corpus")
    full = Corpus(manifest)
    train_m = manifest.select(first=8)
    return full.subset(train_m), full.subset(manifest.exclude(train_m))


@pytest.fixture(scope="module")
def runs(acc_root, corpus_split, surrogates):
    train_c, _ = corpus_split
    out = {}
    for source in ("content", "lip", "alternate"):
        cfg = desk_config(sampling_source=source, keep_epoch_checkpoints=source == "content")
        out[source] = train(train_c, cfg, acc_root / f"run_{source}", surrogates=surrogates)
    return out


@pytest.fixture(scope="module")
def content_model(runs):
    return LipToSpeechModel.from_checkpoint(runs["content"].out_dir / "last.ckpt")


# ---------------------------------------------------------------- fast criteria

def mc_kl(mu_p, sig_p, mu_q, sig_q, n, rng, chunk=250_000):
    total = 0.0
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        x = mu_p + sig_p * rng.standard_normal((m, mu_p.size))
        logp = -np.log(sig_p) - 0.5 * ((x - mu_p) / sig_p) ** 2
        logq = -np.log(sig_q) - 0.5 * ((x - mu_q) / sig_q) ** 2
        total += (logp - logq).sum()
    return total / n


def test_kl_oracle(acceptance_report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        d = 4
        mu_p, mu_q = rng.normal(size=d), rng.normal(size=d)
        sig_p, sig_q = rng.uniform(0.5, 2.0, d), rng.uniform(0.5, 2.0, d)
        exact = kl_gaussian((torch.tensor(mu_p[None]), torch.tensor(sig_p[None])),
                            (torch.tensor(mu_q[None]), torch.tensor(sig_q[None]))).item()
        worst = max(worst, abs(mc_kl(mu_p, sig_p, mu_q, sig_q, 1_000_000, rng) - exact) / exact)
    same = 0.0
    for _ in range(20):
        mu = torch.tensor(rng.normal(size=(1, 16)))
        sig = torch.tensor(rng.uniform(0.05, 5.0, (1, 16)))
        same = max(same, abs(kl_gaussian((mu, sig), (mu, sig)).item()))
    ok = worst < 0.01 and same <= 1e-9
    acceptance_report("kl_oracle", ok, f"worst MC rel err {worst:.2e} (< 1e-2), identical pairs max {same:.1e}")
    assert ok


class LinearCritic(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(w)

    def forward(self, x):
        return (x * self.w).flatten(1).sum(1)


def test_gradient_penalty(acceptance_report):
    torch.manual_seed(0)
    critic = Critic().double()
    x = torch.rand(1, 100, 80, dtype=torch.float64)
    grad = critic_input_gradient(critic, x)[0]
    rng = np.random.default_rng(0)
    h, worst = 1e-6, 0.0
    for _ in range(10):
        t, f = int(rng.integers(100)), int(rng.integers(80))
        xp, xm = x.clone(), x.clone()
        xp[0, t, f] += h
        xm[0, t, f] -= h
        with torch.no_grad():
            fd = (critic(xp) - critic(xm)).item() / (2 * h)
        worst = max(worst, abs(fd - grad[t, f].item()) / max(abs(fd), 1e-12))

    g = torch.Generator().manual_seed(1)
    closed = 0.0
    for scale in (0.01, 0.05, 0.2):
        w = torch.randn(100, 80, dtype=torch.float64, generator=g) * scale
        real = torch.rand(4, 100, 80, dtype=torch.float64, generator=g)
        fake = torch.rand(4, 100, 80, dtype=torch.float64, generator=g)
        _, _, l_gp = wgan_losses(LinearCritic(w), real, fake, generator=g)
        closed = max(closed, abs(l_gp.item() - (w.norm().item() - 1.0) ** 2))
    ok = worst < 1e-3 and closed <= 1e-6
    acceptance_report("gradient_penalty", ok, f"FD rel err {worst:.2e} (< 1e-3), linear closed form err {closed:.1e}")
    assert ok


def test_shapes_and_invariants(acceptance_report, tiny_surrogates):
    torch.manual_seed(0)
    model = LipToSpeechModel(LipToSpeechNet(), tiny_surrogates, TrainConfig(), "untrained")
    voice = np.random.default_rng(0).uniform(-0.5, 0.5, 16000).astype(np.float32)
    shapes = {}
    for frames in (25, 50, 75):
        clip = np.random.default_rng(frames).uniform(0, 255, (frames, 96, 96, 3)).astype(np.uint8)
        shapes[frames] = model.synthesize_mel(clip, Waveform(voice)).shape
    shapes_ok = all(shapes[f] == (4 * f, 80) for f in shapes)

    x = torch.randn(2, 7, 5)
    up = temporal_upsample(x)
    upsample_ok = up.shape == (2, 28, 5) and all(torch.equal(up[:, 4 * t + r], x[:, t])
                                                for t in range(7) for r in range(4))

    proj, dec, critic = Projection(32).eval(), SpeechDecoder().eval(), Critic().eval()
    rng = np.random.default_rng(0)
    failures = 0
    with torch.no_grad():
        for _ in range(1000):
            steps = int(rng.integers(4, 41))
            scale = float(10 ** rng.uniform(-3, 3))
            feats = torch.tensor(rng.normal(size=(1, steps, 32)) * scale, dtype=torch.float32)
            mu, sigma = proj(feats)
            spk = torch.nn.functional.normalize(torch.tensor(rng.normal(size=(1, SPEAKER_DIM)), dtype=torch.float32), dim=1)
            mel = dec(mu, spk)
            score = critic(mel)
            # the speaker embedder takes roughly one second of mel
            emb = speaker_embed(tiny_surrogates, rng.uniform(0, 1, (int(rng.integers(95, 106)), 80)))
            good = (mu.shape == sigma.shape == (1, steps, 256)
                    and bool(torch.isfinite(mu).all())
                    and float(sigma.min()) >= SIGMA_MIN * (1 - 1e-6) and float(sigma.max()) <= SIGMA_MAX * (1 + 1e-6)
                    and mel.shape == (1, steps, 80) and float(mel.min()) >= 0.0 and float(mel.max()) <= 1.0
                    and score.shape == (1,) and bool(torch.isfinite(score).all())
                    and emb.shape == (SPEAKER_DIM,) and abs(float(np.linalg.norm(emb)) - 1.0) < 1e-5)
            failures += not good
    ok = shapes_ok and upsample_ok and failures == 0
    acceptance_report("shape_suite", ok, f"outputs {shapes}, upsample exact {upsample_ok}, "
                                         f"invariant failures {failures}/1000")
    assert ok


def test_metric_oracles(acceptance_report):
    rng = np.random.default_rng(0)
    d, n = 4, 2000
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    a1, a2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    c1, c2 = a1 @ a1.T / d + 0.5 * np.eye(d), a2 @ a2.T / d + 0.5 * np.eye(d)
    analytic = frechet_distance(mu1, c1, mu2, c2)
    estimates = [fdsd(FeatureSet(rng.multivariate_normal(mu1, c1, n)), FeatureSet(rng.multivariate_normal(mu2, c2, n)))
                 for _ in range(20)]
    spread = float(np.std(estimates))
    fd_ok = abs(float(np.mean(estimates)) - analytic) <= 3 * spread

    x, y = rng.normal(size=(50, 8)), rng.normal(0.3, 1.0, size=(50, 8))
    k = lambda a, b: (float(np.dot(a, b)) / 8 + 1.0) ** 3  # noqa: E731
    sxx = sum(k(x[i], x[j]) for i in range(50) for j in range(50) if i != j) / (50 * 49)
    syy = sum(k(y[i], y[j]) for i in range(50) for j in range(50) if i != j) / (50 * 49)
    sxy = sum(k(x[i], y[j]) for i in range(50) for j in range(50) if i != j) / (50 * 49)
    brute = 1e3 * (sxx + syy - 2 * sxy)
    kd_err = abs(kdsd(FeatureSet(x), FeatureSet(y)) - brute)

    z = FeatureSet(rng.normal(size=(64, 8)))
    same_fd, same_kd = fdsd(z, z), kdsd(z, z)
    ok = fd_ok and kd_err <= 1e-9 and abs(same_fd) < 1e-6 and abs(same_kd) < 1e-6
    acceptance_report("metric_oracles", ok,
                      f"FDSD mean {np.mean(estimates):.4f} vs analytic {analytic:.4f} (3 sd {3 * spread:.4f}); "
                      f"KDSD double-loop err {kd_err:.1e}; identical sets FDSD {same_fd:.1e} KDSD {same_kd:.1e}")
    assert ok


# ---------------------------------------------------------------- training criteria

def test_overfit(acceptance_report, runs, corpus_split):
    train_c, _ = corpus_split
    history = runs["content"].history
    first, last = history[0]["l_r"], history[-1]["l_r"]
    report = eval_corpus(runs["content"].out_dir / "last.ckpt", train_c, EvalConfig(windows_per_utt=1))
    lip, content = report["metrics"]["recon_l1"], report["metrics"]["recon_l1_content"]
    mels = np.stack([ex.mel.frames for ex in evaluation_windows(train_c, EvalConfig(windows_per_utt=1))])
    mean_frame = float(np.abs(mels - mels.mean(axis=(0, 1))).mean())
    ok = len(history) >= 30 and last < 0.5 * first and lip <= 2.0 * content
    acceptance_report("overfit", ok, f"{len(history)} epochs, L_r {first:.4f} -> {last:.4f}; "
                                     f"lip recon {lip:.4f} vs content recon {content:.4f} "
                                     f"(mean-frame baseline {mean_frame:.4f})")
    assert ok


def test_sampling_ablation(acceptance_report, runs, corpus_split):
    _, held = corpus_split
    cfg = EvalConfig(windows_per_utt=4)
    recon = {src: eval_corpus(runs[src].out_dir / "last.ckpt", held, cfg)["metrics"]["recon_l1"] for src in runs}
    steps = {src: runs[src].history[-1]["step"] for src in runs}
    ok = len(set(steps.values())) == 1 and recon["content"] < recon["lip"] and recon["content"] < recon["alternate"]
    acceptance_report("sampling_ablation", ok, "held-out recon " + ", ".join(f"{k} {v:.4f}" for k, v in recon.items())
                      + f" at step {steps['content']}")
    assert ok


def test_voice_property(acceptance_report, content_model, corpus_split):
    _, held = corpus_split
    windows = evaluation_windows(held, EvalConfig(windows_per_utt=8))
    s = content_model.surrogates
    same, diff = [], []
    for i, ex in enumerate(windows):
        generated = content_model.synthesize_mel(ex.lips, ex.speaker_ref)
        other = next(w for w in windows[i:] + windows[:i] if w.speaker_id != ex.speaker_id)
        same.append(sed(s, generated, ex.mel.frames))
        diff.append(sed(s, generated, other.mel.frames))
    ok = len(same) >= 50 and np.mean(same) < np.mean(diff)
    acceptance_report("voice_property", ok, f"{len(same)} pairs, SED same {np.mean(same):.4f} "
                                            f"< different {np.mean(diff):.4f}")
    assert ok


def brute_unique(samples, delta):
    flat = [np.asarray(x, dtype=np.float64).ravel() for x in samples]
    count = 0
    for i, a in enumerate(flat):
        if all(math.sqrt(((a - b) ** 2).sum()) >= delta for j, b in enumerate(flat) if j != i):
            count += 1
    return 100.0 * count / len(flat)


def test_generative_strength(acceptance_report, runs, content_model, corpus_split):
    _, held = corpus_split
    probes = evaluation_windows(held, EvalConfig(windows_per_utt=2))[:10]
    first = LipToSpeechModel.from_checkpoint(runs["content"].out_dir / "epoch_001.ckpt")
    early = [generative_strength(first, ex.lips, ex.speaker_ref, 100, 0.5) for ex in probes]
    final = [generative_strength(content_model, ex.lips, ex.speaker_ref, 100, 0.5) for ex in probes]
    wins = sum(f >= e for f, e in zip(final, early))

    samples = sample_mels(content_model, probes[0].lips, probes[0].speaker_ref, 100)
    oracle_ok = all(unique_percentage(samples, delta) == brute_unique(samples, delta) for delta in (0.5, 5.0, 50.0))
    ok = len(probes) == 10 and wins >= 8 and oracle_ok
    acceptance_report("generative_strength", ok, f"final >= first on {wins}/10 probes "
                                                 f"(first {early}, final {final}); brute-force match {oracle_ok}")
    assert ok


def test_finetune_trend(acceptance_report, acc_root, runs, surrogates):
    manifest = generate_corpus(1, 10, 3.0, seed=11, root=acc_root / "new_speaker")
    full = Corpus(manifest)
    train_m = manifest.select(first=8)
    held = full.subset(manifest.exclude(train_m))
    steps = 64
    cfg = desk_config(batch_size=2, max_epochs=steps, patience_epochs=steps, max_steps=steps)
    scratch = train(full.subset(train_m), cfg, acc_root / "scratch", surrogates=surrogates)
    tuned = finetune(runs["content"].out_dir / "last.ckpt", full.subset(manifest.select(utt_fraction=0.25)),
                     cfg, acc_root / "finetuned")
    ev = EvalConfig(windows_per_utt=16)
    fd_scratch = eval_corpus(scratch.out_dir / "last.ckpt", held, ev)["metrics"]["fdsd"]
    fd_tuned = eval_corpus(tuned.out_dir / "last.ckpt", held, ev)["metrics"]["fdsd"]
    matched = scratch.history[-1]["step"] == tuned.history[-1]["step"] == steps
    ok = matched and fd_tuned <= 1.2 * fd_scratch
    acceptance_report("finetune_trend", ok, f"FDSD fine-tuned on 25% {fd_tuned:.3f} vs scratch on 100% "
                                            f"{fd_scratch:.3f} at {steps} steps (limit 1.2x)")
    assert ok


# ---------------------------------------------------------------- determinism

def digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(acceptance_report, tmp_path, capsys):
    def twice(args, out_flag, kind):
        outs = []
        for name in ("a", "b"):
            target = tmp_path / f"{kind}_{name}"
            assert main(args + [out_flag, str(target)]) == 0
            outs.append(target)
        capsys.readouterr()
        a, b = outs
        if a.is_dir():
            return digest_tree(a) == digest_tree(b)
        same = a.read_bytes() == b.read_bytes()
        mel_a, mel_b = a.with_suffix(".mel.npy"), b.with_suffix(".mel.npy")
        if mel_a.exists():
            same = same and mel_a.read_bytes() == mel_b.read_bytes()
        return same

    results = {}
    results["gen-data"] = twice(["gen-data", "--speakers", "2", "--utts", "2", "--seconds", "2", "--seed", "3"],
                                "--out", "corpus")
    corpus = tmp_path / "corpus_a"
    results["pretrain-surrogates"] = twice(["pretrain-surrogates", "--corpus", str(corpus), "--steps", "5",
                                            "--batch-size", "4", "--seed", "1"], "--out", "surr.ckpt")
    surr = tmp_path / "surr.ckpt_a"
    train_args = ["--batch-size", "2", "--lr", "0.001", "--max-epochs", "1", "--seed", "2"]
    results["train"] = twice(["train", "--corpus", str(corpus), "--surrogates", str(surr), *train_args], "--out", "run")
    ckpt = tmp_path / "run_a" / "last.ckpt"
    results["finetune"] = twice(["finetune", "--ckpt", str(ckpt), "--corpus", str(corpus), "--speaker", "spk0",
                                 *train_args], "--out", "ft")
    clip = tmp_path / "clip"
    shutil.copytree(corpus / "spk0" / "utt0" / "frames", clip)
    synth = ["synth", "--ckpt", str(ckpt), "--frames", str(clip), "--voice", str(corpus / "spk1" / "utt0" / "audio.wav"),
             "--gl-iterations", "5"]
    results["synth"] = twice(synth, "--out", "out.wav")
    results["synth --mode sample"] = twice(synth + ["--mode", "sample", "--seed", "4"], "--out", "sample.wav")
    results["eval"] = twice(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus), "--windows-per-utt", "1"],
                            "--out", "report.json")
    results["gstrength"] = twice(["gstrength", "--ckpt", str(ckpt), "--corpus", str(corpus), "--probes", "2",
                                  "--num-samples", "10"], "--out", "gs.json")
    ok = all(results.values())
    acceptance_report("cli_determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                       for k, v in results.items()))
    assert ok
