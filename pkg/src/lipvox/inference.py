"""Inference from the lip distribution and corpus-level evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import SAMPLE_RATE, MelSpectrogram, Waveform, griffin_lim, melspectrogram
from .checkpoint import Checkpoint, checkpoint_id, load_checkpoint
from .config import EvalConfig, TrainConfig
from .corpus import Corpus, CorpusError, sample_window
from .metrics import extract_features, fdsd, kdsd, sed, unique_percentage
from .models import SIGMA_MIN, reparam_sample
from .training import apply_crop, build_networks
from .validation import check_frames

MODES = ("mean", "sample")


@dataclass
class SynthesisRequest:
    frames: np.ndarray
    voice_reference: Waveform
    mode: str = "mean"
    seed: int = 0

    def __post_init__(self):
        self.frames = check_frames(self.frames)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.voice_reference) < SAMPLE_RATE:
            raise ValueError("voice reference must be at least one second long")


class LipToSpeechModel:
    """A trained generator plus its frozen surrogates, in evaluation mode."""

    def __init__(self, net, surrogates, config: TrainConfig, source_id: str = ""):
        self.net = net.eval()
        self.surrogates = surrogates
        self.config = config
        self.source_id = source_id

    @classmethod
    def from_checkpoint(cls, ckpt) -> "LipToSpeechModel":
        source_id = ""
        if not isinstance(ckpt, Checkpoint):
            source_id = checkpoint_id(ckpt)
            ckpt = load_checkpoint(ckpt)
        net, _, surrogates = build_networks(ckpt.params)
        return cls(net, surrogates, TrainConfig.from_dict(ckpt.config), source_id)

    @torch.no_grad()
    def lip_distribution(self, frames: np.ndarray):
        x = torch.as_tensor(check_frames(frames))[None]
        mu, sigma = self.net.lip_distribution(apply_crop(x, self.config.crop_mode))
        if not self.config.variational:
            sigma = torch.full_like(sigma, SIGMA_MIN)
        return mu[0], sigma[0]

    @torch.no_grad()
    def content_distribution(self, mel):
        x = torch.as_tensor(np.asarray(getattr(mel, "frames", mel), dtype=np.float32))[None]
        mu, sigma = self.net.content_distribution(self.surrogates.content_features(x))
        return mu[0], sigma[0]

    @torch.no_grad()
    def voice_embedding(self, voice) -> torch.Tensor:
        """Embedding of the first second of a Waveform or of a >= 100-step mel."""
        if isinstance(voice, Waveform):
            mel = melspectrogram(voice.slice(0, SAMPLE_RATE)).frames
        else:
            mel = np.asarray(getattr(voice, "frames", voice), dtype=np.float32)[:100]
        return self.surrogates.speaker_features(torch.as_tensor(mel)[None])[0]

    @torch.no_grad()
    def decode(self, z: torch.Tensor, speaker: torch.Tensor) -> np.ndarray:
        if z.dim() == 2:
            z = z[None]
        speaker = speaker.expand(z.shape[0], -1) if speaker.dim() == 2 else speaker[None].expand(z.shape[0], -1)
        return self.net.decode(z, speaker).numpy()

    def synthesize_mel(self, frames, voice, mode: str = "mean", seed: int = 0) -> np.ndarray:
        mu, sigma = self.lip_distribution(frames)
        if mode == "mean":
            z = mu
        else:
            z = reparam_sample(mu, sigma, torch.Generator().manual_seed(int(seed)))
        return self.decode(z, self.voice_embedding(voice))[0]

    def reconstruct_from_content(self, mel, voice) -> np.ndarray:
        """Decode the content-distribution mean; the training-time path."""
        mu, _ = self.content_distribution(mel)
        return self.decode(mu, self.voice_embedding(voice))[0]


def _as_model(model) -> LipToSpeechModel:
    return model if isinstance(model, LipToSpeechModel) else LipToSpeechModel.from_checkpoint(model)


def synthesize(model, req: SynthesisRequest, gl_iterations: int = 60):
    """Generate a ``(4F, 80)`` mel and its Griffin-Lim waveform for ``F`` frames."""
    model = _as_model(model)
    mel = MelSpectrogram(model.synthesize_mel(req.frames, req.voice_reference, req.mode, req.seed))
    return mel, griffin_lim(mel, gl_iterations)


def sample_mels(model, frames, voice, num_samples: int, batch_size: int = 25) -> np.ndarray:
    """Sample-mode syntheses for seeds ``0..num_samples-1``."""
    model = _as_model(model)
    mu, sigma = model.lip_distribution(frames)
    speaker = model.voice_embedding(voice)
    out = []
    for start in range(0, num_samples, batch_size):
        seeds = range(start, min(start + batch_size, num_samples))
        z = torch.stack([reparam_sample(mu, sigma, torch.Generator().manual_seed(s)) for s in seeds])
        out.append(model.decode(z, speaker))
    return np.concatenate(out)


def generative_strength(model, frames, voice_reference, num_samples: int = 100, delta: float = 0.5) -> float:
    """Percentage of mutually distinct outputs among ``num_samples`` stochastic syntheses."""
    if num_samples < 2:
        raise ValueError("generative strength needs at least 2 samples")
    return unique_percentage(sample_mels(model, frames, voice_reference, num_samples), delta)


def evaluation_windows(corpus, config: EvalConfig):
    """Deterministic held-out windows: ``windows_per_utt`` per utterance in manifest order."""
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    if len(corpus) == 0:
        raise CorpusError("cannot evaluate an empty corpus")
    windows = []
    for i in range(len(corpus)):
        rng = np.random.default_rng([config.seed, i])
        for _ in range(config.windows_per_utt):
            windows.append(sample_window(corpus[i], rng, config.window_frames))
    return windows


def eval_corpus(model, corpus, config: EvalConfig | None = None, out_path=None, ground_truth: bool = False) -> dict:
    """Synthesize every evaluation window and report SED, FDSD, KDSD and L1.

    With ``ground_truth=True`` the reference mels stand in for the generated
    ones, which should give zeros across the board.
    """
    config = config or EvalConfig()
    model = _as_model(model)
    windows = evaluation_windows(corpus, config)
    generated, references, content_recon = [], [], []
    for k, ex in enumerate(windows):
        references.append(ex.mel.frames)
        if ground_truth:
            generated.append(ex.mel.frames)
        else:
            generated.append(model.synthesize_mel(ex.lips, ex.speaker_ref, config.mode, config.seed + k))
        content_recon.append(model.reconstruct_from_content(ex.mel, ex.speaker_ref))
    s = model.surrogates
    gen_feats = extract_features(s, generated)
    ref_feats = extract_features(s, references)
    report = {
        "metrics": {
            "sed": float(np.mean([sed(s, g, r) for g, r in zip(generated, references)])),
            "fdsd": fdsd(gen_feats, ref_feats),
            "kdsd": kdsd(gen_feats, ref_feats),
            "recon_l1": float(np.mean([np.abs(g - r).mean() for g, r in zip(generated, references)])),
            "recon_l1_content": float(np.mean([np.abs(g - r).mean() for g, r in zip(content_recon, references)])),
        },
        "n": len(windows),
        "seed": config.seed,
        "mode": config.mode,
        "ground_truth": ground_truth,
        "checkpoint": model.source_id,
    }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
