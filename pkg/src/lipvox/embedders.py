"""Frozen surrogate networks standing in for the pretrained ASR content encoder
and the speaker identity network.

Both operate on normalized log-mel spectrograms so the voice loss can
backpropagate into a generated mel without a differentiable vocoder.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_MELS, MelSpectrogram
from .corpus import NUM_PHONEMES, Corpus, batch_iterator

logger = logging.getLogger(__name__)

CONTENT_DIM = 1024
SPEAKER_DIM = 256
SPEAKER_STEPS = 100
SPEAKER_TOLERANCE = 5
COSINE_EPS = 1e-8


class SurrogateError(RuntimeError):
    """Raised when a surrogate is missing or fed invalid input."""


class ContentEncoder(nn.Module):
    """Temporal conv stack over the mel; the 1024-d penultimate layer is the content embedding."""

    def __init__(self, num_classes: int = NUM_PHONEMES):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(N_MELS, 256, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(256, 256, 5, padding=4, dilation=2),
            nn.ReLU(),
            nn.Conv1d(256, CONTENT_DIM, 3, padding=1),
            nn.ReLU(),
        )
        self.classifier = nn.Conv1d(CONTENT_DIM, num_classes, 1)

    def features(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T, 80) -> (B, T, 1024)."""
        # per-band mean removal strips most of the speaker's spectral colouring
        x = mel - mel.mean(dim=1, keepdim=True)
        return self.body(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, mel):
        return self.classifier(self.features(mel).transpose(1, 2)).transpose(1, 2)


class SpeakerEmbedder(nn.Module):
    """Conv stack, mean-pool over time, projection to a unit-norm 256-d voice vector."""

    def __init__(self, num_speakers: int = 1, scale: float = 10.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(N_MELS, 128, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(128, 256, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(256, 256, 3, padding=1),
            nn.ReLU(),
        )
        self.proj = nn.Linear(256, SPEAKER_DIM)
        self.head = nn.Parameter(torch.randn(num_speakers, SPEAKER_DIM) * 0.1)
        self.scale = scale

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        pooled = self.body(mel.transpose(1, 2)).mean(dim=2)
        return F.normalize(self.proj(pooled), dim=-1, eps=COSINE_EPS)

    def logits(self, mel):
        return self.scale * self.forward(mel) @ F.normalize(self.head, dim=-1).T


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class Surrogates:
    """The pair of frozen embedders used throughout training and evaluation."""

    def __init__(self, content: ContentEncoder, speaker: SpeakerEmbedder):
        self.content = _freeze(content)
        self.speaker = _freeze(speaker)

    def checksum(self) -> str:
        return parameter_checksum(self.content) + parameter_checksum(self.speaker)

    def state_dict(self) -> dict:
        out = {f"surrogate.content.{k}": v for k, v in self.content.state_dict().items()}
        out.update({f"surrogate.speaker.{k}": v for k, v in self.speaker.state_dict().items()})
        return out

    @classmethod
    def from_state_dict(cls, state: dict) -> "Surrogates":
        content_state = {k[len("surrogate.content."):]: v for k, v in state.items() if k.startswith("surrogate.content.")}
        speaker_state = {k[len("surrogate.speaker."):]: v for k, v in state.items() if k.startswith("surrogate.speaker.")}
        if not content_state or not speaker_state:
            raise SurrogateError("checkpoint carries no surrogate parameters")
        content = ContentEncoder(content_state["classifier.weight"].shape[0])
        speaker = SpeakerEmbedder(speaker_state["head"].shape[0])
        content.load_state_dict(content_state)
        speaker.load_state_dict(speaker_state)
        return cls(content.to(content_state["classifier.weight"].dtype), speaker.to(speaker_state["head"].dtype))

    def to(self, dtype) -> "Surrogates":
        self.content.to(dtype)
        self.speaker.to(dtype)
        return self

    @torch.no_grad()
    def content_features(self, mel: torch.Tensor) -> torch.Tensor:
        return self.content.features(mel)

    def speaker_features(self, mel: torch.Tensor) -> torch.Tensor:
        """Batched, differentiable speaker embedding of (B, ~100, 80) mels."""
        steps = mel.shape[1]
        if abs(steps - SPEAKER_STEPS) > SPEAKER_TOLERANCE:
            raise SurrogateError(f"speaker embedder needs {SPEAKER_STEPS}±{SPEAKER_TOLERANCE} steps, got {steps}")
        return self.speaker(mel)


def _require(surrogates):
    if surrogates is None:
        raise SurrogateError("surrogates not loaded")
    return surrogates


def _as_tensor(mel, dtype=torch.float32):
    arr = mel.frames if isinstance(mel, MelSpectrogram) else mel
    if isinstance(arr, torch.Tensor):
        return arr
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


def content_encode(surrogates: Surrogates, m) -> np.ndarray:
    """(T, 80) mel -> (T, 1024) content embedding."""
    s = _require(surrogates)
    x = _as_tensor(m)[None]
    return s.content_features(x)[0].numpy()


def speaker_embed(surrogates: Surrogates, m) -> np.ndarray:
    """Unit-norm 256-d embedding of a ~1 s mel."""
    s = _require(surrogates)
    with torch.no_grad():
        return s.speaker_features(_as_tensor(m)[None])[0].numpy()


def voice_similarity(a, b, eps: float = COSINE_EPS):
    """Cosine similarity guarded against zero norms; works on numpy arrays or tensors."""
    if isinstance(a, torch.Tensor):
        return (a * b).sum(-1) / torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=eps)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / max(np.linalg.norm(a) * np.linalg.norm(b), eps))


@dataclass
class SurrogateConfig:
    seed: int = 0
    steps: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-3


def pretrain_surrogates(corpus, config: SurrogateConfig | None = None) -> Surrogates:
    """Train the content encoder on per-step pseudo-phonemes and the speaker
    embedder on speaker identity, then freeze both."""
    config = config or SurrogateConfig()
    if not isinstance(corpus, Corpus):
        corpus = Corpus(corpus)
    speaker_ids = corpus.speaker_ids
    if len(speaker_ids) < 2:
        raise SurrogateError("speaker embedder needs a corpus with at least two speakers")
    label = {sid: i for i, sid in enumerate(speaker_ids)}
    batch_size = min(config.batch_size, len(corpus))

    torch.manual_seed(config.seed)
    content = ContentEncoder()
    speaker = SpeakerEmbedder(len(speaker_ids))
    opt = torch.optim.Adam(list(content.parameters()) + list(speaker.parameters()), lr=config.learning_rate)

    step, epoch = 0, 0
    while step < config.steps:
        for batch in batch_iterator(corpus, batch_size, config.seed, epoch):
            mel = torch.as_tensor(batch.mel)
            ref = torch.as_tensor(batch.ref_mel)
            phonemes = torch.as_tensor(batch.phonemes)
            spk = torch.as_tensor([label[s] for s in batch.speaker_ids])
            loss_c = F.cross_entropy(content(mel).reshape(-1, NUM_PHONEMES), phonemes.reshape(-1))
            loss_s = F.cross_entropy(speaker.logits(torch.cat([mel, ref])), torch.cat([spk, spk]))
            opt.zero_grad()
            (loss_c + loss_s).backward()
            opt.step()
            step += 1
            if step % 50 == 0:
                logger.info("surrogate step %d content %.4f speaker %.4f", step, loss_c.item(), loss_s.item())
            if step >= config.steps:
                break
        epoch += 1
    return Surrogates(content, speaker)


def save_surrogates(surrogates: Surrogates, path, config: SurrogateConfig | None = None):
    from .checkpoint import Checkpoint, save_checkpoint

    params = {k: v.detach().cpu().numpy() for k, v in surrogates.state_dict().items()}
    meta = {"kind": "surrogates", "surrogates": asdict(config) if config else {}}
    return save_checkpoint(Checkpoint(config=meta, params=params), path)


def load_surrogates(path) -> Surrogates:
    """Load surrogates from a surrogate file or from any training checkpoint."""
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    return Surrogates.from_state_dict({k: torch.from_numpy(v) for k, v in ckpt.params.items()
                                       if k.startswith("surrogate.")})
