"""Trainable networks: visual encoder, latent projections, speech decoder and critic."""

from __future__ import annotations

import math

import torch
from torch import nn

from .audio import N_MELS
from .embedders import CONTENT_DIM, SPEAKER_DIM
from .validation import FRAME_SIZE, MEL_STEPS_PER_FRAME

VISUAL_DIM = 512
LATENT_DIM = 256
SIGMA_MIN = 1e-2
SIGMA_MAX = 10.0
LOGVAR_MIN = 2.0 * math.log(SIGMA_MIN)
LOGVAR_MAX = 2.0 * math.log(SIGMA_MAX)


class VisualEncoder(nn.Module):
    """3D conv stack: (B, T, 96, 96, 3) -> (B, T, 512).

    Only the first layer looks across time (5 frames, padded so T is kept);
    five stride-2 blocks bring 96x96 down to 3x3, then a spatial average.
    """

    channels = (3, 32, 64, 128, 256, 512, 512)

    def __init__(self):
        super().__init__()
        layers = []
        for i in range(6):
            temporal = 5 if i == 0 else 1
            stride = 2 if i < 5 else 1
            layers += [
                nn.Conv3d(self.channels[i], self.channels[i + 1], (temporal, 3, 3),
                          stride=(1, stride, stride), padding=(temporal // 2, 1, 1)),
                nn.BatchNorm3d(self.channels[i + 1]),
                nn.ReLU(),
            ]
        self.net = nn.Sequential(*layers)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5 or frames.shape[2:] != (FRAME_SIZE, FRAME_SIZE, 3):
            raise ValueError(f"expected (B, T, {FRAME_SIZE}, {FRAME_SIZE}, 3) frames, got {tuple(frames.shape)}")
        if frames.shape[1] < 5:
            raise ValueError(f"visual encoder needs at least 5 frames, got {frames.shape[1]}")
        x = self.net(frames.permute(0, 4, 1, 2, 3))
        return x.mean(dim=(3, 4)).transpose(1, 2)


def temporal_upsample(features: torch.Tensor, factor: int = MEL_STEPS_PER_FRAME) -> torch.Tensor:
    """Nearest-neighbour upsampling along time (dim -2)."""
    return torch.repeat_interleave(features, factor, dim=-2)


class Projection(nn.Module):
    """Bi-GRU, ReLU dense layer, then per-step mean and log-variance heads."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__()
        self.in_dim = in_dim
        self.gru = nn.GRU(in_dim, hidden, batch_first=True, bidirectional=True)
        self.dense = nn.Sequential(nn.Linear(2 * hidden, LATENT_DIM), nn.ReLU())
        self.mu = nn.Linear(LATENT_DIM, LATENT_DIM)
        self.logvar = nn.Linear(LATENT_DIM, LATENT_DIM)

    def forward(self, x: torch.Tensor):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projection expects feature dim {self.in_dim}, got {x.shape[-1]}")
        h, _ = self.gru(x)
        h = self.dense(h)
        logvar = torch.clamp(self.logvar(h), LOGVAR_MIN, LOGVAR_MAX)
        return self.mu(h), torch.exp(0.5 * logvar)


def reparam_sample(mu: torch.Tensor, sigma: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


class SpeechDecoder(nn.Module):
    """[(latent); speaker] -> Bi-LSTM -> 4 dense layers -> sigmoid mel."""

    def __init__(self, hidden: int = 256):
        super().__init__()
        self.speaker_fc = nn.Sequential(nn.Linear(SPEAKER_DIM, LATENT_DIM), nn.ReLU())
        self.lstm = nn.LSTM(LATENT_DIM * 2, hidden, batch_first=True, bidirectional=True)
        self.dense = nn.Sequential(
            nn.Linear(2 * hidden, 512), nn.ReLU(),
            nn.Linear(512, 512), nn.ReLU(),
            nn.Linear(512, 256), nn.ReLU(),
            nn.Linear(256, N_MELS),
        )

    def forward(self, z: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != LATENT_DIM or speaker.shape[-1] != SPEAKER_DIM:
            raise ValueError(f"decoder expects latent dim {LATENT_DIM} and speaker dim {SPEAKER_DIM}, "
                             f"got {z.shape[-1]} and {speaker.shape[-1]}")
        v = self.speaker_fc(speaker)[:, None, :].expand(-1, z.shape[1], -1)
        h, _ = self.lstm(torch.cat([z, v], dim=-1))
        return torch.sigmoid(self.dense(h))


class Critic(nn.Module):
    """1D conv WGAN critic over a (B, T', 80) mel; returns one unbounded score per item."""

    def __init__(self):
        super().__init__()
        chans = (N_MELS, 128, 128, 256, 256, 512, 512)
        layers = []
        for i in range(6):
            layers += [nn.Conv1d(chans[i], chans[i + 1], 5, stride=2 if i % 2 else 1, padding=2),
                       nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.out = nn.Linear(512, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[-1] != N_MELS:
            raise ValueError(f"critic expects {N_MELS} mel bands, got {mel.shape[-1]}")
        h = self.net(mel.transpose(1, 2)).mean(dim=2)
        return self.out(h).squeeze(-1)


class LipToSpeechNet(nn.Module):
    """Generator: everything trainable except the critic."""

    def __init__(self):
        super().__init__()
        self.visual = VisualEncoder()
        self.proj_lip = Projection(VISUAL_DIM)
        self.proj_content = Projection(CONTENT_DIM)
        self.decoder = SpeechDecoder()

    def lip_distribution(self, frames: torch.Tensor):
        return self.proj_lip(temporal_upsample(self.visual(frames)))

    def content_distribution(self, content: torch.Tensor):
        return self.proj_content(content)

    def decode(self, z, speaker):
        return self.decoder(z, speaker)
