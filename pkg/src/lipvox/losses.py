"""Training objectives.

Distributions are passed as ``(mu, sigma)`` tensor pairs of shape
``(T, D)`` or ``(B, T, D)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .embedders import SPEAKER_STEPS, voice_similarity
from .validation import check_random_state


@dataclass
class LossWeights:
    lambda_r: float = 10.0
    lambda_k_global: float = 5.0
    lambda_k_local: float = 5.0
    lambda_voice: float = 5.0
    lambda_gp: float = 10.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossBreakdown:
    l_r: float = 0.0
    l_kl_global: float = 0.0
    l_kl_local: float = 0.0
    l_voice: float = 0.0
    l_adv_gen: float = 0.0
    l_adv_critic: float = 0.0
    l_gp: float = 0.0
    l_align: float = 0.0
    total_gen: float = 0.0

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _check_pair(p, q):
    if p[0].shape != q[0].shape or p[1].shape != q[1].shape or p[0].shape != p[1].shape:
        raise ValueError(f"distribution shapes differ: {tuple(p[0].shape)} vs {tuple(q[0].shape)}")


def kl_gaussian(p, q):
    """KL(p || q) for diagonal Gaussians, summed over dims and averaged over time.

    Batched input returns one value per batch item.
    """
    _check_pair(p, q)
    mu_p, sig_p = p
    mu_q, sig_q = q
    per_dim = (torch.log(sig_q / sig_p)
               + (sig_p ** 2 + (mu_p - mu_q) ** 2) / (2.0 * sig_q ** 2) - 0.5)
    return per_dim.sum(dim=-1).mean(dim=-1)


def kl_global(content, lip, order: str = "content_lip"):
    """Batch mean of KL(content || lip); ``order="lip_content"`` swaps the arguments."""
    if order == "lip_content":
        content, lip = lip, content
    return kl_gaussian(content, lip).mean()


def sample_segments(rng, num_steps: int, num_segments: int = 10, min_len: int = 5, max_len: int = 20):
    """Random ``(start, length)`` pairs with length uniform in ``[min_len, max_len]``."""
    if num_steps < min_len:
        raise ValueError(f"sequence of {num_steps} steps is shorter than the minimum segment {min_len}")
    rng = check_random_state(rng)
    out = []
    for _ in range(num_segments):
        length = int(rng.integers(min_len, min(max_len, num_steps) + 1))
        start = int(rng.integers(0, num_steps - length + 1))
        out.append((start, length))
    return out


def kl_local(content, lip, rng=None, num_segments: int = 10, min_len: int = 5, max_len: int = 20,
             segments=None, order: str = "content_lip"):
    """Mean KL over random corresponding temporal segments.

    Each batch item draws its own segments; the same slice is taken from both
    distributions. ``segments`` (a list of per-item lists of ``(start, length)``)
    overrides the random draw.
    """
    _check_pair(content, lip)
    if order == "lip_content":
        content, lip = lip, content
    mu_c, sig_c = content
    mu_l, sig_l = lip
    if mu_c.dim() == 2:
        mu_c, sig_c, mu_l, sig_l = (t[None] for t in (mu_c, sig_c, mu_l, sig_l))
        if segments is not None and segments and isinstance(segments[0], tuple):
            segments = [segments]
    batch, steps = mu_c.shape[:2]
    if segments is None:
        rng = check_random_state(rng)
        segments = [sample_segments(rng, steps, num_segments, min_len, max_len) for _ in range(batch)]
    terms = []
    for b in range(batch):
        for start, length in segments[b]:
            sl = slice(start, start + length)
            terms.append(kl_gaussian((mu_c[b, sl], sig_c[b, sl]), (mu_l[b, sl], sig_l[b, sl])))
    return torch.stack(terms).mean()


def recon_l1(generated, target):
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def critic_input_gradient(critic, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Gradient of the summed critic score with respect to its input."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    scores = critic(x)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph)
    return grad


def wgan_losses(critic, real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None,
                create_graph: bool = True):
    """Return ``(l_adv_critic, l_adv_gen, l_gp)``.

    The gradient penalty uses one interpolation coefficient per batch item,
    ``x_hat = eps * real + (1 - eps) * fake``.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    d_real = critic(real)
    d_fake = critic(fake)
    if not (torch.isfinite(d_real).all() and torch.isfinite(d_fake).all()):
        raise FloatingPointError("critic produced non-finite scores")
    l_adv_critic = d_fake.mean() - d_real.mean()
    l_adv_gen = -d_fake.mean()

    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    grad = critic_input_gradient(critic, x_hat, create_graph=create_graph)
    l_gp = ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()
    return l_adv_critic, l_adv_gen, l_gp


def voice_loss(speaker_features, generated: torch.Tensor, target_embedding: torch.Tensor, rng=None):
    """``1 - cos(embed(generated), target)`` averaged over the batch.

    ``speaker_features`` maps ``(B, 100, 80)`` mels to unit embeddings. Longer
    windows are cut to one random 100-step slice.
    """
    if speaker_features is None:
        from .embedders import SurrogateError
        raise SurrogateError("speaker embedder not loaded")
    steps = generated.shape[1]
    if steps > SPEAKER_STEPS:
        start = int(check_random_state(rng).integers(0, steps - SPEAKER_STEPS + 1))
        generated = generated[:, start:start + SPEAKER_STEPS]
    v_gen = speaker_features(generated)
    return (1.0 - voice_similarity(v_gen, target_embedding)).mean()


_GEN_TERMS = (
    ("l_r", "lambda_r"),
    ("l_kl_global", "lambda_k_global"),
    ("l_kl_local", "lambda_k_local"),
    ("l_voice", "lambda_voice"),
    ("l_adv_gen", "lambda_adv"),
    ("l_align", "lambda_k_global"),
)


def total_generator_loss(parts, w: LossWeights):
    """Weighted generator objective. ``parts`` is a LossBreakdown or a mapping of
    tensors/floats keyed like its fields; the gradient penalty belongs to the
    critic objective and is not included."""
    get = parts.get if isinstance(parts, dict) else (lambda k, d=0.0: getattr(parts, k, d))
    total = 0.0
    for part, weight in _GEN_TERMS:
        value = get(part, 0.0)
        scalar = value.detach().item() if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise FloatingPointError(f"non-finite loss term {part}")
        total = total + getattr(w, weight) * value
    return total


def check_finite(values: dict) -> None:
    for name, value in values.items():
        if not np.isfinite(float(value)):
            raise FloatingPointError(f"non-finite loss term {name} = {float(value)}")
