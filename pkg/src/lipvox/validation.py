"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np

from .audio import N_MELS

FRAME_SIZE = 96
FPS = 25
MEL_STEPS_PER_FRAME = 4
WINDOW_FRAMES = 25


def check_frames(frames, min_frames: int = 5) -> np.ndarray:
    """Return ``frames`` as a float32 ``(F, 96, 96, 3)`` array in [0, 1].

    uint8 input is rescaled by 1/255; float input must already lie in [0, 1].
    """
    arr = np.asarray(frames)
    if arr.ndim != 4 or arr.shape[1:] != (FRAME_SIZE, FRAME_SIZE, 3):
        raise ValueError(f"frames must have shape (F, {FRAME_SIZE}, {FRAME_SIZE}, 3), got {arr.shape}")
    if arr.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {arr.shape[0]}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float frames must lie in [0, 1]")
    return arr


def check_mel_array(mel, min_steps: int = 1) -> np.ndarray:
    arr = np.asarray(getattr(mel, "frames", mel), dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != N_MELS:
        raise ValueError(f"mel spectrogram must be (steps, {N_MELS}), got {arr.shape}")
    if arr.shape[0] < min_steps:
        raise ValueError(f"mel spectrogram needs at least {min_steps} steps, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("mel spectrogram contains non-finite entries")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_random_state(seed) -> np.random.Generator:
    """Turn ``None``, an int or an existing generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, list, tuple)):
        return np.random.default_rng(seed)
    raise ValueError(f"cannot build a random generator from {seed!r}")
