"""Deterministic synthetic audio-visual corpus.

Each speaker has a voice (fundamental frequency, formant scaling, spectral
tilt) and a face (skin, background, mouth geometry). An utterance is a random
sequence of pseudo-phonemes; the audio renders two-formant harmonic tones and
the video draws an elliptical mouth whose width follows the phoneme's viseme
and whose opening follows the audio envelope. Phonemes 1 and 2 share a viseme,
so the video alone cannot tell them apart.

Layout on disk::

    root/manifest.json
    root/spk{k}/utt{j}/frames/{00000..}.png
    root/spk{k}/utt{j}/audio.wav
    root/spk{k}/utt{j}/phonemes.json
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .audio import (
    HOP_LENGTH,
    SAMPLE_RATE,
    MelSpectrogram,
    Waveform,
    load_wav,
    melspectrogram,
    save_wav,
)
from .validation import (
    FPS,
    FRAME_SIZE,
    MEL_STEPS_PER_FRAME,
    WINDOW_FRAMES,
    check_positive_int,
    check_random_state,
)

NUM_PHONEMES = 12
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS
WINDOW_SAMPLES = WINDOW_FRAMES * SAMPLES_PER_FRAME
MANIFEST_NAME = "manifest.json"

# (F1 Hz, F2 Hz, loudness, viseme)
PHONEMES = np.array([
    [0.0, 0.0, 0.02, 0],
    [750.0, 1200.0, 1.00, 1],
    [620.0, 1750.0, 0.95, 1],
    [300.0, 2300.0, 0.75, 2],
    [420.0, 2000.0, 0.80, 3],
    [320.0, 900.0, 0.70, 4],
    [520.0, 950.0, 0.85, 5],
    [560.0, 1850.0, 0.85, 6],
    [700.0, 1650.0, 0.95, 7],
    [480.0, 1350.0, 0.80, 8],
    [280.0, 1000.0, 0.40, 9],
    [300.0, 1600.0, 0.45, 10],
])
# (mouth width factor, mouth openness)
VISEMES = np.array([
    [0.80, 0.00],
    [1.05, 1.00],
    [1.30, 0.35],
    [1.15, 0.55],
    [0.60, 0.45],
    [0.75, 0.75],
    [1.10, 0.65],
    [1.20, 0.85],
    [0.90, 0.60],
    [0.85, 0.05],
    [1.00, 0.25],
])
MOUTH_BOX = (slice(52, 90), slice(22, 74))

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class CorpusError(ValueError):
    """Raised for invalid corpora or corpus requests."""


@dataclass
class CorpusManifest:
    root: str
    speakers: list
    utterances: list
    seed: int
    utt_seconds: float = 0.0

    def __post_init__(self):
        for utt in self.utterances:
            if utt["frames"] < WINDOW_FRAMES:
                raise CorpusError(f"utterance {utt['path']} has {utt['frames']} frames, need >= {WINDOW_FRAMES}")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no corpus manifest at {path}")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        # the stored root is relative to the manifest file
        data["root"] = os.path.normpath(path.parent / data.get("root", "."))
        manifest = cls(**data)
        for utt in manifest.utterances:
            if not (Path(manifest.root) / utt["path"]).is_dir():
                raise CorpusError(f"manifest references missing utterance directory {utt['path']}")
        return manifest

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        data = asdict(self)
        data["root"] = os.path.relpath(os.path.abspath(self.root), os.path.abspath(path.parent))
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @property
    def speaker_ids(self) -> list:
        return [s["id"] for s in self.speakers]

    def subset(self, indices) -> "CorpusManifest":
        """Manifest restricted to the utterances at ``indices`` (speakers kept as-is)."""
        utts = [self.utterances[i] for i in indices]
        ids = {u["speaker_id"] for u in utts}
        speakers = [s for s in self.speakers if s["id"] in ids]
        return CorpusManifest(self.root, speakers, utts, self.seed, self.utt_seconds)

    def select(self, speakers=None, utt_fraction=None, first=None) -> "CorpusManifest":
        """Filter by speaker ids, then keep a leading fraction or count of each speaker's utterances."""
        keep = []
        for sid in self.speaker_ids:
            if speakers is not None and sid not in speakers:
                continue
            idx = [i for i, u in enumerate(self.utterances) if u["speaker_id"] == sid]
            if utt_fraction is not None:
                idx = idx[:max(1, int(round(len(idx) * utt_fraction)))]
            if first is not None:
                idx = idx[:first]
            keep.extend(idx)
        return self.subset(keep)

    def exclude(self, other: "CorpusManifest") -> "CorpusManifest":
        paths = {u["path"] for u in other.utterances}
        return self.subset([i for i, u in enumerate(self.utterances) if u["path"] not in paths])


@dataclass
class Utterance:
    speaker_id: str
    frames: np.ndarray
    audio: Waveform
    phoneme_track: np.ndarray
    path: str = ""

    def __post_init__(self):
        if len(self.phoneme_track) != len(self.frames):
            raise CorpusError("phoneme track length must equal frame count")
        if abs(self.audio.duration - len(self.frames) / FPS) > 1.0 / FPS:
            raise CorpusError("audio duration does not match frame count")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @cached_property
    def mel(self) -> MelSpectrogram:
        return melspectrogram(self.audio)


@dataclass
class TrainingExample:
    lips: np.ndarray
    mel: MelSpectrogram
    speaker_ref: Waveform
    speaker_id: str
    start: int = 0
    ref_mel: np.ndarray = field(default=None, repr=False)
    phonemes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        frames = self.lips.shape[0]
        if self.lips.shape[1:] != (FRAME_SIZE, FRAME_SIZE, 3):
            raise CorpusError(f"lip window has shape {self.lips.shape}")
        if self.lips.min() < 0.0 or self.lips.max() > 1.0:
            raise CorpusError("lip window values outside [0, 1]")
        if self.mel.num_steps != frames * MEL_STEPS_PER_FRAME:
            raise CorpusError(f"mel has {self.mel.num_steps} steps for {frames} frames")
        if len(self.speaker_ref) != SAMPLE_RATE:
            raise CorpusError("speaker reference must be exactly one second")


@dataclass
class Batch:
    lips: np.ndarray
    mel: np.ndarray
    ref_mel: np.ndarray
    speaker_ids: list
    starts: list
    phonemes: np.ndarray

    def __len__(self):
        return self.lips.shape[0]


def _speaker_params(seed: int, k: int, num_speakers: int) -> dict:
    rng = np.random.default_rng([seed, k, 0])
    offset = np.random.default_rng([seed, 0, 1]).random()
    # golden-ratio spacing keeps fundamentals of a handful of speakers well apart
    f0 = 90.0 + 190.0 * ((offset + k * _GOLDEN) % 1.0)
    skin = rng.uniform([0.55, 0.40, 0.30], [0.90, 0.75, 0.62])
    return {
        "id": f"spk{k}",
        "f0": round(float(f0), 4),
        "formant_scale": round(float(rng.uniform(0.88, 1.15)), 4),
        "tilt": round(float(rng.uniform(0.6, 1.4)), 4),
        "gain": round(float(rng.uniform(0.22, 0.34)), 4),
        "vibrato_hz": round(float(rng.uniform(3.0, 6.0)), 4),
        "skin": [round(float(c), 4) for c in skin],
        "background": [round(float(c), 4) for c in rng.uniform(0.05, 0.35, size=3)],
        "lip": [round(float(c), 4) for c in (skin * rng.uniform(0.45, 0.65))],
        "face_rx": int(rng.integers(28, 35)),
        "face_ry": int(rng.integers(38, 45)),
        "mouth_w": round(float(rng.uniform(9.0, 13.0)), 4),
        "mouth_y": int(rng.integers(68, 73)),
    }


def _phoneme_track(rng: np.random.Generator, num_frames: int) -> np.ndarray:
    track = np.empty(num_frames, dtype=np.int64)
    pos = 0
    while pos < num_frames:
        dur = int(rng.integers(2, 6))
        track[pos:pos + dur] = rng.integers(0, NUM_PHONEMES)
        pos += dur
    return track


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    padded = np.pad(x, (width // 2, width - width // 2 - 1), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def synthesize_audio(track: np.ndarray, speaker: dict, rng: np.random.Generator):
    """Render audio for a per-frame phoneme track.

    Returns the waveform samples and the per-sample amplitude envelope.
    """
    n = len(track) * SAMPLES_PER_FRAME
    per_sample = np.repeat(track, SAMPLES_PER_FRAME)
    table = PHONEMES[per_sample]
    # position of each sample inside its phoneme segment drives a smooth swell
    boundaries = np.flatnonzero(np.diff(per_sample)) + 1
    seg_start = np.zeros(n, dtype=np.int64)
    seg_end = np.full(n, n, dtype=np.int64)
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    seg_id = np.repeat(np.arange(len(starts)), ends - starts)
    seg_start, seg_end = starts[seg_id], ends[seg_id]
    u = (np.arange(n) - seg_start) / np.maximum(seg_end - seg_start, 1)
    swell = 0.45 + 0.55 * np.sin(np.pi * u)

    width = int(0.02 * SAMPLE_RATE)
    amp = _smooth(table[:, 2] * swell, width) * speaker["gain"]
    voiced = table[:, 0] > 0
    f1 = np.where(voiced, table[:, 0], 500.0) * speaker["formant_scale"]
    f2 = np.where(voiced, table[:, 1], 1500.0) * speaker["formant_scale"]
    f1, f2 = _smooth(f1, width), _smooth(f2, width)

    t = np.arange(n) / SAMPLE_RATE
    vib_phase = rng.uniform(0, 2 * np.pi)
    f0 = speaker["f0"] * (1.0 + 0.02 * np.sin(2 * np.pi * speaker["vibrato_hz"] * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    num_harmonics = int(7600.0 // speaker["f0"])
    signal = np.zeros(n)
    power = np.zeros(n)
    for h in range(1, num_harmonics + 1):
        fh = h * f0
        gain = (np.exp(-(((fh - f1) / 110.0) ** 2)) + 0.6 * np.exp(-(((fh - f2) / 170.0) ** 2)) + 0.04)
        gain *= h ** (-speaker["tilt"]) * (fh < 7600.0)
        signal += gain * np.sin(h * phase)
        power += 0.5 * gain ** 2
    # unit-RMS carrier, so loudness follows the envelope and not the formants
    signal *= amp * 0.5 / np.sqrt(power)
    signal += rng.normal(0.0, 0.002, size=n)
    peak = np.max(np.abs(signal))
    if peak > 0.95:
        signal *= 0.95 / peak
        amp = amp * 0.95 / peak
    return signal.astype(np.float32), amp


def render_frames(track: np.ndarray, envelope: np.ndarray, speaker: dict) -> np.ndarray:
    """Draw one 96x96 RGB uint8 frame per phoneme-track entry."""
    num_frames = len(track)
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    base = np.empty((FRAME_SIZE, FRAME_SIZE, 3))
    base[:] = speaker["background"]
    face = ((xx - 48) / speaker["face_rx"]) ** 2 + ((yy - 50) / speaker["face_ry"]) ** 2 <= 1.0
    base[face] = speaker["skin"]
    for ex in (36, 60):
        eye = (xx - ex) ** 2 + (yy - 38) ** 2 <= 10.0
        base[eye] = [0.08, 0.08, 0.1]
    nose = (np.abs(xx - 48) <= 2) & (yy >= 46) & (yy <= 58)
    base[nose] = np.asarray(speaker["skin"]) * 0.8

    frame_env = envelope[: num_frames * SAMPLES_PER_FRAME].reshape(num_frames, SAMPLES_PER_FRAME).mean(axis=1)
    frame_env = frame_env / speaker["gain"]
    frames = np.empty((num_frames, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    my = speaker["mouth_y"]
    for f in range(num_frames):
        width_factor, openness = VISEMES[int(PHONEMES[track[f], 3])]
        rx = speaker["mouth_w"] * width_factor
        inner_ry = 0.6 + 11.0 * (0.35 + 0.65 * openness) * min(frame_env[f], 1.2)
        img = base.copy()
        outer = ((xx - 48) / (rx + 1.5)) ** 2 + ((yy - my) / (inner_ry + 1.5)) ** 2 <= 1.0
        inner = ((xx - 48) / rx) ** 2 + ((yy - my) / inner_ry) ** 2 <= 1.0
        img[outer] = speaker["lip"]
        img[inner] = [0.95, 0.92, 0.88]
        frames[f] = np.round(img * 255.0).astype(np.uint8)
    return frames


def generate_corpus(num_speakers: int, utts_per_speaker: int, utt_seconds: float, seed: int, root) -> CorpusManifest:
    """Write a synthetic corpus under ``root`` and return its manifest.

    Every utterance derives its randomness from ``(seed, speaker, utterance)``,
    so the output is a pure function of the arguments.
    """
    check_positive_int(num_speakers, "num_speakers")
    check_positive_int(utts_per_speaker, "utts_per_speaker")
    if utt_seconds < 1:
        raise CorpusError(f"utt_seconds must be >= 1, got {utt_seconds}")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus root {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise CorpusError(f"corpus root {root} is not writable")

    num_frames = int(round(utt_seconds * FPS))
    speakers = [_speaker_params(seed, k, num_speakers) for k in range(num_speakers)]
    utterances = []
    for k, spk in enumerate(speakers):
        for j in range(utts_per_speaker):
            rng = np.random.default_rng([seed, k, j + 2])
            track = _phoneme_track(rng, num_frames)
            audio, env = synthesize_audio(track, spk, rng)
            frames = render_frames(track, env, spk)
            rel = f"spk{k}/utt{j}"
            udir = root / rel
            (udir / "frames").mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(frames):
                Image.fromarray(frame).save(udir / "frames" / f"{i:05d}.png")
            save_wav(Waveform(audio), udir / "audio.wav")
            with open(udir / "phonemes.json", "w", encoding="utf-8") as fh:
                json.dump(track.tolist(), fh)
            utterances.append({"speaker_id": spk["id"], "path": rel, "frames": num_frames})
    manifest = CorpusManifest(str(root), speakers, utterances, int(seed), float(utt_seconds))
    manifest.save()
    return manifest


def load_frames(directory) -> np.ndarray:
    """Load a directory of PNG frames (sorted by name) as a uint8 array."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise CorpusError(f"no PNG frames in {directory}")
    return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files])


def load_utterance(manifest: CorpusManifest, index: int) -> Utterance:
    entry = manifest.utterances[index]
    udir = Path(manifest.root) / entry["path"]
    frames = load_frames(udir / "frames")
    audio = load_wav(udir / "audio.wav")
    with open(udir / "phonemes.json", encoding="utf-8") as fh:
        track = np.asarray(json.load(fh), dtype=np.int64)
    return Utterance(entry["speaker_id"], frames, audio, track, entry["path"])


class Corpus:
    """A manifest plus a lazy in-memory cache of decoded utterances."""

    def __init__(self, manifest, _cache=None):
        if not isinstance(manifest, CorpusManifest):
            manifest = CorpusManifest.load(manifest)
        self.manifest = manifest
        self._cache = {} if _cache is None else _cache

    def __len__(self):
        return len(self.manifest.utterances)

    def __getitem__(self, index: int) -> Utterance:
        key = self.manifest.utterances[index]["path"]
        if key not in self._cache:
            self._cache[key] = load_utterance(self.manifest, index)
        return self._cache[key]

    def subset(self, manifest: CorpusManifest) -> "Corpus":
        return Corpus(manifest, self._cache)

    @property
    def speaker_ids(self):
        return self.manifest.speaker_ids


def sample_window(u: Utterance, rng, num_frames: int = WINDOW_FRAMES) -> TrainingExample:
    """Cut an aligned lip/mel window and an independent 1 s voice reference."""
    rng = check_random_state(rng)
    if u.num_frames < num_frames:
        raise CorpusError(f"utterance has {u.num_frames} frames, need >= {num_frames}")
    start = int(rng.integers(0, u.num_frames - num_frames + 1))
    lips = u.frames[start:start + num_frames].astype(np.float32) / 255.0
    steps = num_frames * MEL_STEPS_PER_FRAME
    mel_start = start * MEL_STEPS_PER_FRAME
    mel = MelSpectrogram(u.mel.frames[mel_start:mel_start + steps])

    ref_steps = SAMPLE_RATE // HOP_LENGTH
    ref_start = int(rng.integers(0, u.mel.num_steps - ref_steps + 1))
    ref = u.audio.slice(ref_start * HOP_LENGTH, SAMPLE_RATE)
    ref_mel = u.mel.frames[ref_start:ref_start + ref_steps]
    phonemes = np.repeat(u.phoneme_track[start:start + num_frames], MEL_STEPS_PER_FRAME)
    return TrainingExample(lips, mel, ref, u.speaker_id, start, ref_mel, phonemes)


def collate(examples) -> Batch:
    return Batch(
        lips=np.stack([e.lips for e in examples]),
        mel=np.stack([e.mel.frames for e in examples]),
        ref_mel=np.stack([e.ref_mel for e in examples]),
        speaker_ids=[e.speaker_id for e in examples],
        starts=[e.start for e in examples],
        phonemes=np.stack([e.phonemes for e in examples]),
    )


def batch_iterator(corpus, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Yield one epoch of batches: every utterance once, in seeded order.

    The final partial batch is dropped, so a corpus smaller than
    ``batch_size`` yields nothing.
    """
    if not isinstance(corpus, Corpus):
        corpus = Corpus(corpus)
    if len(corpus) == 0:
        raise CorpusError("cannot iterate an empty corpus")
    check_positive_int(batch_size, "batch_size")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(corpus))
    for b in range(len(order) // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield collate([sample_window(corpus[int(i)], rng) for i in idx])
