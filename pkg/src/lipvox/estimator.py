"""scikit-learn style wrappers around the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .audio import Waveform, melspectrogram
from .config import TrainConfig
from .corpus import Corpus
from .embedders import Surrogates, load_surrogates
from .inference import LipToSpeechModel
from .training import train


class MelSpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Maps 16 kHz waveforms (arrays or Waveform) to normalized ``(n, 80)`` mels."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [melspectrogram(w if isinstance(w, Waveform) else Waveform(np.asarray(w))).frames for w in X]


class LipToSpeech(BaseEstimator):
    """Train on a corpus with ``fit``; ``predict`` maps (frames, voice) pairs to mels.

    ``surrogates`` is a Surrogates object or a path to a surrogate checkpoint.
    """

    def __init__(self, surrogates=None, batch_size=32, learning_rate=5e-5, max_epochs=100, max_steps=None,
                 patience_epochs=10, sampling_source="content", variational=True, crop_mode="full_face",
                 mode="mean", seed=0, out_dir=None):
        self.surrogates = surrogates
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.patience_epochs = patience_epochs
        self.sampling_source = sampling_source
        self.variational = variational
        self.crop_mode = crop_mode
        self.mode = mode
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs, max_steps=self.max_steps,
                           patience_epochs=self.patience_epochs, sampling_source=self.sampling_source,
                           variational=self.variational, crop_mode=self.crop_mode, seed=self.seed)

    def fit(self, X, y=None):
        """``X`` is a Corpus, a CorpusManifest or a corpus path; ``y`` is unused."""
        surrogates = self.surrogates
        if not isinstance(surrogates, Surrogates):
            surrogates = load_surrogates(surrogates) if surrogates is not None else None
        corpus = X if isinstance(X, Corpus) else Corpus(X)
        result = train(corpus, self._train_config(), self.out_dir, surrogates=surrogates)
        state = result.state
        self.model_ = LipToSpeechModel(state.net, state.surrogates, state.config)
        self.history_ = result.history
        self.stop_reason_ = result.stop_reason
        return self

    @classmethod
    def from_checkpoint(cls, path, mode="mean"):
        model = LipToSpeechModel.from_checkpoint(path)
        cfg = model.config
        est = cls(surrogates=model.surrogates, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                  max_epochs=cfg.max_epochs, max_steps=cfg.max_steps, patience_epochs=cfg.patience_epochs,
                  sampling_source=cfg.sampling_source, variational=cfg.variational, crop_mode=cfg.crop_mode,
                  mode=mode, seed=cfg.seed)
        est.model_ = model
        return est

    def predict(self, X):
        """``X`` is an iterable of ``(frames, voice_reference)`` pairs; returns a list of ``(4F, 80)`` mels."""
        if not hasattr(self, "model_"):
            raise NotFittedError("LipToSpeech is not fitted; call fit or from_checkpoint first")
        return [self.model_.synthesize_mel(frames, voice, self.mode, self.seed + i)
                for i, (frames, voice) in enumerate(X)]
