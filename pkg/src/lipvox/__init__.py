"""Lip-to-speech synthesis via latent distribution matching, at desk scale."""

from .audio import MelSpectrogram, Waveform, griffin_lim, load_wav, melspectrogram, save_wav
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, load_config
from .corpus import Corpus, CorpusManifest, generate_corpus, sample_window
from .embedders import Surrogates, load_surrogates, pretrain_surrogates, save_surrogates
from .inference import LipToSpeechModel, SynthesisRequest, eval_corpus, generative_strength, synthesize
from .losses import LossWeights
from .metrics import FeatureSet, extract_features, fdsd, kdsd, sed, unique_percentage
from .training import finetune, train

__version__ = "0.1.0"
