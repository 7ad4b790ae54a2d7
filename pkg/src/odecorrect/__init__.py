"""Coarse-step ODE simulation with learned, in-context error correction."""

from .dataset import Corpus, CorpusRecord, DemoPair, PromptInstance, generate_corpus, make_error_labels
from .integrators import IntegrationConfig, StepScheme, Trajectory, integrate, simulate
from .model import PRESETS, CorrectorTransformer, ModelConfig, TrainConfig, Trainer, predict_correction
from .systems import SystemId, get_system, load_registry, rhs

__version__ = "0.1.0"
