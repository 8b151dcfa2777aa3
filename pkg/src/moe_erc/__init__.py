"""Conversational emotion recognition with a gated mixture of speech, text and
multimodal experts, built on a small NumPy reverse-mode autodiff core."""
from .config import ConfigError, RunConfig, build_run_config, load_run_config
from .context_net import CanConfig, ContextNet
from .dataset import Conversation, Dataset, DatasetError, SynthConfig, UtteranceRecord, generate, load_jsonl
from .fusion_net import FusionConfig, FusionNet
from .gate import ExpertLogits, Gate, fuse
from .losses import LossConfig, contrastive_loss, focal_loss, kl_consistency, total_loss
from .metrics import confusion_matrix, per_class_f1, weighted_f1
from .model import VARIANTS, ErcModel, ModelConfig, build_variant
from .tensor import NonFiniteError, Value, no_grad
from .trainer import DivergenceError, TrainConfig, evaluate, grad_check, train

__version__ = "0.1.0"
