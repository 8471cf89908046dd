"""Contrastive learning with mutual-information maximization for domain adaptation.

Desk-scale numpy implementation: a feed-forward encoder over fixed-width
features, InfoNCE on a projection head, a gated mutual-information term on
unlabeled predictions, and source-only / DANN baselines.
"""

from ._kernels import BACKEND
from .core import ContractError, DomainError, EvaluationError, GradTape, adamw_step, cosine_similarity, grad_check, log_softmax, lr_at
from .data import PRESETS, AugmentPolicy, DomainPreset, Example, Pool, ShiftParams, synth_generate
from .losses import LossConfig, domain_ce, info_nce, mi_loss, sentiment_ce, total_loss
from .model import ModelParams, ModelSpec, dann_lambda, init_params
from .training import TrainConfig, train, train_base

__version__ = "0.1.0"
