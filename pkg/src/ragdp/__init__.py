"""Retrieval-augmented differentially private diffusion training on toy data."""

from .accountant import PrivacyLedger, calibrate_sigma, record_step, rdp_per_step, to_dp
from .config import ExperimentConfig, load_config
from .data import Dataset, generate_dataset
from .diffusion import Denoiser, forward_diffuse, make_schedule, sample_full, sample_partial
from .dp import DpConfig, dp_finetune, rag_diffusion_loss, rag_inference
from .features import extract_features, train_extractor
from .kb import KnowledgeBase, build_kb, load_kb, query, save_kb
from .metrics import coverage, fit_gaussian, frechet_distance
from .nn import DenseNet, adam_step, per_example_gradients

__version__ = "0.1.0"
