"""Lightweight aggregation of per-slice CT features into a patient-level diagnosis."""

from .data import (
    Diagnosis, FeatureVolume, SynthConfig, generate_synthetic, load_manifest, read_volume,
    split_dataset, write_volume,
)
from .loss import AdamState, adam_step, cce_grad_logits, class_weights_from_counts, softmax, weighted_cce
from .model import (
    MsNetArch, MsNetModel, init_model, load_checkpoint, param_count, receptive_field,
    save_checkpoint,
)
from .train import EvalReport, TrainConfig, benchmark, evaluate, predict, train

__version__ = "0.1.0"
