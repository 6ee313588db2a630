"""casskit: cross-architecture self-supervised pretraining at desk scale.

A conv net and an attention net see the same augmented view; the loss pulls
their normalized logits together and trains both in a single pass.
"""

from .augment import AugmentationPolicy, TransformStep, apply, build_policy
from .backbones import BackboneSpec, DualBackbone, build_backbone, default_spec, pair_backbones, register_backbone
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .config import ExperimentConfig, load_config
from .data import Dataset, DatasetSplit, label_fraction_view, load_image_folder, split_dataset, synth_dataset
from .dino import DinoConfig, dino_baseline_step, run_dino_pretraining
from .errors import CassError, CassRuntimeError, CassValidationError
from .experiment import ComparisonTable, build_table, emit_table, run_experiment
from .finetune import FinetuneConfig, FocalConfig, finetune, focal_loss
from .introspect import ActivationMap, average_attention_maps, extract_attention_map, extract_feature_maps
from .loss import LossConfig, cass_loss, normalize_logits
from .metrics import MetricReport, balanced_accuracy, f1_score
from .pretrain import PretrainConfig, collapse_metric, compare_wallclock, pretrain_step, run_pretraining
from .schedule import CosineSchedule, SWAState, cosine_lr, swa_update

__version__ = "0.1.0"
