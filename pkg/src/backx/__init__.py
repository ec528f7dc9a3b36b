"""Backdoor-based benchmark for attribution methods.

Plant a controllable trigger in a classifier, explain the trojaned
predictions with a family of attribution methods, and score each method by
how well its top pixels recover poisoned samples to clean predictions.
"""

__version__ = "0.1.0"

from . import attribution, backdoor, data, evaluation, harness, models, reporting
from .attribution import METHODS, AttributionConfig, AttributionMap, attribute, preset
from .backdoor import (
    PoisonPlan,
    PoisonedDataset,
    TriggerSpec,
    TrojanModelCard,
    build_patch_trigger,
    make_sample_specific_trigger,
    make_watermark_trigger,
    poison_dataset,
    stamp,
    trojan_train,
    verify_trojan,
)
from .data import DatasetHandle, ImageBatch, load_dataset, synthesize_dataset
from .errors import BackxError, GateFailure
from .evaluation import (
    EvalPairs,
    MetricReport,
    RecoveryMask,
    attack_success_rate,
    combined_flc,
    fractional_change,
    recover_sample,
    sweep_recovery_rates,
    topk_mask,
    trigger_recall,
)
from .harness import ExperimentConfig, cmd_all, desk_config, load_config, make_config
from .models import ModelHandle, OutputSelector, TrainingSchedule, create_model, fit

__all__ = [
    "__version__",
    "METHODS",
    "AttributionConfig",
    "AttributionMap",
    "attribute",
    "preset",
    "PoisonPlan",
    "PoisonedDataset",
    "TriggerSpec",
    "TrojanModelCard",
    "build_patch_trigger",
    "make_sample_specific_trigger",
    "make_watermark_trigger",
    "poison_dataset",
    "stamp",
    "trojan_train",
    "verify_trojan",
    "DatasetHandle",
    "ImageBatch",
    "load_dataset",
    "synthesize_dataset",
    "BackxError",
    "GateFailure",
    "EvalPairs",
    "MetricReport",
    "RecoveryMask",
    "attack_success_rate",
    "combined_flc",
    "fractional_change",
    "recover_sample",
    "sweep_recovery_rates",
    "topk_mask",
    "trigger_recall",
    "ExperimentConfig",
    "cmd_all",
    "desk_config",
    "load_config",
    "make_config",
    "ModelHandle",
    "OutputSelector",
    "TrainingSchedule",
    "create_model",
    "fit",
    "attribution",
    "backdoor",
    "data",
    "evaluation",
    "harness",
    "models",
    "reporting",
]
