"""
Named presets and run-config resolution.

Resolution order, later wins: preset <- config file <- command line flags.
Derived fields (``model.au_vocab``, ``model.phoneme_vocab``,
``vq.feature_dim`` and the per-stage training seeds) follow the values they
depend on unless a layer sets them explicitly.
"""

import json
from typing import Dict, List, Optional, Text

from loguru import logger
from pydantic import ValidationError

from maulab import exceptions, utils
from maulab.models import PresetEnum, RunConfig

DESK_PRESET: Dict = {
    "preset": "desk",
    "corpus": {
        "phoneme_count": 32,
        "accent_count": 8,
        "feature_dim": 16,
        "noise_scale": 0.1,
        "min_separation": 0.7,
        "error_rate": 0.5,
        "len_range": [8, 20],
        "dur_range": [3, 8],
        "counts": {"l1_train": 300, "l2_train": 150, "l2_test": 60},
    },
    "vq": {
        "codebook_size": 64,
        "code_dim": 16,
        "temperature": 1.0,
        "downsample_stride": 2,
        "downsample_kernel": 3,
        "diversity_weight": 0.1,
        "model_dim": 64,
        "ff_dim": 128,
        "heads": 2,
        "encoder_blocks": 1,
        "decoder_blocks": 1,
    },
    "vq_train": {
        "base_lr": 0.5,
        "schedule": "warmup",
        "warmup_steps": 200,
        "model_dim_for_schedule": 64,
        "max_steps": 600,
        "batch_size": 8,
        "log_every": 50,
        "checkpoint_every": 200,
    },
    "model": {
        "model_dim": 64,
        "ff_dim": 128,
        "heads": 2,
        "encoder_layers": 2,
        "decoder_layers": 2,
        "front_conv_layers": 2,
        "encoder_front_kernel": 3,
        "decoder_front_kernel": 5,
    },
    "detector_train": {
        "base_lr": 0.5,
        "schedule": "warmup",
        "warmup_steps": 200,
        "model_dim_for_schedule": 64,
        "max_steps": 2000,
        "batch_size": 16,
        "log_every": 100,
        "checkpoint_every": 500,
    },
    "corrector_train": {
        "base_lr": 1e-4,
        "schedule": "constant",
        "max_steps": 800,
        "batch_size": 16,
        "log_every": 100,
        "checkpoint_every": 400,
    },
    "spans": {"span_divisor": 10, "k_max": 10},
    "detection": {"threshold": 0.4, "au_mask_threshold": 0.5, "head_reduction": "mean"},
    "holdout_l1": 30,
}

# Table 1 dimensions, constructible but far too slow for a single core
PAPER_PRESET: Dict = utils.deep_merge(
    DESK_PRESET,
    {
        "preset": "paper",
        "corpus": {"feature_dim": 80},
        "vq": {
            "codebook_size": 512,
            "code_dim": 64,
            "model_dim": 384,
            "ff_dim": 1536,
            "heads": 2,
            "encoder_blocks": 3,
            "decoder_blocks": 3,
            "encoder_kernel": 31,
            "decoder_kernel": 31,
        },
        "vq_train": {"base_lr": 1.0, "warmup_steps": 4000, "model_dim_for_schedule": 384},
        "model": {
            "model_dim": 512,
            "ff_dim": 1024,
            "heads": 4,
            "encoder_layers": 6,
            "decoder_layers": 12,
        },
        "detector_train": {"base_lr": 1.0, "warmup_steps": 4000, "model_dim_for_schedule": 512},
    },
)

# minimal sizes for fast tests of the full pipeline
SMOKE_PRESET: Dict = utils.deep_merge(
    DESK_PRESET,
    {
        "preset": "smoke",
        "corpus": {
            "phoneme_count": 8,
            "accent_count": 3,
            "feature_dim": 6,
            "len_range": [3, 6],
            "dur_range": [2, 4],
            "counts": {"l1_train": 12, "l2_train": 6, "l2_test": 4},
        },
        "vq": {
            "codebook_size": 8,
            "code_dim": 4,
            "model_dim": 8,
            "ff_dim": 16,
            "heads": 2,
            "encoder_kernel": 3,
            "decoder_kernel": 3,
        },
        "vq_train": {"max_steps": 6, "batch_size": 4, "warmup_steps": 3, "log_every": 2, "checkpoint_every": 3},
        "model": {
            "model_dim": 8,
            "ff_dim": 16,
            "heads": 2,
            "encoder_layers": 1,
            "decoder_layers": 1,
            "front_conv_layers": 1,
        },
        "detector_train": {
            "max_steps": 6,
            "batch_size": 4,
            "warmup_steps": 3,
            "log_every": 2,
            "checkpoint_every": 3,
        },
        "corrector_train": {"max_steps": 4, "batch_size": 4, "log_every": 2, "checkpoint_every": 2},
        "spans": {"k_max": 4},
        "detection": {"sweep": [0.2, 0.4, 0.6]},
        "holdout_l1": 3,
    },
)

PRESETS: Dict[PresetEnum, Dict] = {
    PresetEnum.DESK: DESK_PRESET,
    PresetEnum.PAPER: PAPER_PRESET,
    PresetEnum.SMOKE: SMOKE_PRESET,
}

TRAIN_SECTIONS = ("vq_train", "detector_train", "corrector_train")


def _explicit(layers: List[Dict], section: Text, key: Text) -> bool:
    return any(key in (layer.get(section) or {}) for layer in layers)


def preset_mapping(preset: PresetEnum) -> Dict:
    try:
        return utils.deep_merge(PRESETS[PresetEnum(preset)], {})
    except ValueError:
        raise exceptions.ConfigError(
            f"unknown preset: {preset}, choose from {[p.value for p in PresetEnum]}"
        )


def resolve_run_config(
    preset: Optional[Text] = None,
    file_overrides: Optional[Dict] = None,
    flag_overrides: Optional[Dict] = None,
) -> RunConfig:
    """merge preset, config file and flags into one validated RunConfig

    Args:
        preset: preset name, falls back to the file's ``preset`` key, then desk
        file_overrides: parsed config file content
        flag_overrides: nested mapping built from command line flags

    Raises:
        exceptions.ConfigError: unknown preset or invalid merged values

    """
    file_overrides = file_overrides or {}
    flag_overrides = flag_overrides or {}
    layers = [file_overrides, flag_overrides]

    name = preset or flag_overrides.get("preset") or file_overrides.get("preset") or "desk"
    merged = preset_mapping(name)
    for layer in layers:
        merged = utils.deep_merge(merged, layer)
    merged["preset"] = PresetEnum(name).value

    merged.setdefault("model", {})
    merged.setdefault("vq", {})
    corpus = merged.get("corpus", {})
    vq = merged["vq"]
    if not _explicit(layers, "model", "au_vocab"):
        merged["model"]["au_vocab"] = int(vq.get("codebook_size", 64)) + 1
    if not _explicit(layers, "model", "phoneme_vocab"):
        merged["model"]["phoneme_vocab"] = int(corpus.get("phoneme_count", 32))
    if not _explicit(layers, "vq", "feature_dim"):
        vq["feature_dim"] = int(corpus.get("feature_dim", 16))

    seed = int(merged.get("seed", 0))
    for section in TRAIN_SECTIONS:
        merged.setdefault(section, {})
        if not _explicit(layers, section, "seed"):
            merged[section]["seed"] = seed

    try:
        run_config = RunConfig.parse_obj(merged)
    except ValidationError as ex:
        raise exceptions.ConfigError(f"RunConfig ValidationError:\n{ex}")

    logger.debug(f"resolved {run_config.preset.value} config, seed {run_config.seed}")
    return run_config


def run_config_digest(run_config: RunConfig) -> Text:
    return utils.config_digest(run_config_mapping(run_config))


def run_config_mapping(run_config: RunConfig) -> Dict:
    """json-safe mapping of a resolved config, enums as plain values"""
    return json.loads(run_config.json())
