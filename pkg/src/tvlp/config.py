"""Run configuration: JSON document with strict keys and dot-path overrides."""

import copy
import json

from .image_encoder import EncoderConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "n_studies": 2400,
        "fraction_with_prior": 0.68,
        "image_size": 64,
        "split_fractions": [0.8, 0.1, 0.1],
        "max_findings": 1,
    },
    "model": {
        "image_size": 64,
        "grid_size": 8,
        "image_dim": 64,
        "image_layers": 2,
        "image_heads": 4,
        "use_temporal_encodings": True,
        "use_decomposition": True,
        "text_dim": 64,
        "text_heads": 4,
        "text_layers": 2,
        "max_text_len": 64,
        "joint_dim": 32,
        "projection_hidden": 64,
    },
    "losses": {
        "global_weight": 1.0,
        "local_weight": 0.5,
        "mlm_weight": 1.0,
        "nce_temperature": 0.07,
        "local_attn_temperature": 0.1,
        "mask_probability": 0.45,
    },
    "train": {
        "batch_size": 32,
        "epochs": 30,
        "base_lr": 3e-4,
        "warmup_fraction": 0.03,
        "weight_decay": 0.01,
        "augment": True,
        "rotation_deg": 30.0,
        "shear_deg": 15.0,
        "brightness": 0.1,
        "contrast": 0.1,
    },
    "downstream": {
        "decoder_epochs": 12,
        "decoder_lr": 3e-4,
        "decoder_batch_size": 16,
        "use_prior_image": True,
        "use_prior_report": True,
        "use_sep": True,
        "prior_report_dropout": 0.0,
        "max_report_len": 24,
        "probe_epochs": 40,
        "probe_lr": 1e-3,
        "probe_label_fraction": 0.1,
    },
    "metrics": {
        "iou_thresholds": [0.1, 0.2, 0.3, 0.4, 0.5],
        "sentence_folds": 10,
        "sentence_step": 0.005,
        "curation_margin": 0.2,
        "curation_candidates": 3,
        "delta_min_sentences": 10,
    },
}

# Config overlays for the single-mechanism ablation arms.
ABLATIONS = {
    "no_temporal_encodings": {"model.use_temporal_encodings": False},
    "no_decomposition": {"model.use_decomposition": False},
    "no_mlm_loss": {"losses.mlm_weight": 0.0},
    "no_local_loss": {"losses.local_weight": 0.0},
    "no_prior_image": {"downstream.use_prior_image": False},
    "no_prior_report": {"downstream.use_prior_report": False},
    "no_prior_inputs": {"downstream.use_prior_image": False,
                        "downstream.use_prior_report": False},
    "no_sep": {"downstream.use_sep": False},
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def _validate(node, template, path):
    for key, value in node.items():
        if key not in template:
            raise ConfigError(f"unknown config key '{path}{key}'")
        ref = template[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}{key}' must be a section")
            _validate(value, ref, f"{path}{key}.")


def validate_config(cfg):
    _validate(cfg, DEFAULTS, "")
    return cfg


def merge_config(partial):
    """Full config from defaults overlaid with ``partial`` (validated)."""
    validate_config(partial)
    cfg = default_config()

    def merge(dst, src):
        for key, value in src.items():
            if isinstance(value, dict):
                merge(dst[key], value)
            else:
                dst[key] = value

    merge(cfg, partial)
    return cfg


def load_config(path):
    with open(path) as fh:
        return merge_config(json.load(fh))


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


def apply_override(cfg, dotted_key, raw_value):
    """Set ``a.b.c=value`` with the value parsed as JSON (bare strings allowed)."""
    keys = dotted_key.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config section '{key}' in '{dotted_key}'")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted_key}'")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[keys[-1]] = value
    return cfg


def apply_ablation(cfg, name):
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{name}' (valid: {sorted(ABLATIONS)})")
    cfg = copy.deepcopy(cfg)
    for key, value in ABLATIONS[name].items():
        apply_override(cfg, key, json.dumps(value))
    return cfg


# -- builders -------------------------------------------------------------------


def model_config(cfg):
    m = cfg["model"]
    loss = cfg["losses"]
    image = EncoderConfig(
        image_size=m["image_size"], grid_size=m["grid_size"], dim=m["image_dim"],
        n_layers=m["image_layers"], n_heads=m["image_heads"],
        use_temporal_encodings=m["use_temporal_encodings"],
        use_decomposition=m["use_decomposition"])
    return ModelConfig(
        image=image, text_dim=m["text_dim"], text_heads=m["text_heads"],
        text_layers=m["text_layers"], max_text_len=m["max_text_len"],
        joint_dim=m["joint_dim"], projection_hidden=m["projection_hidden"],
        nce_temperature=loss["nce_temperature"],
        local_attn_temperature=loss["local_attn_temperature"],
        mask_probability=loss["mask_probability"],
        loss_weights={"global": loss["global_weight"],
                      "local": loss["local_weight"],
                      "mlm": loss["mlm_weight"]})


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        batch_size=t["batch_size"], epochs=t["epochs"], base_lr=t["base_lr"],
        warmup_fraction=t["warmup_fraction"], weight_decay=t["weight_decay"],
        seed=cfg["seed"], augment=t["augment"], rotation_deg=t["rotation_deg"],
        shear_deg=t["shear_deg"], brightness=t["brightness"], contrast=t["contrast"])


def decoder_config(cfg):
    from .downstream import DecoderFinetuneConfig
    d = cfg["downstream"]
    return DecoderFinetuneConfig(
        epochs=d["decoder_epochs"], lr=d["decoder_lr"],
        batch_size=d["decoder_batch_size"], seed=cfg["seed"],
        use_prior_image=d["use_prior_image"], use_prior_report=d["use_prior_report"],
        use_sep=d["use_sep"], prior_report_dropout=d["prior_report_dropout"])
