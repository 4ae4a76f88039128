"""Run configuration: defaults, YAML loading, dotted-key overrides, seeding."""

import copy
import hashlib

import yaml

from .anatomy import CropPolicy
from .encoders import EncoderConfig
from .normality import VQVAEConfig
from .phantom import PhantomSpec


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


DEFAULTS = {
    "seed": 0,
    "data": {
        "volume_shape": [64, 64, 32],
        "anatomy_count": 5,
        "anomaly_types": ["blob", "texture", "shrink"],
        "anomaly_prevalence": 0.3,
        "intensity_range": [-1000.0, 1000.0],
        "blob_fraction": [0.01, 0.05],
        "blob_contrast": 500.0,
        "organ_level_range": [0.35, 0.85],
        "texture_sigma": 200.0,
        "n_train": 512,
        "n_val": 64,
        "n_test": 128,
    },
    "model": {
        "stage_channels": [16, 32, 64],
        "token_dim": 128,
        "query_dim": 128,
        "heads": 4,
        "queries_per_anatomy": 1,
        "use_positional": True,
        "text_layers": 2,
        "momentum": 0.99,
    },
    "vqvae": {
        "codes_per_anatomy": 16,
        "code_dim": 64,
        "heads": 4,
        "layers": 2,
        "decay": 0.99,
        "epsilon": 1.0e-5,
        "beta": 0.25,
    },
    "loss": {
        "alignment_temperature": 0.07,
        "disease_temperature": 0.07,
        "supcon_normalization": False,
    },
    "train": {
        "batch_size": 16,
        "patch_shape": [48, 48, 24],
        "epochs": {"s1": 10, "s2": 10, "s3": 10, "s4": 5},
        "peak_lr": 3.0e-4,
        "warmup_epochs": 1,
        "min_lr": 1.0e-6,
        "s3_cached_tokens": True,
    },
    "eval": {
        "near_zero_threshold": 0.05,
        "probe_epochs": 50,
    },
}

# The paper-scale preset is kept for reference only; it is not CPU-feasible here.
PAPER_SCALE_OVERRIDES = {
    "vqvae": {"codes_per_anatomy": 100, "code_dim": 1024},
    "train": {"epochs": {"s1": 60, "s2": 30, "s3": 60, "s4": 30}},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            raise ConfigError(str(path), "config file must hold a mapping")
        cfg = deep_merge(cfg, user)
    for item in overrides or []:
        apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, item: str) -> None:
    """Apply one dotted-key override of the form a.b.c=value (YAML-parsed)."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, raw = item.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(key, "unknown config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown config key")
    node[parts[-1]] = yaml.safe_load(raw)


def derive_seed(root_seed: int, name: str) -> int:
    """Stable substream seed from (root seed, stage name)."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFF


def phantom_spec(cfg: dict, seed=None) -> PhantomSpec:
    d = cfg["data"]
    return PhantomSpec(
        volume_shape=tuple(d["volume_shape"]),
        anatomy_count=int(d["anatomy_count"]),
        anomaly_types=tuple(d["anomaly_types"]),
        anomaly_prevalence=d["anomaly_prevalence"],
        intensity_range=tuple(d["intensity_range"]),
        blob_fraction=tuple(d["blob_fraction"]),
        blob_contrast=float(d["blob_contrast"]),
        organ_level_range=tuple(d["organ_level_range"]),
        texture_sigma=float(d["texture_sigma"]),
        seed=int(cfg["seed"] if seed is None else seed),
    )


def encoder_config(cfg: dict) -> EncoderConfig:
    m = cfg["model"]
    stride = 8
    grid = tuple(int(v) // stride for v in cfg["data"]["volume_shape"])
    return EncoderConfig(
        anatomy_count=int(cfg["data"]["anatomy_count"]),
        stage_channels=tuple(m["stage_channels"]),
        token_dim=int(m["token_dim"]),
        query_dim=int(m["query_dim"]),
        heads=int(m["heads"]),
        queries_per_anatomy=int(m["queries_per_anatomy"]),
        use_positional=bool(m["use_positional"]),
        grid_shape=grid,
        text_layers=int(m["text_layers"]),
        text_dim=int(m["query_dim"]),
        momentum=float(m["momentum"]),
        stride=stride,
    )


def vqvae_config(cfg: dict) -> VQVAEConfig:
    v = cfg["vqvae"]
    return VQVAEConfig(
        anatomy_count=int(cfg["data"]["anatomy_count"]),
        token_dim=int(cfg["model"]["token_dim"]),
        code_dim=int(v["code_dim"]),
        codes_per_anatomy=int(v["codes_per_anatomy"]),
        heads=int(v["heads"]),
        layers=int(v["layers"]),
        decay=float(v["decay"]),
        epsilon=float(v["epsilon"]),
        beta=float(v["beta"]),
    )


def crop_policy(cfg: dict) -> CropPolicy:
    return CropPolicy(patch_shape=tuple(cfg["train"]["patch_shape"]))
