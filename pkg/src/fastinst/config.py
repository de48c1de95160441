"""Run configuration: a nested key/value tree with strict keys and dotted overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Optional

from .losses import LossSwitches, LossWeights
from .model import ModelConfig
from .scenes import AugmentConfig, DatasetSpec

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "num_classes": 3,
        "image_size": [96, 96],
        "instances_min": 2,
        "instances_max": 6,
        "min_instance_area": 16,
        "num_images": 8,
        "seed": 0,
        "augment": True,
        "short_edge": [64, 128],
        "max_long_edge": 172,
    },
    "pixel": {"dim": 32, "use_ppm": True},
    "query": {"na": 16, "nb": 8, "pos": "learnable", "source_level": "E4", "local_max_first": True},
    "decoder": {"d": 1, "heads": 4, "ffn_dim": None, "order": "pixel-then-query"},
    "loss": {
        "lambda_cls": 2.0,
        "lambda_ce": 5.0,
        "lambda_dice": 5.0,
        "lambda_cls_q": 20.0,
        "lambda_loc": 1000.0,
        "no_object_weight": 0.1,
        "use_gt_guidance": True,
        "use_location_cost": True,
        "use_bipartite": True,
    },
    "train": {
        "base_lr": 1e-4,
        "weight_decay": 0.05,
        "backbone_lr_mult": 0.1,
        "decay_fractions": [0.9, 0.95],
        "decay_factor": 0.1,
        "batch_size": 4,
        "total_iters": 5000,
        "seed": 0,
        "checkpoint_every": 1000,
        "eval_every": 0,
    },
    "eval": {"max_dets": 100},
    "bench": {"warmup": 3, "iters": 20, "input_size": [96, 96]},
}

# Settings from the original full-scale protocol, for reference runs on real hardware.
FULL_SCALE_PROFILE = {
    "data.image_size": [640, 640],
    "data.short_edge": [416, 640],
    "data.max_long_edge": 864,
    "pixel.dim": 256,
    "query.na": 100,
    "query.nb": 8,
    "decoder.d": 3,
    "decoder.ffn_dim": 1024,
    "decoder.heads": 8,
    "train.batch_size": 16,
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _check_type(key: str, default: Any, value: Any) -> Any:
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(key, f"expected integer or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(key, f"expected list of length {len(default)}, got {value!r}")
        return [_check_type(f"{key}[{i}]", d, v) for i, (d, v) in enumerate(zip(default, value))]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {value!r}")
        return value
    raise ConfigError(key, "unsupported default type")


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    def __init__(self, tree: Optional[dict] = None):
        self.tree = copy.deepcopy(DEFAULTS)
        if tree:
            self.merge_tree(tree)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            tree = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(str(path), "top level must be an object")
        return cls(tree)

    def merge_tree(self, tree: dict, prefix: str = "") -> None:
        for section, body in tree.items():
            if section not in self.tree:
                raise ConfigError(prefix + section, "unknown section")
            if not isinstance(body, dict):
                raise ConfigError(prefix + section, "section must be an object")
            for key, value in body.items():
                self.set(f"{section}.{key}", value)

    def set(self, dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in self.tree or parts[1] not in self.tree[parts[0]]:
            raise ConfigError(dotted, "unknown configuration key")
        section, key = parts
        self.tree[section][key] = _check_type(dotted, DEFAULTS[section][key], value)

    def update(self, overrides: Iterable[tuple[str, Any]]) -> "RunConfig":
        for k, v in overrides:
            self.set(k, v)
        return self

    def get(self, dotted: str) -> Any:
        section, key = dotted.split(".")
        return self.tree[section][key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def to_json(self) -> str:
        return json.dumps(self.tree, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    # -- typed views -------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        d = self.tree["data"]
        return DatasetSpec(d["num_classes"], tuple(d["image_size"]), (d["instances_min"], d["instances_max"]),
                           d["min_instance_area"], d["seed"], d["num_images"])

    def augment_config(self) -> AugmentConfig:
        d = self.tree["data"]
        return AugmentConfig(tuple(d["short_edge"]), d["max_long_edge"], tuple(d["image_size"]))

    def model_config(self) -> ModelConfig:
        p, q, d = self.tree["pixel"], self.tree["query"], self.tree["decoder"]
        return ModelConfig(num_classes=self.tree["data"]["num_classes"], dim=p["dim"], use_ppm=p["use_ppm"],
                           na=q["na"], nb=q["nb"], pos=q["pos"], source_level=q["source_level"],
                           local_max_first=q["local_max_first"], layers=d["d"], heads=d["heads"],
                           ffn_dim=d["ffn_dim"], order=d["order"])

    def loss_weights(self) -> LossWeights:
        l = self.tree["loss"]
        return LossWeights(cls=l["lambda_cls"], ce=l["lambda_ce"], dice=l["lambda_dice"],
                           cls_q=l["lambda_cls_q"], loc=l["lambda_loc"], no_object=l["no_object_weight"])

    def loss_switches(self) -> LossSwitches:
        l = self.tree["loss"]
        return LossSwitches(l["use_gt_guidance"], l["use_location_cost"], l["use_bipartite"])
