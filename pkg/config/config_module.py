import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from core.core_module import ConfigError, ContractViolation
from discriminator.discriminator_module import MlpSpec
from smoothness.smoothness_module import SmoothnessConfig
from trainer.trainer_module import TrainConfig

logger = logging.getLogger(__name__)

DATA_KEYS: Dict[str, Dict[str, Any]] = {
    "two_circles": {"n_per_class": 300, "test_per_class": 300, "r_inner": 1.0, "r_outer": 2.0,
                    "noise_sigma": 0.1, "seed": 0},
    "idx": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
            "classes": None, "per_class": None, "test_per_class": None, "standardize": True, "protocol": "train"},
    "csv": {"path": None, "test_path": None, "label_column": None, "standardize": False},
}
REQUIRED_DATA_KEYS = {"idx": ["train_images", "train_labels"], "csv": ["path"]}
PROTOCOLS = ("train", "clustering")

MODEL_KEYS = {"hidden_dims", "num_classes", "batchnorm"}
TRAIN_KEYS = {"lambda", "rho", "batch_size", "epochs", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
              "epsilon", "confidence_divergence", "objective", "labeled_per_class"}
SMOOTHNESS_KEYS = {"k", "m", "grid", "divergence"}
HEATMAP_KEYS = {"bbox", "resolution"}
TOP_KEYS = {"name", "seed", "out", "deterministic", "model", "train", "smoothness", "data",
            "checkpoint_every", "snapshot_epochs", "heatmap", "log_level", "log_file"}


@dataclass
class DataConfig:
    """Dataset selection: `kind` picks the loader, `options` its arguments (defaults filled in)."""
    kind: str
    options: Dict[str, Any] = field(default_factory=dict)


@dataclass
class HeatmapConfig:
    bbox: List[float] = field(default_factory=lambda: [-3.0, 3.0, -3.0, 3.0])
    resolution: int = 100


@dataclass
class RunConfig:
    """
    Everything a training run needs. Built by `load_run_config`, which
    rejects unknown keys.
    """
    name: str
    model: MlpSpec
    train: TrainConfig
    data: DataConfig
    out: str = "runs/default"
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 0
    snapshot_epochs: List[int] = field(default_factory=list)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    log_level: str = "INFO"
    log_file: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Config echo for the run manifest, in the file layout."""
        train = {k: v for k, v in asdict(self.train).items()
                 if k not in ("smoothness", "lam", "seed", "progress")}
        train["lambda"] = self.train.lam
        train["confidence_divergence"] = self.train.confidence_divergence.value
        smooth = self.train.smoothness
        return {
            "name": self.name, "seed": self.seed, "out": self.out, "deterministic": self.deterministic,
            "model": {"hidden_dims": self.model.hidden_dims, "num_classes": self.model.num_classes,
                      "batchnorm": self.model.batchnorm},
            "train": train,
            "smoothness": {"k": smooth.k, "m": smooth.m, "grid": smooth.grid, "divergence": smooth.divergence.value},
            "data": {"kind": self.data.kind, **self.data.options},
            "checkpoint_every": self.checkpoint_every, "snapshot_epochs": list(self.snapshot_epochs),
            "heatmap": asdict(self.heatmap), "log_level": self.log_level, "log_file": self.log_file,
        }


def _block(raw: Dict[str, Any], key: str, allowed: set, diagnostics: List[str], required: bool = False) -> Dict[str, Any]:
    value = raw.get(key)
    if value is None:
        if required:
            diagnostics.append(f"{key}: missing section")
        return {}
    if not isinstance(value, dict):
        diagnostics.append(f"{key}: expected a mapping, got {type(value).__name__}")
        return {}
    for unknown in sorted(set(value) - allowed):
        diagnostics.append(f"{key}.{unknown}: unknown key")
    return {k: v for k, v in value.items() if k in allowed}


# field kinds checked before any dataclass is built
DATA_TYPES: Dict[str, Dict[str, str]] = {
    "two_circles": {"n_per_class": "pos_int", "test_per_class": "opt_nonneg_int", "r_inner": "number",
                    "r_outer": "number", "noise_sigma": "nonneg_number", "seed": "nonneg_int"},
    "idx": {"train_images": "opt_str", "train_labels": "opt_str", "test_images": "opt_str", "test_labels": "opt_str",
            "classes": "opt_int_list", "per_class": "opt_pos_int", "test_per_class": "opt_pos_int",
            "standardize": "bool", "protocol": "str"},
    "csv": {"path": "opt_str", "test_path": "opt_str", "label_column": "opt_str", "standardize": "bool"},
}
MODEL_TYPES = {"hidden_dims": "int_list", "num_classes": "int", "batchnorm": "bool_or_list"}
TRAIN_TYPES = {"lambda": "nonneg_number", "rho": "number", "batch_size": "int", "epochs": "int",
               "learning_rate": "number", "adam_beta1": "number", "adam_beta2": "number", "adam_eps": "number",
               "epsilon": "number", "confidence_divergence": "str", "objective": "str",
               "labeled_per_class": "opt_pos_int"}
SMOOTHNESS_TYPES = {"k": "int", "m": "int", "grid": "number_list", "divergence": "str"}
TOP_TYPES = {"name": "str", "seed": "nonneg_int", "out": "str", "deterministic": "bool",
             "checkpoint_every": "nonneg_int", "snapshot_epochs": "pos_int_list", "log_level": "str", "log_file": "opt_str"}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _type_ok(value: Any, kind: str) -> bool:
    if kind.startswith("opt_"):
        return value is None or _type_ok(value, kind[4:])
    if kind.endswith("_list"):
        item = kind[:-5]
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    if kind == "bool_or_list":
        return isinstance(value, bool) or _type_ok(value, "bool_list")
    checks = {
        "int": _is_int,
        "pos_int": lambda v: _is_int(v) and v >= 1,
        "nonneg_int": lambda v: _is_int(v) and v >= 0,
        "number": _is_number,
        "nonneg_number": lambda v: _is_number(v) and v >= 0,
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
    }
    return checks[kind](value)


def _check_types(values: Dict[str, Any], types: Dict[str, str], prefix: str, diagnostics: List[str]) -> bool:
    """Appends one diagnostic per field of the wrong type; True when all fields are fine."""
    ok = True
    for key, value in values.items():
        kind = types.get(key)
        if kind is not None and not _type_ok(value, kind):
            expected = kind.replace('opt_', 'optional ').replace('_', ' ')
            diagnostics.append(f"{prefix}{key}: expected {expected}, got {value!r}")
            ok = False
    return ok


def _data_config(raw: Dict[str, Any], diagnostics: List[str]) -> Optional[DataConfig]:
    block = raw.get("data")
    if not isinstance(block, dict):
        diagnostics.append("data: missing section" if block is None else "data: expected a mapping")
        return None
    kind = block.get("kind")
    if kind not in DATA_KEYS:
        diagnostics.append(f"data.kind: expected one of {sorted(DATA_KEYS)}, got {kind!r}")
        return None
    defaults = DATA_KEYS[kind]
    for unknown in sorted(set(block) - set(defaults) - {"kind"}):
        diagnostics.append(f"data.{unknown}: unknown key for kind {kind!r}")
    options = {k: block.get(k, v) for k, v in defaults.items()}
    if not _check_types(options, DATA_TYPES[kind], "data.", diagnostics):
        return None
    for key in REQUIRED_DATA_KEYS.get(kind, []):
        if not options.get(key):
            diagnostics.append(f"data.{key}: required for kind {kind!r}")
    if kind == "idx" and options["protocol"] not in PROTOCOLS:
        diagnostics.append(f"data.protocol: expected one of {PROTOCOLS}, got {options['protocol']!r}")
    if kind == "two_circles" and not 0 < options["r_inner"] < options["r_outer"]:
        diagnostics.append("data.r_inner: expected 0 < r_inner < r_outer")
    return DataConfig(kind, options)


def _heatmap_config(heat_raw: Dict[str, Any], diagnostics: List[str]) -> Optional[HeatmapConfig]:
    heatmap = HeatmapConfig(**heat_raw)
    ok = True
    if not (_type_ok(heatmap.bbox, "number_list") and len(heatmap.bbox) == 4):
        diagnostics.append(f"heatmap.bbox: expected [xmin, xmax, ymin, ymax], got {heatmap.bbox!r}")
        ok = False
    elif not (heatmap.bbox[0] < heatmap.bbox[1] and heatmap.bbox[2] < heatmap.bbox[3]):
        diagnostics.append("heatmap.bbox: expected xmin < xmax and ymin < ymax")
        ok = False
    if not (_is_int(heatmap.resolution) and heatmap.resolution >= 2):
        diagnostics.append(f"heatmap.resolution: expected an integer of at least 2, got {heatmap.resolution!r}")
        ok = False
    return heatmap if ok else None


def parse_run_config(raw: Any) -> RunConfig:
    """
    Validates a parsed config document and builds the RunConfig.

    Raises:
        ConfigError: With one diagnostic per problem found.
    """
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    diagnostics: List[str] = [f"{k}: unknown key" for k in sorted(set(raw) - TOP_KEYS)]
    present = {k: v for k, v in raw.items() if k in TOP_TYPES and v is not None}
    top_ok = _check_types(present, TOP_TYPES, "", diagnostics)
    model_raw = _block(raw, "model", MODEL_KEYS, diagnostics, required=True)
    train_raw = _block(raw, "train", TRAIN_KEYS, diagnostics, required=True)
    smooth_raw = _block(raw, "smoothness", SMOOTHNESS_KEYS, diagnostics)
    heat_raw = _block(raw, "heatmap", HEATMAP_KEYS, diagnostics)
    data = _data_config(raw, diagnostics)
    heatmap = _heatmap_config(heat_raw, diagnostics)
    model_ok = _check_types(model_raw, MODEL_TYPES, "model.", diagnostics)
    train_ok = _check_types(train_raw, TRAIN_TYPES, "train.", diagnostics)
    train_ok = _check_types(smooth_raw, SMOOTHNESS_TYPES, "smoothness.", diagnostics) and train_ok
    seed = (raw.get("seed") or 0) if top_ok else 0
    deterministic = bool(raw.get("deterministic"))

    model = train = None
    input_dim = 2 if data is not None and data.kind == "two_circles" else 1
    if model_ok:
        try:
            model = MlpSpec(input_dim=input_dim, hidden_dims=model_raw.get("hidden_dims", []),
                            num_classes=model_raw.get("num_classes", 0), batchnorm=model_raw.get("batchnorm", True))
        except (ContractViolation, ValueError) as e:
            diagnostics.append(f"model: {e}")
    if train_ok:
        try:
            smoothness = SmoothnessConfig(**smooth_raw)
            kwargs = {k: v for k, v in train_raw.items() if k != "lambda"}
            train = TrainConfig(lam=float(train_raw.get("lambda", 1.0)), seed=seed, smoothness=smoothness, **kwargs)
            if model is not None:
                train.validate(model.num_classes)
        except (ContractViolation, ValueError) as e:
            diagnostics.append(f"train: {e}")
    if diagnostics:
        raise ConfigError(diagnostics)
    name = raw.get("name") or "run"
    return RunConfig(name=name, model=model, train=train, data=data, out=raw.get("out") or f"runs/{name}", seed=seed,
                     deterministic=deterministic, checkpoint_every=raw.get("checkpoint_every") or 0,
                     snapshot_epochs=list(raw.get("snapshot_epochs") or []), heatmap=heatmap,
                     log_level=raw.get("log_level") or "INFO", log_file=raw.get("log_file"))


def load_run_config(path: str) -> RunConfig:
    """Reads a YAML or JSON run config from disk."""
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: {e}"]) from e
    cfg = parse_run_config(raw)
    logger.info(f"Loaded run config '{cfg.name}' from {path}")
    return cfg
