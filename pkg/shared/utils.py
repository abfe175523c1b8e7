"""
Shared Utilities Module

Configuration loading, file helpers, console logging, fingerprints and
seed derivation used by the CLI, the src modules and the workflows.
"""

import copy
import hashlib
import json
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml


OUTPUT_ROOT_ENV = "DIFFQUANT_OUTPUT_ROOT"


# =============================================================================
# ERRORS
# =============================================================================

class ConfigError(ValueError):
    """Raised for unknown keys, bad types or malformed overrides."""


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact a command depends on does not exist yet."""

    def __init__(self, path: Path, producer: str):
        self.path = Path(path)
        self.producer = producer
        super().__init__(
            f"Missing artifact: {self.path} (produce it first with `{producer}`)"
        )


# =============================================================================
# CONSOLE LOGGING
# =============================================================================

_LEVEL_PREFIX = {"INFO": "ℹ️", "SUCCESS": "✅", "WARNING": "⚠️", "ERROR": "❌"}


def log(message: str, level: str = "INFO", verbose: bool = True):
    """Print a timestamped, level-prefixed message when verbose."""
    if verbose:
        timestamp = datetime.now().strftime("%H:%M:%S")
        prefix = _LEVEL_PREFIX.get(level, "")
        print(f"[{timestamp}] {prefix} {message}")


def print_banner(title: str, verbose: bool = True):
    if verbose:
        print("=" * 60)
        print(title)
        print("=" * 60)


# =============================================================================
# FINGERPRINTS AND SEEDS
# =============================================================================

def fingerprint_payload(payload: Any) -> str:
    """
    Content hash of a JSON-serializable payload.

    Keys are sorted so dict ordering never changes the digest.
    """
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()[:16]


def derive_seed(seed: int, *keys: Any) -> int:
    """
    Derive an independent 63-bit seed from a master seed and a key path.

    Args:
        seed: Master seed
        *keys: Anything identifying the consumer (index, stage name, ...)

    Returns:
        Non-negative integer usable with torch.Generator.manual_seed
    """
    material = ":".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


# =============================================================================
# DICTIONARY UTILITIES
# =============================================================================

def deep_merge(base: Dict, override: Dict) -> Dict:
    """
    Deep merge two dictionaries.

    Args:
        base: Base dictionary
        override: Override dictionary (takes precedence)

    Returns:
        Merged dictionary (base is not mutated)
    """
    result = copy.deepcopy(base)
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def validate_against_schema(config: Dict, schema: Dict, prefix: str = ""):
    """
    Reject keys that the schema does not define and values whose type
    disagrees with the schema default.

    A schema default of None accepts any value. Integers are accepted
    where the default is a float.

    Raises:
        ConfigError: Naming the dotted key at fault
    """
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"Unknown config key: {dotted}")
        default = schema[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key {dotted} must be a section (mapping)")
            validate_against_schema(value, default, prefix=f"{dotted}.")
            continue
        if default is None or value is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = True
        if not ok:
            raise ConfigError(
                f"Config key {dotted} expects {type(default).__name__}, "
                f"got {type(value).__name__} ({value!r})"
            )


def parse_override(text: str) -> Dict[str, Any]:
    """
    Turn a `dotted.key=value` CLI override into a nested dict.

    The value is parsed as YAML so numbers, booleans, null and lists
    get native types.
    """
    if "=" not in text:
        raise ConfigError(f"Override must look like key.path=value, got: {text!r}")
    key_path, raw_value = text.split("=", 1)
    keys = [k for k in key_path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Override has an empty key: {text!r}")
    try:
        value = yaml.safe_load(raw_value) if raw_value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse override value {raw_value!r}: {e}") from e

    nested: Dict[str, Any] = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


# =============================================================================
# FILE UTILITIES
# =============================================================================

def load_yaml(file_path: Path) -> Dict[str, Any]:
    """
    Load YAML file.

    Raises:
        ValueError: If file content is not a dictionary
    """
    with open(file_path, 'r', encoding='utf-8') as f:
        config = yaml.safe_load(f)

    if config is not None and not isinstance(config, dict):
        raise ValueError(f"YAML content of {file_path} must be a dictionary")

    return config or {}


def load_json(file_path: Path) -> Dict[str, Any]:
    with open(file_path, 'r', encoding='utf-8') as f:
        config = json.load(f)

    if not isinstance(config, dict):
        raise ValueError(f"JSON content of {file_path} must be a dictionary/object")

    return config


def load_config_file(file_path: str) -> Dict[str, Any]:
    """
    Load configuration from YAML or JSON file, detected by extension.

    Raises:
        FileNotFoundError: If file doesn't exist
        ValueError: If format is not supported
    """
    path = Path(file_path)

    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {file_path}")

    suffix = path.suffix.lower()

    if suffix in ['.yaml', '.yml']:
        return load_yaml(path)
    elif suffix == '.json':
        return load_json(path)
    else:
        raise ValueError(
            f"Unsupported config format: {suffix}\n"
            f"Supported formats: .yaml, .yml, .json"
        )


def save_json(data: Any, file_path: str, indent: int = 2) -> str:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=indent, sort_keys=True)

    return str(path.absolute())


def save_yaml(data: Dict, file_path: str) -> str:
    """
    Save data to YAML file.

    Returns:
        Absolute path to saved file
    """
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False, allow_unicode=True)

    return str(path.absolute())


def find_config_file(
    config_path: Optional[str] = None,
    search_dirs: Optional[List[Path]] = None,
    config_names: Optional[List[str]] = None
) -> Optional[Path]:
    """
    Find a config file using priority search.

    Args:
        config_path: Explicit config path (highest priority)
        search_dirs: Directories to search in
        config_names: Config file names to look for (in priority order)

    Returns:
        Path to config file or None if not found

    Raises:
        FileNotFoundError: If explicit config_path doesn't exist
    """
    if config_path:
        path = Path(config_path)
        if path.exists():
            return path
        raise FileNotFoundError(f"Config file not found: {config_path}")

    if search_dirs is None:
        search_dirs = [Path.cwd()]

    if config_names is None:
        config_names = ["config.local.yaml", "config.yaml", "config.json"]

    for search_dir in search_dirs:
        for name in config_names:
            config_file = search_dir / name
            if config_file.exists():
                return config_file

    return None


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

# Schema and defaults for every command. Unknown keys are rejected.
DEFAULT_RUN_CONFIG: Dict[str, Any] = {
    "run": {
        "output_dir": "./runs/default",
        "seed": 0,
        "verbose": True,
        "num_threads": None,
    },
    "model": {
        "in_channels": 1,
        "image_size": 16,
        "base_channels": 16,
        "time_embed_dim": 32,
        "hidden_time_dim": 128,
        "cond_embed_dim": 32,
        "ffn_mult": 2,
        "groups": 8,
    },
    "schedule": {
        "T": 100,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "reference_T": None,
    },
    "data": {
        "num_classes": 10,
        "jitter": 1.0,
        "supersample": 4,
        "holdout_size": 512,
    },
    "fp_train": {
        "epochs": 20,
        "steps_per_epoch": 100,
        "batch_size": 64,
        "lr": 2e-3,
        "cond_dropout": 0.1,
        "grad_clip": 1.0,
        "target_loss": 0.35,
        "fd_target": None,
    },
    "feature_extractor": {
        "steps": 400,
        "batch_size": 128,
        "lr": 2e-3,
    },
    "quant": {
        "w_bits": 4,
        "a_bits": 8,
        "multi_timestep": True,
        "quantize_time_layers": False,
        "calib_conditions": 32,
        "calib_interpolate": False,
        "scale_floor": 1e-8,
    },
    "time_cache": {
        "enabled": True,
    },
    "pipeline": {
        "mode": "s2p",
        "num_conditions": 2000,
        "steps_per_prompt": 1,
        "use_eval_guidance": True,
        "generation_batch_size": 128,
    },
    "qat": {
        "iterations": 2000,
        "batch_size": 32,
        "lr_weight": 1e-5,
        "lr_scale": 1e-4,
        "log_every": 100,
        "max_loss": 1e4,
    },
    "distill": {
        "enabled": True,
        "sensitive_profile": "unet",
    },
    "stability": {
        "enabled": True,
        "freeze": True,
        "track_scope": "sensitive",
        "every": 500,
        "threshold": 0.1,
        "momentum": 0.1,
        "grad_window": 200,
    },
    "train_log": {
        "per_layer": True,
    },
    "sampling": {
        "guidance_scale": None,
        "num_images": 16,
        "seed": 1234,
        "save_grid": True,
    },
    "eval": {
        "num_images": 512,
        "seed": 2024,
        "batch_size": 128,
        "shrinkage": 1e-6,
        "pfd_layers": [0, 1, 2],
        "curve_images": 64,
    },
    "experiments": {
        "seeds": [0, 1, 2, 3, 4],
        "compare_modes": ["serial", "parallel", "s2p"],
        "tradeoff": {
            "few_conditions": 40,
            "few_steps_per_prompt": 50,
            "many_conditions": 2000,
            "validation_conditions": 100,
            "validation_steps_per_prompt": 10,
            "checkpoints": 4,
        },
        "ablation_rows": ["Base", "+S2P", "+Time", "+Mstep", "+Distill", "+Freeze"],
    },
}


class RunConfig:
    """
    Resolved configuration for one command invocation.

    Loads YAML/JSON from the first found config file, deep-merges it over
    DEFAULT_RUN_CONFIG, applies `key=value` overrides and the output-root
    environment variable, and validates the result strictly.
    """

    def __init__(self, config_dict: Dict[str, Any], source: Optional[Path] = None):
        validate_against_schema(config_dict, DEFAULT_RUN_CONFIG)
        self._config = deep_merge(DEFAULT_RUN_CONFIG, config_dict)
        self.source = source

    @classmethod
    def load(
        cls,
        config_path: Optional[str] = None,
        overrides: Sequence[str] = (),
        verbose: bool = True,
    ) -> "RunConfig":
        """
        Load run configuration.

        Args:
            config_path: Explicit config file (optional)
            overrides: `dotted.key=value` strings applied last
            verbose: Print which file was used

        Returns:
            RunConfig instance
        """
        project_root = Path(__file__).parent.parent
        search_dirs = [Path.cwd(), project_root]

        config_file = find_config_file(config_path, search_dirs)

        if config_file is None:
            log("No config file found, using defaults", "WARNING", verbose)
            file_config: Dict[str, Any] = {}
        else:
            log(f"Loading config from: {config_file}", "INFO", verbose)
            file_config = load_config_file(str(config_file))
        validate_against_schema(file_config, DEFAULT_RUN_CONFIG)

        merged = deep_merge(DEFAULT_RUN_CONFIG, file_config)
        for text in overrides:
            override = parse_override(text)
            validate_against_schema(override, DEFAULT_RUN_CONFIG)
            merged = deep_merge(merged, override)

        env_root = os.environ.get(OUTPUT_ROOT_ENV)
        if env_root:
            merged["run"]["output_dir"] = env_root

        return cls(merged, source=config_file)

    # -------------------------------------------------------------------------
    # Sections
    # -------------------------------------------------------------------------
    def section(self, name: str) -> Dict[str, Any]:
        if name not in self._config:
            raise ConfigError(f"Unknown config section: {name}")
        return self._config[name]

    def __getitem__(self, name: str) -> Dict[str, Any]:
        return self.section(name)

    def get(self, dotted: str) -> Any:
        node: Any = self._config
        for key in dotted.split("."):
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"Unknown config key: {dotted}")
            node = node[key]
        return node

    @property
    def output_dir(self) -> Path:
        return Path(self._config["run"]["output_dir"])

    @property
    def seed(self) -> int:
        return int(self._config["run"]["seed"])

    @property
    def verbose(self) -> bool:
        return bool(self._config["run"]["verbose"])

    # -------------------------------------------------------------------------
    # Utility Methods
    # -------------------------------------------------------------------------
    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a copy with a nested override dict merged in."""
        validate_against_schema(overrides, DEFAULT_RUN_CONFIG)
        return RunConfig(deep_merge(self._config, overrides), source=self.source)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    def fingerprint(self, *sections: str) -> str:
        """Hash of the named sections (all sections when none given)."""
        names = sections or tuple(sorted(self._config))
        return fingerprint_payload({name: self._config[name] for name in names})

    def write_resolved(self, command: str) -> str:
        """Write the fully-resolved config next to the command's outputs."""
        path = self.output_dir / f"{command}.resolved.yaml"
        return save_yaml(self.to_dict(), str(path))
