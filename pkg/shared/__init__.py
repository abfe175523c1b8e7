"""
Shared utilities package.

Configuration, file helpers, console logging and fingerprints used by the
CLI, the src modules and the workflows.
"""

from .utils import (
    # Constants
    DEFAULT_RUN_CONFIG,
    OUTPUT_ROOT_ENV,
    # Errors
    ConfigError,
    MissingArtifactError,
    # Logging
    log,
    print_banner,
    # Fingerprints and seeds
    fingerprint_payload,
    derive_seed,
    # Dictionary utilities
    deep_merge,
    validate_against_schema,
    parse_override,
    # File utilities
    load_yaml,
    load_json,
    load_config_file,
    save_json,
    save_yaml,
    find_config_file,
    # Run configuration
    RunConfig,
)

__all__ = [
    # Constants
    "DEFAULT_RUN_CONFIG",
    "OUTPUT_ROOT_ENV",
    # Errors
    "ConfigError",
    "MissingArtifactError",
    # Logging
    "log",
    "print_banner",
    # Fingerprints and seeds
    "fingerprint_payload",
    "derive_seed",
    # Dictionary utilities
    "deep_merge",
    "validate_against_schema",
    "parse_override",
    # File utilities
    "load_yaml",
    "load_json",
    "load_config_file",
    "save_json",
    "save_yaml",
    "find_config_file",
    # Run configuration
    "RunConfig",
]
