"""Run configuration loading and validation."""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema
import yaml

from app.config import DEFAULT_RUN_FILE, SCHEMA_FILE
from models.adaptation_config import AdaptationConfig
from models.model_config import PromptSpec, ViTConfig
from models.run_config import DataSpec, DomainSpec, RunConfig, TrainSpec

logger = logging.getLogger(__name__)

# CLI flag -> (section, field)
OVERRIDE_FIELDS = {
    "regime": ("adapt", "regime"),
    "lifecycle": ("adapt", "lifecycle"),
    "steps": ("adapt", "steps"),
    "lr": ("adapt", "lr"),
    "tau": ("adapt", "tau"),
    "prompt_kind": ("prompt", "kind"),
    "seed": (None, "seed"),
}


class RunConfigError(Exception):
    """Exception raised for unreadable or invalid run configurations."""
    pass


class RunConfigValidator:
    """Validates run configuration dictionaries against the JSON schema."""

    def __init__(self, schema_path: Optional[str] = None):
        """Initialize validator with schema file.

        Args:
            schema_path: Path to YAML schema file. If None, uses default schema.
        """
        self.schema_path = Path(schema_path) if schema_path else SCHEMA_FILE
        try:
            with open(self.schema_path, "r", encoding="utf-8") as f:
                self._schema = yaml.safe_load(f)
        except FileNotFoundError:
            raise RunConfigError(f"Schema file not found: {self.schema_path}")
        except yaml.YAMLError as e:
            raise RunConfigError(f"Invalid schema YAML: {e}")

    def get_validation_errors(self, data: Dict[str, Any]) -> List[str]:
        """Get list of validation errors without raising exceptions."""
        try:
            validator = jsonschema.Draft7Validator(self._schema)
            errors = []
            for error in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
                message = error.message
                if error.absolute_path:
                    message += f" at path: {'.'.join(str(p) for p in error.absolute_path)}"
                errors.append(message)
            return errors
        except jsonschema.SchemaError as e:
            return [f"Invalid schema: {e.message}"]


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build the dataclass tree; absent sections and fields keep their defaults."""
    data = data or {}
    data_section = dict(data.get("data", {}))
    if "domains" in data_section:
        data_section["domains"] = [DomainSpec(**d) for d in data_section["domains"]]
    prompt_section = dict(data.get("prompt", {}))
    if prompt_section.get("placements") is not None:
        prompt_section["placements"] = list(prompt_section["placements"])
    return RunConfig(
        model=ViTConfig(**data.get("model", {})),
        prompt=PromptSpec(**prompt_section),
        adapt=AdaptationConfig(**data.get("adapt", {})),
        data=DataSpec(**data_section),
        train=TrainSpec(**data.get("train", {})),
        output_dir=data.get("output_dir", "runs"),
        seed=data.get("seed", 0),
    )


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Replace individual fields from CLI flags; ``None`` values are ignored."""
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in OVERRIDE_FIELDS:
            raise RunConfigError(f"unknown override '{key}'")
        section, name = OVERRIDE_FIELDS[key]
        if section is None:
            config = replace(config, **{name: value})
        else:
            config = replace(config, **{section: replace(getattr(config, section), **{name: value})})
    return config


class RunConfigLoader:
    """Loads run configurations from JSON or YAML files."""

    def __init__(self, schema_path: Optional[str] = None):
        self.validator = RunConfigValidator(schema_path)

    def read(self, file_path: Optional[str] = None) -> Dict[str, Any]:
        """Parse a config file into a dictionary (JSON is read as YAML)."""
        path = Path(file_path) if file_path else DEFAULT_RUN_FILE
        if not path.exists():
            raise RunConfigError(f"Run config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise RunConfigError(f"Invalid config format in {path}: {e}")
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise RunConfigError(f"Run config {path} must contain a mapping")
        return data

    def load(self, file_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Load, schema-check, convert and semantically validate a run config.

        Raises:
            RunConfigError: Listing every problem found
        """
        data = self.read(file_path)
        errors = self.validator.get_validation_errors(data)
        if errors:
            raise RunConfigError("Run config failed schema validation:\n" + "\n".join(f"- {e}" for e in errors))
        try:
            config = apply_overrides(run_config_from_dict(data), overrides or {})
        except TypeError as e:
            raise RunConfigError(f"Error converting run config: {e}")

        validation_errors = config.validate()
        if validation_errors:
            raise RunConfigError("Run config validation failed:\n" + "\n".join(f"- {e}" for e in validation_errors))
        logger.debug(f"Loaded run config from {file_path or DEFAULT_RUN_FILE}")
        return config

    def save(self, config: RunConfig, file_path: str) -> Path:
        """Persist the effective config as JSON so the run can be replayed."""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = config.to_dict()
        errors = self.validator.get_validation_errors(data)
        if errors:
            raise RunConfigError("Refusing to save an invalid run config:\n" + "\n".join(errors))
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return path
