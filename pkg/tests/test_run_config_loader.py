"""Tests for run configuration loading and validation."""

import pytest
import yaml

from app.run_config_loader import RunConfigError, RunConfigLoader, RunConfigValidator, apply_overrides
from models.run_config import RunConfig


class TestRunConfigValidator:
    """Schema validation."""

    def setup_method(self):
        self.validator = RunConfigValidator()

    def test_default_config_is_schema_valid(self):
        """Test the dataclass defaults satisfy the schema."""
        assert self.validator.get_validation_errors(RunConfig().to_dict()) == []

    def test_unknown_key_reported_with_path(self):
        """Test an unknown adapt field is reported with its location."""
        errors = self.validator.get_validation_errors({"adapt": {"momentum": 0.9}})
        assert len(errors) == 1
        assert "momentum" in errors[0]
        assert "path: adapt" in errors[0]

    def test_enum_violation(self):
        """Test an unknown regime is rejected."""
        errors = self.validator.get_validation_errors({"adapt": {"regime": "online"}})
        assert errors and "adapt.regime" in errors[0]

    def test_missing_schema(self, tmp_path):
        """Test a missing schema file raises RunConfigError."""
        with pytest.raises(RunConfigError):
            RunConfigValidator(str(tmp_path / "absent.yaml"))


class TestRunConfigLoader:
    """Loading, overrides and saving."""

    def setup_method(self):
        self.loader = RunConfigLoader()

    def write(self, tmp_path, data):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(data))
        return str(path)

    def test_default_file(self):
        """Test the bundled default run config loads and validates."""
        config = self.loader.load()
        assert config.is_valid()
        assert config.adapt.lr == 0.05
        assert config.prompt.kind == "prependitive"

    def test_missing_sections_keep_defaults(self, tmp_path):
        """Test a partial file fills the rest from the dataclass defaults."""
        config = self.loader.load(self.write(tmp_path, {"adapt": {"steps": 3}}))
        assert config.adapt.steps == 3
        assert config.model == RunConfig().model

    def test_overrides(self, tmp_path):
        """Test CLI overrides replace single fields."""
        config = self.loader.load(self.write(tmp_path, {}), {"regime": "pla", "lifecycle": "continual",
                                                              "tau": 0.5, "seed": 7, "steps": None})
        assert config.adapt.regime == "pla"
        assert config.adapt.tau == 0.5
        assert config.seed == 7
        assert config.adapt.steps == RunConfig().adapt.steps

    def test_invalid_pair_rejected(self, tmp_path):
        """Test sia/continual fails semantic validation and names the valid pairs."""
        with pytest.raises(RunConfigError) as excinfo:
            self.loader.load(self.write(tmp_path, {"adapt": {"regime": "sia", "lifecycle": "continual"}}))
        assert "sia/episodic" in str(excinfo.value)

    def test_schema_error(self, tmp_path):
        """Test a schema violation is reported before conversion."""
        with pytest.raises(RunConfigError, match="schema"):
            self.loader.load(self.write(tmp_path, {"model": {"d": "wide"}}))

    def test_cross_field_error(self, tmp_path):
        """Test a width not divisible by the head count fails validation."""
        with pytest.raises(RunConfigError, match="divisible"):
            self.loader.load(self.write(tmp_path, {"model": {"d": 10, "heads": 4}}))

    def test_missing_file(self, tmp_path):
        """Test a missing file raises RunConfigError."""
        with pytest.raises(RunConfigError, match="not found"):
            self.loader.load(str(tmp_path / "absent.yaml"))

    def test_non_mapping(self, tmp_path):
        """Test a file holding a list is rejected."""
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(RunConfigError, match="mapping"):
            self.loader.load(str(path))

    def test_unknown_override(self):
        """Test an override name outside the supported flags is rejected."""
        with pytest.raises(RunConfigError):
            apply_overrides(RunConfig(), {"momentum": 0.1})

    def test_save_and_reload(self, tmp_path):
        """Test a saved config reloads to an equal config."""
        config = self.loader.load(overrides={"regime": "pla", "lifecycle": "continual"})
        path = self.loader.save(config, str(tmp_path / "nested" / "run_config.json"))
        assert self.loader.load(str(path)) == config
