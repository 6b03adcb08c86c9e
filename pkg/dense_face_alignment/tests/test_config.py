"""
Tests for configuration loading, overrides and validation.
"""

import os
import tempfile
import unittest

import yaml

from dense_face_alignment.config import (
    RESOLVED_CONFIG_NAME,
    apply_overrides,
    datagen_config,
    default_config,
    load_config,
    model_config,
    solver_options,
    train_schedule,
    validate_config,
    write_resolved_config,
)
from dense_face_alignment.errors import ConfigError


class TestConfig(unittest.TestCase):
    """Test cases for configuration handling."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def write_yaml(self, data) -> str:
        path = os.path.join(self.tmp.name, "config.yaml")
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f)
        return path

    def test_defaults_validate(self):
        """Test that the built-in defaults form a valid configuration."""
        config = load_config()
        self.assertEqual(config, default_config())
        self.assertEqual(solver_options(config).w_exp, 1000.0)

    def test_file_overrides_defaults(self):
        """Test that file values replace defaults and leave other keys alone."""
        path = self.write_yaml({"fit": {"max_iters": 7}, "datagen": {"image_size": 32}})
        config = load_config(path)
        self.assertEqual(config["fit"]["max_iters"], 7)
        self.assertEqual(config["datagen"]["image_size"], 32)
        self.assertEqual(config["datagen"]["count"], default_config()["datagen"]["count"])

    def test_unknown_section_and_key(self):
        """Test that unknown sections and keys are rejected."""
        with self.assertRaises(ConfigError):
            load_config(self.write_yaml({"logging": {"level": "debug"}}))
        with self.assertRaises(ConfigError):
            load_config(self.write_yaml({"fit": {"max_iterations": 3}}))

    def test_missing_and_unparsable_file(self):
        """Test that a missing file and invalid YAML are reported distinctly."""
        with self.assertRaises(FileNotFoundError):
            load_config(os.path.join(self.tmp.name, "absent.yaml"))
        path = os.path.join(self.tmp.name, "broken.yaml")
        with open(path, "w", encoding="utf-8") as f:
            f.write("fit: [unclosed\n")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_out_of_range_values(self):
        """Test that typed-view range checks surface as configuration errors."""
        for override in ("datagen.image_size=16", "fit.depth_model=affine", "run.threads=0",
                         "bench.mode=oracle", "bench.subsets=[]", "network.input_size=40"):
            with self.assertRaises(ConfigError, msg=override):
                validate_config(apply_overrides(default_config(), [override]))

    def test_overrides_parse_yaml_values(self):
        """Test that override values are parsed as YAML and may reach nested keys."""
        config = apply_overrides(default_config(), [
            "fit.irls=true", "run.output_dir=out/run1", "train.pretrain.steps=5", "bench.subsets=[all]",
        ])
        self.assertIs(config["fit"]["irls"], True)
        self.assertEqual(config["run"]["output_dir"], "out/run1")
        self.assertEqual(train_schedule(config).pretrain.steps, 5)
        self.assertEqual(config["bench"]["subsets"], ["all"])

    def test_malformed_overrides(self):
        """Test that overrides without a value or a section are rejected."""
        for override in ("fit.irls", "irls=true", "fit.bogus=1"):
            with self.assertRaises(ConfigError, msg=override):
                apply_overrides(default_config(), [override])

    def test_run_seed_reaches_every_section(self):
        """Test that the run seed is the seed of the model, data and training views."""
        config = apply_overrides(default_config(), ["run.seed=42"])
        self.assertEqual(model_config(config).seed, 42)
        self.assertEqual(datagen_config(config).seed, 42)
        self.assertEqual(train_schedule(config).seed, 42)
        self.assertNotIn("seed", config["model"])

    def test_resolved_config_snapshot(self):
        """Test that the resolved configuration reloads to the same values."""
        config = apply_overrides(default_config(), ["fit.max_iters=9"])
        path = write_resolved_config(config, os.path.join(self.tmp.name, "run"))
        self.assertEqual(os.path.basename(path), RESOLVED_CONFIG_NAME)
        self.assertEqual(load_config(path), config)


if __name__ == "__main__":
    unittest.main()
