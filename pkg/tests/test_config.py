"""Tests for configuration and the command line:
- Flat key-value parsing
- Validation errors surfaced as ConfigError
- CLI overrides and the config hash
- Exit codes of main()
"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

from config import (
    ExperimentConfig, build_experiment_config, load_experiment_config, parse_config_text,
)
from errors import ConfigError
from main import EXIT_CONFIG, EXIT_OK, main

SAMPLE = """
# sin_elliptic marginal sweep
seed = 7
model = sin_elliptic
grid.T = 1
grid.N = 4, 8, 16   # dyadic
grid.m = auto
mesh.nodes = 1024
"""


class TestParsing(unittest.TestCase):
    """parse_config_text and build_experiment_config."""

    def test_sections_lists_and_comments(self):
        """Dotted keys nest, commas make lists, comments are dropped."""
        data = parse_config_text(SAMPLE)
        self.assertEqual(data["seed"], "7")
        self.assertEqual(data["model"], {"name": "sin_elliptic"})
        self.assertEqual(data["grid"]["N"], ["4", "8", "16"])
        self.assertEqual(data["grid"]["m"], "auto")

    def test_validated_types(self):
        """Strings are coerced by the config models; m = auto means the default."""
        config = build_experiment_config(parse_config_text(SAMPLE))
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.grid.N, [4, 8, 16])
        self.assertIsNone(config.grid.m)
        self.assertEqual(config.mesh.nodes, 1024)
        self.assertEqual(config.model.name, "sin_elliptic")

    def test_model_parameters(self):
        """model.params.* fill the parameter dictionary."""
        data = parse_config_text("seed = 1\nmodel = bm_drift\nmodel.params.b = 0.3\n")
        config = build_experiment_config(data)
        self.assertEqual(config.model.name, "bm_drift")
        self.assertEqual(config.model.params, {"b": 0.3})

    def test_single_n(self):
        """A single N becomes a one-element list."""
        config = build_experiment_config(parse_config_text("seed = 1\ngrid.N = 32\n"))
        self.assertEqual(config.grid.N, [32])

    def test_malformed_line(self):
        """A line without '=' names its line number."""
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text("seed = 1\ngrid.N 8\n")
        self.assertIn("line 2", str(ctx.exception))


class TestValidation(unittest.TestCase):
    """Invalid configs raise ConfigError with the offending key."""

    def test_seed_required(self):
        """No wall-clock default for the seed."""
        with self.assertRaises(ConfigError) as ctx:
            build_experiment_config({"grid": {"N": [8, 16]}})
        self.assertEqual(ctx.exception.key, "seed")

    def test_n_list_must_increase(self):
        """N-lists are strictly increasing."""
        with self.assertRaises(ConfigError) as ctx:
            build_experiment_config({"seed": 1, "grid": {"N": [16, 8]}})
        self.assertTrue(ctx.exception.key.startswith("grid.N"))

    def test_unknown_key(self):
        """Unknown sections or fields are rejected."""
        with self.assertRaises(ConfigError):
            build_experiment_config({"seed": 1, "grid": {"steps": 4}})

    def test_too_few_samples(self):
        """M must be at least 100."""
        with self.assertRaises(ConfigError):
            build_experiment_config({"seed": 1, "samples": {"M": 10}})

    def test_unknown_score_mode(self):
        """score_mode is one of the four documented modes."""
        with self.assertRaises(ConfigError):
            build_experiment_config({"seed": 1, "bridge": {"score_mode": "exact"}})


class TestOverrides(unittest.TestCase):
    """with_overrides and config_hash."""

    def setUp(self):
        self.config = build_experiment_config({"seed": 1, "workers": 1})

    def test_none_leaves_value(self):
        """None overrides keep the file setting."""
        self.assertEqual(self.config.with_overrides(seed=None).seed, 1)

    def test_dotted_override(self):
        """Dotted keys reach into sections."""
        config = self.config.with_overrides(**{"seed": 9, "output.dir": "elsewhere"})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.output.dir, "elsewhere")

    def test_invalid_override(self):
        """An override that fails validation is a ConfigError."""
        with self.assertRaises(ConfigError):
            self.config.with_overrides(workers=0)

    def test_hash_ignores_runtime_keys(self):
        """Workers and output paths do not change the hash; the seed does."""
        base = self.config.config_hash()
        self.assertEqual(self.config.with_overrides(workers=8).config_hash(), base)
        self.assertEqual(self.config.with_overrides(**{"output.dir": "x"}).config_hash(), base)
        self.assertNotEqual(self.config.with_overrides(seed=2).config_hash(), base)
        self.assertEqual(len(base), 64)

    def test_defaults(self):
        """Unset sections take their documented defaults."""
        config = ExperimentConfig(seed=3)
        self.assertEqual(config.fill.nodes, 48)
        self.assertEqual(config.bridge.level, 4)
        self.assertEqual(config.mesh.nodes, 4096)


class TestMain(unittest.TestCase):
    """Exit codes and outputs of the command line."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _write(self, name: str, text: str) -> str:
        path = self.tmp / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    def test_missing_seed_exit_code(self):
        """A config without a seed exits with 2."""
        conf = self._write("bad.conf", "grid.N = 8, 16\n")
        self.assertEqual(main(["verify", "--config", conf]), EXIT_CONFIG)

    def test_missing_file_exit_code(self):
        """A config path that does not exist exits with 2."""
        self.assertEqual(main(["verify", "--config", str(self.tmp / "none.conf")]), EXIT_CONFIG)

    def test_inconsistent_grid_exit_code(self):
        """A coarse factor larger than N is a usage error, not a traceback."""
        conf = self._write("grid.conf", "seed = 1\nmodel = bm_drift\ngrid.N = 8, 16, 32\n"
                                        "grid.m = 64\nsamples.M = 100\n")
        code = main(["pathwise-rate", "--config", conf, "--out", str(self.tmp / "out")])
        self.assertEqual(code, EXIT_CONFIG)

    def test_non_dyadic_n_list_exit_code(self):
        """A non-dyadic N-list is rejected with the config exit code."""
        conf = self._write("strong.conf", "seed = 1\nmodel = bm_drift\ngrid.N = 8, 12, 16\n"
                                          "samples.M = 100\n")
        code = main(["strong-rate", "--config", conf, "--out", str(self.tmp / "out")])
        self.assertEqual(code, EXIT_CONFIG)

    def test_ot_check_writes_outputs(self):
        """ot-check passes and writes report.json and rows.csv to --out."""
        conf = self._write("ot.conf", "seed = 20240611\nverify.ot_instances = 20\n")
        out = self.tmp / "out"
        self.assertEqual(main(["ot-check", "--config", conf, "--out", str(out)]), EXIT_OK)
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        self.assertEqual(report["experiment"], "ot-check")
        self.assertEqual(len((out / "rows.csv").read_text().splitlines()), 21)

    def test_shipped_configs_load(self):
        """Every config under configs/ validates."""
        root = Path(__file__).resolve().parent.parent / "configs"
        files = sorted(root.glob("*.conf"))
        self.assertTrue(files)
        for path in files:
            self.assertEqual(load_experiment_config(path).seed, 20240611, path.name)


if __name__ == "__main__":
    unittest.main()
