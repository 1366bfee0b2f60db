"""Tests for config parsing, presets, and the command-line entry point.

Oracles: pinned preset values, byte comparison of rerun outputs, and direct
replay of written CSV numbers against an in-process run.
"""

import dataclasses
import json
import os

import numpy as np
import pytest

from meritfed.cli import (
    CONFIG_SCHEMA,
    METRICS_COLUMNS,
    OUT_DIR_ENV,
    PRESETS,
    RunConfig,
    THEOREM_COLUMNS,
    WEIGHTS_COLUMNS,
    _method_from_label,
    build_experiment,
    emit_config,
    main,
    parse_config,
    run_config,
)
from meritfed.errors import ConfigError

TINY_OVERRIDES = [
    "group1_count=2",
    "group2_count=1",
    "group3_count=1",
    "shard_size=50",
    "batch_size=10",
    "rounds=3",
    "validation_size=200",
    "methods=meritfed-md,sgd-full",
    "md_steps=5",
    "seeds=2",
]


def tiny_config(extra=()):
    return parse_config("", preset="mean-mu-0.1", overrides=TINY_OVERRIDES + list(extra))


def read_bytes(path):
    with open(path, "rb") as handle:
        return handle.read()


class TestSchema:
    def test_schema_matches_config_fields(self):
        field_names = {f.name for f in dataclasses.fields(RunConfig)} - {"preset"}
        assert field_names == set(CONFIG_SCHEMA)

    def test_every_preset_expands_to_valid_config(self):
        for name in PRESETS:
            config = parse_config("", preset=name)
            assert config.preset == name
            build_experiment(config, master_seed=0)


class TestPresetPins:
    def test_population_mean_preset(self):
        c = parse_config("", preset="mean-mu-0.1")
        assert (c.group1_count, c.group2_count, c.group3_count) == (5, 95, 50)
        assert c.dim == 10
        assert c.group2_shift == 0.1
        assert c.model_step == 0.01
        assert c.rounds == 2000
        assert c.shard_size == 1000 and c.batch_size == 100
        assert c.md_steps == 50 and c.md_lr == 12.5
        assert c.seeds == 3
        assert "meritfed-md" in c.methods and "sgd-ideal" in c.methods
        assert build_experiment(c).n_clients == 150

    def test_small_shift_preset_differs_only_where_expected(self):
        a = parse_config("", preset="mean-mu-0.1")
        b = parse_config("", preset="mean-mu-0.001")
        assert b.group2_shift == 0.001
        assert b.md_lr == 3.5
        same = set(CONFIG_SCHEMA) - {"group2_shift", "md_lr"}
        for key in same:
            assert getattr(a, key) == getattr(b, key), key

    def test_corrupted_worker_preset(self):
        c = parse_config("", preset="byzantine-ipm")
        assert (c.group1_count, c.group2_count, c.group3_count) == (5, 0, 0)
        assert c.byzantine_count == 50
        assert c.attack_kind == "ipm" and c.attack_epsilon == 0.1
        assert c.rounds == 1000 and c.md_steps == 10 and c.md_lr == 3.5
        assert build_experiment(c).n_clients == 55

    def test_classification_preset(self):
        c = parse_config("", preset="softmax-alpha-0.99")
        assert c.task == "softmax"
        assert (c.group1_count, c.group2_count, c.group3_count) == (1, 10, 9)
        assert c.mixing_alpha == 0.99
        assert c.model_step == 0.05 and c.rounds == 300
        assert c.methods == ("meritfed-md", "sgd-ideal")


class TestParsing:
    def test_empty_text_without_preset_lists_all_keys(self):
        with pytest.raises(ConfigError) as err:
            parse_config("")
        message = str(err.value)
        assert "missing required keys" in message
        for key in CONFIG_SCHEMA:
            assert key in message

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match="line 2: unknown key 'granularity'"):
            parse_config("# comment\ngranularity = 3\n", preset="mean-mu-0.1")

    def test_duplicate_key_reports_both_lines(self):
        text = "rounds = 5\nrounds = 6\n"
        with pytest.raises(ConfigError, match="line 2: duplicate key 'rounds'"):
            parse_config(text, preset="mean-mu-0.1")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 1: bad value for 'rounds'"):
            parse_config("rounds = soon\n", preset="mean-mu-0.1")

    def test_missing_equals_reports_line(self):
        with pytest.raises(ConfigError, match="line 1: expected key = value"):
            parse_config("rounds 5\n", preset="mean-mu-0.1")

    def test_unknown_preset_lists_known_names(self):
        with pytest.raises(ConfigError, match="known presets:"):
            parse_config("", preset="mean-mu-5")

    def test_file_keys_override_preset(self):
        c = parse_config("rounds = 7\n", preset="mean-mu-0.1")
        assert c.rounds == 7

    def test_preset_key_inside_file(self):
        c = parse_config("preset = mean-mu-0.01\nrounds = 9\n")
        assert c.preset == "mean-mu-0.01"
        assert c.group2_shift == 0.01
        assert c.rounds == 9

    def test_overrides_apply_last(self):
        c = parse_config("rounds = 7\n", preset="mean-mu-0.1", overrides=["rounds=11"])
        assert c.rounds == 11

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError, match="--set entry 1"):
            parse_config("", preset="mean-mu-0.1", overrides=["rounds"])

    def test_boolean_parsing(self):
        c = parse_config("", preset="theorem-mean", overrides=["exact_gradients=true"])
        assert c.exact_gradients is True
        with pytest.raises(ConfigError, match="bad value for 'exact_gradients'"):
            parse_config("", preset="theorem-mean", overrides=["exact_gradients=yes"])

    def test_emit_parse_round_trip(self):
        for name in PRESETS:
            config = parse_config("", preset=name)
            assert parse_config(emit_config(config)) == config

    def test_emit_parse_round_trip_with_overrides(self):
        config = tiny_config(extra=["md_smoothing=1e-7", "group2_shift=0.12345678901234567"])
        assert parse_config(emit_config(config)) == config

    def test_validation_catches_inconsistent_config(self):
        with pytest.raises(ConfigError):
            parse_config("", preset="mean-mu-0.1", overrides=["byzantine_count=5"])
        with pytest.raises(ConfigError):
            parse_config("", preset="mean-mu-0.1", overrides=["batch_size=5000"])
        with pytest.raises(ConfigError, match="unknown attack_kind"):
            parse_config(
                "",
                preset="byzantine-bf",
                overrides=["attack_kind=mirror"],
            )


class TestMethodLabels:
    def test_solver_step_is_quoted_per_unit_of_model_step(self):
        config = parse_config("", preset="mean-mu-0.1")
        method = _method_from_label("meritfed-md", config)
        assert method.md.step_size == config.md_lr / config.model_step

    def test_minibatch_only_for_stochastic_variant(self):
        config = parse_config("", preset="mean-mu-0.1")
        assert _method_from_label("meritfed-md", config).md.minibatch == 0
        assert _method_from_label("meritfed-smd", config).md.minibatch == config.smd_minibatch
        assert _method_from_label("meritfed-zo", config).md.estimator == "zeroth-order"

    def test_oracle_set_is_target_group(self):
        config = parse_config("", preset="mean-mu-0.1")
        method = _method_from_label("sgd-ideal", config)
        assert method.ideal_indices == (0, 1, 2, 3, 4)

    def test_sampled_count_from_suffix(self):
        config = parse_config("", preset="mean-mu-0.1")
        assert _method_from_label("fedavg-7", config).sample_count == 7
        with pytest.raises(ConfigError, match="bad fedavg sample count"):
            _method_from_label("fedavg-seven", config)

    def test_unknown_label_rejected(self):
        config = parse_config("", preset="mean-mu-0.1")
        with pytest.raises(ConfigError, match="unknown method label"):
            _method_from_label("krum", config)

    def test_tawt_step_falls_back_to_solver_rate(self):
        config = parse_config("", preset="mean-mu-0.1")
        assert config.tawt_step == 0.0
        assert _method_from_label("tawt", config).tawt_step == config.md_lr
        custom = dataclasses.replace(config, tawt_step=2.5)
        assert _method_from_label("tawt", custom).tawt_step == 2.5


class TestBuildExperiment:
    def test_spec_fields_mirror_config(self):
        config = tiny_config()
        spec = build_experiment(config, master_seed=42)
        assert spec.group_counts == (2, 1, 1)
        assert spec.master_seed == 42
        assert spec.rounds == 3
        assert spec.attack is None
        assert [m.label for m in spec.methods] == ["meritfed-md", "sgd-full"]

    def test_attack_built_only_with_byzantine_clients(self):
        config = parse_config(
            "", preset="byzantine-alie", overrides=["rounds=2", "validation_size=100"]
        )
        spec = build_experiment(config)
        assert spec.attack is not None
        assert spec.attack.kind == "alie" and spec.attack.z == 100.0


class TestRunOutputs:
    @pytest.fixture()
    def out_dir(self, tmp_path):
        return str(tmp_path / "out")

    def test_files_written_with_expected_headers(self, out_dir):
        run_config(tiny_config(), out_dir)
        with open(os.path.join(out_dir, "metrics.csv"), encoding="utf-8") as handle:
            assert handle.readline().rstrip("\n") == ",".join(METRICS_COLUMNS)
        with open(os.path.join(out_dir, "weights.csv"), encoding="utf-8") as handle:
            assert handle.readline().rstrip("\n") == ",".join(WEIGHTS_COLUMNS)
        with open(os.path.join(out_dir, "theorem.csv"), encoding="utf-8") as handle:
            assert handle.readline().rstrip("\n") == ",".join(THEOREM_COLUMNS)
        with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as handle:
            manifest = json.load(handle)
        assert manifest["preset"] == "mean-mu-0.1"
        assert manifest["seeds"] == [0, 1]
        assert len(manifest["mixture_directions"]["0"]) == 10

    def test_rows_cover_seeds_rounds_methods(self, out_dir):
        run_config(tiny_config(), out_dir)
        with open(os.path.join(out_dir, "metrics.csv"), encoding="utf-8") as handle:
            rows = [line.rstrip("\n").split(",") for line in handle][1:]
        seeds = {row[0] for row in rows}
        rounds = {row[1] for row in rows}
        methods = {row[2] for row in rows}
        assert seeds == {"0", "1"}
        assert rounds == {"0", "1", "2", "3"}
        assert methods == {"meritfed-md", "sgd-full"}
        assert len(rows) == 2 * 4 * 2

    def test_weight_rows_sum_to_one_per_round(self, out_dir):
        run_config(tiny_config(), out_dir)
        sums: dict = {}
        with open(os.path.join(out_dir, "weights.csv"), encoding="utf-8") as handle:
            next(handle)
            for line in handle:
                seed, rnd, method, client, weight = line.rstrip("\n").split(",")
                key = (seed, rnd, method)
                sums[key] = sums.get(key, 0.0) + float(weight)
                assert float(weight) >= 0.0
        assert sums
        for key, total in sums.items():
            assert abs(total - 1.0) <= 1e-9, key

    def test_written_numbers_round_trip_at_full_precision(self, out_dir):
        # .17g is lossless for doubles: re-reading the final validation loss
        # must reproduce the in-process float bit for bit.
        from meritfed.engine import run_experiment

        config = tiny_config()
        run_config(config, out_dir)
        spec = build_experiment(config, master_seed=0)
        result = run_experiment(spec)
        expected = {
            (m.round_index, m.method): m.val_loss for m in result.metrics
        }
        with open(os.path.join(out_dir, "metrics.csv"), encoding="utf-8") as handle:
            next(handle)
            for line in handle:
                cells = line.rstrip("\n").split(",")
                if cells[0] != "0":
                    continue
                key = (int(cells[1]), cells[2])
                assert float(cells[6]) == expected[key]

    def test_rerun_is_byte_identical(self, tmp_path):
        dir_a, dir_b = str(tmp_path / "a"), str(tmp_path / "b")
        run_config(tiny_config(), dir_a)
        run_config(tiny_config(), dir_b)
        for name in ("metrics.csv", "weights.csv", "theorem.csv", "manifest.json"):
            assert read_bytes(os.path.join(dir_a, name)) == read_bytes(
                os.path.join(dir_b, name)
            ), name

    def test_parallel_workers_match_serial_bytes(self, tmp_path):
        dir_a, dir_b = str(tmp_path / "serial"), str(tmp_path / "parallel")
        run_config(tiny_config(), dir_a, workers=1)
        run_config(tiny_config(), dir_b, workers=2)
        for name in ("metrics.csv", "weights.csv", "theorem.csv", "manifest.json"):
            assert read_bytes(os.path.join(dir_a, name)) == read_bytes(
                os.path.join(dir_b, name)
            ), name

    def test_no_carriage_returns(self, out_dir):
        run_config(tiny_config(), out_dir)
        for name in ("metrics.csv", "weights.csv", "theorem.csv", "manifest.json"):
            data = read_bytes(os.path.join(out_dir, name))
            assert b"\r" not in data
            assert data.endswith(b"\n")


class TestMainEntryPoint:
    def run_args(self, out_dir, extra=()):
        args = ["run", "--preset", "mean-mu-0.1", "--out", out_dir]
        for item in TINY_OVERRIDES:
            args += ["--set", item]
        return args + list(extra)

    def test_successful_run_exit_zero(self, tmp_path, capsys):
        out = str(tmp_path / "cli-out")
        assert main(self.run_args(out)) == 0
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        assert out in capsys.readouterr().out

    def test_seed_flag_overrides_base_seed(self, tmp_path):
        out = str(tmp_path / "seeded")
        assert main(self.run_args(out, extra=["--seed", "17"])) == 0
        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as handle:
            assert json.load(handle)["seeds"] == [17, 18]

    def test_config_error_exit_two(self, tmp_path, capsys):
        assert main(["run", "--preset", "no-such-preset", "--out", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err
        assert (
            main(["run", "--preset", "mean-mu-0.1", "--set", "rounds=x", "--out", str(tmp_path)])
            == 2
        )
        assert main(self.run_args(str(tmp_path), extra=["--workers", "0"])) == 2

    def test_missing_flags_exit_two(self, capsys):
        assert main(["run"]) == 2
        assert "provide --config" in capsys.readouterr().err

    def test_unreadable_config_exit_one(self, tmp_path, capsys):
        missing = str(tmp_path / "absent.cfg")
        assert main(["run", "--config", missing]) == 1
        assert "cannot read config" in capsys.readouterr().err

    def test_config_file_plus_preset_flag(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("rounds = 2\n" + "".join(f"{item}\n" for item in TINY_OVERRIDES if not item.startswith("rounds")), encoding="utf-8")
        out = str(tmp_path / "from-file")
        assert main(["run", "--config", str(path), "--preset", "mean-mu-0.1", "--out", out]) == 0
        with open(os.path.join(out, "metrics.csv"), encoding="utf-8") as handle:
            rounds = {line.split(",")[1] for line in handle.readlines()[1:]}
        assert rounds == {"0", "1", "2"}

    def test_out_dir_env_var(self, tmp_path, monkeypatch):
        target = str(tmp_path / "env-out")
        monkeypatch.setenv(OUT_DIR_ENV, target)
        args = ["run", "--preset", "mean-mu-0.1"]
        for item in TINY_OVERRIDES:
            args += ["--set", item]
        assert main(args) == 0
        assert os.path.exists(os.path.join(target, "metrics.csv"))

    def test_out_flag_beats_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "ignored"))
        out = str(tmp_path / "explicit")
        assert main(self.run_args(out)) == 0
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        assert not os.path.exists(str(tmp_path / "ignored"))

    def test_list_presets(self, capsys):
        assert main(["run", "--list-presets"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out == sorted(PRESETS)

    def test_cli_rerun_byte_identical(self, tmp_path):
        dir_a, dir_b = str(tmp_path / "one"), str(tmp_path / "two")
        assert main(self.run_args(dir_a)) == 0
        assert main(self.run_args(dir_b)) == 0
        for name in ("metrics.csv", "weights.csv", "theorem.csv", "manifest.json"):
            assert read_bytes(os.path.join(dir_a, name)) == read_bytes(
                os.path.join(dir_b, name)
            ), name
