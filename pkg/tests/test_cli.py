"""CLI contract: exit codes, stream separation, overrides, remote dispatch."""

import json
import os
import socket
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import reason_any_recipe_for
from gradmerge.cli import build_parser, main
from gradmerge.store import open_checkpoint, write_arrays

GOLDEN_HELP = Path(__file__).parent / "golden" / "help"


def write_recipe(tmp_path, recipe, name="recipe.json"):
    path = tmp_path / name
    path.write_text(json.dumps(recipe, indent=1))
    return str(path)


def checkpoint_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def server_url():
    import uvicorn

    from gradmerge.service import create_app

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    config = uvicorn.Config(create_app(), log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(
        target=server.run, kwargs={"sockets": [sock]}, daemon=True
    )
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("test server did not start")
        time.sleep(0.01)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class TestExitCodes:
    def test_merge_success(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        assert main(["merge", recipe]) == 0
        assert os.path.exists(out)

    def test_validation_error_is_one(self, trio, tmp_path, capsys):
        recipe = write_recipe(
            tmp_path,
            reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"), p_t=2.0),
        )
        assert main(["merge", recipe]) == 1
        err = capsys.readouterr().err
        assert "validation: recipe key 'p_t' must be in [0, 1]" in err

    def test_io_error_prefix(self, tmp_path, capsys):
        assert main(["merge", str(tmp_path / "missing.json")]) == 1
        err = capsys.readouterr().err
        assert "io: recipe file not found" in err

    def test_format_error_prefix(self, tmp_path, capsys):
        bad = tmp_path / "recipe.json"
        bad.write_text("{broken")
        assert main(["merge", str(bad)]) == 1
        assert "format: recipe is not valid JSON" in capsys.readouterr().err

    def test_unknown_recipe_key(self, trio, tmp_path, capsys):
        recipe = write_recipe(
            tmp_path,
            reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"), lamda_t=0.5),
        )
        assert main(["merge", recipe]) == 1
        assert "validation: unknown recipe key 'lamda_t'" in capsys.readouterr().err

    def test_missing_required_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["importance", "--model", "x.ckpt"])
        assert exc.value.code == 2

    def test_failed_run_leaves_no_partial_output(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(
            tmp_path,
            reason_any_recipe_for(
                trio, out, report_output=str(tmp_path / "no-dir" / "r.json")
            ),
        )
        assert main(["merge", recipe]) == 1
        assert list(tmp_path.glob("merged*")) == []


class TestStreamSeparation:
    def test_inspect_stdout_is_pure_json(self, trio, capsys):
        assert main(["inspect", trio.base]) == 0
        captured = capsys.readouterr()
        doc = json.loads(captured.out)
        assert doc["tensor_count"] == 4
        assert "inspect config" in captured.err

    def test_logs_resolved_config_first(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        main(["merge", recipe])
        err_lines = capsys.readouterr().err.splitlines()
        config_line = err_lines[0]
        assert config_line.startswith("INFO merge config: ")
        echo = json.loads(config_line.split("merge config: ", 1)[1])
        assert echo["p_t"] == 0.25
        assert echo["lambda_t"] == 1.0
        assert echo["threads"] == 1

    def test_merge_report_to_stdout_without_report_file(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        main(["merge", recipe])
        report = json.loads(capsys.readouterr().out)
        assert report["method"] == "reason-any"

    def test_merge_quiet_stdout_with_report_file(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(
            tmp_path,
            reason_any_recipe_for(
                trio, out, report_output=str(tmp_path / "report.json")
            ),
        )
        main(["merge", recipe])
        assert capsys.readouterr().out == ""

    def test_spectral_report_to_stdout_without_out(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        arrays = {
            f"model.layers.{layer}.self_attn.{kind}_proj.weight":
                rng.standard_normal((5, 4)).astype(np.float32)
            for layer in range(2)
            for kind in ("q", "k", "v", "o")
        }
        grads = str(tmp_path / "grads.ckpt")
        write_arrays(grads, arrays)
        assert main(["spectral", grads]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["entries"]) == 8


class TestOverrides:
    def test_flag_beats_recipe_and_is_logged(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        assert main(["merge", recipe, "--p-t", "0.5"]) == 0
        captured = capsys.readouterr()
        assert "override p_t: flag value 0.5 overrides recipe value 0.25" in captured.err
        report = json.loads(captured.out)
        assert report["recipe"]["p_t"] == 0.5

    def test_output_override(self, trio, tmp_path):
        ignored = str(tmp_path / "ignored.ckpt")
        out = str(tmp_path / "real.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, ignored))
        assert main(["merge", recipe, "--output", out]) == 0
        assert os.path.exists(out)
        assert not os.path.exists(ignored)

    def test_pattern_override(self, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        rc = main(
            ["merge", recipe, "--include-patterns", "layers.0.*",
             "--include-patterns", "layers.1.weight"]
        )
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["recipe"]["include_patterns"] == [
            "layers.0.*", "layers.1.weight",
        ]
        assert "layers.1.bias" in report["skipped"]

    def test_threads_env_default(self, trio, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GRADMERGE_THREADS", "4")
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        assert main(["merge", recipe]) == 0
        config_line = capsys.readouterr().err.splitlines()[0]
        echo = json.loads(config_line.split("merge config: ", 1)[1])
        assert echo["threads"] == 4


class TestDeterminism:
    @pytest.mark.parametrize("method", ["reason-any", "dare"])
    def test_repeat_runs_and_thread_counts_agree(self, trio, tmp_path, method):
        outputs = []
        for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = str(tmp_path / f"{method}.{tag}.ckpt")
            if method == "reason-any":
                recipe = reason_any_recipe_for(trio, out)
            else:
                recipe = {
                    "method": "dare",
                    "base": trio.base,
                    "task_model": trio.task,
                    "reasoning_model": trio.reasoning,
                    "seed": 7,
                    "drop_rate": 0.5,
                    "output": out,
                }
            path = write_recipe(tmp_path, recipe, name=f"{method}.{tag}.json")
            assert main(["merge", path, "--threads", threads]) == 0
            outputs.append(checkpoint_bytes(out))
        assert outputs[0] == outputs[1] == outputs[2]


class TestSubcommands:
    def test_importance_and_inject(self, trio, tmp_path, capsys):
        imp = str(tmp_path / "cli.imp")
        rc = main(
            ["importance", "--model", trio.task, "--calib", trio.calib,
             "--out", imp, "--samples", "6"]
        )
        assert rc == 0
        out = str(tmp_path / "inj.ckpt")
        rc = main(
            ["inject", "--base", trio.base, "--donor", trio.task,
             "--importance", imp, "--p", "0.5", "--direction", "lowest",
             "--output", out, "--lambda", "0.5"]
        )
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["params"]["lambda"] == 0.5
        assert os.path.exists(out)

    def test_importance_bad_samples(self, trio, tmp_path, capsys):
        rc = main(
            ["importance", "--model", trio.task, "--calib", trio.calib,
             "--out", str(tmp_path / "x.imp"), "--samples", "0"]
        )
        assert rc == 1
        assert "validation: sample cap" in capsys.readouterr().err

    def test_experiment_files(self, tmp_path, capsys):
        config = {
            "seed": 3, "input_dim": 5, "hidden_dims": [8], "output_dim": 3,
            "block_a": 2, "train_samples": 16, "calib_samples": 16,
            "steps": 20, "fine_steps": 8, "injection_ratios": [0.1],
            "p_values": [0.1], "lambda_values": [1.0],
        }
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(config))
        out_dir = str(tmp_path / "exp")
        rc = main(
            ["experiment", str(cfg_path), "--kind", "additive", "--out-dir", out_dir]
        )
        assert rc == 0
        assert set(os.listdir(out_dir)) == {"additive.json", "additive.csv"}
        assert capsys.readouterr().out == ""

    def test_experiment_tables_to_stdout(self, tmp_path, capsys):
        config = {
            "seed": 3, "input_dim": 5, "hidden_dims": [8], "output_dim": 3,
            "block_a": 2, "train_samples": 16, "calib_samples": 16,
            "steps": 20, "fine_steps": 8, "injection_ratios": [0.1],
            "p_values": [0.1], "lambda_values": [1.0],
        }
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(config))
        rc = main(["experiment", str(cfg_path), "--kind", "additive"])
        assert rc == 0
        tables = json.loads(capsys.readouterr().out)
        assert "additive" in tables


class TestServerMode:
    def test_merge_via_server(self, server_url, trio, tmp_path, capsys):
        out = str(tmp_path / "merged.ckpt")
        recipe = write_recipe(tmp_path, reason_any_recipe_for(trio, out))
        assert main(["merge", recipe, "--server", server_url]) == 0
        assert os.path.exists(out)
        report = json.loads(capsys.readouterr().out)
        assert report["method"] == "reason-any"

    def test_local_and_remote_outputs_match(self, server_url, trio, tmp_path):
        local = str(tmp_path / "local.ckpt")
        remote = str(tmp_path / "remote.ckpt")
        local_recipe = write_recipe(
            tmp_path, reason_any_recipe_for(trio, local), name="local.json"
        )
        remote_recipe = write_recipe(
            tmp_path, reason_any_recipe_for(trio, remote), name="remote.json"
        )
        assert main(["merge", local_recipe]) == 0
        assert main(["merge", remote_recipe, "--server", server_url]) == 0
        left = checkpoint_bytes(local)
        right = checkpoint_bytes(remote)
        assert left == right

    def test_inspect_via_server(self, server_url, trio, capsys):
        assert main(["inspect", trio.base, "--server", server_url]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["tensor_count"] == 4

    def test_server_error_maps_to_category(self, server_url, trio, tmp_path, capsys):
        recipe = write_recipe(
            tmp_path,
            reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"), p_t=2.0),
        )
        assert main(["merge", recipe, "--server", server_url]) == 1
        assert "validation: recipe key 'p_t'" in capsys.readouterr().err

    def test_unreachable_server(self, trio, tmp_path, capsys):
        recipe = write_recipe(
            tmp_path, reason_any_recipe_for(trio, str(tmp_path / "x.ckpt"))
        )
        rc = main(["merge", recipe, "--server", "http://127.0.0.1:1"])
        assert rc == 1
        assert "io: cannot reach server" in capsys.readouterr().err


class TestHelpSnapshots:
    def subparser(self, parser, name):
        import argparse

        action = next(
            a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
        )
        return action.choices[name]

    @pytest.mark.parametrize(
        "name",
        ["main", "merge", "importance", "spectral", "inject", "inspect",
         "experiment", "serve"],
    )
    def test_help_text_is_stable(self, name, monkeypatch):
        monkeypatch.setenv("COLUMNS", "80")
        parser = build_parser()
        target = parser if name == "main" else self.subparser(parser, name)
        golden = (GOLDEN_HELP / f"{name}.txt").read_text()
        assert target.format_help() == golden
