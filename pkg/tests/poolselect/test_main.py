import dataclasses
import io
import json
import pathlib
import typing

import pytest

import poolselect
from poolselect import training
from poolselect.agent import AgentParams, load_checkpoint
from poolselect.error import DegenerateDistributionError, NumericError, ShapeError
from poolselect.pool import PoolSet
from poolselect.world import World, save_world
from tests.resources import fixture_path


@pytest.fixture
def world_path(tiny_world: World, tmp_path: pathlib.Path) -> pathlib.Path:
    path = tmp_path / "world.json"
    save_world(tiny_world, path)
    return path


class TestHandleException:
    @pytest.mark.parametrize(
        "ex, status",
        [
            (ShapeError("bad"), 2),
            (NumericError("bad"), 3),
            (DegenerateDistributionError("bad"), 3),
            (KeyError("bad"), 1),
        ],
    )
    def test_status(self, ex: Exception, status: int) -> None:
        output = io.StringIO()
        assert poolselect._handle_exception(ex, output) == status
        assert json.loads(output.getvalue())["type"] == ex.__class__.__name__

    def test_message(self) -> None:
        output = io.StringIO()
        poolselect._handle_exception(ShapeError("Mismatch"), output)
        assert output.getvalue() == '{"message":"Mismatch","type":"ShapeError"}'


class TestTrainFailure:
    def test_numeric_error_keeps_last_good_checkpoint(
        self,
        world_path: pathlib.Path,
        tmp_path: pathlib.Path,
        monkeypatch: pytest.MonkeyPatch,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        real_train = training.train

        def diverging_train(
            world: World,
            pools: PoolSet,
            config: training.TrainConfig,
            on_epoch_end: typing.Callable[[int, AgentParams], None] | None = None,
        ) -> training.TrainResult:
            result = real_train(
                world, pools, dataclasses.replace(config, epochs=1)
            )
            assert on_epoch_end is not None
            on_epoch_end(0, result.params)
            raise NumericError("Gradient is not finite")

        monkeypatch.setattr(training, "train", diverging_train)
        out = tmp_path / "run"
        status = poolselect.main(
            [
                "train",
                "--world",
                str(world_path),
                "--pools",
                fixture_path("pools-small.json"),
                "--config",
                fixture_path("train-tiny.json"),
                "--out",
                str(out),
            ]
        )

        assert status == 3
        captured = capsys.readouterr()
        assert captured.out == ""
        assert json.loads(captured.err) == {
            "type": "NumericError",
            "message": "Gradient is not finite",
        }
        load_checkpoint(out / "checkpoint-last-good.json")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["artifacts"]["checkpoint-last-good"] == "checkpoint-last-good.json"
        assert not (out / "checkpoint.json").exists()


class TestMain:
    def test_train_then_eval(
        self,
        world_path: pathlib.Path,
        tmp_path: pathlib.Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        run = tmp_path / "run"
        status = poolselect.main(
            [
                "train",
                "--world",
                str(world_path),
                "--pools",
                fixture_path("pools-small.json"),
                "--config",
                fixture_path("train-tiny.json"),
                "--out",
                str(run),
            ]
        )
        assert status == 0
        assert json.loads(capsys.readouterr().out)["steps"] == 4

        status = poolselect.main(
            [
                "eval",
                "--world",
                str(world_path),
                "--pools",
                fixture_path("pools-small.json"),
                "--checkpoint",
                str(run / "checkpoint.json"),
                "--config",
                fixture_path("protocol-tiny.json"),
                "--out",
                str(tmp_path / "eval"),
            ]
        )
        assert status == 0
        report = json.loads(capsys.readouterr().out)
        assert sum(report["selection_histogram"].values()) == pytest.approx(1.0)

    def test_invalid_log_level_from_environment(
        self,
        tmp_path: pathlib.Path,
        monkeypatch: pytest.MonkeyPatch,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        monkeypatch.setenv("POOLSELECT_LOG", "chatty")
        status = poolselect.main(["gen-world", "--out", str(tmp_path / "world.json")])
        assert status == 2
        assert json.loads(capsys.readouterr().err) == {
            "type": "ConfigError",
            "message": "Invalid log level 'chatty'",
        }

    def test_malformed_pools(
        self, world_path: pathlib.Path, tmp_path: pathlib.Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        status = poolselect.main(
            [
                "train",
                "--world",
                str(world_path),
                "--pools",
                fixture_path("malformed.json"),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert status == 2
        assert "Malformed JSON" in json.loads(capsys.readouterr().err)["message"]

    def test_malformed_world_snapshot(
        self, world_path: pathlib.Path, tmp_path: pathlib.Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        document = json.loads(world_path.read_text())
        del document["samples"][0]["quality"]["gait"]
        world_path.write_text(json.dumps(document))

        status = poolselect.main(
            [
                "train",
                "--world",
                str(world_path),
                "--pools",
                fixture_path("pools-small.json"),
                "--config",
                fixture_path("train-tiny.json"),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert status == 2
        assert json.loads(capsys.readouterr().err) == {
            "type": "ConfigError",
            "message": "Malformed world snapshot: 'gait'",
        }
