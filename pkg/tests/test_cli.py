"""Tests for the command-line interface."""

import json

import pytest

from insegan import cli
from insegan.checkpoint import save_checkpoint
from insegan.cli import build_parser, main
from insegan.config import TrainConfig, save_config
from insegan.dataset import read_manifest, read_scene
from insegan.inference import mask_name, write_mask
from insegan.metrics import EvalReport

GEN_ARGS = ["--n", "2", "--count", "6", "--size", "64", "--val", "1", "--test", "2", "--seed", "5"]


class TestGenData:
    """Tests for the gen-data subcommand."""

    def test_same_seed_same_directory(self, tmp_path) -> None:
        assert main(["-q", "gen-data", *GEN_ARGS, "--out", str(tmp_path / "a")]) == 0
        assert main(["-q", "gen-data", *GEN_ARGS, "--out", str(tmp_path / "b")]) == 0
        first = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert first == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in first:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_dims_is_usage_error(self, tmp_path) -> None:
        assert main(["gen-data", "--dims", "1,2", "--out", str(tmp_path)]) == 2


class TestEval:
    """Tests for the eval subcommand."""

    def test_ground_truth_masks_score_one(self, tiny_dataset, tmp_path, capsys) -> None:
        manifest = read_manifest(tiny_dataset)
        for index in manifest.split("test"):
            labels = read_scene(tiny_dataset, index, manifest).labels
            write_mask(tmp_path / mask_name(index), labels, 0.0, manifest.n_instances, "gt")
        report = tmp_path / "report.jsonl"
        code = main(["-q", "eval", "--gt", str(tiny_dataset), "--pred", str(tmp_path),
                     "--report", str(report)])
        assert code == 0
        assert "1.000" in capsys.readouterr().out
        summary = json.loads(report.read_text().splitlines()[-1])
        assert summary["mean"] == 1.0 and summary["checkpoint_id"] == "gt"

    def test_missing_mask_fails(self, tiny_dataset, tmp_path) -> None:
        assert main(["-q", "eval", "--gt", str(tiny_dataset), "--pred", str(tmp_path)]) == 1

    def test_baseline(self, tiny_dataset, capsys) -> None:
        assert main(["-q", "eval", "--gt", str(tiny_dataset), "--baseline", "kmeans"]) == 0
        assert "kmeans" in capsys.readouterr().out

    def test_missing_dataset_fails(self, tmp_path) -> None:
        assert main(["-q", "eval", "--gt", str(tmp_path / "none"), "--baseline", "kmeans"]) == 1

    def test_sources_are_exclusive(self, tmp_path) -> None:
        code = main(["eval", "--gt", str(tmp_path), "--baseline", "kmeans",
                     "--pred", str(tmp_path)])
        assert code == 2


class TestAblate:
    """Tests for the ablate subcommand."""

    def test_loss_rows(self, tmp_path) -> None:
        assert main(["-q", "ablate", "--losses", "a,ai,aip", "--out", str(tmp_path)]) == 0
        configs = {
            path.stem: TrainConfig.from_dict(json.loads(path.read_text()))
            for path in tmp_path.glob("*.json")
        }
        assert set(configs) == {"a", "ai", "aip"}
        assert (configs["a"].use_inter, configs["a"].use_pose) == (False, False)
        assert (configs["ai"].use_inter, configs["ai"].use_pose) == (True, False)
        assert (configs["aip"].use_inter, configs["aip"].use_pose) == (True, True)

    def test_presets_and_instances(self, tmp_path) -> None:
        args = ["-q", "ablate", "--presets", "--instances", "1-3", "--reduced", "--out", str(tmp_path)]
        assert main(args) == 0
        names = sorted(path.stem for path in tmp_path.glob("*.json"))
        assert names == ["a-ot", "ai-ot", "aip-greedy", "aip-ot", "n-1", "n-2", "n-3"]
        greedy = TrainConfig.from_dict(json.loads((tmp_path / "aip-greedy.json").read_text()))
        assert greedy.aligner == "greedy" and greedy.nets.feature_channels == 32

    def test_noise_rows_evaluate_noisy_inputs(self, tmp_path, monkeypatch) -> None:
        evaluated = {}

        def fake_fit(data, config, out, progress=True):
            yield out / "checkpoints" / "epoch_0001.ckpt"

        def fake_evaluate(data, split, model, progress=True, noise_sigma=None):
            evaluated[model] = noise_sigma
            return EvalReport(scene_ids=[0], per_scene=[0.5], class_name="box", method="insegan")

        monkeypatch.setattr(cli, "fit", fake_fit)
        monkeypatch.setattr(cli, "load_model", lambda path, device: path.parent.parent.name)
        monkeypatch.setattr(cli, "evaluate_dataset", fake_evaluate)
        args = ["-q", "ablate", "--noise", "0.1,0.5", "--run", "--data", str(tmp_path / "data"),
                "--out", str(tmp_path / "rows")]
        assert main(args) == 0
        assert evaluated == {"noise-0.1": 0.1, "noise-0.5": 0.5}

    def test_no_sweep_fails(self, tmp_path) -> None:
        assert main(["-q", "ablate", "--out", str(tmp_path)]) == 1

    def test_unknown_loss_code_fails(self, tmp_path) -> None:
        assert main(["-q", "ablate", "--losses", "xyz", "--out", str(tmp_path)]) == 1


class TestParser:
    """Tests for argument parsing."""

    def test_subcommand_required(self) -> None:
        assert main([]) == 2

    def test_unknown_aligner(self) -> None:
        assert main(["train", "--data", "d", "--out", "o", "--aligner", "sinkhorn"]) == 2

    @pytest.mark.parametrize("command", ["gen-data", "train", "infer", "eval", "ablate", "plot"])
    def test_every_subcommand_registered(self, command: str) -> None:
        parser = build_parser()
        with pytest.raises(SystemExit) as info:
            parser.parse_args([command, "--help"])
        assert info.value.code == 0


@pytest.mark.slow
class TestAblationRun:
    """End-to-end loss ablation on the desk dataset."""

    def test_full_loss_not_worse_than_alignment_only(self, desk_dataset, tmp_path) -> None:
        base = tmp_path / "base.json"
        save_config(TrainConfig(n_instances=2, batch_size=32, checkpoint_every=100,
                                validate_every=100), base)
        args = ["-q", "ablate", "--config", str(base), "--losses", "a,ai,aip", "--reduced",
                "--epochs", "100", "--run", "--data", str(desk_dataset), "--out", str(tmp_path / "rows")]
        assert main(args) == 0
        rows = [json.loads(line) for line in (tmp_path / "rows" / "ablation.jsonl").read_text().splitlines()]
        means = {row["row"]: row["mean"] for row in rows}
        assert set(means) == {"a", "ai", "aip"}
        assert means["aip"] >= means["a"]


class TestInferAndPlot:
    """Tests for the infer and plot subcommands."""

    @pytest.fixture
    def checkpoint(self, tiny_networks, tiny_config, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_networks, tiny_config, epoch=1, step=2)
        return path

    def test_infer_then_eval(self, tiny_dataset, checkpoint, tmp_path, capsys) -> None:
        out = tmp_path / "masks"
        args = ["-q", "infer", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset),
                "--out", str(out)]
        assert main(args) == 0
        manifest = read_manifest(tiny_dataset)
        written = sorted(p.name for p in out.glob("*.png"))
        assert written == sorted(mask_name(i) for i in manifest.split("test"))
        assert main(["-q", "eval", "--gt", str(tiny_dataset), "--pred", str(out)]) == 0
        assert "masks" in capsys.readouterr().out

    def test_untrained_checkpoint_fails(self, tiny_dataset, tiny_networks, tiny_config,
                                        tmp_path) -> None:
        path = tmp_path / "fresh.ckpt"
        save_checkpoint(path, tiny_networks, tiny_config, epoch=0, step=0)
        args = ["-q", "infer", "--checkpoint", str(path), "--data", str(tiny_dataset),
                "--out", str(tmp_path / "masks")]
        assert main(args) == 1

    def test_plot(self, tiny_dataset, checkpoint, tmp_path) -> None:
        out = tmp_path / "grid.png"
        args = ["-q", "plot", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset),
                "--count", "2", "--out", str(out)]
        assert main(args) == 0
        assert out.exists()
