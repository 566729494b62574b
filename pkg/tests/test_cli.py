import csv
import json

import numpy as np
import pytest

import vik.train
from vik.backbone import Backbone
from vik.checkpoint import Checkpoint, checkpoint_save
from vik.cli import main, parse_grid, parse_selector
from vik.config import BasisFamily
from vik.errors import ConfigError


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def kan_checkpoint(path, config, zero=False):
    model = Backbone(config, np.random.default_rng(3))
    params = {k: (np.zeros_like(v) if zero and k.endswith("kan.w") else v) for k, v in model.parameters().items()}
    checkpoint_save(Checkpoint(config=config, params=params), path)
    return path


@pytest.fixture
def trained(capsys, quick_run_file, tmp_path):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(capsys, "train", "--config", str(quick_run_file), "--out", str(out))
    assert code == 0
    return out, stdout


class TestParsing:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--bogus"])
        assert info.value.code == 2

    def test_abbreviations_rejected(self):
        with pytest.raises(SystemExit):
            main(["train", "--epo", "1"])

    def test_grid(self):
        assert parse_grid("-2,2,101") == (-2.0, 2.0, 101)
        for bad in ("2,-2,10", "0,1", "a,b,c", "0,1,1"):
            with pytest.raises(ConfigError):
                parse_grid(bad)

    def test_selector(self):
        assert parse_selector("all", 3, "stage") == [1, 2, 3]
        assert parse_selector("2", 3, "stage") == [2]
        with pytest.raises(ConfigError, match="1..3"):
            parse_selector("4", 3, "stage")


class TestTrainAndEval:
    def test_outputs_and_summary(self, trained):
        out, stdout = trained
        assert {"metrics.csv", "final.vikc", "last_good.vikc", "best.vikc"} <= {p.name for p in out.iterdir()}
        assert stdout.splitlines()[0].startswith("epoch 2 ")

    def test_same_seed_same_metrics(self, capsys, quick_run_file, tmp_path):
        for name in ("a", "b"):
            args = ("train", "--config", str(quick_run_file), "--epochs", "1", "--seed", "5", "--out", str(tmp_path / name))
            assert run_cli(capsys, *args)[0] == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "absent.json"))
        assert code == 2
        assert "absent.json" in err and "[config]" in err

    def test_missing_cifar_is_data_error(self, capsys, quick_run_file, tmp_path):
        code, _, err = run_cli(capsys, "train", "--config", str(quick_run_file), "--data", f"cifar10:{tmp_path}",
                               "--out", str(tmp_path / "run"))
        assert code == 3
        assert "[data]" in err

    def test_numerical_abort(self, capsys, quick_run_file, tmp_path, monkeypatch):
        real = vik.train.cross_entropy
        monkeypatch.setattr(vik.train, "cross_entropy", lambda logits, labels: (float("nan"), real(logits, labels)[1]))
        code, _, err = run_cli(capsys, "train", "--config", str(quick_run_file), "--out", str(tmp_path / "run"))
        assert code == 4
        assert "[train]" in err
        assert (tmp_path / "run" / "last_good.vikc").is_file()

    def test_resume_after_numerical_abort(self, capsys, quick_run_file, trained, tmp_path, monkeypatch):
        real = vik.train.cross_entropy
        monkeypatch.setattr(vik.train, "cross_entropy", lambda logits, labels: (float("nan"), real(logits, labels)[1]))
        out = tmp_path / "again"
        assert run_cli(capsys, "train", "--config", str(quick_run_file), "--out", str(out))[0] == 4
        monkeypatch.undo()
        code, _, _ = run_cli(capsys, "train", "--config", str(quick_run_file), "--out", str(out),
                             "--resume", str(out / "last_good.vikc"))
        assert code == 0
        assert (out / "final.vikc").read_bytes() == (trained[0] / "final.vikc").read_bytes()

    def test_resume_of_finished_run(self, capsys, quick_run_file, trained):
        out, _ = trained
        code, _, err = run_cli(capsys, "train", "--config", str(quick_run_file), "--out", str(out),
                               "--resume", str(out / "final.vikc"))
        assert code == 2
        assert "already finished" in err

    def test_eval_reproduces_final_train_accuracy(self, capsys, trained):
        out, stdout = trained
        fields = stdout.splitlines()[0].split()
        train_acc = fields[fields.index("train_acc") + 1]
        code, first, _ = run_cli(capsys, "eval", "--checkpoint", str(out / "final.vikc"))
        assert code == 0
        assert first.split()[:3] == ["train", "top1", train_acc]
        _, second, _ = run_cli(capsys, "eval", "--checkpoint", str(out / "final.vikc"))
        assert first == second

    def test_eval_validation_split(self, capsys, trained):
        out, _ = trained
        code, stdout, _ = run_cli(capsys, "eval", "--checkpoint", str(out / "best.vikc"), "--split", "val")
        assert code == 0
        assert stdout.startswith("val top1 ")
        assert "/20)" in stdout

    def test_eval_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "eval", "--checkpoint", str(tmp_path / "none.vikc"))
        assert code == 2
        assert "none.vikc" in err


class TestGradcheck:
    def test_single_layer(self, capsys):
        code, out, _ = run_cli(capsys, "gradcheck", "--scope", "layer", "patch_kan", "--max-coords", "16")
        assert code == 0
        assert "patch_kan/w" in out
        assert "axis_mix" not in out
        assert "groups passed" in out

    @pytest.mark.parametrize("scope", [["layer", "conv3d"], ["some"], ["layer"]])
    def test_bad_scope(self, capsys, scope):
        code, _, err = run_cli(capsys, "gradcheck", "--scope", *scope)
        assert code == 2
        assert "[cli]" in err

    def test_corrupted_backward_names_layer(self, capsys, monkeypatch):
        from vik.mixer import LowRankGlobal

        original = LowRankGlobal.backward

        def broken(self, tape, dout):
            dx, grads = original(self, tape, dout)
            return dx, {k: -v for k, v in grads.items()}

        monkeypatch.setattr(LowRankGlobal, "backward", broken)
        code, out, err = run_cli(capsys, "gradcheck", "--scope", "layer", "lowrank_global", "--max-coords", "16")
        assert code == 1
        assert "FAIL" in out
        assert "lowrank_global/P" in err


class TestFlops:
    def test_report_against_published(self, capsys):
        code, out, _ = run_cli(capsys, "flops", "--config", "vik-small")
        assert code == 0
        assert "published: 13.5M params, 1.6 GFLOPs" in out
        assert "convention: rbf_c1=5" in out
        assert "linearity: linear" in out

    def test_ratio_four_between_two_resolutions(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "flops", "--resolutions", "56,112", "--attention-reference",
                               "--out", str(tmp_path))
        assert code == 0
        with (tmp_path / "linearity.csv").open() as f:
            rows = list(csv.DictReader(f))
        assert [r["ratio"] for r in rows] == ["1", "4"]
        assert int(rows[1]["attention_flops"]) == 16 * int(rows[0]["attention_flops"])
        assert (tmp_path / "flops.csv").read_text().startswith("component,params,flops\n")

    @pytest.mark.parametrize("resolutions", ["56,57", "56", "x,y"])
    def test_bad_resolutions(self, capsys, resolutions):
        code, _, err = run_cli(capsys, "flops", "--resolutions", resolutions)
        assert code == 2
        assert err.startswith("error: [")

    def test_bad_stage(self, capsys):
        assert run_cli(capsys, "flops", "--stage", "5")[0] == 2

    def test_instrumented_matches(self, capsys):
        code, out, _ = run_cli(capsys, "flops", "--config", "vik-tiny", "--resolutions", "8,16", "--instrumented")
        assert code == 0
        assert "equal" in out
        assert "MISMATCH" not in out


class TestDumpPhi:
    def test_zero_weights_give_flat_curves(self, capsys, tiny_config, tmp_path):
        ckpt = kan_checkpoint(tmp_path / "zero.vikc", tiny_config, zero=True)
        out = tmp_path / "phi"
        code, stdout, _ = run_cli(capsys, "dump-phi", "--checkpoint", str(ckpt), "--grid=-2,2,101",
                                  "--edges", "sample:2", "--out", str(out))
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        # stage 4 has p=1, so its layer has a single edge
        assert len(manifest["curves"]) == 2 + 2 + 2 + 1
        assert manifest["grid"] == {"lo": -2.0, "hi": 2.0, "n": 101}
        for curve in manifest["curves"]:
            with (out / curve["file"]).open() as f:
                rows = list(csv.reader(f))[1:]
            assert len(rows) == 101
            assert all(float(phi) == 0.0 for _, phi in rows)
            assert curve["sign_changes"] == 0
        assert manifest["stage_mean_sign_changes"] == {"1": 0.0, "2": 0.0, "3": 0.0, "4": 0.0}
        assert "shallow not more oscillatory" in stdout

    def test_explicit_edges(self, capsys, tiny_config, tmp_path):
        ckpt = kan_checkpoint(tmp_path / "m.vikc", tiny_config)
        out = tmp_path / "phi"
        code, _, _ = run_cli(capsys, "dump-phi", "--checkpoint", str(ckpt), "--stage", "2", "--block", "1",
                             "--edges", "0,1;3,2", "--grid", "0,1,11", "--out", str(out))
        assert code == 0
        assert sorted(p.name for p in out.glob("*.csv")) == ["s2_b1_g0_e0_1.csv", "s2_b1_g0_e3_2.csv"]

    @pytest.mark.parametrize("flags, expected", [
        (["--stage", "5"], "1..4"),
        (["--stage", "1", "--block", "2"], "1..1"),
        (["--stage", "2", "--edges", "9,9"], "0..3"),
        (["--grid", "1,0,10"], "lo < hi"),
    ])
    def test_invalid_selection(self, capsys, tiny_config, tmp_path, flags, expected):
        ckpt = kan_checkpoint(tmp_path / "m.vikc", tiny_config)
        code, _, err = run_cli(capsys, "dump-phi", "--checkpoint", str(ckpt), "--out", str(tmp_path / "phi"), *flags)
        assert code == 2
        assert expected in err

    def test_mlp_checkpoint_has_no_curves(self, capsys, tiny_config, tmp_path):
        ckpt = kan_checkpoint(tmp_path / "mlp.vikc", tiny_config.with_changes(basis=BasisFamily.MLP))
        code, _, err = run_cli(capsys, "dump-phi", "--checkpoint", str(ckpt), "--out", str(tmp_path / "phi"))
        assert code == 2
        assert "mlp" in err


class TestAblate:
    def test_two_arms(self, capsys, quick_run_file, tmp_path):
        code, out, _ = run_cli(capsys, "ablate", "--config", str(quick_run_file), "--arms", "full,no_global",
                               "--epochs", "1", "--out", str(tmp_path))
        assert code == 0
        assert [line.split()[0] for line in out.splitlines()[1:]] == ["full", "no_global"]
        assert (tmp_path / "ablation.csv").is_file()

    def test_unknown_arm(self, capsys, quick_run_file, tmp_path):
        code, _, err = run_cli(capsys, "ablate", "--config", str(quick_run_file), "--arms", "full,nope",
                               "--out", str(tmp_path))
        assert code == 2
        assert "nope" in err
