from pathlib import Path

import numpy as np
import pytest

from psmmlab import checkpoint, metrics, pipeline
from psmmlab.cli import main
from psmmlab.optim import Adam
from psmmlab.tensor import Tensor


def run(*argv):
    return main([str(a) for a in argv])


def log_lines(path):
    return [dict(kv.split("=", 1) for kv in line.split()) for line in Path(path).read_text().splitlines() if not line.startswith("#")]


@pytest.fixture(scope="module")
def trained(spread_root, tmp_path_factory):
    """A toy PSMM run on protocol 1_1 (8 epochs) shared by the eval tests."""
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--root", spread_root, "--protocol", "1_1", "--epochs", 8, "--batch", 9, "--out", out) == 0
    return out


class TestOptim:
    def test_schedule(self):
        opt = Adam([], lr=0.1, decay_epochs=(15, 20))
        assert [opt.lr_at(e) for e in (0, 14, 15, 19, 20, 24)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_skips_params_without_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam([p], lr=0.1).step()
        np.testing.assert_array_equal(p.data, np.ones(2))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = {"a.weight": np.arange(6.0).reshape(2, 3), "a.bias": np.array(2.5), "b": np.zeros((1, 2, 3, 4))}
        checkpoint.save(tmp_path, state, {"variant": "psmm"})
        back, meta = checkpoint.load(tmp_path)
        assert list(back) == list(state) and meta == {"variant": "psmm"}
        for k in state:
            np.testing.assert_array_equal(back[k], state[k])

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(tmp_path)

    def test_truncated_weights(self, tmp_path):
        checkpoint.save(tmp_path, {"w": np.ones(10)})
        (tmp_path / "weights.bin").write_bytes(b"\0" * 8)
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(tmp_path)

    def test_model_round_trip(self, tmp_path):
        model = pipeline.build_model("sdnet", "toy", ["ir"], seed=4)
        pipeline.save_model(tmp_path, model, "sdnet")
        back, meta = pipeline.load_model(tmp_path, "sdnet", "toy", ["ir"])
        assert meta["modalities"] == "ir"
        for name, p in model.store.params.items():
            np.testing.assert_allclose(back.store.params[name].data, p.data, rtol=1e-6)


class TestSeeds:
    def test_derived_seeds_are_stable_and_distinct(self):
        assert pipeline.derive_seed(0, "init") == pipeline.derive_seed(0, "init")
        assert len({pipeline.derive_seed(s, n) for s in (0, 1) for n in ("init", "data")}) == 4


class TestSynthSplitPool:
    def test_synth_and_split(self, tmp_path, capsys):
        assert run("synth", "--root", tmp_path / "d", "--subjects", 1, "--frames", 2, "--side", 8) == 0
        assert "clips=36" in capsys.readouterr().out
        assert run("split", "--root", tmp_path / "d", "--protocol", "1_1", "--out", tmp_path / "m") == 2

    def test_split_all_writes_manifests_and_counts(self, spread_root, tmp_path):
        assert run("split", "--root", spread_root, "--protocol", "all", "--out", tmp_path) == 0
        for name in ("1_1", "2_2", "4_3"):
            for split in ("train", "valid", "test"):
                assert (tmp_path / name / f"{split}.txt").stat().st_size > 0
        assert "status=" in (tmp_path / "1_1" / "counts.txt").read_text()

    def test_pool_writes_dynamic_images(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PSMMLAB_THREADS", "2")
        root = tmp_path / "d"
        assert run("synth", "--root", root, "--subjects", 1, "--frames", 9, "--side", 8) == 0
        assert run("pool", "--root", root, "--k", 7) == 0
        dyn = sorted(p.name for p in (root / "E_0001" / "replay_1" / "ir" / "dyn").iterdir())
        assert dyn == ["frame_0000.png", "frame_0007.png"]
        # the pooled images do not disturb later catalog scans
        assert run("split", "--root", root, "--protocol", "1_1", "--out", tmp_path / "m") == 2

    def test_input_errors(self, tmp_path):
        assert run("split", "--root", tmp_path / "missing", "--protocol", "1_1", "--out", tmp_path) == 2
        assert run("train", "--root", tmp_path, "--protocol", "9_9", "--out", tmp_path / "o") == 2
        with pytest.raises(SystemExit):
            run("train", "--root", tmp_path, "--protocol", "1_1", "--variant", "late", "--out", tmp_path)


class TestTrain:
    def test_log_records_loss_components(self, trained):
        lines = log_lines(trained / "train.log")
        assert len(lines) == 8
        keys = set(lines[0])
        assert {"epoch", "lr", "total", "whole", "color", "color.static", "ir.summed"} <= keys
        for line in lines:
            parts = float(line["whole"]) + sum(float(line[m]) for m in ("color", "depth", "ir"))
            assert float(line["total"]) == pytest.approx(parts, rel=1e-5)
        assert float(lines[-1]["total"]) < float(lines[0]["total"])

    def test_checkpoint_metadata(self, trained):
        meta = checkpoint.read_meta(trained / "checkpoint")
        assert meta["variant"] == "psmm" and meta["preset"] == "toy" and meta["modalities"] == "color,depth,ir"

    def test_same_seed_same_bytes(self, spread_root, tmp_path):
        args = ("train", "--root", spread_root, "--protocol", "2_1", "--epochs", 2, "--batch", 8, "--variant", "sdnet")
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--out", tmp_path / "b") == 0
        assert run(*args, "--seed", 1, "--out", tmp_path / "c") == 0
        a, b, c = ((tmp_path / x / "checkpoint" / "weights.bin").read_bytes() for x in "abc")
        assert a == b != c

    def test_variants_have_different_parameter_names(self, spread_root, tmp_path):
        names = {}
        for v in ("nhf", "psmm"):
            assert run("train", "--root", spread_root, "--protocol", "1_2", "--epochs", 1, "--batch", 9, "--variant", v, "--out", tmp_path / v) == 0
            names[v] = set(checkpoint.load(tmp_path / v / "checkpoint")[0])
        assert names["nhf"] != names["psmm"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_exits_3(self, spread_root, tmp_path):
        code = run("train", "--root", spread_root, "--protocol", "1_1", "--epochs", 3, "--batch", 9, "--lr", 1e300, "--out", tmp_path)
        assert code == 3

    def test_psmm_on_single_modality_protocol_is_an_input_error(self, spread_root, tmp_path):
        assert run("train", "--root", spread_root, "--protocol", "3_1", "--epochs", 1, "--out", tmp_path) == 2


class TestEval:
    def test_scores_and_report(self, trained, spread_root, tmp_path):
        code = run("eval", "--root", spread_root, "--protocol", "1_1", "--checkpoint", trained / "checkpoint", "--out", tmp_path)
        assert code == 0
        rows, meta = metrics.read_scores(tmp_path / "scores_test.txt")
        assert "threshold" in meta
        # one score per sample: 2D test samples of C and E plus every 3D attack sample
        assert len(rows) == 2 * 2 * 4 + 18 + 8
        assert all(0 <= r.score <= 1 for r in rows)
        kv = dict(line.split("=", 1) for line in (tmp_path / "metrics.txt").read_text().splitlines())
        assert float(kv["1_1.acer"]) == pytest.approx((float(kv["1_1.apcer"]) + float(kv["1_1.bpcer"])) / 2)

    def test_incompatible_checkpoint_exits_4(self, trained, spread_root, tmp_path):
        for extra in (("--variant", "nhf"), ("--preset", "resnet18"), ("--modalities", "color,ir")):
            code = run("eval", "--root", spread_root, "--protocol", "1_1", "--checkpoint", trained / "checkpoint", "--out", tmp_path, *extra)
            assert code == 4
        assert run("eval", "--root", spread_root, "--protocol", "1_1", "--checkpoint", tmp_path, "--out", tmp_path) == 4

    def test_single_modality_model_scores_every_clip(self, spread_root, tmp_path):
        assert run("train", "--root", spread_root, "--protocol", "3_1", "--variant", "sdnet", "--epochs", 1, "--out", tmp_path) == 0
        code = run("eval", "--root", spread_root, "--protocol", "3_1", "--variant", "sdnet", "--checkpoint", tmp_path / "checkpoint", "--out", tmp_path / "ev")
        assert code == 0
        rows, _ = metrics.read_scores(tmp_path / "ev" / "scores_test.txt")
        assert {r.path.rsplit("/", 1)[1] for r in rows} == {"depth", "ir"}

    @pytest.mark.slow
    def test_overfit_training_set(self, spread_root, tmp_path):
        args = ("--root", spread_root, "--protocol", "1_1", "--no-augment")
        assert run("train", *args, "--epochs", 60, "--batch", 9, "--decay-epochs", "40,50", "--out", tmp_path) == 0
        eval_args = args[:-1]
        code = run("eval", *eval_args, "--checkpoint", tmp_path / "checkpoint", "--split", "train", "--out", tmp_path / "ev")
        assert code == 0
        kv = dict(line.split("=", 1) for line in (tmp_path / "ev" / "metrics.txt").read_text().splitlines())
        assert float(kv["1_1.acer"]) < 0.05


def write_file(path, sub, n_bona_wrong, n_attack_wrong, n=1000):
    """Score file whose error rates at threshold 0.5 are exactly the given counts over n per class."""
    rows = []
    for i in range(n):
        rows.append(metrics.ScoreRow(f"A_0301/real_{i}/color", 0.2 if i < n_bona_wrong else 0.8, 1, sub))
        rows.append(metrics.ScoreRow(f"A_0301/print_{i}/color", 0.8 if i < n_attack_wrong else 0.2, 0, sub))
    return metrics.write_scores(path, rows, {"threshold": "0.5"})


class TestReport:
    def test_reproduces_table_aggregate(self, tmp_path, capsys):
        # ACER 0.6, 4.4, 1.5 percent via APCER 1.2, 8.8, 3.0 percent and zero BPCER
        files = [write_file(tmp_path / f"{s}.txt", f"1_{s}", 0, k) for s, k in ((1, 12), (2, 88), (3, 30))]
        assert run("report", *files, "--out", tmp_path / "rep") == 0
        table = (tmp_path / "rep" / "report.txt").read_text()
        last = table.strip().splitlines()[-1].split()
        assert last[0] == "Avg±Std" and last[-1] == "2.2±2.0"
        kv = dict(line.split("=", 1) for line in (tmp_path / "rep" / "metrics.txt").read_text().splitlines())
        m, s = metrics.aggregate_mean_std([0.6, 4.4, 1.5])
        assert float(kv["avg.acer"]) * 100 == pytest.approx(m) and float(kv["std.acer"]) * 100 == pytest.approx(s)

    def test_perfect_scores(self, tmp_path, capsys):
        f = write_file(tmp_path / "p.txt", "2_1", 0, 0, n=5)
        assert run("report", f) == 0
        out = capsys.readouterr().out
        assert "2_1.apcer=0.0" in out and "2_1.bpcer=0.0" in out and "2_1.acer=0.0" in out
        assert "omitted" in out

    def test_mixed_protocols_rejected(self, tmp_path):
        a = write_file(tmp_path / "a.txt", "1_1", 0, 1, n=5)
        b = write_file(tmp_path / "b.txt", "2_1", 0, 1, n=5)
        assert run("report", a, b) == 2

    def test_without_threshold_uses_file_eer(self, tmp_path, capsys):
        rows = [metrics.ScoreRow("a/real_1/c", 0.9, 1, "1_1"), metrics.ScoreRow("a/print_1/c", 0.1, 0, "1_1")]
        f = metrics.write_scores(tmp_path / "s.txt", rows)
        assert run("report", f) == 0
        assert "1_1.threshold=0.9" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert run("gradcheck", "--variant", "sdnet", "--params", 10) == 0
        assert "max_rel_error=" in capsys.readouterr().out
