import numpy as np
import pytest

from stmtl import cli
from stmtl.asto import parse_log
from stmtl.errors import NumericError
from stmtl.metrics import EvalReport
from stmtl.tensor import load_archive


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    tiny_config.save(cfg_path)
    assert run("gen-data", "--config", cfg_path, "--out", root / "data") == 0
    assert run("train", "--config", cfg_path, "--data", root / "data", "--out", root / "run") == 0
    return root


class TestGenData:
    def test_layout(self, workspace, tiny_config):
        data = workspace / "data"
        assert sorted(p.name for p in data.glob("seq_*")) == [f"seq_{i}" for i in range(3)]
        assert (data / "config.txt").exists()
        assert len(list((data / "seq_0").glob("frame_*.ppm"))) == tiny_config.T

    def test_reproducible_digest(self, tmp_path, tiny_config_file, capsys):
        run("gen-data", "--config", tiny_config_file, "--out", tmp_path / "a")
        first = capsys.readouterr().out.splitlines()[-1]
        run("gen-data", "--config", tiny_config_file, "--out", tmp_path / "b")
        assert capsys.readouterr().out.splitlines()[-1] == first
        run("gen-data", "--config", tiny_config_file, "--seed", 1, "--out", tmp_path / "c")
        assert capsys.readouterr().out.splitlines()[-1] != first


class TestTrain:
    def test_outputs(self, workspace):
        out = workspace / "run"
        for name in ("model.stmt", "train_log.csv", "convergence.txt", "config.txt", "ckpt_spatial.stmt"):
            assert (out / name).exists(), name
        phases = [r.phase for r in parse_log((out / "train_log.csv").read_text())]
        assert phases == ["spatial", "temporal", "regularize"]

    def test_flags_reach_config(self, workspace, tiny_config_file, tmp_path):
        out = tmp_path / "ablate"
        code = run("train", "--config", tiny_config_file, "--data", workspace / "data", "--out", out,
                   "--mode", "joint", "--no-sc-scse", "--no-reg")
        assert code == 0
        text = (out / "config.txt").read_text()
        assert "mode=joint" in text and "use_sc_scse=false" in text and "use_reg=false" in text
        assert [r.phase for r in parse_log((out / "train_log.csv").read_text())] == ["joint"]

    def test_resume_keeps_model(self, workspace, tiny_config_file, tmp_path):
        import shutil
        out = tmp_path / "again"
        shutil.copytree(workspace / "run", out)
        (out / "ckpt_regularize.stmt").unlink()
        assert run("train", "--config", tiny_config_file, "--data", workspace / "data", "--out", out, "--resume") == 0
        assert (out / "model.stmt").read_bytes() == (workspace / "run" / "model.stmt").read_bytes()


class TestEval:
    def test_checkpoint(self, workspace):
        out = workspace / "eval"
        assert run("eval", "--ckpt", workspace / "run" / "model.stmt", "--data", workspace / "data", "--out", out) == 0
        rows = EvalReport.read_csv((out / "eval.csv").read_text())
        assert set(rows) == {"seq_0", "mean"}
        assert 0.0 <= rows["mean"]["type_dice"] <= 1.0
        for name in ("scanpaths.txt", "fps.txt", "summary.txt", "predictions/seq_0/mask_0.pgm"):
            assert (out / name).exists(), name
        assert "fps=" in (out / "fps.txt").read_text()

    def test_gt_passthrough_is_perfect(self, workspace, tmp_path):
        out = tmp_path / "oracle"
        assert run("eval", "--data", workspace / "data", "--out", out, "--gt-passthrough", "--split", "all") == 0
        mean = EvalReport.read_csv((out / "eval.csv").read_text())["mean"]
        assert mean["binary_dice"] == 1.0 and mean["type_dice"] == 1.0
        assert mean["binary_hausdorff"] == 0.0 and mean["scanpath_top1"] == 1.0
        assert mean["auc_b"] > 0.95

    def test_prediction_files_are_pgm(self, workspace):
        raw = (workspace / "eval" / "predictions" / "seq_0" / "saliency_0.pgm").read_bytes()
        assert raw.startswith(b"P5\n32 32\n255\n") and len(raw) == len(b"P5\n32 32\n255\n") + 32 * 32


class TestReport:
    def test_table(self, workspace, tmp_path, capsys):
        assert run("report", workspace / "eval", workspace / "missing", "--out", tmp_path / "rep") == 0
        captured = capsys.readouterr()
        assert "skipped" in captured.err
        lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert lines[0].startswith("ASTO,SC-scSE,ConvLSTM++,Reg.")
        assert len(lines) == 2


class TestExitCodes:
    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == 2

    def test_bad_config(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("lr=fast\n")
        assert run("gen-data", "--config", bad, "--out", tmp_path / "d") == 2

    def test_missing_parent(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "no" / "such") == 2

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert run("eval", "--ckpt", tmp_path / "x.stmt", "--data", workspace / "data", "--out", tmp_path / "e") == 2

    def test_usage_error(self, capsys):
        assert run("train") == 2
        assert run("--help") == 0

    def test_report_needs_runs(self):
        assert run("report") == 2

    def test_numeric_failure(self, workspace, tiny_config_file, tmp_path, monkeypatch):
        import stmtl.asto

        def boom(*args, **kwargs):
            raise NumericError("non-finite loss")

        monkeypatch.setattr(stmtl.asto, "run_asto", boom)
        assert run("train", "--config", tiny_config_file, "--data", workspace / "data", "--out", tmp_path / "n") == 3


def test_model_archive_loads(workspace):
    state = load_archive(workspace / "run" / "model.stmt")
    assert all(np.all(np.isfinite(v)) for v in state.values())
