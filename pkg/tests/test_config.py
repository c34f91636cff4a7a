import pytest

from stmtl.config import RunConfig
from stmtl.errors import ConfigError


class TestText:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, lr=3e-3, enc_channels=(4, 8), use_reg=False, mode="joint")
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_float_precision_survives(self):
        cfg = RunConfig(alpha=0.1 + 0.2)
        assert RunConfig.from_text(cfg.to_text()).alpha == 0.1 + 0.2

    def test_comments_and_blanks(self):
        cfg = RunConfig.from_text("# header\n\nlr = 3e-3  # step\nbeta1=0.9\n")
        assert cfg.lr == 3e-3 and cfg.beta1 == 0.9 and cfg.seed == 0

    @pytest.mark.parametrize("text", ["lr", "nope=1", "seed=1.5", "use_reg=maybe", "enc_channels=4,x"])
    def test_bad_lines(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    @pytest.mark.parametrize("value, expected", [("true", True), ("0", False), ("YES", True), ("no", False)])
    def test_bools(self, value, expected):
        assert RunConfig.from_text(f"use_sc_scse={value}").use_sc_scse is expected

    def test_save_load(self, tmp_path):
        cfg = RunConfig(seed=9)
        cfg.save(tmp_path / "c.txt")
        assert RunConfig.load(tmp_path / "c.txt") == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            RunConfig.load(tmp_path / "absent.cfg")

    def test_desk_config_parses(self):
        from pathlib import Path
        cfg = RunConfig.load(Path(__file__).parents[1] / "configs" / "desk.cfg")
        assert cfg.lr == 3e-3 and cfg.beta1 == 0.9


class TestValidate:
    @pytest.mark.parametrize("changes", [
        dict(mode="solo"), dict(dtype="f16"), dict(scanpath_reduce="max"), dict(batch_size=0),
        dict(alpha=1.5), dict(sinkhorn_eps=0.0), dict(patience=0),
    ])
    def test_rejects(self, changes):
        with pytest.raises(ConfigError):
            RunConfig(**changes).validate()

    def test_update_typed_and_text(self):
        cfg = RunConfig().update({"seed": "4", "lr": 0.5})
        assert cfg.seed == 4 and cfg.lr == 0.5


class TestViews:
    def test_synth(self):
        s = RunConfig(T=6, H=32, W=48, sigma=0.0, seed=2).synth(seed=7)
        assert (s.T, s.H, s.W, s.seed) == (6, 32, 48, 7)
        assert s.sigma == 2.0

    def test_arch(self):
        a = RunConfig(K=5, use_lstmpp=False, dtype="f64").arch()
        assert a.num_classes == 5 and not a.use_lstmpp and a.dtype == "f64"
