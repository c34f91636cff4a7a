import math

import numpy as np
import pytest

from stmtl import asto
from stmtl.asto import (
    OptState, PhaseRecord, accumulate_gradients, adam_step, checkpoint_path, converged, format_log, parse_log,
    phases_for, poly_lr, run_asto, train_phase,
)
from stmtl.blocks import STMTL
from stmtl.config import RunConfig
from stmtl.data import gen_dataset
from stmtl.errors import ConfigError, ContractError, NumericError
from stmtl.tensor import Tensor, archive_bytes, load_archive


@pytest.fixture(scope="module")
def cfg(tiny_config):
    return tiny_config


@pytest.fixture(scope="module")
def data(cfg):
    ds = gen_dataset(cfg.synth(), n_train=cfg.n_train, n_val=cfg.n_val)
    return ds[:cfg.n_train], ds[cfg.n_train:]


def fresh(cfg):
    return STMTL(cfg.arch(), seed=cfg.seed)


def state_bytes(model, prefix=""):
    return {k: v.tobytes() for k, v in model.state_dict().items() if k.startswith(prefix)}


class TestAdam:
    def test_two_steps_match_hand_computation(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = OptState(weight_decay=0.1, betas=(0.9, 0.99), eps=1e-8)
        grads = [np.array([0.5, 0.25]), np.array([-1.0, 0.5])]
        x, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
        for k, g in enumerate(grads, start=1):
            adam_step({"w": p}, {"w": g}, state, lr=0.01)
            g = g + 0.1 * x
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.99 ** k)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)
        assert state.step == 2

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        adam_step({"w": p}, {"w": np.array([7.0])}, OptState(weight_decay=0.0), lr=1e-3)
        assert p.data[0] == pytest.approx(3.0 - 1e-3 * 7.0 / (7.0 + 1e-8), abs=1e-15)

    def test_rejects_non_finite(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(NumericError):
            adam_step({"w": p}, {"w": np.array([np.nan])}, OptState(), lr=1e-3)

    def test_keeps_dtype(self):
        p = Tensor(np.zeros(3, np.float32), requires_grad=True)
        adam_step({"w": p}, {"w": np.ones(3)}, OptState(), lr=1e-3)
        assert p.data.dtype == np.float32


class TestSchedules:
    def test_poly_values(self):
        assert poly_lr(1e-4, 0, 100) == 1e-4
        assert poly_lr(1e-4, 100, 100) == 0.0
        assert poly_lr(1e-4, 50, 100) == pytest.approx(1e-4 * 0.5 ** 0.9, rel=1e-12)

    def test_poly_monotone(self):
        lrs = [poly_lr(1.0, i, 20) for i in range(21)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_poly_range(self):
        with pytest.raises(ContractError):
            poly_lr(1.0, 11, 10)

    @pytest.mark.parametrize("history, mode, expected", [
        ([0.1, 0.2, 0.3], "max", False),
        ([0.5, 0.5, 0.5, 0.5, 0.5, 0.5], "max", True),
        ([0.5, 0.4, 0.4, 0.3, 0.2, 0.1], "max", True),
        ([0.5, 0.4, 0.3, 0.2, 0.1, 0.05], "min", False),
        ([0.5, 0.50005, 0.5, 0.5, 0.5, 0.5], "max", True),
        ([], "max", False),
    ])
    def test_converged(self, history, mode, expected):
        assert converged(history, patience=5, min_delta=1e-4, mode=mode) is expected

    def test_patience_validated(self):
        with pytest.raises(ContractError):
            converged([1.0], patience=0)


class TestLog:
    def test_round_trip(self):
        rec = PhaseRecord("spatial", [1, 2], [0.5, 0.25], [0.1, 0.2], [1e-4, 5e-5])
        back = parse_log(format_log([rec]))
        assert len(back) == 1 and back[0].losses == [0.5, 0.25] and back[0].epochs == [1, 2]

    def test_header(self):
        assert format_log([]).splitlines() == [",".join(asto.LOG_COLUMNS)]


class TestPhasePlan:
    @pytest.mark.parametrize("changes, phases", [
        ({}, ["spatial", "temporal", "regularize"]),
        ({"use_reg": False}, ["spatial", "temporal"]),
        ({"mode": "joint"}, ["joint", "regularize"]),
        ({"mode": "single-seg"}, ["spatial"]),
        ({"mode": "single-sal"}, ["single-sal"]),
    ])
    def test_phases_for(self, changes, phases):
        assert phases_for(RunConfig().replace(**changes)) == phases

    def test_unknown_phase(self, cfg, data):
        with pytest.raises(ConfigError):
            train_phase("warmup", fresh(cfg), *data, cfg)

    def test_order_mismatch(self, cfg, data):
        with pytest.raises(ConfigError):
            train_phase("temporal", fresh(cfg), *data, cfg, order="shuffled_frames")


@pytest.fixture(scope="module")
def after_spatial(cfg, data):
    model = fresh(cfg)
    before = state_bytes(model)
    rec = train_phase("spatial", model, *data, cfg)
    return model, before, rec


class TestFreezeContracts:
    def test_spatial_leaves_temporal_decoder(self, after_spatial):
        model, before, _ = after_spatial
        after = state_bytes(model)
        assert all(after[k] == before[k] for k in after if k.startswith("t."))
        assert any(after[k] != before[k] for k in after if k.startswith("sh."))

    def test_temporal_leaves_encoder_and_seg_decoder(self, cfg, data, after_spatial):
        model, _, _ = after_spatial
        before = state_bytes(model)
        train_phase("temporal", model, *data, cfg)
        after = state_bytes(model)
        for k in after:
            if k.startswith(("sh.", "s.")):
                assert after[k] == before[k], k
        assert any(after[k] != before[k] for k in after if k.startswith("t."))

    def test_groups_unfrozen_after_phase(self, after_spatial):
        model, _, _ = after_spatial
        assert not model.groups.frozen

    def test_regularize_lr_constant(self, cfg, data):
        rec = train_phase("regularize", fresh(cfg), *data, cfg)
        assert rec.lrs and all(lr == 1e-5 for lr in rec.lrs)

    def test_spatial_lr_decays(self, after_spatial):
        _, _, rec = after_spatial
        assert rec.lrs[0] > rec.lrs[-1]


class TestAccumulation:
    def test_matches_full_batch(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 3))
        w_full = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        w_acc = Tensor(w_full.data.copy(), requires_grad=True)

        def loss(w, chunk):
            return ((Tensor(chunk) * w) * (Tensor(chunk) * w)).mean()

        full = loss(w_full, x)
        full.backward()
        value = accumulate_gradients(lambda c: loss(w_acc, c), [x[:3], x[3:]], [3, 7])
        assert value == pytest.approx(full.item(), rel=1e-12)
        np.testing.assert_allclose(w_acc.grad, w_full.grad, rtol=1e-12)


class TestRun:
    def test_phase_order_and_checkpoints(self, cfg, data, tmp_path):
        recs = run_asto(fresh(cfg), *data, cfg, out_dir=tmp_path)
        assert [r.phase for r in recs] == ["spatial", "temporal", "regularize"]
        for p in ("spatial", "temporal", "regularize"):
            assert checkpoint_path(tmp_path, p).exists()
        logged = [r.phase for r in parse_log((tmp_path / "train_log.csv").read_text())]
        assert logged == ["spatial", "temporal", "regularize"]

    def test_deterministic(self, cfg, data):
        a, b = fresh(cfg), fresh(cfg)
        ra, rb = run_asto(a, *data, cfg), run_asto(b, *data, cfg)
        assert archive_bytes(a.state_dict()) == archive_bytes(b.state_dict())
        assert format_log(ra) == format_log(rb)

    def test_resume_is_bit_exact(self, cfg, data, tmp_path):
        whole = fresh(cfg)
        run_asto(whole, *data, cfg, out_dir=tmp_path / "whole")
        run_asto(fresh(cfg), *data, cfg, out_dir=tmp_path / "cut", stop_after="temporal")
        assert not checkpoint_path(tmp_path / "cut", "regularize").exists()
        resumed = fresh(cfg)
        run_asto(resumed, *data, cfg, out_dir=tmp_path / "cut", resume=True)
        assert archive_bytes(resumed.state_dict()) == archive_bytes(whole.state_dict())
        assert (tmp_path / "cut" / "train_log.csv").read_bytes() == (tmp_path / "whole" / "train_log.csv").read_bytes()
        ckpt = load_archive(checkpoint_path(tmp_path / "cut", "regularize"))
        assert archive_bytes(ckpt) == archive_bytes(whole.state_dict())

    def test_resume_needs_directory(self, cfg, data):
        with pytest.raises(ConfigError):
            run_asto(fresh(cfg), *data, cfg, resume=True)

    def test_joint_mode(self, cfg, data):
        recs = run_asto(fresh(cfg), *data, cfg.replace(mode="joint", use_sc_scse=False))
        assert [r.phase for r in recs] == ["joint", "regularize"]
        assert all(math.isfinite(v) for r in recs for v in r.val_metrics)
