"""One end-to-end check per acceptance criterion.

Criteria 5 and 7 train real models on the default synthetic dataset and take
roughly 11 and 20 minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from stmtl import cli
from stmtl.asto import phases_for, run_asto, train_phase, val_scores
from stmtl.blocks import (
    ArchConfig, LstmState, STMTL, convlstmpp_step, predict, sal_decoder_forward, sc_scse_forward, scse_forward,
    seg_decoder_forward,
)
from stmtl.config import RunConfig
from stmtl.data import SynthConfig, gen_dataset, gen_sequence
from stmtl.losses import bce_loss, cross_entropy_multiclass, exact_ot_oracle, saliency_loss, sinkhorn
from stmtl.metrics import auc_borji, dice, evaluate_sequence, hausdorff, saliency_bce
from stmtl.tensor import Tensor, gradcheck, ops

from test_metrics import brute_hausdorff, random_mask_pair

DESK_CFG = "configs/desk.cfg"
TINY_ARCH = dict(enc_channels=(2, 2, 2, 4), seg_channels=(2, 2, 2, 2), sal_channels=(2, 2, 2, 2), num_classes=3,
                 dtype="f64")
# Criterion 7 budget: the temporal cap leaves room to reach the saliency optimum (about epoch 5 at full budget),
# and the joint arm may run as many epochs as the full arm's spatial and temporal phases combined.
REDUCED_BUDGET = dict(max_epochs_spatial=6, max_epochs_temporal=12, max_epochs_regularize=1, max_epochs_joint=18)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def random_model(rng):
    model = STMTL(ArchConfig(**TINY_ARCH)).train()
    for t in model.params.values():
        t.data = rng.normal(scale=0.5, size=t.shape)
    return model


def desk_config(root, **changes):
    return RunConfig.load(root / DESK_CFG).update(changes)


def split(seqs):
    return [s for s in seqs if s.split == "train"], [s for s in seqs if s.split == "val"]


def val_binary_dice(model, val):
    scores = []
    for seq in val:
        logits, _ = predict(model, seq.frames)
        scores.extend(dice(p > 0, g > 0) for p, g in zip(logits.argmax(1), seq.masks))
    return float(np.mean(scores))


def best_constant_bce(val):
    heat = np.stack([s.heatmaps for s in val])
    return saliency_bce(np.full(heat.shape, heat.mean()), heat)


@pytest.fixture(scope="module")
def root(request):
    return request.config.rootpath


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    errors = {}

    c = 4
    scse_p = {"x.cse1.w": (2, c, 1, 1), "x.cse1.b": (2,), "x.cse2.w": (c, 2, 1, 1), "x.cse2.b": (c,),
              "x.sse.w": (1, c, 1, 1), "x.sse.b": (1,)}
    scse_p = {k: t64(rng.normal(size=s)) for k, s in scse_p.items()}
    x = t64(rng.normal(size=(2, c, 4, 4)))
    for name, fwd in (("scse", scse_forward), ("sc_scse", sc_scse_forward)):
        def f(x, *ps, fwd=fwd):
            y, _ = fwd(x, dict(zip(scse_p, ps)), "x")
            return ops.mul(y, y).sum()
        errors[name] = gradcheck(f, [x, *scse_p.values()])

    lstm_p = {}
    for g in "ifco":
        lstm_p[f"t.lstm.x{g}.w"] = t64(rng.normal(scale=0.3, size=(2, 6, 3, 3)))
        lstm_p[f"t.lstm.h{g}.w"] = t64(rng.normal(scale=0.3, size=(2, 2, 3, 3)))
        lstm_p[f"t.lstm.b{g}"] = t64(rng.normal(scale=0.3, size=2))
    xs = [t64(rng.normal(size=(1, 3, 4, 4))) for _ in range(2)]
    h, cell = t64(np.tanh(rng.normal(size=(1, 2, 4, 4)))), t64(rng.normal(size=(1, 2, 4, 4)))

    def f_lstm(x_in, x_prev, h, cell, *ps):
        s = convlstmpp_step(x_in, x_prev, LstmState(h, cell), dict(zip(lstm_p, ps)))
        return ops.add(ops.mul(s.h, s.h).sum(), s.c.sum())
    errors["convlstmpp"] = gradcheck(f_lstm, [*xs, h, cell, *lstm_p.values()])

    model = random_model(rng)
    frames = t64(rng.normal(size=(2, 3, 16, 16)))
    feats = [t64(f.data) for f in model.encode(frames)]
    seg_names = [n for n in model.params if n.startswith("s.")]

    def f_seg(*args):
        p = dict(model.params, **dict(zip(seg_names, args[4:])))
        y = seg_decoder_forward(args[:4], p, model.buffers, training=True)
        return ops.mul(y, y).mean()
    errors["seg_decoder"] = gradcheck(f_seg, [*feats, *(model.params[n] for n in seg_names)], max_coords=40)

    prev = [t64(f.data + 0.1) for f in feats]
    sal_names = [n for n in model.params if n.startswith("t.")]
    st = model.init_state(2, 16, 16)
    st = LstmState(t64(np.tanh(rng.normal(size=st.h.shape))), t64(rng.normal(size=st.c.shape)))

    def f_sal(*args):
        sal, s = sal_decoder_forward(args[:4], args[4:8], st, dict(model.params, **dict(zip(sal_names, args[8:]))))
        return ops.add(sal.mean(), s.c.sum())
    errors["sal_decoder"] = gradcheck(f_sal, [*feats, *prev, *(model.params[n] for n in sal_names)], max_coords=40)

    names = list(model.params)
    f0, f1 = t64(rng.normal(size=(2, 3, 16, 16))), t64(rng.normal(size=(2, 3, 16, 16)))

    def f_model(*ps):
        for n, p in zip(names, ps):
            model.params[n] = p
        out, _ = model(f1, f0)
        return ops.add(ops.mul(out.seg_logits, out.seg_logits).mean(), out.saliency.mean())
    errors["full_model"] = gradcheck(f_model, [model.params[n] for n in names], max_coords=12)

    labels = rng.integers(0, 4, size=(2, 8, 8))
    errors["ce"] = gradcheck(lambda z: cross_entropy_multiclass(z, labels), [t64(rng.normal(size=(2, 4, 8, 8)))])
    target = rng.uniform(size=(2, 1, 16, 16))
    pred = t64(rng.uniform(0.05, 0.95, size=(2, 1, 16, 16)))
    errors["bce"] = gradcheck(lambda p: bce_loss(p, target), [pred])
    errors["saliency_loss"] = gradcheck(lambda p: saliency_loss(p, target, alpha=0.3, iters=20), [pred])

    elapsed = time.perf_counter() - start
    assert max(errors.values()) < 1e-4, errors
    assert elapsed < 300


def test_criterion_2_sinkhorn_matches_exact_ot():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    instances = []
    for _ in range(20):
        n, m = rng.integers(2, 9, size=2)
        a, b = rng.uniform(0.1, 1, n), rng.uniform(0.1, 1, m)
        p, q = rng.uniform(0, 8, (n, 2)), rng.uniform(0, 8, (m, 2))
        instances.append((a / a.sum(), b / b.sum(), p, q))

    cost_errors, marginal_errors = [], {0.01: 0.0, 0.1: 0.0, 1.0: 0.0}
    for a, b, p, q in instances:
        C = np.sqrt(((p[:, None] - q[None]) ** 2).sum(-1))
        res = sinkhorn(t64(a[None]), t64(b[None]), C, eps=1e-3, iters=500, return_plan=True)
        exact = exact_ot_oracle(a, p, b, q)
        cost_errors.append(abs((np.asarray(res.plan.gamma)[0] * C).sum() - exact) / exact)
        # the marginal clause is checked on runs long enough to converge
        for eps in marginal_errors:
            plan = sinkhorn(t64(a[None]), t64(b[None]), C, eps=eps, iters=2000, return_plan=True).plan
            err = max(np.abs(np.asarray(plan.row_sums)[0] - a).max(), np.abs(np.asarray(plan.col_sums)[0] - b).max())
            marginal_errors[eps] = max(marginal_errors[eps], err)
    elapsed = time.perf_counter() - start

    assert max(cost_errors) < 0.02
    assert elapsed < 60
    assert all(err < 1e-6 for err in marginal_errors.values()), marginal_errors


def test_criterion_3_sc_scse_algebra():
    rng = np.random.default_rng(1)
    c = 4
    params = {"x.cse1.w": t64(rng.normal(size=(2, c, 1, 1))), "x.cse1.b": t64(rng.normal(size=2)),
              "x.cse2.w": t64(rng.normal(size=(c, 2, 1, 1))), "x.cse2.b": t64(rng.normal(size=c)),
              "x.sse.w": t64(rng.normal(size=(1, c, 1, 1))), "x.sse.b": t64(rng.normal(size=1))}
    x = t64(rng.normal(size=(2, c, 6, 6)))
    gc, gs = t64(rng.uniform(size=(2, c, 1, 1))), t64(rng.uniform(size=(2, 1, 6, 6)))
    y, _ = sc_scse_forward(x, params, "x", gates=(gc, gs))
    np.testing.assert_allclose(y.data, (1 + gc.data + gs.data) * x.data, rtol=0, atol=1e-12)

    xd = t64(rng.integers(-64, 64, size=(2, c, 6, 6)) / 8)
    gates = (t64(rng.integers(0, 16, size=(2, c, 1, 1)) / 16), t64(rng.integers(0, 16, size=(2, 1, 6, 6)) / 16))
    with_skip, _ = sc_scse_forward(xd, params, "x", gates=gates)
    plain, _ = scse_forward(xd, params, "x", gates=gates)
    assert np.array_equal(with_skip.data - plain.data, xd.data)

    zero = {k: (t64(np.zeros(v.shape)) if "cse2" in k or "sse" in k else v) for k, v in params.items()}
    assert sc_scse_forward(x, zero, "x")[0].data.tobytes() == (2 * x.data).tobytes()
    assert scse_forward(x, zero, "x")[0].data.tobytes() == x.data.tobytes()


def test_criterion_4_phase_contracts(tiny_config):
    seqs = gen_dataset(tiny_config.synth(), n_train=tiny_config.n_train, n_val=tiny_config.n_val)
    train, val = split(seqs)
    model = STMTL(tiny_config.arch(), seed=0)
    ran = []
    snapshots = {}
    for phase in phases_for(tiny_config):
        snapshots[phase] = {k: v.tobytes() for k, v in model.state_dict().items()}
        rec = train_phase(phase, model, train, val, tiny_config)
        ran.append(rec.phase)
        if phase == "temporal":
            after = model.state_dict()
            for k, before in snapshots[phase].items():
                if k.startswith(("sh.", "s.")):
                    assert after[k].tobytes() == before, k
        if phase == "regularize":
            assert rec.lrs and all(lr == 1e-5 for lr in rec.lrs)
    assert ran == ["spatial", "temporal", "regularize"]


@pytest.mark.slow
def test_criterion_5_desk_scale_learning(root):
    cfg = desk_config(root)
    train, val = split(gen_dataset(cfg.synth(), n_train=cfg.n_train, n_val=cfg.n_val))
    assert (len(train), len(val), cfg.H, cfg.W) == (8, 2, 64, 64)
    baseline = best_constant_bce(val)
    model = STMTL(cfg.arch(), seed=cfg.seed)

    train_phase("spatial", model, train, val, cfg)
    dice_spatial = val_binary_dice(model, val)
    train_phase("temporal", model, train, val, cfg)
    bce_temporal = val_scores(model, val, need_seg=False)["bce"]
    train_phase("regularize", model, train, val, cfg)
    dice_reg = val_binary_dice(model, val)
    bce_reg = val_scores(model, val, need_seg=False)["bce"]

    summary = dict(dice_spatial=dice_spatial, bce_temporal=bce_temporal, baseline=baseline,
                   dice_reg=dice_reg, bce_reg=bce_reg)
    assert dice_spatial >= cfg.target_dice, summary
    assert bce_temporal < baseline, summary
    assert dice_reg >= dice_spatial * (1 - cfg.reg_tolerance), summary
    assert bce_reg <= bce_temporal * (1 + cfg.reg_tolerance), summary


def _arm_scores(cfg):
    train, val = split(gen_dataset(cfg.synth(), n_train=cfg.n_train, n_val=cfg.n_val))
    model = STMTL(cfg.arch(), seed=cfg.seed)
    run_asto(model, train, val, cfg)
    rows = []
    for seq in val:
        logits, sal = predict(model, seq.frames)
        rows.append(evaluate_sequence(seq, logits.argmax(1), sal, n_splits=10, seed=0)[0])
    return np.mean([r["type_dice"] for r in rows]), np.mean([r["scanpath_top1"] for r in rows])


@pytest.mark.slow
def test_criterion_7_asto_dominates_joint_training(root):
    wins, table = 0, []
    for seed in range(5):
        base = desk_config(root, seed=seed, **REDUCED_BUDGET)
        full = _arm_scores(base)
        joint = _arm_scores(base.update(dict(mode="joint", use_sc_scse=False)))
        dominates = full[0] >= joint[0] and full[1] >= joint[1] and full != joint
        wins += dominates
        table.append((seed, full, joint))
    assert wins >= 4, table


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = random_mask_pair(rng)
        assert hausdorff(a, b) == brute_hausdorff(a, b)

    assert dice(np.ones((2, 2)), np.ones((2, 2))) == 1.0
    assert dice(np.eye(2), 1 - np.eye(2)) == 0.0
    assert dice(np.array([[1, 1, 0]]), np.array([[0, 1, 0]])) == 2 / 3

    seq = gen_sequence(SynthConfig(T=6, seed=3))
    for t in range(seq.T):
        fx = [(x, y) for x, y, _ in seq.fixations[t]]
        assert auc_borji(seq.heatmaps[t], fx, seed=0) > 0.95
        assert abs(auc_borji(np.full(seq.heatmaps[t].shape, 0.5), fx, seed=0) - 0.5) <= 0.05


def test_criterion_8_determinism(tmp_path, tiny_config_file):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(tiny_config_file), "--out", str(data)]) == 0
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(tiny_config_file), "--seed", "7", "--data", str(data),
                         "--out", str(tmp_path / run)]) == 0
    for name in ("model.stmt", "train_log.csv", "ckpt_spatial.stmt", "ckpt_temporal.stmt", "ckpt_regularize.stmt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
