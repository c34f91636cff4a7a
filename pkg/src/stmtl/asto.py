"""Adam, poly learning rate and the three-phase asynchronous spatio-temporal schedule.

Phases:

* ``spatial``: shared encoder + segmentation decoder on shuffled frames,
  cross-entropy, temporal decoder frozen.
* ``temporal``: saliency decoder on ordered clips, encoder and segmentation
  decoder frozen, LSTM state carried through each clip.
* ``regularize``: everything trainable at a small constant learning rate on
  the fused loss.

``joint`` (no asynchronous schedule) and the single-task variants reuse the
same loop with different losses and freeze sets.
"""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import losses
from .blocks import STMTL
from .config import RunConfig
from .data import ClipBatch, FrameBatch, SceneSequence, batcher
from .errors import ConfigError, ContractError, NumericError
from .metrics import saliency_bce, type_dice
from .tensor import Tensor, load_archive, no_grad, save_archive

PHASES = ("spatial", "temporal", "regularize")
LOG_COLUMNS = ("phase", "epoch", "iter_lr", "loss", "val_metric")


# -- optimiser -----------------------------------------------------------------------

@dataclass
class OptState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.99, 0.999)
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptState, lr: float) -> OptState:
    """Bias-corrected Adam with L2 weight decay folded into the gradient; updates in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


def poly_lr(base_lr: float, iter: int, max_iter: int, power: float = 0.9) -> float:
    if not 0 <= iter <= max_iter:
        raise ContractError(f"iteration {iter} outside [0, {max_iter}]")
    return base_lr * (1 - iter / max_iter) ** power


def converged(history: Sequence[float], patience: int = 5, min_delta: float = 1e-4, mode: str = "max") -> bool:
    """True once the best value has not improved by more than ``min_delta`` for ``patience`` epochs."""
    if patience < 1:
        raise ContractError("patience must be >= 1")
    if not history:
        return False
    sign = 1.0 if mode == "max" else -1.0
    best, best_at = sign * history[0], 0
    for i, h in enumerate(history[1:], start=1):
        if sign * h > best + min_delta:
            best, best_at = sign * h, i
    return len(history) - 1 - best_at >= patience


# -- records and logs ----------------------------------------------------------------

@dataclass
class PhaseRecord:
    phase: str
    epochs: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    val_metrics: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    converged_epoch: Optional[int] = None
    best_epoch: Optional[int] = None

    def rows(self):
        for e, lr, loss, val in zip(self.epochs, self.lrs, self.losses, self.val_metrics):
            yield (self.phase, e, lr, loss, val)


def format_log(records: Sequence[PhaseRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for rec in records:
        for phase, e, lr, loss, val in rec.rows():
            w.writerow([phase, e, f"{lr:.9g}", f"{loss:.9g}", f"{val:.9g}"])
    return buf.getvalue()


def parse_log(text: str) -> List[PhaseRecord]:
    records: Dict[str, PhaseRecord] = {}
    for row in csv.DictReader(io.StringIO(text)):
        rec = records.setdefault(row["phase"], PhaseRecord(row["phase"]))
        rec.epochs.append(int(row["epoch"]))
        rec.lrs.append(float(row["iter_lr"]))
        rec.losses.append(float(row["loss"]))
        rec.val_metrics.append(float(row["val_metric"]))
    return list(records.values())


# -- phase definitions -----------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSpec:
    order: str                # batching mode the phase consumes
    frozen: frozenset
    seg_loss: bool
    sal_loss: bool
    metric: str               # "dice" (max), "bce" (min) or "fused" (max)
    fixed_lr: bool = False


PHASE_SPECS = {
    "spatial": PhaseSpec("shuffled_frames", frozenset({"t"}), True, False, "dice"),
    "temporal": PhaseSpec("sequential_clips", frozenset({"sh", "s"}), False, True, "bce"),
    "regularize": PhaseSpec("sequential_clips", frozenset(), True, True, "fused", fixed_lr=True),
    "joint": PhaseSpec("sequential_clips", frozenset(), True, True, "fused"),
    "single-sal": PhaseSpec("sequential_clips", frozenset({"s"}), False, True, "bce"),
}

MODE_PHASES = {
    "asto": ["spatial", "temporal", "regularize"],
    "joint": ["joint", "regularize"],
    "single-seg": ["spatial"],
    "single-sal": ["single-sal"],
}


def phases_for(cfg: RunConfig) -> List[str]:
    phases = list(MODE_PHASES[cfg.mode])
    if not cfg.use_reg and "regularize" in phases:
        phases.remove("regularize")
    return phases


def _max_epochs(cfg: RunConfig, phase: str) -> int:
    key = {"single-sal": "temporal"}.get(phase, phase)
    return getattr(cfg, f"max_epochs_{key}")


# -- validation ----------------------------------------------------------------------

def _dtype(model: STMTL):
    return np.float64 if model.cfg.dtype == "f64" else np.float32


def val_scores(model: STMTL, val: Sequence[SceneSequence], need_seg: bool = True, need_sal: bool = True,
               chunk: int = 16) -> Dict[str, float]:
    """Mean type Dice over val frames and mean saliency BCE over val sequences run in order."""
    was = model.training
    model.eval()
    dt = _dtype(model)
    out = {}
    try:
        with no_grad():
            if need_seg:
                scores = []
                for seq in val:
                    for s in range(0, seq.T, chunk):
                        logits = model.segment(Tensor(seq.frames[s:s + chunk].astype(dt))).data
                        labels = logits.argmax(axis=1)
                        scores.extend(type_dice(p, g) for p, g in zip(labels, seq.masks[s:s + chunk]))
                out["dice"] = float(np.mean(scores))
            if need_sal:
                frames = np.stack([seq.frames for seq in val], axis=1).astype(dt)   # [T,B,3,H,W]
                heat = np.stack([seq.heatmaps for seq in val], axis=1)
                T, B, _, H, W = frames.shape
                state = model.init_state(B, H, W)
                prev = model.encode(Tensor(frames[0]))
                bces = []
                for t in range(T):
                    feats = model.encode(Tensor(frames[t]))
                    sal, state = model.saliency_features(feats, prev, state)
                    prev = feats
                    bces.append(saliency_bce(sal.data[:, 0], heat[t]))
                out["bce"] = float(np.mean(bces))
    finally:
        model.train(was)
    return out


def _metric_value(kind: str, scores: Mapping[str, float]) -> float:
    if kind == "dice":
        return scores["dice"]
    if kind == "bce":
        return scores["bce"]
    return scores["dice"] - scores["bce"]


# -- losses per batch ------------------------------------------------------------------

def _frame_loss(model: STMTL, batch: FrameBatch) -> Tensor:
    x = Tensor(batch.frames.astype(_dtype(model)))
    return losses.cross_entropy_multiclass(model.segment(x), batch.masks)


def _clip_loss(model: STMTL, batch: ClipBatch, spec: PhaseSpec, cfg: RunConfig) -> Tensor:
    """Mean per-frame loss over a clip, back-propagated through the whole clip."""
    dt = _dtype(model)
    L, B, _, H, W = batch.frames.shape
    state = model.init_state(B, H, W)
    prev = model.encode(Tensor(batch.prev.astype(dt)))
    total = None
    for k in range(L):
        feats = model.encode(Tensor(batch.frames[k].astype(dt)))
        term = None
        if spec.seg_loss:
            term = losses.cross_entropy_multiclass(model.segment_features(feats), batch.masks[k])
        if spec.sal_loss:
            sal, state = model.saliency_features(feats, prev, state)
            s_loss = losses.saliency_loss(sal, batch.heatmaps[k].astype(dt), alpha=cfg.alpha,
                                          eps=cfg.sinkhorn_eps, iters=cfg.sinkhorn_iters)
            term = s_loss if term is None else term + s_loss
        total = term if total is None else total + term
        prev = feats
    return total * (1.0 / L)


def accumulate_gradients(loss_fn: Callable, chunks: Sequence, sizes: Sequence[int]) -> float:
    """Back-propagate ``sum_i delta_i * loss_fn(chunk_i)`` with ``delta_i = n_i / sum(n)``.

    With mean-reduced chunk losses this equals one pass over the concatenated
    batch.  Returns the weighted loss value.
    """
    total = float(sum(sizes))
    value = 0.0
    for chunk, n in zip(chunks, sizes):
        loss = loss_fn(chunk) * (n / total)
        loss.backward()
        value += loss.item()
    return value


# -- training loop -----------------------------------------------------------------------

def _snapshot(model: STMTL) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _batches(phase_spec: PhaseSpec, train: Sequence[SceneSequence], cfg: RunConfig, phase_seed: int, epoch: int):
    if phase_spec.order == "shuffled_frames":
        return batcher(train, "shuffled_frames", cfg.batch_size, seed=phase_seed, epoch=epoch)
    return batcher(train, "sequential_clips", cfg.clip_batch, clip_len=cfg.clip_len, seed=phase_seed, epoch=epoch)


def _batches_per_epoch(spec: PhaseSpec, train: Sequence[SceneSequence], cfg: RunConfig) -> int:
    if spec.order == "shuffled_frames":
        return math.ceil(sum(s.T for s in train) / cfg.batch_size)
    return math.ceil(sum(s.T // cfg.clip_len for s in train) / cfg.clip_batch)


def train_phase(phase: str, model: STMTL, train: Sequence[SceneSequence], val: Sequence[SceneSequence],
                cfg: RunConfig, order: Optional[str] = None,
                on_epoch: Optional[Callable[[PhaseRecord], None]] = None) -> PhaseRecord:
    """Run one phase until convergence or its epoch budget, then restore the best-on-val weights."""
    if phase not in PHASE_SPECS:
        raise ConfigError(f"unknown phase {phase!r}")
    spec = PHASE_SPECS[phase]
    if order is not None and order != spec.order:
        raise ConfigError(f"phase {phase!r} consumes {spec.order}, got {order}")
    if not train:
        raise ConfigError("no training sequences")
    max_epochs = _max_epochs(cfg, phase)
    phase_seed = cfg.seed * 10 + list(PHASE_SPECS).index(phase)
    max_iter = max(1, max_epochs * _batches_per_epoch(spec, train, cfg))

    model.groups.set_frozen(spec.frozen)
    model.train()
    params = model.groups.trainable()
    opt = OptState(base_lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    record = PhaseRecord(phase)
    mode = "min" if spec.metric == "bce" else "max"
    sign = 1.0 if mode == "max" else -1.0
    best_val, best_state = -math.inf, None
    it = 0
    try:
        for epoch in range(1, max_epochs + 1):
            epoch_losses = []
            lr = cfg.reg_lr if spec.fixed_lr else cfg.lr
            for batch in _batches(spec, train, cfg, phase_seed, epoch):
                lr = cfg.reg_lr if spec.fixed_lr else poly_lr(cfg.lr, min(it, max_iter), max_iter, cfg.power)
                for p in params.values():
                    p.grad = None
                if spec.order == "shuffled_frames":
                    loss = _frame_loss(model, batch)
                else:
                    loss = _clip_loss(model, batch, spec, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss in phase {phase} epoch {epoch}")
                loss.backward()
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                adam_step(params, grads, opt, lr)
                epoch_losses.append(value)
                it += 1
            scores = val_scores(model, val, need_seg=spec.metric != "bce", need_sal=spec.metric != "dice")
            metric = _metric_value(spec.metric, scores)
            if not math.isfinite(metric):
                raise NumericError(f"non-finite validation metric in phase {phase} epoch {epoch}")
            record.epochs.append(epoch)
            record.losses.append(float(np.mean(epoch_losses)))
            record.val_metrics.append(metric)
            record.lrs.append(lr)
            if sign * metric > best_val:
                best_val, best_state, record.best_epoch = sign * metric, _snapshot(model), epoch
            if on_epoch:
                on_epoch(record)
            if converged(record.val_metrics, cfg.patience, cfg.min_delta, mode):
                record.converged_epoch = epoch
                break
    except NumericError as exc:
        if phase not in str(exc):
            raise NumericError(f"{exc} (phase {phase})") from None
        raise
    if best_state is not None:
        model.load_state_dict(best_state)
    model.groups.set_frozen(())
    model.eval()
    return record


def checkpoint_path(out_dir: Path, phase: str) -> Path:
    return Path(out_dir) / f"ckpt_{phase}.stmt"


def run_asto(model: STMTL, train: Sequence[SceneSequence], val: Sequence[SceneSequence], cfg: RunConfig,
             out_dir: Optional[Path] = None, resume: bool = False,
             stop_after: Optional[str] = None) -> List[PhaseRecord]:
    """Run every phase of ``cfg.mode`` in order, checkpointing after each.

    With ``resume`` the latest completed phase checkpoint in ``out_dir`` is
    loaded and its log rows kept; training continues with the next phase.
    ``stop_after`` ends the run after the named phase (used to simulate an
    interruption).
    """
    phases = phases_for(cfg)
    records: List[PhaseRecord] = []
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if out is None:
            raise ConfigError("resume needs an output directory")
        done = [p for p in phases if checkpoint_path(out, p).exists()]
        # resume only from a contiguous prefix of completed phases
        k = 0
        while k < len(phases) and phases[k] in done:
            k += 1
        if k:
            model.load_state_dict(load_archive(checkpoint_path(out, phases[k - 1])))
            log = out / "train_log.csv"
            previous = parse_log(log.read_text(encoding="utf-8")) if log.exists() else []
            records = [r for r in previous if r.phase in phases[:k]]
            start = k

    def write_log(extra: Optional[PhaseRecord] = None) -> None:
        if out is not None:
            (out / "train_log.csv").write_text(format_log(records + ([extra] if extra else [])), encoding="utf-8")

    for phase in phases[start:]:
        rec = train_phase(phase, model, train, val, cfg, on_epoch=write_log)
        records.append(rec)
        write_log()
        if out is not None:
            save_archive(checkpoint_path(out, phase), model.state_dict())
        if stop_after == phase:
            break
    return records


def convergence_report(records: Sequence[PhaseRecord]) -> str:
    lines = []
    for r in records:
        conv = r.converged_epoch if r.converged_epoch is not None else f"budget ({r.epochs[-1] if r.epochs else 0})"
        lines.append(f"{r.phase:<11} epochs={len(r.epochs):<3} converged={conv} best_epoch={r.best_epoch}")
    return "\n".join(lines) + "\n"
