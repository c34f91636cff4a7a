"""Flat key=value run configuration shared by every command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "asto"
    # synthetic data
    T: int = 28
    H: int = 64
    W: int = 64
    K: int = 4
    n_instruments: int = 3
    n_train: int = 8
    n_val: int = 2
    sigma: float = 0.0               # 0 selects H/16
    max_step: float = 4.0
    switch_prob: float = 0.08
    deform_prob: float = 0.1
    deform_scale: float = 0.1
    min_gap: float = 8.0
    w_base: float = 0.5
    lambda_d: float = 0.3
    lambda_a: float = 0.2
    # architecture
    enc_channels: Tuple[int, ...] = (16, 32, 64, 128)
    seg_channels: Tuple[int, ...] = (64, 32, 32, 16)
    sal_channels: Tuple[int, ...] = (64, 32, 32, 16)
    reduction: int = 2
    use_sc_scse: bool = True
    use_lstmpp: bool = True
    dtype: str = "f32"
    # losses
    alpha: float = 0.3
    sinkhorn_eps: float = 0.1
    sinkhorn_iters: int = 50
    # optimisation
    lr: float = 1e-4
    power: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reg_lr: float = 1e-5
    batch_size: int = 8
    clip_len: int = 14
    clip_batch: int = 4
    max_epochs_spatial: int = 60
    max_epochs_temporal: int = 60
    max_epochs_regularize: int = 60
    max_epochs_joint: int = 60
    patience: int = 5
    min_delta: float = 1e-4
    use_reg: bool = True
    # evaluation
    scanpath_reduce: str = "mean"
    auc_splits: int = 100
    fps_timed: int = 10
    # pilot-run thresholds for the desk-scale learning check
    target_dice: float = 0.80
    reg_tolerance: float = 0.02

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {sorted(MODES)}, got {self.mode!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype: expected f32 or f64, got {self.dtype!r}")
        if self.scanpath_reduce not in ("mean", "sum"):
            raise ConfigError(f"scanpath_reduce: expected mean or sum, got {self.scanpath_reduce!r}")
        for key in ("batch_size", "clip_len", "clip_batch", "patience", "sinkhorn_iters", "n_train"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.sinkhorn_eps <= 0:
            raise ConfigError("sinkhorn_eps: must be positive")
        return self

    # -- module views --
    def synth(self, seed: Optional[int] = None):
        from .data import SynthConfig
        return SynthConfig(
            T=self.T, H=self.H, W=self.W, K=self.K, n_instruments=self.n_instruments, max_step=self.max_step,
            switch_prob=self.switch_prob, deform_prob=self.deform_prob, deform_scale=self.deform_scale,
            min_gap=self.min_gap, sigma=self.sigma or None, w_base=self.w_base, lambda_d=self.lambda_d,
            lambda_a=self.lambda_a, seed=self.seed if seed is None else seed,
        )

    def arch(self):
        from .blocks import ArchConfig
        return ArchConfig(
            in_channels=3, num_classes=self.K, enc_channels=self.enc_channels, seg_channels=self.seg_channels,
            sal_channels=self.sal_channels, reduction=self.reduction, use_sc_scse=self.use_sc_scse,
            use_lstmpp=self.use_lstmpp, dtype=self.dtype,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form --
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        cfg = base or cls()
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            changes[key] = value
        return cfg.update(changes)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)

    def update(self, changes) -> "RunConfig":
        """Return a copy with string or typed values applied; unknown keys raise ConfigError."""
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, value in changes.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(self, key)
            parsed[key] = _parse(key, value, default) if isinstance(value, str) else value
        return dataclasses.replace(self, **parsed).validate()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


MODES = {"asto", "joint", "single-seg", "single-sal"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
