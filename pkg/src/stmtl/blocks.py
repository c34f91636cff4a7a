"""Network building blocks and the assembled multi-task model.

Parameters live in flat ``name -> Tensor`` mappings.  Names carry a group
prefix: ``sh.`` (shared encoder), ``s.`` (segmentation decoder) and ``t.``
(saliency decoder).  Batch-norm running statistics are kept separately as
plain arrays under the same prefixes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, no_grad
from .tensor import ops

GROUPS = ("sh", "s", "t")
SEG_BLOCK_ORDER = ["concat", "conv", "norm", "sc_scse", "deconv"]

Gate = Union[float, Tensor, None]


@dataclass
class ArchConfig:
    in_channels: int = 3
    num_classes: int = 4
    enc_channels: Tuple[int, ...] = (16, 32, 64, 128)
    seg_channels: Tuple[int, ...] = (64, 32, 32, 16)
    sal_channels: Tuple[int, ...] = (64, 32, 32, 16)
    hidden: Optional[int] = None
    reduction: int = 2
    lstm_kernel: int = 3
    use_sc_scse: bool = True
    use_lstmpp: bool = True
    dtype: str = "f32"

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.seg_channels = tuple(self.seg_channels)
        self.sal_channels = tuple(self.sal_channels)
        if self.hidden is None:
            self.hidden = self.enc_channels[-1]
        if len(self.enc_channels) != 4 or len(self.seg_channels) != 4 or len(self.sal_channels) != 4:
            raise ConfigError("encoder and both decoders need exactly 4 stages")
        if self.num_classes < 2:
            raise ConfigError("num_classes must include background and at least one instrument class")
        if min(self.seg_channels) < self.reduction:
            raise ConfigError(f"reduction ratio {self.reduction} exceeds a decoder width {self.seg_channels}")

    def manifest(self) -> str:
        d = asdict(self)
        return "\n".join(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in d.items())


@dataclass
class ScSEGates:
    channel_gate: Tensor
    spatial_gate: Tensor


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class ModelOutputs:
    seg_logits: Tensor
    saliency: Tensor


# -- parameter initialisation -------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def _add(self, name, arr):
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

    def conv(self, name, cin, cout, k, zero=False, gain=2.0, bias=True):
        shape = (cout, cin, k, k)
        if zero:
            w = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 * gain / (cin * k * k))
            w = self.rng.uniform(-bound, bound, size=shape)
        self._add(f"{name}.w", w)
        if bias:
            self._add(f"{name}.b", np.zeros(cout))

    def deconv(self, name, cin, cout, k=2, stride=2):
        bound = np.sqrt(6.0 / (cin * k * k / (stride * stride)))
        self._add(f"{name}.w", self.rng.uniform(-bound, bound, size=(cin, cout, k, k)))
        self._add(f"{name}.b", np.zeros(cout))

    def bn(self, name, c):
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(c, dtype=self.dtype)

    def scse(self, name, c, r):
        self.conv(f"{name}.cse1", c, max(c // r, 1), 1)
        self.conv(f"{name}.cse2", max(c // r, 1), c, 1, zero=True)
        self.conv(f"{name}.sse", c, 1, 1, zero=True)


def init_params(cfg: ArchConfig, seed: int = 0) -> Tuple[Dict[str, Tensor], Dict[str, np.ndarray]]:
    """Kaiming-uniform fan-in initialisation; excitation and residual tails start at zero."""
    dt = np.float64 if cfg.dtype == "f64" else np.float32
    ini = _Init(np.random.default_rng(seed), dt)
    enc = cfg.enc_channels
    cin = cfg.in_channels
    for k, c in enumerate(enc, start=1):
        ini.conv(f"sh.enc{k}.down", cin, c, 3)
        ini.bn(f"sh.enc{k}.down_bn", c)
        ini.conv(f"sh.enc{k}.res1", c, c, 3)
        ini.bn(f"sh.enc{k}.res_bn", c)
        ini.conv(f"sh.enc{k}.res2", c, c, 3, zero=True)
        cin = c

    prev = None
    for j, c in enumerate(cfg.seg_channels):
        skip = enc[3 - j]
        cin = skip if prev is None else skip + prev
        ini.conv(f"s.dec{j}.conv", cin, c, 3)
        ini.bn(f"s.dec{j}.bn", c)
        ini.scse(f"s.dec{j}.scse", c, cfg.reduction)
        ini.deconv(f"s.dec{j}.up", c, c)
        prev = c
    ini.conv("s.br.conv1", prev, prev, 3)
    ini.conv("s.br.conv2", prev, prev, 3, zero=True)
    ini.conv("s.head", prev, cfg.num_classes, 1, gain=1.0)

    hid, k = cfg.hidden, cfg.lstm_kernel
    xin = 2 * enc[3] if cfg.use_lstmpp else enc[3]
    for gate in "ifco":
        ini.conv(f"t.lstm.x{gate}", xin, hid, k, gain=1.0, bias=False)
        ini.conv(f"t.lstm.h{gate}", hid, hid, k, gain=1.0, bias=False)
        ini._add(f"t.lstm.b{gate}", np.zeros(hid))
    prev = hid
    for j, c in enumerate(cfg.sal_channels):
        ini.conv(f"t.dec{j}.conv1", prev, c, 3)
        ini.deconv(f"t.dec{j}.up", c, c)
        ini.conv(f"t.dec{j}.conv2", c, c, 3)
        if j < 3:
            ini.conv(f"t.dec{j}.proj", enc[2 - j], c, 1, gain=1.0)
        prev = c
    ini.conv("t.head", prev, 1, 1, gain=1.0)
    return ini.params, ini.buffers


# -- primitive wrappers --------------------------------------------------------

def _conv(x, p, name, stride=1, pad=None):
    w = p[f"{name}.w"]
    if pad is None:
        pad = w.shape[2] // 2
    return ops.conv2d(x, w, p.get(f"{name}.b"), stride=stride, pad=pad)


def _deconv(x, p, name):
    return ops.conv_transpose2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=2, pad=0)


def _bn(x, p, bufs, name, training):
    return ops.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], bufs[f"{name}.mean"], bufs[f"{name}.var"],
                          training=training)


def _gate_tensor(g, like: Tensor, shape) -> Tensor:
    if isinstance(g, Tensor):
        return g
    return Tensor(np.full(shape, g, dtype=like.data.dtype))


# -- attention -----------------------------------------------------------------

def scse_gates(x: Tensor, p: Mapping[str, Tensor], name: str) -> ScSEGates:
    z = ops.global_avg_pool(x)
    z = ops.relu(_conv(z, p, f"{name}.cse1"))
    gc = ops.sigmoid(_conv(z, p, f"{name}.cse2"))
    gs = ops.sigmoid(_conv(x, p, f"{name}.sse"))
    return ScSEGates(gc, gs)


def _excite(x, p, name, gates, reduction):
    if x.shape[1] < reduction:
        raise ConfigError(f"{x.shape[1]} channels is below the reduction ratio {reduction}")
    if gates is None:
        g = scse_gates(x, p, name)
    else:
        n, c, h, w = x.shape
        g = ScSEGates(_gate_tensor(gates[0], x, (n, c, 1, 1)), _gate_tensor(gates[1], x, (n, 1, h, w)))
    return ops.add(ops.mul(g.channel_gate, x), ops.mul(g.spatial_gate, x)), g


def scse_forward(x: Tensor, p: Mapping[str, Tensor], name: str = "scse",
                 gates: Optional[Tuple[Gate, Gate]] = None, reduction: int = 2):
    """Concurrent spatial and channel squeeze-and-excitation: ``g_c*x + g_s*x``.

    ``gates`` overrides the computed (channel, spatial) gates with constants
    or tensors.
    """
    return _excite(x, p, name, gates, reduction)


def sc_scse_forward(x: Tensor, p: Mapping[str, Tensor], name: str = "scse",
                    gates: Optional[Tuple[Gate, Gate]] = None, reduction: int = 2):
    """scSE plus an identity skip: ``g_c*x + g_s*x + x``."""
    y, g = _excite(x, p, name, gates, reduction)
    return ops.add(y, x), g


# -- recurrent cell -------------------------------------------------------------

def convlstmpp_step(x_in: Tensor, x_prev_enc: Optional[Tensor], state: LstmState, p: Mapping[str, Tensor],
                    name: str = "t.lstm", probe: Optional[dict] = None) -> LstmState:
    """One ConvLSTM step on the channel concatenation of current and previous encoder features.

    With ``x_prev_enc=None`` this is a plain ConvLSTM on ``x_in`` alone.
    """
    if x_prev_enc is not None and x_prev_enc.shape != x_in.shape:
        raise ShapeError(f"ConvLSTM++ inputs differ: {x_in.shape} vs {x_prev_enc.shape}")
    if state.h.shape != state.c.shape:
        raise ShapeError(f"hidden {state.h.shape} and cell {state.c.shape} differ")
    if state.h.shape[2:] != x_in.shape[2:] or state.h.shape[0] != x_in.shape[0]:
        raise ShapeError(f"state {state.h.shape} does not match input {x_in.shape}")
    x_t = x_in if x_prev_enc is None else ops.concat([x_in, x_prev_enc], axis=1)
    if probe is not None:
        probe["x_t"] = x_t
    hid = state.h.shape[1]
    if p[f"{name}.hi.w"].shape[0] != hid:
        raise ShapeError(f"state has {hid} channels, cell expects {p[f'{name}.hi.w'].shape[0]}")
    # all four gates in one convolution over [X_t, H_{t-1}]
    w = ops.concat([ops.concat([p[f"{name}.x{g}.w"], p[f"{name}.h{g}.w"]], axis=1) for g in "ifco"], axis=0)
    b = ops.concat([p[f"{name}.b{g}"] for g in "ifco"], axis=0)
    z = ops.conv2d(ops.concat([x_t, state.h], axis=1), w, b, stride=1, pad=w.shape[2] // 2)
    zi, zf, zc, zo = ops.split(z, [hid] * 4, axis=1)
    i, f, o = ops.sigmoid(zi), ops.sigmoid(zf), ops.sigmoid(zo)
    c = ops.add(ops.mul(f, state.c), ops.mul(i, ops.tanh(zc)))
    h = ops.mul(o, ops.tanh(c))
    return LstmState(h, c)


# -- encoder and decoders ----------------------------------------------------------

def encoder_forward(image: Tensor, p: Mapping[str, Tensor], bufs: Mapping[str, np.ndarray],
                    training: bool = False) -> List[Tensor]:
    """Four residual stages, each halving the resolution."""
    if image.ndim != 4 or image.shape[2] % 16 or image.shape[3] % 16:
        raise ShapeError(f"encoder input {image.shape} must be [N,C,H,W] with H, W divisible by 16")
    feats, x = [], image
    for k in range(1, 5):
        trunk = ops.relu(_bn(_conv(x, p, f"sh.enc{k}.down", stride=2), p, bufs, f"sh.enc{k}.down_bn", training))
        branch = ops.relu(_bn(_conv(trunk, p, f"sh.enc{k}.res1"), p, bufs, f"sh.enc{k}.res_bn", training))
        x = ops.relu(ops.add(trunk, _conv(branch, p, f"sh.enc{k}.res2")))
        feats.append(x)
    return feats


def boundary_refine(x: Tensor, p: Mapping[str, Tensor], name: str = "s.br") -> Tensor:
    return ops.add(x, _conv(ops.relu(_conv(x, p, f"{name}.conv1")), p, f"{name}.conv2"))


def seg_decoder_forward(enc_feats: Sequence[Tensor], p: Mapping[str, Tensor], bufs: Mapping[str, np.ndarray],
                        training: bool = False, use_sc_scse: bool = True, reduction: int = 2,
                        trace: Optional[list] = None) -> Tensor:
    """Segmentation logits at input resolution.

    ``trace`` (if given) receives one list of step names per decoder block.
    """
    if len(enc_feats) != 4:
        raise ContractError(f"segmentation decoder needs 4 encoder stages, got {len(enc_feats)}")
    excite = sc_scse_forward if use_sc_scse else scse_forward
    x = None
    for j in range(4):
        steps = []
        skip = enc_feats[3 - j]
        x = ops.concat([skip] if x is None else [skip, x], axis=1)
        steps.append("concat")
        x = _conv(x, p, f"s.dec{j}.conv")
        steps.append("conv")
        x = ops.relu(_bn(x, p, bufs, f"s.dec{j}.bn", training))
        steps.append("norm")
        x, _ = excite(x, p, f"s.dec{j}.scse", reduction=reduction)
        steps.append("sc_scse" if use_sc_scse else "scse")
        x = _deconv(x, p, f"s.dec{j}.up")
        steps.append("deconv")
        if trace is not None:
            trace.append(steps)
    x = boundary_refine(x, p)
    return _conv(x, p, "s.head")


def sal_decoder_forward(enc_feats_t: Sequence[Tensor], enc_feats_prev: Optional[Sequence[Tensor]],
                        state: LstmState, p: Mapping[str, Tensor], probe: Optional[dict] = None):
    """Saliency map in [0, 1] and the updated recurrent state.

    ``enc_feats_prev=None`` runs the recurrent cell on current features only.
    """
    if enc_feats_prev is not None and [f.shape for f in enc_feats_t] != [f.shape for f in enc_feats_prev]:
        raise ShapeError("encoder features of frames t and t-1 differ in shape")
    prev_deep = None if enc_feats_prev is None else enc_feats_prev[3]
    state = convlstmpp_step(enc_feats_t[3], prev_deep, state, p, probe=probe)
    x = state.h
    for j in range(4):
        x = ops.relu(_conv(x, p, f"t.dec{j}.conv1"))
        x = ops.relu(_deconv(x, p, f"t.dec{j}.up"))
        x = ops.relu(_conv(x, p, f"t.dec{j}.conv2"))
        if j < 3:
            x = ops.add(x, _conv(enc_feats_t[2 - j], p, f"t.dec{j}.proj"))
    return ops.sigmoid(_conv(x, p, "t.head")), state


# -- assembled model ---------------------------------------------------------------

class ParamGroups:
    """Disjoint named parameter sets ``sh``, ``s``, ``t`` with freeze flags."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.groups: Dict[str, Dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, t in params.items():
            g = name.split(".", 1)[0]
            if g not in self.groups:
                raise ConfigError(f"parameter {name!r} has no group prefix")
            self.groups[g][name] = t
        self.frozen: set = set()

    @property
    def sh(self):
        return self.groups["sh"]

    @property
    def s(self):
        return self.groups["s"]

    @property
    def t(self):
        return self.groups["t"]

    def all(self) -> Dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            out.update(self.groups[g])
        return out

    def trainable(self) -> Dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            if g not in self.frozen:
                out.update(self.groups[g])
        return out

    def set_frozen(self, frozen) -> "ParamGroups":
        frozen = set(frozen)
        unknown = frozen - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter group(s): {sorted(unknown)}")
        self.frozen = frozen
        for g in GROUPS:
            for t in self.groups[g].values():
                t.requires_grad = g not in frozen
                if g in frozen:
                    t.grad = None
        return self


def set_frozen(groups: ParamGroups, frozen) -> ParamGroups:
    return groups.set_frozen(frozen)


class STMTL:
    """Shared encoder with a segmentation decoder and a recurrent saliency decoder."""

    def __init__(self, cfg: Optional[ArchConfig] = None, seed: int = 0):
        self.cfg = cfg or ArchConfig()
        params, self.buffers = init_params(self.cfg, seed)
        self.params = params
        self.groups = ParamGroups(params)
        self.training = False

    # bn layers of frozen groups run on their running statistics
    def _bn_training(self, group: str) -> bool:
        return self.training and group not in self.groups.frozen

    def train(self, mode: bool = True) -> "STMTL":
        self.training = mode
        return self

    def eval(self) -> "STMTL":
        return self.train(False)

    def init_state(self, n: int, h: int, w: int) -> LstmState:
        dt = np.float64 if self.cfg.dtype == "f64" else np.float32
        shape = (n, self.cfg.hidden, h // 16, w // 16)
        return LstmState(Tensor(np.zeros(shape, dt)), Tensor(np.zeros(shape, dt)))

    def encode(self, image: Tensor) -> List[Tensor]:
        return encoder_forward(image, self.params, self.buffers, self._bn_training("sh"))

    def segment_features(self, feats: Sequence[Tensor], trace: Optional[list] = None) -> Tensor:
        return seg_decoder_forward(feats, self.params, self.buffers, self._bn_training("s"),
                                   use_sc_scse=self.cfg.use_sc_scse, reduction=self.cfg.reduction, trace=trace)

    def segment(self, image: Tensor) -> Tensor:
        return self.segment_features(self.encode(image))

    def saliency_features(self, feats_t, feats_prev, state: LstmState, probe: Optional[dict] = None):
        prev = feats_prev if self.cfg.use_lstmpp else None
        return sal_decoder_forward(feats_t, prev, state, self.params, probe=probe)

    def step(self, frame_t: Tensor, state: LstmState, feats_prev: Sequence[Tensor], segment: bool = True,
             probe: Optional[dict] = None):
        """Process one frame given cached previous-frame features.

        Returns ``(ModelOutputs, state, feats_t)``; ``seg_logits`` is None when
        ``segment`` is false.
        """
        feats_t = self.encode(frame_t)
        seg = self.segment_features(feats_t) if segment else None
        sal, state = self.saliency_features(feats_t, feats_prev, state, probe=probe)
        return ModelOutputs(seg, sal), state, feats_t

    def forward(self, frame_t: Tensor, frame_prev: Tensor, state: Optional[LstmState] = None,
                probe: Optional[dict] = None):
        if frame_t.shape != frame_prev.shape:
            raise ShapeError(f"frames differ in shape: {frame_t.shape} vs {frame_prev.shape}")
        if state is None:
            n, _, h, w = frame_t.shape
            state = self.init_state(n, h, w)
        feats_prev = self.encode(frame_prev)
        out, state, _ = self.step(frame_t, state, feats_prev, probe=probe)
        return out, state

    __call__ = forward

    # -- persistence --
    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update({f"{name}@buf": arr for name, arr in self.buffers.items()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            name = sorted(missing or extra)[0]
            raise ContractError(f"checkpoint/architecture mismatch at tensor {name!r}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ContractError(f"checkpoint/architecture mismatch at tensor {name!r}: "
                                    f"{state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=t.data.dtype)
        for name, arr in self.buffers.items():
            src = state[f"{name}@buf"]
            if src.shape != arr.shape:
                raise ContractError(f"checkpoint/architecture mismatch at tensor {name!r}")
            arr[...] = src


def stmtl_forward(frame_t: Tensor, frame_prev: Tensor, state: Optional[LstmState], model: STMTL):
    return model.forward(frame_t, frame_prev, state)


def predict(model: STMTL, frames: np.ndarray, batch: int = 1):
    """Run a sequence ``[T,3,H,W]`` through the model without recording a graph.

    Returns ``(seg_logits [T,K,H,W], saliency [T,H,W])``; frame 0 uses itself as
    its predecessor.
    """
    dt = np.float64 if model.cfg.dtype == "f64" else np.float32
    segs, sals = [], []
    with no_grad():
        t_count, _, h, w = frames.shape
        state = model.init_state(1, h, w)
        prev = None
        for t in range(t_count):
            x = Tensor(frames[t:t + 1].astype(dt))
            if prev is None:
                prev = model.encode(x)
            out, state, prev = model.step(x, state, prev)
            segs.append(out.seg_logits.data[0])
            sals.append(out.saliency.data[0, 0])
    return np.stack(segs), np.stack(sals)
