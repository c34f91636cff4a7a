"""Synthetic moving-instrument sequences with masks, task-weighted saliency and scanpaths.

Instruments are capsules (a segment with rounded ends) drifting over a
smooth tissue-like texture.  Each instrument gets one fixation at its tip,
weighted by how much it moved and changed size since the previous frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .tensor.io import load_tensor, save_tensor

CLASS_COLORS = {
    1: (0.85, 0.86, 0.90),
    2: (0.40, 0.45, 0.55),
    3: (0.92, 0.76, 0.35),
    4: (0.55, 0.85, 0.55),
    5: (0.30, 0.30, 0.30),
    6: (0.70, 0.55, 0.85),
    7: (0.95, 0.95, 0.60),
}


@dataclass
class SynthConfig:
    T: int = 28
    H: int = 64
    W: int = 64
    K: int = 4
    n_instruments: int = 3
    max_step: float = 4.0        # px per frame for the most active instrument
    activity: Tuple[float, ...] = (1.0, 0.4, 0.1)
    switch_prob: float = 0.08    # chance per frame that activity levels are reassigned
    max_turn: float = 0.08       # rad per frame
    deform_prob: float = 0.1
    deform_scale: float = 0.1
    min_gap: float = 8.0         # minimum px between capsule surfaces
    sigma: Optional[float] = None
    w_base: float = 0.5
    lambda_d: float = 0.3
    lambda_a: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = self.H / 16

    def validate(self) -> None:
        if self.H % 16 or self.W % 16:
            raise ConfigError(f"H, W must be divisible by 16, got {self.H}x{self.W}")
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if not 0 <= self.n_instruments <= self.K - 1:
            raise ConfigError(f"n_instruments must lie in [0, K-1] = [0, {self.K - 1}]")
        if self.K - 1 > len(CLASS_COLORS):
            raise ConfigError(f"at most {len(CLASS_COLORS)} instrument classes are supported")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")


@dataclass
class Instrument:
    """Pose of one instrument in one frame."""

    id: int
    class_id: int
    x: float
    y: float
    theta: float
    half_length: float
    half_width: float

    @property
    def tip(self) -> Tuple[float, float]:
        return (self.x + self.half_length * math.cos(self.theta),
                self.y + self.half_length * math.sin(self.theta))

    @property
    def tail(self) -> Tuple[float, float]:
        return (self.x - self.half_length * math.cos(self.theta),
                self.y - self.half_length * math.sin(self.theta))

    @property
    def area(self) -> float:
        return 4 * self.half_length * self.half_width + math.pi * self.half_width ** 2


@dataclass
class SceneSequence:
    frames: np.ndarray                    # [T,3,H,W] float32 in [0,1]
    masks: np.ndarray                     # [T,H,W] uint8 class ids
    fixations: List[List[Tuple[float, float, float]]]
    heatmaps: np.ndarray                  # [T,H,W] float32 in [0,1]
    scanpaths: List[List[int]]
    seed: int
    poses: List[List[Instrument]] = field(default_factory=list)
    weights: List[Dict[int, float]] = field(default_factory=list)
    class_ids: Dict[int, int] = field(default_factory=dict)
    K: int = 4
    split: str = "train"

    @property
    def T(self) -> int:
        return self.frames.shape[0]


# -- saliency ground truth ---------------------------------------------------------

def fixation_heatmap(fixations: Sequence[Tuple[float, float, float]], H: int, W: int, sigma: float) -> np.ndarray:
    """Weighted isotropic Gaussians at the fixations, max-normalized to [0, 1]."""
    out = np.zeros((H, W), dtype=np.float64)
    if not fixations:
        return out.astype(np.float32)
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    for x, y, w in fixations:
        out += w * np.exp(-((uu - x) ** 2 + (vv - y) ** 2) / (2 * sigma * sigma))
    peak = out.max()
    if peak > 0:
        out /= peak
    return out.astype(np.float32)


def task_weights(curr: Sequence[Instrument], prev: Optional[Sequence[Instrument]], H: int, W: int,
                 w_base: float = 0.5, lambda_d: float = 0.3, lambda_a: float = 0.2) -> Dict[int, float]:
    """Per-instrument importance from centroid displacement and relative area change."""
    norm = math.hypot(H, W) / 10
    before = {p.id: p for p in prev} if prev else {}
    out = {}
    for inst in curr:
        old = before.get(inst.id)
        if old is None:
            out[inst.id] = w_base
            continue
        disp = math.hypot(inst.x - old.x, inst.y - old.y) / norm
        darea = abs(inst.area - old.area) / old.area
        out[inst.id] = float(min(max(w_base + lambda_d * disp + lambda_a * darea, 0.0), 1.5))
    return out


def scanpath_gt(weights: Dict[int, float]) -> List[int]:
    return sorted(weights, key=lambda i: (-weights[i], i))


# -- rendering -------------------------------------------------------------------------

def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0, 1) if denom > 0 else 0.0
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _segments_gap(a: Instrument, b: Instrument) -> float:
    """Distance between capsule surfaces (negative when they overlap)."""
    (a0, a1), (b0, b1) = (a.tail, a.tip), (b.tail, b.tip)
    d = min(
        float(_segment_distance(a0[0], a0[1], b0[0], b0[1], b1[0], b1[1])),
        float(_segment_distance(a1[0], a1[1], b0[0], b0[1], b1[0], b1[1])),
        float(_segment_distance(b0[0], b0[1], a0[0], a0[1], a1[0], a1[1])),
        float(_segment_distance(b1[0], b1[1], a0[0], a0[1], a1[0], a1[1])),
    )
    if _segments_cross(a0, a1, b0, b1):
        d = 0.0
    return d - a.half_width - b.half_width


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _coverage(inst: Instrument, H: int, W: int) -> np.ndarray:
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    (ax, ay), (bx, by) = inst.tail, inst.tip
    d = _segment_distance(uu, vv, ax, ay, bx, by)
    return np.clip(inst.half_width + 0.5 - d, 0.0, 1.0)


def _inside(inst: Instrument, H: int, W: int, margin: float = 1.0) -> bool:
    r = inst.half_width + margin
    return all(r <= x <= W - 1 - r and r <= y <= H - 1 - r for x, y in (inst.tip, inst.tail))


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    base = np.array([0.72, 0.30, 0.28]) + rng.uniform(-0.06, 0.06, size=3)
    low = gaussian_filter(rng.normal(size=(H, W)), sigma=H / 8)
    low /= np.abs(low).max() + 1e-12
    fine = gaussian_filter(rng.normal(size=(H, W)), sigma=1.0)
    fine /= np.abs(fine).max() + 1e-12
    img = base[:, None, None] * (1 + 0.18 * low[None]) + 0.05 * fine[None]
    return np.clip(img, 0, 1)


def _render(bg: np.ndarray, insts: Sequence[Instrument], rng: np.random.Generator):
    _, H, W = bg.shape
    img = bg.copy()
    mask = np.zeros((H, W), dtype=np.uint8)
    for inst in insts:
        alpha = _coverage(inst, H, W)
        color = np.array(CLASS_COLORS[inst.class_id])
        # mild shading across the shaft
        vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
        (ax, ay), (bx, by) = inst.tail, inst.tip
        d = _segment_distance(uu, vv, ax, ay, bx, by)
        shade = 1.0 - 0.25 * np.clip(d / (inst.half_width + 0.5), 0, 1)
        tex = color[:, None, None] * shade[None] + 0.02 * rng.normal(size=(3, H, W))
        img = img * (1 - alpha[None]) + tex * alpha[None]
        mask[alpha >= 0.5] = inst.class_id
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return img.astype(np.float32), mask


# -- sequence generation -------------------------------------------------------------------

def _spawn(rng, cfg: SynthConfig, iid: int, cls: int, half_length: float,
           others: List[Instrument]) -> Instrument:
    for _ in range(2000):
        inst = Instrument(
            id=iid, class_id=cls,
            x=rng.uniform(0.15, 0.85) * cfg.W, y=rng.uniform(0.15, 0.85) * cfg.H,
            theta=rng.uniform(-math.pi, math.pi),
            half_length=half_length, half_width=3.0 * cfg.H / 64,
        )
        if _inside(inst, cfg.H, cfg.W) and all(_segments_gap(inst, o) >= cfg.min_gap for o in others):
            return inst
    raise ConfigError("could not place instruments without overlap; reduce n_instruments or sizes")


def _move(rng, cfg: SynthConfig, inst: Instrument, heading: float, speed: float, base_length: float,
          others: List[Instrument]) -> Tuple[Instrument, float]:
    """One step of a heading random walk; blocked moves turn around, and the pose stays put if all fail."""
    heading += rng.normal(scale=0.4)
    for attempt in range(8):
        step = speed * rng.uniform(0.8, 1.0)
        # deformations are transient: length relaxes back toward the shared base
        hl = base_length + 0.5 * (inst.half_length - base_length)
        if rng.random() < cfg.deform_prob:
            hl = base_length * (1 + rng.uniform(-cfg.deform_scale, cfg.deform_scale))
        cand = Instrument(inst.id, inst.class_id, inst.x + step * math.cos(heading),
                          inst.y + step * math.sin(heading),
                          inst.theta + rng.uniform(-cfg.max_turn, cfg.max_turn), hl, inst.half_width)
        if _inside(cand, cfg.H, cfg.W) and all(_segments_gap(cand, o) >= cfg.min_gap for o in others):
            return cand, heading
        heading += math.pi + rng.normal(scale=0.5) if attempt == 0 else rng.uniform(-math.pi, math.pi)
    return Instrument(**vars(inst)), heading


def _activity_levels(rng, cfg: SynthConfig, n: int) -> List[float]:
    levels = [cfg.activity[min(k, len(cfg.activity) - 1)] for k in range(n)]
    return [levels[k] for k in rng.permutation(n)]


def gen_sequence(cfg: SynthConfig, index: int = 0, split: str = "train") -> SceneSequence:
    """Render one deterministic sequence; ``index`` selects an independent stream for the same seed.

    Instruments share one geometry per sequence and differ in how actively
    they move, so the task weights separate them.  A pre-roll step before
    frame 0 gives the first frame motion-based weights too.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    H, W, T = cfg.H, cfg.W, cfg.T
    bg = _background(rng, H, W)
    classes = [int(c) for c in rng.permutation(np.arange(1, cfg.K))[:cfg.n_instruments]]
    base_length = rng.uniform(0.14, 0.18) * H
    insts: List[Instrument] = []
    for iid, cls in enumerate(classes, start=1):
        insts.append(_spawn(rng, cfg, iid, cls, base_length, insts))
    headings = [float(rng.uniform(-math.pi, math.pi)) for _ in insts]
    levels = _activity_levels(rng, cfg, len(insts))

    frames, masks, heatmaps, fixations, scanpaths, poses, weights = [], [], [], [], [], [], []
    prev = None
    for t in range(-1, T):
        if insts and rng.random() < cfg.switch_prob:
            levels = _activity_levels(rng, cfg, len(insts))
        moved = []
        for k, inst in enumerate(insts):
            new, headings[k] = _move(rng, cfg, inst, headings[k], levels[k] * cfg.max_step, base_length,
                                     moved + insts[k + 1:])
            moved.append(new)
        prev, insts = insts, moved
        if t < 0:
            continue
        img, mask = _render(bg, insts, rng)
        w = task_weights(insts, prev, H, W, cfg.w_base, cfg.lambda_d, cfg.lambda_a)
        fx = [(float(round(i.tip[0])), float(round(i.tip[1])), w[i.id]) for i in insts]
        frames.append(img)
        masks.append(mask)
        fixations.append(fx)
        heatmaps.append(fixation_heatmap(fx, H, W, cfg.sigma))
        scanpaths.append(scanpath_gt(w))
        poses.append([Instrument(**vars(i)) for i in insts])
        weights.append(w)
    empty = np.zeros((0, 3, H, W), np.float32)
    return SceneSequence(
        frames=np.stack(frames) if frames else empty, masks=np.stack(masks), fixations=fixations,
        heatmaps=np.stack(heatmaps), scanpaths=scanpaths, seed=cfg.seed, poses=poses, weights=weights,
        class_ids={iid: c for iid, c in enumerate(classes, start=1)}, K=cfg.K, split=split,
    )


def gen_dataset(cfg: SynthConfig, n_train: int = 8, n_val: int = 2) -> List[SceneSequence]:
    return [gen_sequence(cfg, i, "train" if i < n_train else "val") for i in range(n_train + n_val)]


# -- batching ----------------------------------------------------------------------------

@dataclass
class FrameBatch:
    frames: np.ndarray      # [B,3,H,W]
    masks: np.ndarray       # [B,H,W]
    heatmaps: np.ndarray    # [B,1,H,W]
    index: List[Tuple[int, int]]
    kind: str = "shuffled_frames"


@dataclass
class ClipBatch:
    prev: np.ndarray        # [B,3,H,W] frame preceding each clip
    frames: np.ndarray      # [L,B,3,H,W]
    masks: np.ndarray       # [L,B,H,W]
    heatmaps: np.ndarray    # [L,B,1,H,W]
    index: List[Tuple[int, List[int]]]
    kind: str = "sequential_clips"


def batcher(dataset: Sequence[SceneSequence], mode: str, batch_size: int, clip_len: int = 14, seed: int = 0,
            epoch: int = 0) -> Iterator:
    """Deterministic minibatches for one epoch.

    ``shuffled_frames`` yields every frame once in seeded random order;
    ``sequential_clips`` yields non-overlapping ordered clips (clip order
    seeded) together with the frame preceding each clip.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch, 0 if mode == "shuffled_frames" else 1])
    if mode == "shuffled_frames":
        items = [(s, t) for s, seq in enumerate(dataset) for t in range(seq.T)]
        order = rng.permutation(len(items))
        for start in range(0, len(order), batch_size):
            idx = [items[i] for i in order[start:start + batch_size]]
            yield FrameBatch(
                frames=np.stack([dataset[s].frames[t] for s, t in idx]),
                masks=np.stack([dataset[s].masks[t] for s, t in idx]),
                heatmaps=np.stack([dataset[s].heatmaps[t][None] for s, t in idx]),
                index=idx,
            )
    elif mode == "sequential_clips":
        clips = []
        for s, seq in enumerate(dataset):
            if clip_len > seq.T:
                raise ConfigError(f"clip_len {clip_len} exceeds sequence length {seq.T}")
            for start in range(0, seq.T - clip_len + 1, clip_len):
                clips.append((s, list(range(start, start + clip_len))))
        order = rng.permutation(len(clips))
        for start in range(0, len(order), batch_size):
            chosen = [clips[i] for i in order[start:start + batch_size]]
            yield ClipBatch(
                prev=np.stack([dataset[s].frames[max(ts[0] - 1, 0)] for s, ts in chosen]),
                frames=np.stack([np.stack([dataset[s].frames[ts[k]] for s, ts in chosen])
                                 for k in range(clip_len)]),
                masks=np.stack([np.stack([dataset[s].masks[ts[k]] for s, ts in chosen]) for k in range(clip_len)]),
                heatmaps=np.stack([np.stack([dataset[s].heatmaps[ts[k]][None] for s, ts in chosen])
                                   for k in range(clip_len)]),
                index=chosen,
            )
    else:
        raise ConfigError(f"unknown batching mode {mode!r}")


# -- on-disk layout -----------------------------------------------------------------------

def _write_pnm(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        h, w, _ = arr.shape
        header = f"P6\n{w} {h}\n255\n".encode()
    else:
        h, w = arr.shape
        header = f"P5\n{w} {h}\n255\n".encode()
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[pos:pos + w * h * ch], dtype=np.uint8)
    return data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)


def _fmt_pose(p: Instrument) -> str:
    return ":".join([str(p.id), str(p.class_id)] + [repr(float(v)) for v in (p.x, p.y, p.theta, p.half_length,
                                                                              p.half_width)])


def meta_text(seq: SceneSequence) -> str:
    T, _, H, W = seq.frames.shape
    lines = [f"seed={seq.seed}", f"split={seq.split}", f"T={T}", f"H={H}", f"W={W}", f"K={seq.K}",
             "class_ids=" + ",".join(f"{i}:{c}" for i, c in sorted(seq.class_ids.items()))]
    for t in range(T):
        lines.append(f"poses_{t}=" + ";".join(_fmt_pose(p) for p in seq.poses[t]))
        lines.append(f"weights_{t}=" + ",".join(f"{i}:{w!r}" for i, w in sorted(seq.weights[t].items())))
        lines.append(f"fixations_{t}=" + ";".join(f"{x:g}:{y:g}:{w!r}" for x, y, w in seq.fixations[t]))
        lines.append(f"scanpath_{t}=" + ",".join(map(str, seq.scanpaths[t])))
    return "\n".join(lines) + "\n"


def save_sequence(seq: SceneSequence, folder: Path) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for t in range(seq.T):
        img = np.round(seq.frames[t].transpose(1, 2, 0) * 255).astype(np.uint8)
        _write_pnm(folder / f"frame_{t}.ppm", img)
        _write_pnm(folder / f"mask_{t}.pgm", seq.masks[t])
        save_tensor(folder / f"heatmap_{t}.stmt", seq.heatmaps[t].astype(np.float32))
        _write_pnm(folder / f"heatmap_{t}.pgm", np.round(seq.heatmaps[t] * 255).astype(np.uint8))
    (folder / "meta.txt").write_text(meta_text(seq), encoding="utf-8")


def _parse_meta(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_sequence(folder: Path) -> SceneSequence:
    folder = Path(folder)
    meta = _parse_meta((folder / "meta.txt").read_text(encoding="utf-8"))
    T, K = int(meta["T"]), int(meta["K"])
    frames, masks, heatmaps, fixations, scanpaths, poses, weights = [], [], [], [], [], [], []
    for t in range(T):
        frames.append(_read_pnm(folder / f"frame_{t}.ppm").transpose(2, 0, 1).astype(np.float32) / 255)
        masks.append(_read_pnm(folder / f"mask_{t}.pgm").copy())
        heatmaps.append(load_tensor(folder / f"heatmap_{t}.stmt").astype(np.float32))
        fx = []
        for item in filter(None, meta.get(f"fixations_{t}", "").split(";")):
            x, y, w = item.split(":")
            fx.append((float(x), float(y), float(w)))
        fixations.append(fx)
        scanpaths.append([int(i) for i in filter(None, meta.get(f"scanpath_{t}", "").split(","))])
        ps = []
        for item in filter(None, meta.get(f"poses_{t}", "").split(";")):
            i, c, x, y, th, hl, hw = item.split(":")
            ps.append(Instrument(int(i), int(c), float(x), float(y), float(th), float(hl), float(hw)))
        poses.append(ps)
        ws = {}
        for item in filter(None, meta.get(f"weights_{t}", "").split(",")):
            i, w = item.split(":")
            ws[int(i)] = float(w)
        weights.append(ws)
    class_ids = {}
    for item in filter(None, meta.get("class_ids", "").split(",")):
        i, c = item.split(":")
        class_ids[int(i)] = int(c)
    return SceneSequence(np.stack(frames), np.stack(masks), fixations, np.stack(heatmaps), scanpaths,
                         int(meta["seed"]), poses, weights, class_ids, K, meta.get("split", "train"))


def load_dataset(root: Path) -> Tuple[List[SceneSequence], List[SceneSequence]]:
    """Load ``<root>/seq_<n>`` folders, returned as (train, val) by their recorded split."""
    root = Path(root)
    folders = sorted((p for p in root.glob("seq_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    seqs = [load_sequence(p) for p in folders]
    return [s for s in seqs if s.split == "train"], [s for s in seqs if s.split == "val"]
