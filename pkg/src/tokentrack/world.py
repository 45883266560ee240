"""Deterministic synthetic tracking videos and the clip sampler used for training.

A sequence is simulated up front (object trajectories, sizes, colors, occluder
schedule) and frames are rendered on access, so long sequences cost almost no
memory. Everything is a pure function of ``(WorldSpec, seed)``.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox

SHAPES = ("rect", "ellipse", "diamond", "triangle")


@dataclass(frozen=True)
class WorldSpec:
    frame_size: int = 160
    num_frames: int = 120
    target_size: tuple[float, float] = (14.0, 22.0)
    aspect: tuple[float, float] = (0.7, 1.4)
    # per-frame drift: hue rate is drawn once per sequence from +-hue_drift
    hue_drift: float = 0.003
    scale_drift: float = 0.01
    scale_bounds: tuple[float, float] = (0.7, 1.4)
    speed: tuple[float, float] = (0.5, 2.0)
    accel_sd: float = 0.12
    max_speed: float = 3.0
    burst_prob: float = 0.01
    burst_speed: float = 6.0
    num_distractors: int = 2
    distractor_hue: float = 0.06
    num_occlusions: tuple[int, int] = (1, 2)
    occlusion_length: tuple[int, int] = (10, 20)
    occlusion_margin: int = 3
    clutter: int = 6
    noise_sd: float = 0.03

    def __post_init__(self):
        lo, hi = self.occlusion_length
        if self.num_occlusions[1] > 0 and (lo < 1 or hi >= self.num_frames or lo > hi):
            raise ValueError("occlusion lengths must fit inside the sequence")
        for v in (self.hue_drift, self.scale_drift, self.accel_sd, self.max_speed, self.noise_sd):
            if not math.isfinite(v):
                raise ValueError("world rates must be finite")


@dataclass
class _Obj:
    shape: str
    centers: np.ndarray   # (T, 2)
    sizes: np.ndarray     # (T, 2) width, height
    colors: np.ndarray    # (T, 3) in [0, 1]


@dataclass
class SyntheticSequence:
    name: str
    frames: Sequence[np.ndarray]     # (T) x (H, W, 3) uint8
    gt: np.ndarray                   # (T, 4) x y w h, frame pixels
    visible: np.ndarray              # (T,) bool
    events: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.gt)

    @property
    def occluded(self) -> np.ndarray:
        return ~self.visible

    def gt_box(self, t: int) -> BBox:
        return BBox.from_xywh(self.gt[t])

    @property
    def frame_shape(self) -> tuple[int, int]:
        f = self.frames[0]
        return f.shape[0], f.shape[1]


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, w: float, h: float) -> np.ndarray:
    ax, ay = np.abs(dx) / (w / 2), np.abs(dy) / (h / 2)
    if shape == "rect":
        return (ax <= 1) & (ay <= 1)
    if shape == "ellipse":
        return ax * ax + ay * ay <= 1
    if shape == "diamond":
        return ax + ay <= 1
    if shape == "triangle":
        t = (dy + h / 2) / h
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= (w / 2) * t)
    raise ValueError(shape)


def _draw(img: np.ndarray, shape: str, c: np.ndarray, size: np.ndarray, color: np.ndarray) -> None:
    H, W = img.shape[:2]
    w, h = size
    x0, x1 = max(int(math.floor(c[0] - w / 2)), 0), min(int(math.ceil(c[0] + w / 2)), W)
    y0, y1 = max(int(math.floor(c[1] - h / 2)), 0), min(int(math.ceil(c[1] + h / 2)), H)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx + 0.5 - c[0], yy + 0.5 - c[1]
    m = _shape_mask(shape, dx, dy, w, h)
    # slight vertical shading so shapes are not perfectly flat
    shade = 1.0 - 0.15 * np.clip(dy / h, -0.5, 0.5)
    patch = img[y0:y1, x0:x1]
    patch[m] = np.clip(color[None, :] * shade[m][:, None], 0, 1)


class _RenderedFrames(Sequence):
    """Lazy, read-only frame list; frame ``t`` is re-rendered on each access."""

    def __init__(self, world: "_World"):
        self._world = world

    def __len__(self) -> int:
        return self._world.T

    def __getitem__(self, t):
        if isinstance(t, slice):
            return [self[i] for i in range(*t.indices(len(self)))]
        if t < 0:
            t += len(self)
        if not 0 <= t < len(self):
            raise IndexError(t)
        return self._world.render(t)


@dataclass
class _World:
    T: int
    background: np.ndarray
    target: _Obj
    distractors: list[_Obj]
    occluders: list[tuple[int, int, np.ndarray, np.ndarray]]   # start, end, xyxy, texture

    def render(self, t: int) -> np.ndarray:
        img = self.background.copy()
        for d in self.distractors:
            _draw(img, d.shape, d.centers[t], d.sizes[t], d.colors[t])
        tg = self.target
        _draw(img, tg.shape, tg.centers[t], tg.sizes[t], tg.colors[t])
        for start, end, (x0, y0, x1, y1), tex in self.occluders:
            if start <= t < end:
                img[y0:y1, x0:x1] = tex
        return np.round(img * 255).astype(np.uint8)


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _simulate_motion(spec: WorldSpec, rng: np.random.Generator, base: np.ndarray,
                     aspect: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T, F = spec.num_frames, spec.frame_size
    log_scale = 0.0
    sizes = np.empty((T, 2))
    centers = np.empty((T, 2))
    burst = np.zeros(T, dtype=bool)
    speed = rng.uniform(*spec.speed)
    ang = rng.uniform(0, 2 * np.pi)
    v = speed * np.array([np.cos(ang), np.sin(ang)])
    lo_s, hi_s = np.log(spec.scale_bounds[0]), np.log(spec.scale_bounds[1])
    s0 = base * np.array([np.sqrt(aspect), 1 / np.sqrt(aspect)])
    p = rng.uniform(s0.max(), F - s0.max(), size=2)
    for t in range(T):
        if t > 0:
            log_scale = float(np.clip(log_scale + rng.normal(0, spec.scale_drift), lo_s, hi_s))
            v = v + rng.normal(0, spec.accel_sd, 2)
            if rng.random() < spec.burst_prob:
                a = rng.uniform(0, 2 * np.pi)
                v = v + spec.burst_speed * np.array([np.cos(a), np.sin(a)])
                burst[t] = True
            sp = float(np.hypot(*v))
            limit = spec.max_speed * (spec.burst_speed / spec.max_speed if burst[t] else 1.0)
            if sp > limit:
                v = v * (limit / sp)
            p = p + v
        size = s0 * np.exp(log_scale)
        half = size / 2
        for k in range(2):
            if p[k] - half[k] < 0:
                p[k] = half[k]
                v[k] = abs(v[k])
            elif p[k] + half[k] > F:
                p[k] = F - half[k]
                v[k] = -abs(v[k])
        if not burst[t] and float(np.hypot(*v)) > spec.max_speed:
            v = v * (spec.max_speed / float(np.hypot(*v)))
        centers[t] = p
        sizes[t] = size
    return centers, sizes, burst


def _occlusion_schedule(spec: WorldSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    n = int(rng.integers(spec.num_occlusions[0], spec.num_occlusions[1] + 1))
    out: list[tuple[int, int]] = []
    lo, hi = spec.occlusion_length
    for _ in range(n):
        for _attempt in range(20):
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(8, max(9, spec.num_frames - length - 6)))
            end = start + length
            if end <= spec.num_frames and all(end + 10 <= s or start >= e + 10 for s, e in out):
                out.append((start, end))
                break
    return sorted(out)


def gen_sequence(spec: WorldSpec, seed: int, name: str | None = None) -> SyntheticSequence:
    rng = np.random.default_rng(seed)
    T, F = spec.num_frames, spec.frame_size

    # background: tinted gradient, static noise and clutter blobs
    base_bg = _hsv(rng.random(), rng.uniform(0.0, 0.3), rng.uniform(0.25, 0.6))
    yy, xx = np.mgrid[0:F, 0:F] / F
    grad = 1.0 + 0.25 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy)
    bg = np.clip(base_bg[None, None, :] * grad[..., None] + rng.normal(0, spec.noise_sd, (F, F, 3)), 0, 1)
    for _ in range(spec.clutter):
        c = rng.uniform(0, F, 2)
        sz = rng.uniform(6, 18, 2)
        _draw(bg, SHAPES[rng.integers(len(SHAPES))], c, sz,
              _hsv(rng.random(), rng.uniform(0.0, 0.5), rng.uniform(0.3, 0.8)))

    shape = SHAPES[rng.integers(len(SHAPES))]
    hue0, sat0, val0 = rng.random(), rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0)
    hue_rate = rng.uniform(-spec.hue_drift, spec.hue_drift)
    base = rng.uniform(*spec.target_size)
    aspect = rng.uniform(*spec.aspect)
    centers, sizes, burst = _simulate_motion(spec, rng, base, aspect)
    colors = np.stack([_hsv(hue0 + hue_rate * t, sat0, val0) for t in range(T)])
    target = _Obj(shape, centers, sizes, colors)

    distractors = []
    for _ in range(spec.num_distractors):
        dh = rng.uniform(-spec.distractor_hue, spec.distractor_hue)
        col = _hsv(hue0 + dh, np.clip(sat0 + rng.uniform(-0.1, 0.1), 0, 1),
                   np.clip(val0 + rng.uniform(-0.1, 0.1), 0, 1))
        d_centers, d_sizes, _ = _simulate_motion(spec, rng, rng.uniform(*spec.target_size),
                                                 rng.uniform(*spec.aspect))
        distractors.append(_Obj(shape, d_centers, d_sizes, np.tile(col, (T, 1))))

    visible = np.ones(T, dtype=bool)
    occluders = []
    if spec.num_occlusions[1] > 0:
        for start, end in _occlusion_schedule(spec, rng):
            lo = (centers[start:end] - sizes[start:end] / 2).min(axis=0) - spec.occlusion_margin
            hi = (centers[start:end] + sizes[start:end] / 2).max(axis=0) + spec.occlusion_margin
            x0, y0 = np.clip(np.floor(lo), 0, F).astype(int)
            x1, y1 = np.clip(np.ceil(hi), 0, F).astype(int)
            gray = rng.uniform(0.35, 0.75)
            tex = np.clip(gray + rng.normal(0, 0.06, (y1 - y0, x1 - x0, 1)), 0, 1) * np.ones(3)
            occluders.append((start, end, (x0, y0, x1, y1), tex))
            visible[start:end] = False

    gt = np.concatenate([centers - sizes / 2, sizes], axis=1)
    near = np.zeros(T, dtype=bool)
    for d in distractors:
        near |= np.hypot(*(d.centers - centers).T) < 2.0 * sizes.max(axis=1)
    world = _World(T, bg, target, distractors, occluders)
    return SyntheticSequence(name or f"seq_{seed:06d}", _RenderedFrames(world), gt, visible,
                             {"fast_motion": burst, "distractor_near": near})


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Square crop with top-left ``(x0, y0)`` and side ``side`` in frame pixels."""

    x0: float
    y0: float
    side: float
    out_size: int

    def to_crop(self, box: BBox) -> BBox:
        s = self.side
        return BBox((box.cx - self.x0) / s, (box.cy - self.y0) / s, box.w / s, box.h / s)

    def to_frame(self, box: BBox) -> BBox:
        s = self.side
        return BBox(self.x0 + box.cx * s, self.y0 + box.cy * s, box.w * s, box.h * s)


def crop_transform(box: BBox, factor: float, out_size: int) -> CropTransform:
    if factor <= 0:
        raise ValueError("context factor must be positive")
    side = factor * math.sqrt(max(box.w * box.h, 1e-12))
    return CropTransform(box.cx - side / 2, box.cy - side / 2, side, out_size)


def sample_crop(frame: np.ndarray, tf: CropTransform) -> np.ndarray:
    """Bilinear resample of ``frame`` over ``tf``; outside pixels take the channel mean."""
    img = np.asarray(frame, dtype=np.float64)
    if frame.dtype == np.uint8:
        img = img / 255.0
    H, W = img.shape[:2]
    fill = img.reshape(-1, img.shape[2]).mean(axis=0)
    n = tf.out_size
    step = tf.side / n
    xs = tf.x0 + (np.arange(n) + 0.5) * step - 0.5
    ys = tf.y0 + (np.arange(n) + 0.5) * step - 0.5
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]

    def gather(yi, xi):
        vy = (yi >= 0) & (yi < H)
        vx = (xi >= 0) & (xi < W)
        vals = img[np.clip(yi, 0, H - 1)[:, None], np.clip(xi, 0, W - 1)[None, :]]
        ok = (vy[:, None] & vx[None, :])[..., None]
        return np.where(ok, vals, fill)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x0 + 1) * wx
    bot = gather(y0 + 1, x0) * (1 - wx) + gather(y0 + 1, x0 + 1) * wx
    return top * (1 - wy) + bot * wy


def crop_region(frame: np.ndarray, box: BBox, context_factor: float, out_size: int):
    """Crop of side ``factor * sqrt(w*h)`` centered on ``box``, resized to ``out_size``.

    Returns ``(pixels in [0, 1], CropTransform)``.
    """
    tf = crop_transform(box, context_factor, out_size)
    return sample_crop(frame, tf), tf


# ---------------------------------------------------------------------------
# clip sampling
# ---------------------------------------------------------------------------

class SamplingError(ValueError):
    pass


@dataclass
class ClipBatch:
    template: np.ndarray        # (n, hz, wz, 3) in [0, 1]
    search: np.ndarray          # (n, m, hx, wx, 3) in [0, 1]
    boxes: np.ndarray           # (n, m, 4) cx cy w h normalized to each search crop
    frame_index: np.ndarray     # (n, m)
    sequence_index: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.search.shape[0]

    @property
    def m(self) -> int:
        return self.search.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.n * self.m


@dataclass(frozen=True)
class SamplerConfig:
    template_size: int = 64
    search_size: int = 128
    template_factor: float = 2.0
    search_factor: float = 4.0
    center_jitter: float = 0.1
    scale_jitter: tuple[float, float] = (0.8, 1.25)
    brightness: float = 0.2
    flip_prob: float = 0.5


def sample_clips(sequences: Sequence[SyntheticSequence], n: int, m: int, seed: int,
                 cfg: SamplerConfig = SamplerConfig(), augment: bool = True) -> ClipBatch:
    """``n`` clips of ``m`` consecutive search frames sharing a first-frame template."""
    eligible = [i for i, s in enumerate(sequences) if len(s) >= m + 1]
    if not eligible:
        raise SamplingError(f"no sequence has the {m + 1} frames a clip needs")
    rng = np.random.default_rng(seed)
    templates, searches, boxes, frames, seqs = [], [], [], [], []
    lo_s, hi_s = np.log(cfg.scale_jitter[0]), np.log(cfg.scale_jitter[1])
    for _ in range(n):
        si = eligible[int(rng.integers(len(eligible)))]
        seq = sequences[si]
        start = int(rng.integers(1, len(seq) - m + 1))
        tmpl, _ = crop_region(seq.frames[0], seq.gt_box(0), cfg.template_factor, cfg.template_size)
        crops, cboxes = [], []
        for f in range(start, start + m):
            gt = seq.gt_box(f)
            side = cfg.search_factor * math.sqrt(gt.w * gt.h)
            side *= math.exp(rng.uniform(lo_s, hi_s)) if augment else 1.0
            jx, jy = (rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2) * side
                      if augment else (0.0, 0.0))
            tf = CropTransform(gt.cx + jx - side / 2, gt.cy + jy - side / 2, side, cfg.search_size)
            crops.append(sample_crop(seq.frames[f], tf))
            cboxes.append(tf.to_crop(gt).as_array())
        crops = np.stack(crops)
        cboxes = np.stack(cboxes)
        if augment:
            gain = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
            tmpl = np.clip(tmpl * gain, 0, 1)
            crops = np.clip(crops * gain, 0, 1)
            if rng.random() < cfg.flip_prob:
                tmpl = tmpl[:, ::-1]
                crops = crops[:, :, ::-1]
                cboxes[:, 0] = 1.0 - cboxes[:, 0]
        templates.append(tmpl)
        searches.append(crops)
        boxes.append(cboxes)
        frames.append(np.arange(start, start + m))
        seqs.append(si)
    return ClipBatch(np.stack(templates), np.stack(searches), np.stack(boxes),
                     np.stack(frames), np.array(seqs))


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

ANNOTATION_FILE = "annotations.txt"


def write_ppm(path: os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    ch = 3 if magic == "P6" else 1
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def export_sequence(seq: SyntheticSequence, root: os.PathLike) -> Path:
    """Write ``root/<name>/{000001.ppm, ..., annotations.txt}``."""
    d = Path(root) / seq.name
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in range(len(seq)):
        write_ppm(d / f"{t + 1:06d}.ppm", seq.frames[t])
        x, y, w, h = (float(v) for v in seq.gt[t])
        lines.append(f"{t + 1} {x!r} {y!r} {w!r} {h!r} {int(seq.visible[t])}")
    (d / ANNOTATION_FILE).write_text("\n".join(lines) + "\n")
    return d


class _DiskFrames(Sequence):
    def __init__(self, paths: list[Path]):
        self._paths = paths

    def __len__(self) -> int:
        return len(self._paths)

    def __getitem__(self, t):
        if isinstance(t, slice):
            return [self[i] for i in range(*t.indices(len(self)))]
        return read_ppm(self._paths[t])


def load_sequence(path: os.PathLike) -> SyntheticSequence:
    d = Path(path)
    rows = [line.split() for line in (d / ANNOTATION_FILE).read_text().splitlines() if line.strip()]
    idx = [int(r[0]) for r in rows]
    gt = np.array([[float(v) for v in r[1:5]] for r in rows])
    visible = np.array([r[5] == "1" for r in rows])
    frames = _DiskFrames([d / f"{i:06d}.ppm" for i in idx])
    return SyntheticSequence(d.name, frames, gt, visible)


def load_dataset(root: os.PathLike) -> list[SyntheticSequence]:
    root = Path(root)
    return [load_sequence(p) for p in sorted(root.iterdir()) if (p / ANNOTATION_FILE).exists()]
