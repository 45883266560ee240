"""Sliding-window inference over whole sequences and one-pass evaluation metrics."""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import BBox, xywh_to_xyxy
from .boxes import iou as _iou_corners
from .head import decode_maps, hamming_prior
from .model import TrackerModel
from .temporal import WindowBuffer
from .tensor import ContractError
from .world import SyntheticSequence, crop_region, write_ppm

SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)
PRECISION_THRESHOLDS = np.arange(51, dtype=float)
NORM_PRECISION_THRESHOLDS = np.round(np.arange(101) * 0.005, 10)
PRECISION_PIXELS = 20.0
NORM_PRECISION_AT = 0.2
REACQUIRE_IOU = 0.5
REACQUIRE_FRAMES = 5
MIN_BOX_SIDE = 2.0


def iou(a: BBox, b: BBox) -> float:
    return float(_iou_corners(a.xyxy(), b.xyxy()))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _clamp_box(box: BBox, frame_hw: tuple[int, int]) -> BBox:
    """Keep the center inside the frame and the size within [2 px, frame]."""
    H, W = frame_hw
    w = min(max(box.w, MIN_BOX_SIDE), W)
    h = min(max(box.h, MIN_BOX_SIDE), H)
    return BBox(min(max(box.cx, 0.0), W), min(max(box.cy, 0.0), H), w, h)


class TrackerSession:
    """Online tracking state for a batch of sequences stepped in lock step.

    The template is encoded once from the first-frame ground truth and never
    re-encoded. The window holds at most ``window`` post-backbone track
    tokens, oldest first.
    """

    def __init__(self, model: TrackerModel, first_frames: Sequence[np.ndarray],
                 first_boxes: Sequence[BBox], use_prior: bool = True,
                 window: int | None = None, template_factor: float = 2.0,
                 search_factor: float = 4.0):
        self.model = model
        cfg = model.cfg
        self.window = cfg.window if window is None else window
        self.use_prior = use_prior
        self.search_factor = search_factor
        self.frame_hw = [f.shape[:2] for f in first_frames]
        self.prior = hamming_prior(cfg.grid) if use_prior else None
        self.buffer = WindowBuffer(self.window)
        self.frames_seen = 0
        self.last_similarity = None
        size = cfg.backbone.template_size
        crops = np.stack([crop_region(f, b, template_factor, size)[0]
                          for f, b in zip(first_frames, first_boxes)])
        with T.no_grad():
            self.template = model.encode_template(crops)
        self.boxes = list(first_boxes)
        # the first frame contributes its track token, read around the known box
        self._encode(first_frames, self.boxes)
        self.frames_seen = 1
        self._check_window()

    def _encode(self, frames, centers):
        size = self.model.cfg.backbone.search_size
        crops, tfs = zip(*(crop_region(f, b, self.search_factor, size) for f, b in zip(frames, centers)))
        with T.no_grad():
            track, _, x = self.model.encode_frames(self.template, np.stack(crops))
            if track is not None:
                self.buffer.push(track)
        return x, tfs

    def _check_window(self):
        if self.model.cfg.use_track_token:
            expected = min(self.frames_seen, self.window)
            if len(self.buffer) != expected:
                raise AssertionError(f"window holds {len(self.buffer)} tokens, expected {expected}")

    def step(self, frames: Sequence[np.ndarray]) -> list[BBox]:
        """Track one new frame per sequence; returns frame-coordinate boxes."""
        x, tfs = self._encode(frames, self.boxes)
        with T.no_grad():
            context = self.model.context_token(self.buffer.as_sequence()) if len(self.buffer) else None
            maps, sim = self.model.predict(x, context)
        self.last_similarity = None if sim is None else sim.data[..., 0]
        local = decode_maps(maps, self.prior)
        self.boxes = [_clamp_box(tf.to_frame(b), hw) for tf, b, hw in zip(tfs, local, self.frame_hw)]
        self.frames_seen += 1
        self._check_window()
        return self.boxes


def track_sequences(model: TrackerModel, sequences: Sequence[SyntheticSequence],
                    use_prior: bool = True, window: int | None = None,
                    on_frame=None) -> list[list[BBox]]:
    """Track every sequence from its first-frame box; frame 1 returns the ground truth.

    Sequences of equal length are batched together; results do not depend on
    how the sequences are grouped beyond floating-point summation order.
    ``on_frame(t, indices, session)`` is called after every tracked frame.
    """
    if any(len(s) == 0 for s in sequences):
        raise ContractError("cannot track an empty sequence")
    groups = defaultdict(list)
    for i, s in enumerate(sequences):
        groups[len(s)].append(i)
    results: list[list[BBox] | None] = [None] * len(sequences)
    for length, idx in sorted(groups.items()):
        seqs = [sequences[i] for i in idx]
        first = [s.gt_box(0) for s in seqs]
        session = TrackerSession(model, [s.frames[0] for s in seqs], first, use_prior, window)
        out = [[b] for b in first]
        for t in range(1, length):
            boxes = session.step([s.frames[t] for s in seqs])
            for o, b in zip(out, boxes):
                o.append(b)
            if on_frame is not None:
                on_frame(t, idx, session)
        for i, o in zip(idx, out):
            results[i] = o
    return results


def track_sequence(model: TrackerModel, sequence: SyntheticSequence, use_prior: bool = True,
                   window: int | None = None) -> list[BBox]:
    return track_sequences(model, [sequence], use_prior, window)[0]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    success_curve: np.ndarray
    auc: float
    ao: float
    sr50: float
    precision_curve: np.ndarray
    precision: float
    norm_precision_curve: np.ndarray
    norm_precision: float
    num_frames: int
    extras: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        d = {"auc": self.auc, "ao": self.ao, "sr50": self.sr50, "precision": self.precision,
             "norm_precision": self.norm_precision, "frames": float(self.num_frames)}
        d.update(self.extras)
        return d


def _as_xywh(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], BBox):
        return np.array([b.xywh() for b in boxes], dtype=float)
    return np.asarray(boxes, dtype=float).reshape(-1, 4)


def frame_scores(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame IoU, center error (px) and size-normalized center error."""
    p, g = _as_xywh(pred), _as_xywh(gt)
    if p.shape != g.shape:
        raise ContractError(f"{len(p)} predictions for {len(g)} ground-truth boxes")
    overlaps = _iou_corners(xywh_to_xyxy(p), xywh_to_xyxy(g))
    pc = p[:, :2] + p[:, 2:] / 2
    gc = g[:, :2] + g[:, 2:] / 2
    err = np.linalg.norm(pc - gc, axis=1)
    norm_err = err / np.sqrt(np.maximum(g[:, 2] * g[:, 3], 1e-12))
    return overlaps, err, norm_err


def report_from_scores(overlaps, err, norm_err) -> MetricReport:
    overlaps, err, norm_err = (np.asarray(a, dtype=float) for a in (overlaps, err, norm_err))
    n = len(overlaps)
    if n == 0:
        raise ContractError("no frames to score")
    success = np.array([(overlaps >= t).mean() for t in SUCCESS_THRESHOLDS])
    prec = np.array([(err <= t).mean() for t in PRECISION_THRESHOLDS])
    nprec = np.array([(norm_err <= t).mean() for t in NORM_PRECISION_THRESHOLDS])
    return MetricReport(
        success_curve=success, auc=float(success.mean()), ao=float(overlaps.mean()),
        sr50=float((overlaps >= 0.5).mean()), precision_curve=prec,
        precision=float((err <= PRECISION_PIXELS).mean()), norm_precision_curve=nprec,
        norm_precision=float((norm_err <= NORM_PRECISION_AT).mean()), num_frames=n)


def ope_evaluate(pred_boxes, gt_boxes, frame_size=None, skip_first: bool = True) -> MetricReport:
    """One-pass evaluation of one sequence; frame 1 (the initialization) is not scored.

    ``frame_size`` is accepted for interface symmetry; all metrics here are
    defined in absolute pixels or relative to the ground-truth box.
    """
    overlaps, err, norm_err = frame_scores(pred_boxes, gt_boxes)
    s = 1 if skip_first else 0
    return report_from_scores(overlaps[s:], err[s:], norm_err[s:])


def occlusion_intervals(visible: np.ndarray) -> list[tuple[int, int]]:
    """Maximal ``[start, end)`` runs of invisible frames that end before the sequence does."""
    vis = np.asarray(visible, dtype=bool)
    out, t = [], 0
    while t < len(vis):
        if not vis[t]:
            s = t
            while t < len(vis) and not vis[t]:
                t += 1
            if t < len(vis):
                out.append((s, t))
        else:
            t += 1
    return out


def reacquisitions(overlaps: np.ndarray, visible: np.ndarray,
                   frames: int = REACQUIRE_FRAMES, threshold: float = REACQUIRE_IOU) -> tuple[int, int]:
    """``(recovered, events)``: an event recovers if IoU > threshold within
    ``frames`` frames from the first visible frame after an occlusion."""
    overlaps = np.asarray(overlaps)
    events = occlusion_intervals(visible)
    hit = sum(bool(np.any(overlaps[end:end + frames] > threshold)) for _, end in events)
    return hit, len(events)


def evaluate_suite(pred: Sequence, sequences: Sequence[SyntheticSequence]) -> MetricReport:
    """Pool frames over all sequences (frame 1 of each excluded).

    Extras hold AO per flagged-frame subset (occluded, distractor nearby,
    fast motion) and the post-occlusion re-acquisition rate.
    """
    all_o, all_e, all_n = [], [], []
    flags = defaultdict(list)
    hits = events = 0
    for boxes, seq in zip(pred, sequences, strict=True):
        o, e, n = frame_scores(boxes, seq.gt)
        all_o.append(o[1:])
        all_e.append(e[1:])
        all_n.append(n[1:])
        flags["occluded"].append(o[1:][~seq.visible[1:]])
        for key in ("distractor_near", "fast_motion"):
            if key in seq.events:
                flags[key].append(o[1:][np.asarray(seq.events[key], dtype=bool)[1:]])
        h, k = reacquisitions(o, seq.visible)
        hits += h
        events += k
    report = report_from_scores(np.concatenate(all_o), np.concatenate(all_e), np.concatenate(all_n))
    for key, chunks in flags.items():
        vals = np.concatenate(chunks) if chunks else np.zeros(0)
        if len(vals):
            report.extras[f"ao_{key}"] = float(vals.mean())
    report.extras["reacquire_events"] = float(events)
    report.extras["reacquire_rate"] = float(hits / events) if events else float("nan")
    return report


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def write_results(path: os.PathLike, boxes: Sequence[BBox]) -> None:
    """One ``frame_index x y w h`` line per frame, 1-based."""
    lines = [f"{t + 1} " + " ".join(repr(float(v)) for v in b.xywh()) for t, b in enumerate(boxes)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path: os.PathLike) -> list[BBox]:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return [BBox.from_xywh([float(v) for v in r[1:5]]) for r in rows]


def write_report(path: os.PathLike, values: dict) -> None:
    """Flat ``key = value`` text, keys sorted."""
    Path(path).write_text("".join(f"{k} = {float(v)!r}\n" for k, v in sorted(values.items())))


def read_report(path: os.PathLike) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def draw_box(img: np.ndarray, box: BBox, color, thickness: int = 1) -> np.ndarray:
    """Draw a rectangle outline in place on an ``(H, W, 3)`` uint8 image."""
    H, W = img.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box.xyxy())
    x0, x1 = max(x0, 0), min(x1, W - 1)
    y0, y1 = max(y0, 0), min(y1, H - 1)
    if x0 > x1 or y0 > y1:
        return img
    c = np.asarray(color, dtype=np.uint8)
    for k in range(thickness):
        img[min(y0 + k, y1), x0:x1 + 1] = c
        img[max(y1 - k, y0), x0:x1 + 1] = c
        img[y0:y1 + 1, min(x0 + k, x1)] = c
        img[y0:y1 + 1, max(x1 - k, x0)] = c
    return img


def similarity_image(sim: np.ndarray, upscale: int = 8) -> np.ndarray:
    """Guidance scores ``(N_x,)`` in (0, 1) as a ``G x G`` grayscale image, upscaled."""
    sim = np.asarray(sim, dtype=float)
    G = int(round(np.sqrt(sim.size)))
    grid = sim.reshape(G, G)
    img = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
    return np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))


def trace_sequence(model: TrackerModel, seq: SyntheticSequence, out_dir: os.PathLike,
                   use_prior: bool = True) -> list[BBox]:
    """Track ``seq`` and dump annotated frames (green GT, red prediction) and guidance maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sims = {}

    def keep(t, idx, session):
        if session.last_similarity is not None:
            sims[t] = session.last_similarity[0].copy()

    boxes = track_sequences(model, [seq], use_prior, on_frame=keep)[0]
    for t, b in enumerate(boxes):
        img = np.array(seq.frames[t], dtype=np.uint8)
        draw_box(img, seq.gt_box(t), (0, 255, 0))
        draw_box(img, b, (255, 0, 0))
        write_ppm(out / f"frame_{t + 1:06d}.ppm", img)
        if t in sims:
            write_ppm(out / f"guidance_{t + 1:06d}.pgm", similarity_image(sims[t]))
    write_results(out / "results.txt", boxes)
    return boxes
