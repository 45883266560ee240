"""Acceptance suite: one test per criterion, each reporting a PASS or FAIL line.

The effectiveness and occlusion-recovery criteria read the ablation results
cached by ``python -m tokentrack.experiments``; missing or stale entries
(different source fingerprint or config) are retrained here first, which
takes about ten minutes per run.
"""

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest

from tokentrack import tensor as T
from tokentrack.backbone import Backbone, PatchEmbed
from tokentrack.boxes import BBox, cxcywh_to_xyxy
from tokentrack.boxes import iou as corner_iou
from tokentrack.cli import main, window_ablation
from tokentrack.config import RunConfig
from tokentrack.experiments import SEEDS, aggregate, run_ablation
from tokentrack.head import CenterHead, decode_box, guide, hamming_prior
from tokentrack.losses import focal_loss, giou_loss, l1_loss, make_target_map
from tokentrack.model import TrackerModel
from tokentrack.nn import MLP, Block, LayerNorm, Linear, MultiHeadAttention
from tokentrack.temporal import VARIANTS, MambaLayer, TemporalModule
from tokentrack.tensor import Tensor, finite_diff_check
from tokentrack.train import OptimConfig, TrainConfig, Trainer, clip_loss, lr_schedule
from tokentrack.world import SamplerConfig, sample_clips

from conftest import ACCEPTANCE_LINES, TOY_BACKBONE, toy_model_config
from test_cli import TINY
from test_losses import loop_focal
from test_temporal import naive_attention, naive_scan, scan_inputs

GRAD_TOL = 1e-4
ABLATION_CACHE = Path(__file__).resolve().parents[1] / "experiments" / "ablation.json"


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line for one criterion; failures still propagate."""
    notes = []
    try:
        yield notes
    except BaseException:
        line = f"criterion {number}: FAIL {title}"
        raise
    else:
        line = f"criterion {number}: PASS {title}"
    finally:
        if notes:
            line += " (" + "; ".join(notes) + ")"
        ACCEPTANCE_LINES.append(line)
        print(line)


def _param_check(loss, module, per_tensor):
    worst = 0.0
    for _, p in module.named_parameters():
        stride = max(1, p.size // per_tensor)
        worst = max(worst, finite_diff_check(lambda _: loss(), p, indices=range(0, p.size, stride)))
    return worst


def _layer_cases(rng):
    """``(name, loss, tensors, module)`` for every layer type at D=16."""
    D = 16
    cases = []

    def add(name, fn, inputs, module=None):
        w = rng.normal(size=fn().shape)
        cases.append((name, lambda: T.tsum(fn() * w), inputs, module))

    x = Tensor(rng.normal(size=(2, 4, D)), requires_grad=True)
    kv = Tensor(rng.normal(size=(2, 5, D)), requires_grad=True)
    lin, ln, mlp = Linear(D, 8, rng), LayerNorm(D), MLP(D, 2 * D, rng)
    ln.gain.data = rng.normal(size=D)
    ln.bias.data = rng.normal(size=D)
    add("linear", lambda: lin(x), [x], lin)
    add("layer_norm", lambda: ln(x), [x], ln)
    add("mlp", lambda: mlp(x), [x], mlp)
    mha = MultiHeadAttention(D, 2, rng)
    add("attention", lambda: mha(x, kv, kv), [x, kv], mha)
    sblk, cblk = Block(D, 2, 2.0, rng), Block(D, 2, 2.0, rng, cross=True)
    add("self_block", lambda: sblk(x), [x], sblk)
    add("cross_block", lambda: cblk(x, kv, kv), [x, kv], cblk)
    img = Tensor(rng.uniform(size=(1, 32, 32, 3)), requires_grad=True)
    pe = PatchEmbed(D, rng)
    add("patch_embed", lambda: pe(img), [img], pe)
    bb = Backbone(TOY_BACKBONE, rng)
    bb.track_seed.data = rng.normal(size=bb.track_seed.shape)
    z = Tensor(rng.normal(size=(2, TOY_BACKBONE.n_template, D)), requires_grad=True)
    s = Tensor(rng.normal(size=(2, TOY_BACKBONE.n_search, D)), requires_grad=True)
    add("joint_encode", lambda: T.concat(bb.joint_encode(bb.track_tokens(2), z, s), axis=1), [z, s], bb)
    mamba = MambaLayer(D, rng, state_dim=4)
    add("mamba_layer", lambda: mamba(x), [x], mamba)
    for v in VARIANTS:
        tm = TemporalModule(v, D, 2, 2.0, rng, state_dim=4)
        add(f"temporal_{v}", lambda tm=tm: tm(x), [x], tm)
    tok = Tensor(rng.normal(size=(2, 1, D)), requires_grad=True)
    grid = Tensor(rng.normal(size=(2, 16, D)), requires_grad=True)
    add("guidance", lambda: guide(grid, tok)[0], [grid, tok])
    head = CenterHead(D, 8, rng)
    add("center_head", lambda: T.concat([head(grid).score.reshape(2, 16, 1), head(grid).offset.reshape(2, 16, 2),
                                         head(grid).size.reshape(2, 16, 2)], axis=-1), [grid], head)
    target = make_target_map(BBox(0.4, 0.6, 0.5, 0.5), 4)
    logits = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    cases.append(("focal_loss", lambda: focal_loss(T.sigmoid(logits), target), [logits], None))
    pred = Tensor(np.array([[0.46, 0.56, 0.25, 0.31], [0.5, 0.4, 0.2, 0.2]]), requires_grad=True)
    gt = Tensor(np.array([[0.5, 0.5, 0.3, 0.2], [0.2, 0.7, 0.1, 0.3]]))
    cases.append(("giou_loss", lambda: T.tsum(giou_loss(pred, gt)), [pred], None))
    cases.append(("l1_loss", lambda: T.tsum(l1_loss(pred, gt)), [pred], None))
    return cases


def test_criterion_1_gradient_suite(small_world):
    with criterion(1, "gradient suite below 1e-4 for every layer type and the full loss pipeline") as notes:
        t0 = time.time()
        rng = np.random.default_rng(0)
        worst = {}
        for name, loss, inputs, module in _layer_cases(rng):
            err = max(finite_diff_check(lambda _: loss(), t, eps=1e-6) for t in inputs)
            if module is not None:
                err = max(err, _param_check(loss, module, per_tensor=6))
            worst[name] = err
        sampler = SamplerConfig(template_size=32, search_size=64)
        clip = sample_clips(small_world, 2, 4, seed=0, cfg=sampler)
        for variant in VARIANTS:
            model = TrackerModel(toy_model_config(variant=variant, window=4), seed=1)
            model.backbone.track_seed.data = np.random.default_rng(2).normal(size=model.backbone.track_seed.shape)
            worst[f"pipeline_{variant}"] = _param_check(lambda: clip_loss(model, clip).total, model, per_tensor=2)
        elapsed = time.time() - t0
        top = max(worst, key=worst.get)
        notes.append(f"{len(worst)} checks, worst {top} {worst[top]:.2e}, {elapsed:.0f}s")
        assert all(v < GRAD_TOL for v in worst.values()), {k: v for k, v in worst.items() if v >= GRAD_TOL}
        assert elapsed < 120


def test_criterion_2_causality():
    with criterion(2, "future perturbations never change earlier outputs (scan layer, causal conv, 20 seeds)") as notes:
        checked = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            layer = MambaLayer(8, r, state_dim=4)
            x = r.normal(size=(2, 7, 8))
            kernel = r.normal(size=(4, 8))
            base_layer = layer(Tensor(x)).data
            base_conv = T.depthwise_causal_conv1d(Tensor(x), Tensor(kernel)).data
            for j in range(7):
                xp = x.copy()
                xp[:, j] += r.normal(size=(2, 8))
                out_layer = layer(Tensor(xp)).data
                out_conv = T.depthwise_causal_conv1d(Tensor(xp), Tensor(kernel)).data
                assert np.array_equal(out_layer[:, :j], base_layer[:, :j])
                assert np.array_equal(out_conv[:, :j], base_conv[:, :j])
                assert np.all(np.any(out_layer[:, j] != base_layer[:, j], axis=-1))
                checked += 1
        notes.append(f"{checked} perturbed positions")


def test_criterion_3_oracles(rng):
    with criterion(3, "scan, attention, focal, GIoU and IoU match independent oracles") as notes:
        scan_err = 0.0
        for _ in range(5):
            args = scan_inputs(rng)
            got = T.selective_scan(*(Tensor(a) for a in args)).data
            scan_err = max(scan_err, float(np.max(np.abs(got - naive_scan(*args).astype(float)))))
        mha = MultiHeadAttention(8, 2, rng)
        for name in ("q", "k", "v", "out"):
            getattr(mha, name).bias.data = rng.normal(size=8)
        q, k, v = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 5, 8))
        attn_err = float(np.max(np.abs(mha(Tensor(q), Tensor(k), Tensor(v)).data - naive_attention(mha, q, k, v))))
        pred = rng.uniform(0.01, 0.99, (6, 6))
        target = make_target_map(BBox(0.4, 0.55, 0.4, 0.3), 6)
        focal_err = abs(focal_loss(Tensor(pred), target).item() - loop_focal(pred, target))
        corner = giou_loss(Tensor([0.5, 0.5, 1.0, 1.0]), Tensor([1.5, 1.5, 1.0, 1.0])).item()
        third = float(corner_iou(cxcywh_to_xyxy(np.array([1.0, 1.0, 2.0, 2.0])),
                                 cxcywh_to_xyxy(np.array([2.0, 1.0, 2.0, 2.0]))))
        notes.append(f"scan {scan_err:.1e}, attention {attn_err:.1e}, focal {focal_err:.1e}, "
                     f"corner GIoU {corner}, IoU {third:.6f}")
        assert scan_err < 1e-10 and attn_err < 1e-10 and focal_err < 1e-12
        assert corner == 1.5
        assert abs(third - 1 / 3) < 1e-15


def test_criterion_4_logged_loss_composition(tmp_path):
    with criterion(4, "logged total equals cls + 2 giou + 5 l1 at every step") as notes:
        cfg = tmp_path / "tiny.txt"
        RunConfig().with_values({**TINY, "train.epochs": 3}).save(cfg)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        rows = (tmp_path / "run" / "train_log.txt").read_text().splitlines()
        for row in rows:
            cls, giou, l1, total = (float(v) for v in row.split()[3:7])
            assert total == cls + 2 * giou + 5 * l1
        notes.append(f"{len(rows)} logged steps, exact")


def test_criterion_5_protocol(small_world):
    with criterion(5, "batch unit n=4 x m=8, decay by 10 at 80% of epochs, window ablation keeps n*m=32") as notes:
        cfg = RunConfig()
        n, m = cfg["train.clips_per_unit"], cfg["temporal.window"]
        assert (n, m) == (4, 8)
        clip = sample_clips(small_world, n, m, seed=0, cfg=cfg.sampler_config())
        assert clip.num_pairs == 32 and clip.search.shape[:2] == (4, 8)
        optim = cfg.optim_config()
        base = (optim.lr_backbone, optim.lr_other)
        assert optim.decay_epoch == 8
        for e in range(1, 11):
            expected = base if e < 8 else (base[0] / 10, base[1] / 10)
            assert lr_schedule(e, optim) == expected
        full = OptimConfig(epochs=150)
        assert lr_schedule(119, full) == (4e-5, 4e-4) and lr_schedule(120, full) == (4e-5 / 10, 4e-4 / 10)
        # the trainer applies the decayed rates from the decay epoch on
        seen = []
        model = TrackerModel(toy_model_config(window=2), seed=0)
        trainer = Trainer(model, small_world, OptimConfig(lr_backbone=1e-3, lr_other=1e-2, epochs=5),
                          TrainConfig(clips_per_unit=2, pairs_per_epoch=4, prefetch=False),
                          SamplerConfig(template_size=32, search_size=64))
        step = trainer.step
        trainer.step = lambda clips, lrs: (seen.append(lrs), step(clips, lrs))[1]
        trainer.fit()
        assert seen == [(1e-3, 1e-2)] * 3 + [(1e-3 / 10, 1e-2 / 10)] * 2
        pairs = [(c["temporal.window"], c["train.clips_per_unit"]) for c in window_ablation(cfg)]
        assert pairs == [(2, 16), (4, 8), (8, 4)]
        assert all(a * b == 32 for a, b in pairs)
        notes.append(f"decay epoch {optim.decay_epoch} of {optim.epochs}; windows {pairs}")


@pytest.fixture(scope="module")
def ablation():
    return run_ablation(RunConfig(), seeds=SEEDS, cache=ABLATION_CACHE)


def test_criterion_6_desk_effectiveness(ablation):
    with criterion(6, "temporal models beat the baseline on the synthetic suite (AO, 3 seeds)") as notes:
        table = aggregate(ablation)
        base = table["baseline"]["ao"]
        notes.append(", ".join(f"{arm} {r['ao']:.4f}" for arm, r in table.items()))
        # runtime budget: all seeds of one arm, training plus evaluation
        minutes = {arm: sum(r["train_seconds"] + r["eval_seconds"] for r in per_seed.values()) / 60
                   for arm, per_seed in ablation.items()}
        notes.append("minutes " + ", ".join(f"{arm} {v:.0f}" for arm, v in minutes.items()))
        assert all(v < 45 for v in minutes.values())
        assert table["mamba-cross"]["ao"] - base >= 0.05
        assert all(table[v]["ao"] > base for v in VARIANTS)


def test_criterion_7_occlusion_recovery(ablation):
    with criterion(7, "post-occlusion re-acquisition beats the baseline (3 seeds)") as notes:
        table = aggregate(ablation)
        notes.append(f"mamba-cross {table['mamba-cross']['reacquire']:.4f}, "
                     f"baseline {table['baseline']['reacquire']:.4f}")
        assert table["mamba-cross"]["reacquire"] > table["baseline"]["reacquire"]


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "train and eval re-runs reproduce logs, checkpoints and reports bitwise") as notes:
        cfg = tmp_path / "tiny.txt"
        RunConfig().with_values(TINY).save(cfg)
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
            assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--out", str(out / "eval")]) == 0
            runs.append(out)
        files = ["train_log.txt", "model.ckpt", "epoch_001.ckpt", "eval/report.txt"]
        files += [str(p.relative_to(runs[0])) for p in sorted((runs[0] / "eval" / "results").iterdir())]
        for f in files:
            assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes(), f
        notes.append(f"{len(files)} files identical")


def test_criterion_9_decode_and_prior(rng):
    with criterion(9, "argmax invariant to positive scaling, all-ones prior equals none, prior values") as notes:
        for trial in range(200):
            G = int(rng.integers(2, 17))
            score = rng.uniform(0, 1, (G, G))
            off, size = rng.uniform(0, 1, (G, G, 2)), rng.uniform(0.05, 1, (G, G, 2))
            c = float(np.exp(rng.uniform(-10, 10)))
            prior = hamming_prior(G)
            assert decode_box(score, off, size) == decode_box(score * c, off, size)
            assert decode_box(score, off, size, prior) == decode_box(score * c, off, size, prior)
            assert decode_box(score, off, size, np.ones((G, G))) == decode_box(score, off, size)
        w = hamming_prior(9)
        corners = [w[0, 0], w[0, 8], w[8, 0], w[8, 8]]
        assert all(abs(v - 0.0064) < 1e-12 for v in corners)
        assert abs(w[4, 4] - 1.0) < 1e-12
        notes.append(f"corner {w[0, 0]:.12f}, center {w[4, 4]:.12f}")
