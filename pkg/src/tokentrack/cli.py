"""Command-line entry point: gen-data, train, eval, trace, summary."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import FULL_SCALE
from .config import RunConfig
from .evaluation import evaluate_suite, ope_evaluate, trace_sequence, track_sequences, write_report, write_results
from .model import ModelConfig, TrackerModel
from .summary import format_summary, param_counts
from .train import Trainer, TrainState
from .world import export_sequence, gen_sequence, load_dataset

log = logging.getLogger("tokentrack")

CONFIG_FILE = "config.txt"
LOG_FILE = "train_log.txt"
FINAL_CHECKPOINT = "model.ckpt"


# ---------------------------------------------------------------------------
# building blocks shared with the experiment driver
# ---------------------------------------------------------------------------

def sequence_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def generate_sequences(cfg: RunConfig, count: int, base_seed: int, prefix: str = "seq"):
    spec = cfg.world_spec()
    return [gen_sequence(spec, sequence_seed(base_seed, i), f"{prefix}_{i:04d}") for i in range(count)]


def eval_suite(cfg: RunConfig):
    """The fixed evaluation sequences (independent of the training seed)."""
    return generate_sequences(cfg, cfg["eval.num_sequences"], cfg["eval.suite_seed"], "eval")


def with_window(cfg: RunConfig, m: int) -> RunConfig:
    """Set the window to ``m`` and rescale the clips per unit so ``n * m`` stays fixed."""
    pairs = cfg["train.clips_per_unit"] * cfg["temporal.window"]
    if m < 1 or pairs % m:
        raise ValueError(f"window {m} does not divide the {pairs} pairs of a batch unit")
    return cfg.with_values({"temporal.window": m, "train.clips_per_unit": pairs // m})


def window_ablation(cfg: RunConfig, windows=(2, 4, 8)) -> list[RunConfig]:
    return [with_window(cfg, m) for m in windows]


def make_checkpoint(model: TrackerModel, cfg: RunConfig, state: TrainState | None) -> ckpt_io.Checkpoint:
    if state is None:
        return ckpt_io.Checkpoint(cfg.to_text(), model.state_dict())
    return ckpt_io.Checkpoint(cfg.to_text(), model.state_dict(), state.step, state.epoch,
                              (dict(state.m), dict(state.v)))


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> tuple[TrackerModel, RunConfig]:
    cfg = RunConfig.from_text(ck.config_text)
    model = TrackerModel(cfg.model_config(), seed=cfg["seed"])
    model.load_state_dict(ck.params)
    return model, cfg


def train_model(cfg: RunConfig, sequences, out_dir: Path | None = None,
                resume: ckpt_io.Checkpoint | None = None, on_step=None) -> tuple[TrackerModel, Trainer]:
    model = TrackerModel(cfg.model_config(), seed=cfg["seed"])
    state = None
    if resume is not None:
        model.load_state_dict(resume.params)
        m, v = resume.moments if resume.moments else ({}, {})
        state = TrainState(step=resume.step, epoch=resume.epoch,
                           m={k: a.copy() for k, a in m.items()}, v={k: a.copy() for k, a in v.items()})
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / CONFIG_FILE)
        log_fh = open(out_dir / LOG_FILE, "a" if resume is not None else "w")
    trainer = Trainer(model, sequences, cfg.optim_config(), cfg.train_config(), cfg.sampler_config(),
                      seed=cfg["seed"], log_file=log_fh, state=state)
    every = cfg["train.checkpoint_every"]
    try:
        while trainer.state.epoch <= trainer.optim.epochs:
            trainer.run_epoch(on_step)
            done = trainer.state.epoch - 1
            if out_dir is not None and every and done % every == 0 and done < trainer.optim.epochs:
                ckpt_io.save(out_dir / f"epoch_{done:03d}.ckpt", make_checkpoint(model, cfg, trainer.state))
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        ckpt_io.save(out_dir / FINAL_CHECKPOINT, make_checkpoint(model, cfg, trainer.state))
    return model, trainer


def evaluate_model(model: TrackerModel, sequences, use_prior: bool = True, window: int | None = None,
                   out_dir: Path | None = None) -> dict[str, float]:
    preds = track_sequences(model, sequences, use_prior=use_prior, window=window)
    report = evaluate_suite(preds, sequences)
    values = report.as_dict()
    if out_dir is not None:
        res = out_dir / "results"
        res.mkdir(parents=True, exist_ok=True)
        for seq, boxes in zip(sequences, preds):
            write_results(res / f"{seq.name}.txt", boxes)
            per = ope_evaluate(boxes, seq.gt)
            values[f"seq.{seq.name}.ao"] = per.ao
            values[f"seq.{seq.name}.auc"] = per.auc
        write_report(out_dir / "report.txt", values)
    return values


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.no_temporal:
        overrides["temporal.enabled"] = False
    if args.no_track_token:
        overrides["temporal.track_token"] = False
        overrides["temporal.enabled"] = False
    if args.no_prior:
        overrides["eval.use_prior"] = False
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.with_values(overrides)


def _load_sequences(cfg: RunConfig, data: str | None, count_key: str, base: int, prefix: str):
    if data:
        seqs = load_dataset(data)
        if not seqs:
            raise SystemExit(f"no sequences found under {data}")
        return seqs
    return generate_sequences(cfg, cfg[count_key], base, prefix)


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq in generate_sequences(cfg, cfg["world.num_sequences"], cfg["seed"]):
        export_sequence(seq, out)
    cfg.save(out / CONFIG_FILE)
    print(f"wrote {cfg['world.num_sequences']} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    resume = ckpt_io.load(args.resume) if args.resume else None
    cfg = _effective_config(args)
    if resume is not None and args.config is None:
        cfg = RunConfig.from_text(resume.config_text)
    if args.window is not None:
        cfg = with_window(cfg, args.window)
    seqs = _load_sequences(cfg, args.data, "world.num_sequences", cfg["seed"], "train")
    out = Path(args.out)

    def report(step, br):
        if step % 10 == 0:
            print(f"step {step} total {br.total:.4f} cls {br.cls:.4f} giou {br.giou:.4f} l1 {br.l1:.4f}",
                  flush=True)

    train_model(cfg, seqs, out, resume, on_step=report)
    print(f"checkpoint written to {out / FINAL_CHECKPOINT}")
    return 0


def _eval_setup(args):
    ck = ckpt_io.load(args.checkpoint)
    model, trained = model_from_checkpoint(ck)
    cfg = _effective_config(args) if args.config else trained
    if args.variant is not None and args.variant != trained["variant"]:
        raise SystemExit(f"checkpoint was trained with variant {trained['variant']!r}, not {args.variant!r}")
    if (args.no_temporal and trained["temporal.enabled"]) or (args.no_track_token and trained["temporal.track_token"]):
        raise SystemExit("ablation flags do not match the checkpoint; retrain with them instead")
    use_prior = cfg["eval.use_prior"] and not args.no_prior
    m = trained["temporal.window"]
    window = args.window if args.window is not None else (cfg["eval.window"] or m)
    if window > m:
        log.warning("window %d exceeds the trained window %d; using %d", window, m, m)
        window = m
    if window < 1:
        raise SystemExit("window must be >= 1")
    return model, cfg, use_prior, window


def cmd_eval(args) -> int:
    model, cfg, use_prior, window = _eval_setup(args)
    seqs = _load_sequences(cfg, args.data, "eval.num_sequences", cfg["eval.suite_seed"], "eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.with_values({"eval.use_prior": use_prior, "eval.window": window}).save(out / CONFIG_FILE)
    values = evaluate_model(model, seqs, use_prior, window, out)
    for k in ("auc", "ao", "sr50", "precision", "norm_precision", "reacquire_rate"):
        print(f"{k} = {values[k]:.4f}")
    return 0


def cmd_trace(args) -> int:
    model, cfg, use_prior, window = _eval_setup(args)
    seqs = _load_sequences(cfg, args.data, "eval.num_sequences", cfg["eval.suite_seed"], "eval")
    names = [s.name for s in seqs]
    pick = args.sequence if args.sequence is not None else names[0]
    if pick not in names:
        if pick.isdigit() and int(pick) < len(seqs):
            pick = names[int(pick)]
        else:
            raise SystemExit(f"unknown sequence {pick!r}")
    seq = seqs[names.index(pick)]
    out = Path(args.out)
    trace_sequence(model, seq, out, use_prior)
    print(f"wrote {len(seq)} annotated frames and guidance maps to {out}")
    return 0


def cmd_summary(args) -> int:
    cfg = _effective_config(args)
    desk = cfg.model_config()
    print(format_summary("desk", desk))
    full = ModelConfig(backbone=FULL_SCALE, variant=desk.variant, window=desk.window,
                        use_track_token=desk.use_track_token, use_temporal=desk.use_temporal,
                        head_hidden=desk.head_hidden, temporal_heads=FULL_SCALE.num_heads)
    print(format_summary("full-scale", full))
    if args.checkpoint:
        ck = ckpt_io.load(args.checkpoint)
        walked = sum(int(np.prod(a.shape)) for a in ck.params.values())
        expected = param_counts(RunConfig.from_text(ck.config_text).model_config())["total"]
        print(f"checkpoint tensors: {walked} parameters (analytic {expected})")
        if walked != expected:
            return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokentrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--variant", choices=("mamba-cross", "self-cross", "self-self"))
        p.add_argument("--window", type=int, help="sliding window length m")
        p.add_argument("--no-temporal", action="store_true", help="bypass the temporal module")
        p.add_argument("--no-track-token", action="store_true", help="drop the track token (implies --no-temporal)")
        p.add_argument("--no-prior", action="store_true", help="decode without the Hamming prior")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    common(sub.add_parser("gen-data", help="write synthetic sequences to disk")).set_defaults(func=cmd_gen_data)
    p = common(sub.add_parser("train", help="train a tracker"))
    p.add_argument("--data", help="dataset directory (default: generate in memory)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)
    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                             ("trace", cmd_trace, "dump annotated frames and guidance maps")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (default: the generated eval suite)")
        if name == "trace":
            p.add_argument("--sequence", help="sequence name or index")
        p.set_defaults(func=func)
    p = common(sub.add_parser("summary", help="analytic parameter and MAC counts"))
    p.add_argument("--checkpoint", help="also check the count against a checkpoint")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
