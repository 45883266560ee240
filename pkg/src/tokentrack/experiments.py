"""Desk-scale ablation: baseline vs the three temporal variants over several seeds.

Every (arm, seed) run trains from scratch on generated sequences and is
scored on two fixed suites: the standard suite and an occlusion-heavy one.
Results are cached as JSON, keyed by arm and seed and stamped with a
fingerprint of the numerical source files and the effective config, so a
stale entry is recomputed instead of reused. Trained weights are kept next
to the cache under ``models/``.

    python -m tokentrack.experiments --cache experiments/ablation.json
"""

from __future__ import annotations

import argparse
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .cli import evaluate_model, generate_sequences, make_checkpoint, train_model
from .config import RunConfig

ARMS = {
    "baseline": {"temporal.enabled": False, "temporal.track_token": False},
    "mamba-cross": {"variant": "mamba-cross"},
    "self-cross": {"variant": "self-cross"},
    "self-self": {"variant": "self-self"},
}
SEEDS = (0, 1, 2)
OCCLUSION_SUITE = {"world.num_occlusions": (3, 3)}
OCCLUSION_SUITE_OFFSET = 1

NUMERIC_SOURCES = ("tensor.py", "nn.py", "backbone.py", "temporal.py", "head.py", "boxes.py",
                   "losses.py", "world.py", "model.py", "train.py", "evaluation.py", "config.py",
                   "cli.py", "experiments.py")
DEFAULT_CACHE = Path("experiments") / "ablation.json"


def source_fingerprint() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in NUMERIC_SOURCES:
        h.update(name.encode())
        h.update((here / name).read_bytes())
    return h.hexdigest()[:16]


def arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    return base.with_values({**ARMS[arm], "seed": seed})


def suites(base: RunConfig):
    standard = generate_sequences(base, base["eval.num_sequences"], base["eval.suite_seed"], "eval")
    occ_cfg = base.with_values(OCCLUSION_SUITE)
    occlusion = generate_sequences(occ_cfg, base["eval.num_sequences"],
                                   base["eval.suite_seed"] + OCCLUSION_SUITE_OFFSET, "occ")
    return standard, occlusion


def model_path(cache: Path, arm: str, seed: int) -> Path:
    return cache.parent / "models" / f"{arm}_seed{seed}.ckpt"


def run_arm(cfg: RunConfig, standard, occlusion, log=print, save_to: Path | None = None) -> dict:
    t0 = time.time()
    train_seqs = generate_sequences(cfg, cfg["world.num_sequences"], cfg["seed"], "train")
    model, trainer = train_model(cfg, train_seqs)
    if save_to is not None:
        save_to.parent.mkdir(parents=True, exist_ok=True)
        ckpt_io.save(save_to, make_checkpoint(model, cfg, None))
    t1 = time.time()
    std = evaluate_model(model, standard, use_prior=cfg["eval.use_prior"])
    occ = evaluate_model(model, occlusion, use_prior=cfg["eval.use_prior"])
    t2 = time.time()
    hist = trainer.history
    log(f"  trained {len(hist)} steps in {t1 - t0:.0f}s, evaluated in {t2 - t1:.0f}s; "
        f"AO {std['ao']:.4f}, occlusion-suite re-acquisition {occ['reacquire_rate']:.4f}")
    return {"standard": std, "occlusion": occ, "steps": len(hist),
            "first_loss": hist[0].total, "final_loss": float(np.mean([b.total for b in hist[-20:]])),
            "train_seconds": t1 - t0, "eval_seconds": t2 - t1}


def load_cache(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def run_ablation(base: RunConfig | None = None, arms=tuple(ARMS), seeds=SEEDS,
                 cache: Path | None = DEFAULT_CACHE, force: bool = False, log=print) -> dict:
    """Return ``{arm: {seed: result}}``, training only what the cache lacks."""
    base = base or RunConfig()
    fp = source_fingerprint()
    store = load_cache(cache) if cache is not None else {}
    out: dict = {}
    standard = occlusion = None
    for arm in arms:
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            key = f"{arm}/{seed}"
            entry = store.get(key)
            if not force and entry and entry["fingerprint"] == fp and entry["config"] == cfg.to_text():
                out.setdefault(arm, {})[seed] = entry["result"]
                continue
            if standard is None:
                standard, occlusion = suites(base)
            log(f"running {key}")
            saved = model_path(cache, arm, seed) if cache is not None else None
            result = run_arm(cfg, standard, occlusion, log, saved)
            out.setdefault(arm, {})[seed] = result
            store[key] = {"fingerprint": fp, "config": cfg.to_text(), "result": result}
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                cache.write_text(json.dumps(store, indent=1, sort_keys=True))
    return out


def aggregate(results: dict) -> dict[str, dict[str, float]]:
    """Seed means of the headline numbers per arm."""
    table = {}
    for arm, per_seed in results.items():
        rows = list(per_seed.values())
        table[arm] = {
            "ao": float(np.mean([r["standard"]["ao"] for r in rows])),
            "auc": float(np.mean([r["standard"]["auc"] for r in rows])),
            "sr50": float(np.mean([r["standard"]["sr50"] for r in rows])),
            "precision": float(np.mean([r["standard"]["precision"] for r in rows])),
            "reacquire": float(np.mean([r["occlusion"]["reacquire_rate"] for r in rows])),
            "occlusion_ao": float(np.mean([r["occlusion"]["ao"] for r in rows])),
            "seeds": len(rows),
        }
    return table


def format_table(table: dict) -> str:
    head = f"{'arm':<12} {'AO':>7} {'AUC':>7} {'SR0.5':>7} {'P@20':>7} {'occ AO':>7} {'re-acq':>7}"
    lines = [head]
    for arm, r in table.items():
        lines.append(f"{arm:<12} {r['ao']:7.4f} {r['auc']:7.4f} {r['sr50']:7.4f} {r['precision']:7.4f} "
                     f"{r['occlusion_ao']:7.4f} {r['reacquire']:7.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="base config file")
    p.add_argument("--cache", default=str(DEFAULT_CACHE))
    p.add_argument("--arms", nargs="+", default=list(ARMS), choices=list(ARMS))
    p.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    p.add_argument("--force", action="store_true", help="ignore cached results")
    args = p.parse_args(argv)
    base = RunConfig.load(args.config) if args.config else RunConfig()
    results = run_ablation(base, args.arms, args.seeds, Path(args.cache), args.force)
    print(format_table(aggregate(results)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
