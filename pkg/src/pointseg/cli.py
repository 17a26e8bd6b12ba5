"""Command line interface: synth / warmup / hints / train / eval / ablate / plot.

Every training-side subcommand takes --config (key-value text file) and
--seed; outputs land under a run directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as seg_metrics
from .ablation import run_ablation
from .config import RunConfig, apply_overrides, load_config
from .model import load_checkpoint, save_checkpoint
from .pipeline import (TrainRecorder, evaluate_model, main_train,
                       prepare_supervision, run_experiment, total_epochs,
                       warmup, write_losses_csv)
from .synth import AnnotationMode, generate_corpus, load_corpus, save_corpus


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    return cfg


def cmd_synth(args) -> int:
    mode = AnnotationMode(mode=args.mode, points_per_object=args.points_per_object)
    corpus = generate_corpus(preset=args.preset, seed=args.seed or 0, mode=mode,
                             n_scenes=args.scenes, size=args.size,
                             contrast=args.contrast)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} scenes to {args.out}")
    return 0


def cmd_warmup(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    run_dir = Path(args.run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    recorder = TrainRecorder()
    state = warmup(corpus, cfg, recorder=recorder)
    save_checkpoint(run_dir / "checkpoints" / "warmup.pt", state)
    write_losses_csv(recorder.steps, run_dir / "warmup_losses.csv")
    (run_dir / "config.json").write_text(cfg.to_json())
    print(f"warm-up done: {cfg.hint.w} epochs, checkpoint at "
          f"{run_dir / 'checkpoints' / 'warmup.pt'}")
    return 0


def cmd_hints(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    run_dir = Path(args.run_dir)
    ckpt = run_dir / "checkpoints" / "warmup.pt"
    if not ckpt.exists():
        print(f"error: {ckpt} not found; run `pointseg warmup` first", file=sys.stderr)
        return 2
    state = load_checkpoint(ckpt)
    sups, rows = prepare_supervision(corpus, state, cfg, run_dir=run_dir)
    save_checkpoint(ckpt, state)  # re-stamped stage
    if cfg.strategy != "hint":
        hint_dir = run_dir / "hints"
        hint_dir.mkdir(exist_ok=True)
        for scene_id, sup in sups.items():
            Image.fromarray(sup.to_u8()).save(hint_dir / f"{scene_id}.png")
    fallback = float(np.mean([r[3] for r in rows])) if rows else 0.0
    print(f"hint supervision for {len(sups)} images (fallback fraction {fallback:.2f})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    run_dir = Path(args.run_dir)
    if args.full:
        report = run_experiment(corpus, cfg, run_dir=run_dir)
        print(f"trained {total_epochs(cfg)} epochs; final MAE "
              f"{report.final_mae():.4f}; artifacts in {run_dir}")
        return 0
    ckpt = run_dir / "checkpoints" / "warmup.pt"
    hint_dir = run_dir / "hints"
    if not ckpt.exists() or not hint_dir.is_dir():
        print("error: warm-up checkpoint or hints/ missing; run "
              "`pointseg warmup` then `pointseg hints` first", file=sys.stderr)
        return 2
    state = load_checkpoint(ckpt)
    from .core import SupervisionMask
    sups = {}
    for path in sorted(hint_dir.glob("*.png")):
        sups[path.stem] = SupervisionMask.from_u8(np.asarray(Image.open(path).convert("L")))
    recorder, diverged = main_train(corpus, sups, state, cfg)
    save_checkpoint(run_dir / "checkpoints" / "final.pt", state)
    write_losses_csv(recorder.steps, run_dir / "losses.csv")
    report = evaluate_model(state, corpus)
    seg_metrics.write_metric_files(report, run_dir / "metrics.csv",
                                   run_dir / "metrics.json")
    (run_dir / "report.json").write_text(json.dumps({
        "config": cfg.as_dict(), "epochs": recorder.epochs,
        "diverged": diverged, "metrics": report.as_dict(),
    }, indent=2, sort_keys=True, default=str))
    print(f"main training done (diverged={diverged}); MAE {report.mae:.4f}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    masks = {s.id: s.mask for s in corpus.scenes if s.mask is not None}
    pairs = []
    if args.pred_dir:
        for path in sorted(Path(args.pred_dir).glob("*.png")):
            if path.stem not in masks:
                continue
            pred = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
            pairs.append((path.stem, pred, masks[path.stem]))
    elif args.checkpoint:
        from .model import predict_map
        state = load_checkpoint(args.checkpoint)
        for scene in corpus.scenes:
            if scene.mask is None:
                continue
            pairs.append((scene.id, predict_map(state.net, scene.image).probs,
                          scene.mask))
    else:
        print("error: give --pred-dir or --checkpoint", file=sys.stderr)
        return 2
    report = seg_metrics.evaluate_pairs(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg_metrics.write_metric_files(report, out / "metrics.csv", out / "metrics.json")
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def _parse_grid(text: str) -> dict[str, list[str]]:
    """`key=v1,v2;other=a,b` -> {key: [v1, v2], other: [a, b]}"""
    grid: dict[str, list[str]] = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        key, values = part.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise ValueError("empty ablation grid")
    return grid


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(corpus, cfg, _parse_grid(args.grid), seeds=seeds,
                          run_dir=args.run_dir)
    for row in report.rows():
        print(row)
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    plots = run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    made = []
    losses = run_dir / "losses.csv"
    if losses.exists():
        with open(losses) as fh:
            rows = list(csv.DictReader(fh))
        steps = np.arange(len(rows))
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("l_pce", "l_c", "total"):
            ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plots / "losses.png", dpi=120)
        plt.close(fig)
        made.append("losses.png")
    ablation = run_dir / "ablation.json"
    if ablation.exists():
        from .ablation import AblationCell, AblationReport, plot_ablation
        data = json.loads(ablation.read_text())
        cells = []
        for row in data["cells"]:
            cell = AblationCell(overrides={"cell": row["cell"]})
            cell.medians = {k: row[k] for k in ("mae", "s_measure", "e_measure", "f_w_beta")}
            cell.any_diverged = bool(row["any_diverged"])
            cell.higher_variance = bool(row["higher_variance"])
            cell.label = lambda c=row["cell"]: c  # type: ignore[method-assign]
            cells.append(cell)
        plot_ablation(AblationReport(reference=cells[0], cells=cells[1:],
                                     seeds=data["seeds"]), plots)
        made.append("ablation.png")
    print(f"wrote {', '.join(made) if made else 'nothing (no csv found)'} to {plots}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pointseg",
                                     description="point-supervised segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--preset", default="tiny", choices=["tiny", "small"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--contrast", type=float, default=None)
    p.add_argument("--mode", default="discriminative",
                   choices=["discriminative", "center", "random"])
    p.add_argument("--points-per-object", type=int, default=1, choices=[1, 2, 3])
    p.set_defaults(func=cmd_synth)

    for name, func, needs_run in (("warmup", cmd_warmup, True),
                                  ("hints", cmd_hints, True),
                                  ("train", cmd_train, True)):
        p = sub.add_parser(name)
        p.add_argument("--corpus", required=True)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "train":
            p.add_argument("--full", action="store_true",
                           help="run warmup + hints + train in one go")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score predictions against corpus masks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pred-dir", default=None,
                   help="8-bit grayscale predictions, normalized by 255")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a config-override grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", required=True,
                   help="e.g. 'contrastive.stopgrad=true,false;hint.tau=100,150,200'")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render losses / ablation plots for a run dir")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
