"""Training orchestration: warm-up on square labels, hint expansion, main
training with the regulator and the contrastive objective, evaluation, and
run artifacts (losses.csv, report.json, hint sidecar, checkpoints)."""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import metrics as seg_metrics
from .config import RunConfig
from .contrastive import (align_prediction, apply_transform, contrastive_loss,
                          pair_valid_mask, sample_pair, transform_supervision)
from .core import BG, FG, UNLABELED, SupervisionMask
from .hints import generate_hint_supervision, initial_square_supervision
from .losses import partial_ce
from .model import (ModelState, make_optimizer, predict_map, save_checkpoint,
                    SegmentationNet)
from .regulator import apply_mask, build_mask
from .synth import Corpus


class TrainingDiverged(RuntimeError):
    pass


def triangular_lr(epoch: int, total_epochs: int, lr_max: float,
                  base_frac: float = 0.1) -> float:
    """Symmetric rise/fall; hits lr_max exactly at mid-schedule."""
    if total_epochs <= 1:
        return lr_max
    base = lr_max * base_frac
    half = max(1, (total_epochs - 1) // 2)
    frac = min(epoch, total_epochs - 1 - epoch) / half
    return base + (lr_max - base) * min(frac, 1.0)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def total_epochs(cfg: RunConfig) -> int:
    return cfg.epochs if cfg.epochs_total_includes_warmup else cfg.epochs + cfg.hint.w


@dataclass
class TrainRecorder:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def record_step(self, step: int, l_pce: float, l_c: float) -> None:
        self.steps.append((step, float(l_pce), float(l_c), float(l_pce) + float(l_c)))

    def record_epoch(self, epoch: int, lr: float, phase: str) -> None:
        rows = [s for s in self.steps if s[0] // 10_000 == epoch]
        self.epochs.append({
            "epoch": epoch, "lr": lr, "phase": phase,
            "mean_pce": float(np.mean([r[1] for r in rows])) if rows else 0.0,
            "mean_lc": float(np.mean([r[2] for r in rows])) if rows else 0.0,
            "mean_total": float(np.mean([r[3] for r in rows])) if rows else 0.0,
        })

    def epoch_finite(self, epoch: int) -> bool:
        rows = [s for s in self.steps if s[0] // 10_000 == epoch]
        return all(np.isfinite(r[3]) for r in rows)


@dataclass
class RunReport:
    config: dict
    steps: list[tuple[int, float, float, float]]
    epochs: list[dict]
    hint_rows: list[tuple[str, float, float, int]]
    fallback_fraction: float
    metrics: Optional[seg_metrics.MetricReport]
    wall_clock_sec: float
    diverged: bool
    param_count: int

    def final_mae(self) -> float:
        return self.metrics.mae if self.metrics is not None else float("nan")


def new_run_model(cfg: RunConfig) -> ModelState:
    torch.manual_seed((cfg.seed * 1_000_003 + cfg.encoder.seed) % 2 ** 63)
    net = SegmentationNet(cfg.encoder)
    opt = make_optimizer(net, cfg.lr_max, cfg.momentum, cfg.weight_decay)
    return ModelState(net=net, optimizer=opt,
                      opt_params={"lr": cfg.lr_max, "momentum": cfg.momentum,
                                  "weight_decay": cfg.weight_decay})


def _check_corpus(corpus: Corpus, cfg: RunConfig) -> None:
    for scene in corpus.scenes:
        if scene.shape != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"scene {scene.id} is {scene.shape}, config expects "
                f"{cfg.input_size}x{cfg.input_size}")
        if scene.id not in corpus.annotations and cfg.strategy != "scribble":
            raise ValueError(f"scene {scene.id} has no point annotation")


def base_supervision(corpus: Corpus, cfg: RunConfig) -> dict[str, SupervisionMask]:
    """The pre-expansion labels: side-d squares (d=1 for the single-pixel
    strategy), or the scribbles themselves in transfer mode."""
    if cfg.strategy == "scribble":
        if not corpus.scribbles:
            raise ValueError("scribble strategy needs a scribbles/ directory")
        missing = [s.id for s in corpus.scenes if s.id not in corpus.scribbles]
        if missing:
            raise ValueError(f"scenes without scribbles: {missing[:3]}")
        return {s.id: corpus.scribbles[s.id] for s in corpus.scenes}
    d = 1 if cfg.strategy == "point" else cfg.hint.d
    return {s.id: initial_square_supervision(corpus.annotations[s.id], d, s.shape)
            for s in corpus.scenes}


def _set_lr(state: ModelState, lr: float) -> None:
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def _images_tensor(corpus: Corpus) -> list[torch.Tensor]:
    return [torch.from_numpy(np.ascontiguousarray(s.image)).float()
            for s in corpus.scenes]


def _batch_pce(probs: torch.Tensor, sups: list[SupervisionMask]):
    """Per-image mean partial CE averaged over the batch; images whose
    supervision was transformed entirely out of view are skipped."""
    terms = []
    count = 0
    for i, sup in enumerate(sups):
        if not sup.labeled().any():
            continue
        terms.append(partial_ce(probs[i], torch.from_numpy(sup.labels)))
        count += int(sup.labeled().sum())
    if not terms:
        return probs.sum() * 0.0, 0
    return torch.stack(terms).mean(), count


def warmup(corpus: Corpus, cfg: RunConfig, state: Optional[ModelState] = None,
           recorder: Optional[TrainRecorder] = None) -> ModelState:
    """First w epochs: partial CE on the square supervision only."""
    _check_corpus(corpus, cfg)
    if state is None:
        state = new_run_model(cfg)
    if recorder is None:
        recorder = TrainRecorder()
    sups = base_supervision(corpus, cfg)
    images = _images_tensor(corpus)
    n = len(corpus.scenes)
    state.net.train()
    while state.epoch < cfg.hint.w:
        epoch = state.epoch
        lr = triangular_lr(epoch, total_epochs(cfg), cfg.lr_max, cfg.lr_base_frac)
        _set_lr(state, lr)
        order = _rng(cfg.seed, 100, epoch).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = torch.stack([images[i] for i in idx])
            probs = state.net(x)[:, 0]
            l_pce, _ = _batch_pce(probs, [sups[corpus.scenes[i].id] for i in idx])
            state.optimizer.zero_grad()
            l_pce.backward()
            state.optimizer.step()
            recorder.record_step(epoch * 10_000 + b, float(l_pce.detach()), 0.0)
        if not recorder.epoch_finite(epoch):
            raise TrainingDiverged(f"non-finite warm-up loss at epoch {epoch}")
        recorder.record_epoch(epoch, lr, "warmup")
        state.epoch += 1
    state.stage = "warmup"
    return state


def hint_stage(corpus: Corpus, state: ModelState, cfg: RunConfig,
               run_dir: Optional[Path] = None
               ) -> tuple[dict[str, SupervisionMask], list[tuple[str, float, float, int]]]:
    """Expand every annotation using the warm-up model; collects sidecar rows
    (image_id, r, R, fallback_flag) and exports hint masks when run_dir is set."""
    sups: dict[str, SupervisionMask] = {}
    rows: list[tuple[str, float, float, int]] = []
    for scene in corpus.scenes:
        result = generate_hint_supervision(scene, corpus.annotations[scene.id],
                                           state, cfg.hint)
        sups[scene.id] = result.supervision
        rows.append((scene.id, result.r, result.radius, int(result.fallback)))
    if run_dir is not None:
        hint_dir = Path(run_dir) / "hints"
        hint_dir.mkdir(parents=True, exist_ok=True)
        for scene_id, sup in sups.items():
            Image.fromarray(sup.to_u8()).save(hint_dir / f"{scene_id}.png")
        with open(hint_dir / "sidecar.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "r", "R", "fallback_flag"])
            for row in rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
    state.stage = "hints"
    return sups, rows


def _predmap_supervision(corpus: Corpus, state: ModelState,
                         cfg: RunConfig) -> dict[str, SupervisionMask]:
    # Tab-3 style "use the prediction map itself" baseline: noisy on purpose
    hi = cfg.hint.tau / cfg.hint.tau_scale
    lo = 0.5 * hi
    sups = {}
    for scene in corpus.scenes:
        probs = predict_map(state.net, scene.image).probs
        labels = np.full(scene.shape, UNLABELED, dtype=np.int8)
        labels[probs < lo] = BG
        labels[probs > hi] = FG
        sup = SupervisionMask(labels)
        if not (sup.fg().any() and sup.bg().any()):
            sup = initial_square_supervision(corpus.annotations[scene.id],
                                             cfg.hint.d, scene.shape)
        sups[scene.id] = sup
    return sups


def prepare_supervision(corpus: Corpus, state: ModelState, cfg: RunConfig,
                        run_dir: Optional[Path] = None
                        ) -> tuple[dict[str, SupervisionMask],
                                   list[tuple[str, float, float, int]]]:
    """Main-phase supervision for the configured strategy; stamps the model
    so main_train can enforce stage ordering."""
    if cfg.strategy == "hint":
        return hint_stage(corpus, state, cfg, run_dir=run_dir)
    if cfg.strategy == "predmap":
        sups = _predmap_supervision(corpus, state, cfg)
    else:  # square / point / scribble keep their base labels
        sups = base_supervision(corpus, cfg)
    state.stage = "hints"
    return sups, []


def main_train(corpus: Corpus, sups: dict[str, SupervisionMask],
               state: ModelState, cfg: RunConfig,
               recorder: Optional[TrainRecorder] = None) -> tuple[TrainRecorder, bool]:
    """Epochs w..E-1: dual-branch step with the full objective. Returns the
    recorder and a divergence flag; on divergence the model is rolled back to
    the last finite epoch."""
    if state.stage != "hints":
        raise ValueError("main_train requires a model stamped by the hint stage")
    _check_corpus(corpus, cfg)
    if recorder is None:
        recorder = TrainRecorder()
    images = _images_tensor(corpus)
    n = len(corpus.scenes)
    aug_set = cfg.effective_aug_set()
    ctr = cfg.contrastive
    state.net.train()
    diverged = False
    while state.epoch < total_epochs(cfg):
        epoch = state.epoch
        snapshot = state.snapshot()
        lr = triangular_lr(epoch, total_epochs(cfg), cfg.lr_max, cfg.lr_base_frac)
        _set_lr(state, lr)
        order = _rng(cfg.seed, 100, epoch).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            scene_sups = [sups[corpus.scenes[i].id] for i in idx]
            if ctr.enabled:
                l_pce, l_c = _dual_branch_step(
                    state.net, [images[i] for i in idx], scene_sups,
                    [_rng(cfg.seed, 7, epoch, int(i)) for i in idx],
                    cfg, aug_set)
            else:
                l_pce, l_c = _single_branch_step(
                    state.net, [images[i] for i in idx], scene_sups,
                    [_rng(cfg.seed, 7, epoch, int(i)) for i in idx], cfg)
            loss = l_pce + l_c
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            recorder.record_step(epoch * 10_000 + b,
                                 float(l_pce.detach()), float(l_c.detach()))
        if not recorder.epoch_finite(epoch):
            state.restore(snapshot)
            diverged = True
            break
        recorder.record_epoch(epoch, lr, "main")
        state.epoch += 1
    return recorder, diverged


def _dual_branch_step(net, image_list, sup_list, rng_list, cfg: RunConfig, aug_set):
    ctr = cfg.contrastive
    x1, x2, sup2, pairs = [], [], [], []
    for img, sup, rng in zip(image_list, sup_list, rng_list):
        pair = sample_pair(aug_set, rng, regulator=cfg.regulator)
        pairs.append(pair)
        x1.append(apply_transform(img, pair.t1, sup=sup))
        x2.append(apply_transform(img, pair.t2, sup=sup))
        sup2.append(transform_supervision(sup, pair.t2))
    b1 = torch.stack(x1)
    b2 = torch.stack(x2)
    if ctr.predictor:
        p1 = net.predictor_probs(b1)[:, 0]
    else:
        p1 = net(b1)[:, 0]
    p2 = net(b2)[:, 0]
    l_pce, _ = _batch_pce(p2, sup2)
    aligned = torch.stack([
        align_prediction(p2[i], pairs[i].t2, pairs[i].t1)
        for i in range(len(pairs))
    ])
    valid = torch.stack([
        pair_valid_mask(pair, p1.shape[-2:], ctr.border_exclude)
        for pair in pairs
    ])
    l_c = contrastive_loss(p1, aligned, kind=ctr.loss, stopgrad=ctr.stopgrad,
                           normalize=ctr.normalize, valid=valid,
                           symmetrize=ctr.symmetrize)
    return l_pce, l_c


def _single_branch_step(net, image_list, sup_list, rng_list, cfg: RunConfig):
    # representation optimizer disabled: the regulator (when on) still masks
    # the single training image
    xs = []
    for img, sup, rng in zip(image_list, sup_list, rng_list):
        if cfg.regulator.enabled:
            img = apply_mask(img, build_mask(sup, cfg.regulator, rng))
        xs.append(img)
    probs = net(torch.stack(xs))[:, 0]
    l_pce, _ = _batch_pce(probs, sup_list)
    return l_pce, probs.sum() * 0.0


def evaluate_model(state: ModelState, corpus: Corpus) -> seg_metrics.MetricReport:
    pairs = []
    for scene in corpus.scenes:
        if scene.mask is None:
            continue
        pred = predict_map(state.net, scene.image)
        pairs.append((scene.id, pred.probs, scene.mask))
    return seg_metrics.evaluate_pairs(pairs)


def write_losses_csv(steps, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,l_pce,l_c,total\n")
        for step, l_pce, l_c, total in steps:
            fh.write(f"{step},{l_pce!r},{l_c!r},{total!r}\n")


def run_experiment(corpus: Corpus, cfg: RunConfig,
                   run_dir=None, evaluate: bool = True) -> RunReport:
    """Full schedule (warm-up, supervision preparation, main training) plus
    evaluation and artifact files when run_dir is given."""
    started = time.monotonic()
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)

    recorder = TrainRecorder()
    state = warmup(corpus, cfg, recorder=recorder)
    if run_path is not None:
        save_checkpoint(run_path / "checkpoints" / "warmup.pt", state)
    sups, hint_rows = prepare_supervision(corpus, state, cfg, run_dir=run_path)
    recorder, diverged = main_train(corpus, sups, state, cfg, recorder=recorder)

    report = RunReport(
        config=cfg.as_dict(),
        steps=recorder.steps,
        epochs=recorder.epochs,
        hint_rows=hint_rows,
        fallback_fraction=(float(np.mean([r[3] for r in hint_rows]))
                           if hint_rows else 0.0),
        metrics=evaluate_model(state, corpus) if evaluate else None,
        wall_clock_sec=time.monotonic() - started,
        diverged=diverged,
        param_count=state.net.param_count(),
    )
    if run_path is not None:
        save_checkpoint(run_path / "checkpoints" / "final.pt", state)
        write_losses_csv(report.steps, run_path / "losses.csv")
        if report.metrics is not None:
            seg_metrics.write_metric_files(report.metrics,
                                           run_path / "metrics.csv",
                                           run_path / "metrics.json")
        payload = dataclasses.asdict(report)
        payload["metrics"] = report.metrics.as_dict() if report.metrics else None
        payload.pop("steps")  # full stream lives in losses.csv
        (run_path / "report.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True, default=str))
    return report
