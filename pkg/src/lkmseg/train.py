"""Training loop, evaluation, and the ablation / kernel-size sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SceneConfig, generate_dataset, worker_count
from .losses import seg_loss
from .metrics import mean_foreground_scores
from .model import Model, ModelConfig, build_model, load_checkpoint, predict_mask, \
    save_checkpoint
from .optim import OptimConfig, adam_step, collect_grads, init_state, zero_grads

CSV_HEADER = "epoch,loss,dsc,nsd,seconds,seed,config_hash"

# full-scale reference values, quoted in reports as annotations only;
# not reproducible at desk scale
FULLSCALE_ABLATION_MR = {
    "baseline": (74.50, 81.53), "pim": (76.82, 83.05), "pam": (76.22, 82.59),
    "pim+bim": (76.90, 83.31), "pam+bim": (76.73, 82.94),
    "pim+pam": (77.10, 83.54), "pim+pam+bim": (77.35, 83.80),
}
FULLSCALE_KERNEL_SCHEDULES = "[10,5,5,5,5,5,5] vs [20,10,10,10,5,5,5] vs [40,20,20,10,10,5,5]"


def run_config_hash(model_cfg: ModelConfig, scene_cfg: SceneConfig,
                    optim_cfg: OptimConfig, seed: int) -> str:
    blob = json.dumps({
        "model": json.loads(model_cfg.canonical()),
        "scene": dataclasses.asdict(scene_cfg),
        "optim": dataclasses.asdict(optim_cfg),
        "seed": int(seed),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    epoch: int
    loss: float
    dsc: float
    nsd: float
    seconds: float
    seed: int
    config_hash: str

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.loss!r},{self.dsc!r},{self.nsd!r},"
                f"{self.seconds:.3f},{self.seed},{self.config_hash}")


def evaluate(model: Model, scenes, num_classes: int, tol: float = 1.0):
    """Mean foreground (DSC, NSD) over a scene list; order-stable parallel."""

    def one(pair):
        img, mask = pair
        pred = predict_mask(model, img[None])[0]
        return mean_foreground_scores(pred, mask, num_classes, tol)

    workers = min(worker_count(), len(scenes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            scores = list(ex.map(one, scenes))
    else:
        scores = [one(p) for p in scenes]
    dsc = float(np.mean([s[0] for s in scores]))
    nsd = float(np.mean([s[1] for s in scores]))
    return dsc, nsd


def _flip2d(arr: np.ndarray, fy: bool, fx: bool) -> np.ndarray:
    """Flip the trailing two (spatial) axes; leading axes are channels."""
    if fy:
        arr = arr[..., ::-1, :]
    if fx:
        arr = arr[..., :, ::-1]
    return np.ascontiguousarray(arr)


def run_epoch(model: Model, params: dict, scenes, order, opt_state: dict,
              optim_cfg: OptimConfig, rng=None) -> float:
    """One pass over the scene list in the given order; returns mean loss.

    When `rng` is given, each sample is randomly flipped along either
    spatial axis (the scenes are flip-symmetric, so this is label-exact
    augmentation). Drawing the flips from the same per-epoch generator
    that produced `order` keeps resumed runs bit-identical.
    """
    losses = []
    bs = optim_cfg.batch_size
    n = len(order)
    flips = (rng.integers(0, 2, size=(n, 2)) if rng is not None
             else np.zeros((n, 2), dtype=int))
    for i in range(0, n, bs):
        idx = order[i:i + bs]
        fl = flips[i:i + bs]
        imgs = np.stack([_flip2d(scenes[j][0], *fl[k]) for k, j in enumerate(idx)])
        masks = np.stack([_flip2d(scenes[j][1], *fl[k]) for k, j in enumerate(idx)])
        logits = model.forward(imgs)
        loss = seg_loss(logits, masks)
        zero_grads(params)
        T.backward(loss)
        adam_step(params, collect_grads(params), opt_state, cfg=optim_cfg)
        losses.append(float(loss.data) * len(idx))
    return float(np.sum(losses) / n)


def train(model_cfg: ModelConfig, scene_cfg: SceneConfig, optim_cfg: OptimConfig,
          out_dir, seed: int = 0, train_count: int = 200, val_count: int = 50,
          nsd_tol: float = 1.0, resume=None, early_stop_dsc=None,
          fixed_timing: bool = False, log=None):
    """Train on synthetic scenes; returns (records, best checkpoint path).

    Writes metrics.csv (one row per epoch), last.ckpt every epoch and
    best.ckpt at the best validation DSC. All randomness is keyed on
    (seed, epoch), so resuming from last.ckpt reproduces the uninterrupted
    trajectory exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")

    train_set = generate_dataset(scene_cfg, train_count)
    val_set = generate_dataset(dataclasses.replace(scene_cfg, seed=scene_cfg.seed + 1),
                               val_count)
    chash = run_config_hash(model_cfg, scene_cfg, optim_cfg, seed)

    if resume is not None:
        model, opt_state, start_epoch, _ = load_checkpoint(resume, model_cfg, seed)
        if opt_state is None:
            opt_state = init_state(model.named_params())
    else:
        model = build_model(model_cfg, seed)
        opt_state = init_state(model.named_params())
        start_epoch = 0

    params = model.named_params()
    records = []
    best_dsc = -1.0

    fresh_csv = resume is None or not os.path.exists(csv_path)
    if not fresh_csv:
        # an interrupted run may have logged rows past the checkpointed
        # epoch; drop them so the resumed CSV matches an uninterrupted run
        with open(csv_path) as fh:
            lines = fh.read().splitlines()
        kept = [lines[0]] + [ln for ln in lines[1:]
                             if ln and int(ln.split(",", 1)[0]) <= start_epoch]
        with open(csv_path, "w") as fh:
            fh.write("\n".join(kept) + "\n")

    def emit(rec: RunRecord):
        nonlocal fresh_csv
        records.append(rec)
        with open(csv_path, "w" if fresh_csv else "a") as fh:
            if fresh_csv:
                fh.write(CSV_HEADER + "\n")
            fh.write(rec.csv_row() + "\n")
        fresh_csv = False
        if log:
            log(f"epoch {rec.epoch}: loss {rec.loss:.4f} "
                f"dsc {rec.dsc:.4f} nsd {rec.nsd:.4f}")

    if optim_cfg.epochs == 0 or start_epoch >= optim_cfg.epochs:
        dsc, nsd = evaluate(model, val_set, model_cfg.num_classes, nsd_tol)
        emit(RunRecord(start_epoch, 0.0, dsc, nsd,
                       0.0, seed, chash))
        save_checkpoint(model, best_path, opt_state, start_epoch, {"seed": seed})
        return records, best_path

    for epoch in range(start_epoch + 1, optim_cfg.epochs + 1):
        t0 = time.monotonic()
        rng = np.random.default_rng([seed, 1000 + epoch])
        order = rng.permutation(train_count)
        # on NonFiniteError, last.ckpt from the previous epoch stays as the
        # good state
        epoch_loss = run_epoch(model, params, train_set, order, opt_state,
                               optim_cfg, rng=rng)

        dsc, nsd = evaluate(model, val_set, model_cfg.num_classes, nsd_tol)
        seconds = 0.0 if fixed_timing else time.monotonic() - t0
        emit(RunRecord(epoch, epoch_loss, dsc, nsd, seconds, seed, chash))

        save_checkpoint(model, last_path, opt_state, epoch, {"seed": seed})
        if dsc > best_dsc:
            best_dsc = dsc
            save_checkpoint(model, best_path, opt_state, epoch, {"seed": seed})
        if early_stop_dsc is not None and dsc >= early_stop_dsc:
            break

    return records, best_path


# ---------------------------------------------------------------------------
# sweeps

ABLATION_ROWS = [
    ("baseline", False, False, False),
    ("bim", False, False, True),
    ("pim", True, False, False),
    ("pam", False, True, False),
    ("pim+bim", True, False, True),
    ("pam+bim", False, True, True),
    ("pim+pam", True, True, False),
    ("pim+pam+bim", True, True, True),
]


def _final_metrics(records):
    best = max(records, key=lambda r: r.dsc)
    return best.dsc, best.nsd


def ablation_sweep(model_cfg: ModelConfig, scene_cfg: SceneConfig,
                   optim_cfg: OptimConfig, out_dir, seed: int = 0,
                   train_count: int = 200, val_count: int = 50, log=None):
    """Train every PiM/PaM/BiM flag combination on shared data and seed."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name, pim, pam, bim in ABLATION_ROWS:
        cfg = dataclasses.replace(model_cfg, use_pim=pim, use_pam=pam, use_bim=bim)
        sub = os.path.join(out_dir, name.replace("+", "_"))
        if log:
            log(f"[ablate] {name}")
        t0 = time.monotonic()
        records, _ = train(cfg, scene_cfg, optim_cfg, sub, seed=seed,
                           train_count=train_count, val_count=val_count, log=log)
        dsc, nsd = _final_metrics(records)
        rows.append((name, dsc, nsd, time.monotonic() - t0))

    lines = ["# Ablation sweep", "",
             "| config | DSC | NSD | seconds |", "|---|---|---|---|"]
    for name, dsc, nsd, secs in rows:
        lines.append(f"| {name} | {dsc:.4f} | {nsd:.4f} | {secs:.1f} |")
    lines += ["",
              "Full-scale reference values (Abdomen MR, not reproducible at "
              "desk scale):", ""]
    for name, (d, n) in FULLSCALE_ABLATION_MR.items():
        lines.append(f"- {name}: DSC {d:.2f}, NSD {n:.2f}")
    report = os.path.join(out_dir, "report.md")
    with open(report, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows, report


def kernel_sweep(schedules, model_cfg: ModelConfig, scene_cfg: SceneConfig,
                 optim_cfg: OptimConfig, out_dir, seed: int = 0,
                 train_count: int = 200, val_count: int = 50, log=None):
    """Train one model per kernel schedule with shared data and seed."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for schedule in schedules:
        cfg = dataclasses.replace(model_cfg, kernel_schedule=tuple(schedule))
        tag = "k" + "-".join(str(k) for k in schedule)
        if log:
            log(f"[kernels] {tag}")
        t0 = time.monotonic()
        records, _ = train(cfg, scene_cfg, optim_cfg,
                           os.path.join(out_dir, tag), seed=seed,
                           train_count=train_count, val_count=val_count, log=log)
        dsc, nsd = _final_metrics(records)
        rows.append((list(schedule), dsc, nsd, time.monotonic() - t0))

    lines = ["# Kernel-size sweep", "",
             "| schedule | DSC | NSD | seconds |", "|---|---|---|---|"]
    for schedule, dsc, nsd, secs in rows:
        lines.append(f"| {schedule} | {dsc:.4f} | {nsd:.4f} | {secs:.1f} |")
    lines += ["", f"Full-scale schedules for reference (not run here): "
                  f"{FULLSCALE_KERNEL_SCHEDULES}; larger kernels scored best "
                  f"(DSC 75.89 / 76.45 / 77.35)."]
    report = os.path.join(out_dir, "report.md")
    with open(report, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows, report
