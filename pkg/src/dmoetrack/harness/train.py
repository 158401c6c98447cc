"""AdamW training loop over mixed-task synthetic batches."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NumericError
from ..fusion import perturb_batch
from ..nn import AdamW
from ..tracker import COMPONENTS, TrackerModel, compute_losses, total_loss
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import sample_batch

log = logging.getLogger(__name__)

TRACE_HEADER = ("step", *COMPONENTS, "total")


@dataclass
class TrainResult:
    model: TrackerModel
    cfg: TrainConfig
    trace: list[tuple] = field(default_factory=list)  # (step, *components, total) per step


def learning_rate(cfg: TrainConfig, step: int) -> float:
    base = cfg.optim.lr
    if cfg.optim.schedule == "constant" or cfg.train.steps <= 1:
        return base
    floor = base * cfg.optim.min_lr_ratio
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * step / (cfg.train.steps - 1)))


def train_step(model: TrackerModel, opt: AdamW, cfg: TrainConfig, data_rng, perturb_rng, step: int = 0):
    batch = sample_batch(data_rng, cfg)
    template, search, _ = perturb_batch(batch.template, batch.search, perturb_rng, cfg.perturb)
    out = model(template, search, batch.task_ids)
    comps = compute_losses(out, batch.boxes, batch.task_ids, cfg.model, delta=cfg.loss.margin)
    for name in COMPONENTS:
        if not np.isfinite(comps[name].data):
            raise NumericError(f"loss component {name!r} became non-finite at step {step}")
    total = total_loss(comps, cfg.loss)
    model.zero_grad()
    total.backward()
    opt.lr = learning_rate(cfg, step)
    opt.step()
    return tuple(float(comps[n].data) for n in COMPONENTS), float(total.data)


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Train from ``cfg``; with ``out_dir`` also write loss_trace.csv and model.ckpt."""
    cfg.validate()
    seed = cfg.train.seed
    model = TrackerModel(cfg.model, seed=seed)
    opt = AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    data_rng = np.random.default_rng([seed, 2])
    perturb_rng = np.random.default_rng([seed, 3])
    result = TrainResult(model, cfg)

    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "loss_trace.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
    try:
        for step in range(cfg.train.steps):
            values, total = train_step(model, opt, cfg, data_rng, perturb_rng, step)
            row = (step, *values, total)
            result.trace.append(row)
            if writer is not None:
                writer.writerow([step, *(f"{v:.9g}" for v in (*values, total))])
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                log.info("step %d total %.4f", step, total)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(model, cfg, out_dir / "model.ckpt")
    return result


def read_trace(path: str | Path) -> np.ndarray:
    """loss_trace.csv as a float array (steps x (1 + components + total))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(TRACE_HEADER))
