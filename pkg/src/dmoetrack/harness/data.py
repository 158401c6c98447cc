"""Training pair sampling and evaluation datasets over the synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..synth import SPEEDS, TRAIN_MODALITIES, MODALITIES, Scene, SimConfig, crop, generate_sequence
from .config import DataConfig, TrainConfig

# train scenes draw seeds below this; evaluation seeds are offset above it
EVAL_SEED_OFFSET = 10**9
TEMPLATE_WINDOW = 25


@dataclass
class Batch:
    template: tuple[np.ndarray, np.ndarray]
    search: tuple[np.ndarray, np.ndarray]
    boxes: np.ndarray  # B x 4 (cx, cy, w, h) normalized to the search region
    task_ids: np.ndarray
    speeds: list[str]


def sim_config(data: DataConfig, modality: str, speed: str, seed: int) -> SimConfig:
    return SimConfig(image_size=data.image_size, num_frames=data.num_frames, speed=speed,
                     modality=modality, noise_sigma=data.noise_sigma, clutter=data.clutter, seed=seed)


def sample_batch(rng: np.random.Generator, cfg: TrainConfig, batch_size: int | None = None) -> Batch:
    """Template/search pairs from freshly drawn training scenes.

    The search crop is centered on the previous-frame target position (plus
    jitter), the template crop on the target in an earlier frame.
    """
    data, model = cfg.data, cfg.model
    b = batch_size or cfg.train.batch_size
    mix = data.mix()
    t_rgb = np.empty((b, model.channels, model.template_size, model.template_size))
    t_x = np.empty_like(t_rgb)
    s_rgb = np.empty((b, model.channels, model.search_size, model.search_size))
    s_x = np.empty_like(s_rgb)
    boxes = np.empty((b, 4))
    task_ids = np.empty(b, dtype=int)
    speeds = []
    for i in range(b):
        task = int(rng.choice(len(TRAIN_MODALITIES), p=mix))
        speed = SPEEDS[int(rng.integers(len(SPEEDS)))]
        seed = int(rng.integers(EVAL_SEED_OFFSET))
        scene = Scene(sim_config(data, TRAIN_MODALITIES[task], speed, seed))
        t = int(rng.integers(1, data.num_frames))
        t0 = int(rng.integers(max(0, t - TEMPLATE_WINDOW), t))
        tmpl_rgb, tmpl_x = scene.frame(t0)
        cur_rgb, cur_x = scene.frame(t)
        c_t = scene.centers[t0] + rng.normal(0.0, data.template_jitter, size=2)
        c_s = scene.centers[t - 1] + rng.normal(0.0, data.search_jitter, size=2)
        t_rgb[i], _ = crop(tmpl_rgb, c_t, model.template_size)
        t_x[i], _ = crop(tmpl_x, c_t, model.template_size)
        s_rgb[i], corner = crop(cur_rgb, c_s, model.search_size)
        s_x[i], _ = crop(cur_x, c_s, model.search_size)
        diameter = 2 * scene.radius
        boxes[i] = [*(scene.centers[t] - corner) / model.search_size,
                    diameter / model.search_size, diameter / model.search_size]
        task_ids[i] = task
        speeds.append(speed)
    return Batch((t_rgb, t_x), (s_rgb, s_x), boxes, task_ids, speeds)


def eval_sequences(data: DataConfig, seeds, modalities=TRAIN_MODALITIES, speeds=SPEEDS):
    """One sequence per (seed, modality, speed), from the held-out seed range."""
    seqs = []
    for s in seeds:
        for mod in modalities:
            for sp in speeds:
                seed = EVAL_SEED_OFFSET + int(s) * 100 + MODALITIES.index(mod) * 10 + SPEEDS.index(sp)
                seqs.append(generate_sequence(sim_config(data, mod, sp, seed)))
    return seqs
