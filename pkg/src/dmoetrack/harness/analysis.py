"""Router selection statistics per speed bin and per modality."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..errors import ValidationError
from ..synth import SPEEDS, TRAIN_MODALITIES, SyntheticSequence, crop
from ..tracker import TrackerModel


@dataclass
class GateTrace:
    """Raw router decisions for a set of (template, search) samples.

    ``t_selected`` / ``m_selected`` are (layers, samples, tokens, k) expert indices;
    ``m_weights`` holds the full M-router distribution (layers, samples, tokens, K).
    """

    t_selected: np.ndarray
    m_selected: np.ndarray
    m_weights: np.ndarray
    modality: np.ndarray
    speed: np.ndarray
    num_template_tokens: int
    num_experts: int

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez(path, t_selected=self.t_selected, m_selected=self.m_selected, m_weights=self.m_weights,
                 modality=self.modality, speed=self.speed,
                 meta=np.array([self.num_template_tokens, self.num_experts]))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GateTrace":
        with np.load(path) as z:
            nt, k = (int(v) for v in z["meta"])
            return cls(z["t_selected"], z["m_selected"], z["m_weights"], z["modality"], z["speed"], nt, k)


def collect_gates(model: TrackerModel, seqs: list[SyntheticSequence], frame_stride: int = 1) -> GateTrace:
    """Run the model on ground-truth-centered crops and record every routing decision.

    The template comes from frame 0 and the search region of frame t is centered on
    the target position at t - 1, mirroring the training pairs.
    """
    if not seqs:
        raise ValidationError("route analysis needs a non-empty dataset")
    if not model.cfg.use_dmoe:
        raise ValidationError("model has no routers to analyze")
    mc = model.cfg
    t_sel, m_sel, m_w, mods, speeds = [], [], [], [], []
    for seq in seqs:
        size = seq.image_size
        centers = seq.boxes[:, :2] * size
        frames = np.arange(1, seq.num_frames, frame_stride)
        n = len(frames)
        t_rgb = np.broadcast_to(crop(seq.rgb[0], centers[0], mc.template_size)[0], (n, mc.channels, mc.template_size, mc.template_size))
        t_x = np.broadcast_to(crop(seq.x[0], centers[0], mc.template_size)[0], t_rgb.shape)
        s_rgb = np.stack([crop(seq.rgb[t], centers[t - 1], mc.search_size)[0] for t in frames])
        s_x = np.stack([crop(seq.x[t], centers[t - 1], mc.search_size)[0] for t in frames])
        with ad.no_grad():
            out = model((np.ascontiguousarray(t_rgb), np.ascontiguousarray(t_x)), (s_rgb, s_x))
        tok = out.tokens_per_sample
        t_sel.append(np.stack([l.gate_t.selected.reshape(n, tok, -1) for l in out.layers]))
        m_sel.append(np.stack([l.gate_m.selected.reshape(n, tok, -1) for l in out.layers]))
        m_w.append(np.stack([l.gate_m.g.data.reshape(n, tok, -1) for l in out.layers]))
        mods += [seq.modality] * n
        speeds += [seq.speed] * n
    return GateTrace(np.concatenate(t_sel, axis=1), np.concatenate(m_sel, axis=1), np.concatenate(m_w, axis=1),
                     np.array(mods), np.array(speeds), out.num_template_tokens, mc.experts)


def _freq(selected: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(selected.reshape(-1), minlength=k).astype(float)
    return counts / counts.sum()


def router_frequencies(trace: GateTrace, bank: str, labels, tokens: str = "all") -> dict[str, np.ndarray]:
    """Expert selection frequencies of ``bank`` ("t" or "m") grouped by sample label.

    ``tokens`` restricts counting to "all" tokens, only "search" tokens or only
    "template" tokens.
    """
    sel = {"t": trace.t_selected, "m": trace.m_selected}[bank]
    nt = trace.num_template_tokens
    sel = {"all": sel, "search": sel[:, :, nt:], "template": sel[:, :, :nt]}[tokens]
    key = {"speed": trace.speed, "modality": trace.modality}
    groups = key[labels] if isinstance(labels, str) else np.asarray(labels)
    out = {}
    for name in dict.fromkeys(groups.tolist()):
        out[name] = _freq(sel[:, groups == name], trace.num_experts)
    return out


def sample_distributions_from_trace(trace: GateTrace) -> np.ndarray:
    """Per-sample M-router distribution G (mean of g over tokens and layers)."""
    return trace.m_weights.mean(axis=(0, 2))


def routing_similarity(G: np.ndarray, labels) -> tuple[float, float]:
    """Mean inner product <G_i, G_j> over same-label and over different-label pairs (i != j)."""
    G = np.asarray(G, dtype=float)
    labels = np.asarray(labels)
    sim = G @ G.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    if not np.any(same & off) or not np.any(~same):
        raise ValidationError("need at least two labels with two samples each")
    return float(sim[same & off].mean()), float(sim[~same].mean())


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def write_frequencies(rows: dict[str, np.ndarray], path: str | Path, label: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = len(next(iter(rows.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label, *(f"expert_{i}" for i in range(k))])
        for name, freq in rows.items():
            w.writerow([name, *(f"{v:.9g}" for v in freq)])
    return path


def read_frequencies(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: np.array([float(v) for v in r[1:]]) for r in rows[1:]}


def route_analysis(model: TrackerModel, seqs: list[SyntheticSequence], out_dir: str | Path | None = None,
                   tokens: str = "all", frame_stride: int = 1) -> tuple[dict, dict, GateTrace]:
    """T-router frequencies per speed bin and M-router frequencies per modality.

    With ``out_dir`` writes t_router.csv, m_router.csv and gate_trace.npz.
    """
    trace = collect_gates(model, seqs, frame_stride)
    t_rows = router_frequencies(trace, "t", "speed", tokens)
    m_rows = router_frequencies(trace, "m", "modality", tokens)
    t_rows = {s: t_rows[s] for s in SPEEDS if s in t_rows}
    order = [m for m in TRAIN_MODALITIES if m in m_rows] + [m for m in m_rows if m not in TRAIN_MODALITIES]
    m_rows = {m: m_rows[m] for m in order}
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_frequencies(t_rows, out_dir / "t_router.csv", "speed")
        write_frequencies(m_rows, out_dir / "m_router.csv", "modality")
        trace.save(out_dir / "gate_trace.npz")
    return t_rows, m_rows, trace
