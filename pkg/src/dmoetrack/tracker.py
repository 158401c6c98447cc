"""End-to-end tracker: fusion, DMoE transformer encoder, head, objective and inference rules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dmoe import DMoELayer, DMoEOutput, balance_loss, cluster_loss, dissimilarity_loss, sample_distributions
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .fusion import ModalityFusion, meta_embedding, substitute_rgb_only
from .nn import LayerNorm, Linear, Module, parameter


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 2
    blocks: int = 2
    experts: int = 8
    top_k: int = 2
    rank: int = 16
    patch: int = 8
    search_size: int = 32
    template_size: int = 16
    channels: int = 3
    num_tasks: int = 4
    spatial_kernel: int = 7
    merge_kernel: int = 3
    mlp_ratio: int = 4
    use_dmoe: bool = True

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for size in (self.search_size, self.template_size):
            if size % self.patch:
                raise ConfigError(f"region size {size} not divisible by patch {self.patch}")
        if not 1 <= self.top_k <= self.experts:
            raise ConfigError(f"need 1 <= top_k <= experts, got {self.top_k}, {self.experts}")
        if not self.rank < self.dim:
            raise ConfigError(f"expert rank {self.rank} must be below dim {self.dim}")

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch


@dataclass
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0
    dis: float = 0.1
    cluster: float = 1.0
    balance: float = 0.01
    margin: float = 0.1  # router-clustering margin around 1/K

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be non-negative, got {value}")


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(q @ ad.swapaxes(k, -1, -2) * (1.0 / math.sqrt(d // h)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class EncoderBlock(Module):
    """Pre-norm self-attention followed by a DMoE feed-forward stage."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = DMoELayer(cfg.dim, cfg.experts, cfg.top_k, cfg.rank, rng, cfg.mlp_ratio)
        self.use_dmoe = cfg.use_dmoe

    def forward(self, x: Tensor) -> tuple[Tensor, DMoEOutput | None]:
        x = x + self.attn(self.norm1(x))
        b, n, d = x.shape
        h = self.norm2(x).reshape(b * n, d)
        if not self.use_dmoe:
            return x + self.ffn.shared(h).reshape(b, n, d), None
        out = self.ffn(h)
        return x + out.y.reshape(b, n, d), out


@dataclass
class ModelOutput:
    score_logits: Tensor  # B x Hs x Ws
    offsets: Tensor  # B x Hs x Ws x 2, center offset from the cell corner, in cells, within (-1, 2)
    sizes: Tensor  # B x Hs x Ws x 2, fraction of the search region
    task_logits: Tensor  # B x num_tasks
    layers: list[DMoEOutput] = field(default_factory=list)
    tokens_per_sample: int = 0
    num_template_tokens: int = 0

    @property
    def score_map(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.score_logits.data))

    def box_map(self) -> np.ndarray:
        """B x Hs x Ws x 4 decoded (cx, cy, w, h) boxes, normalized to the search region."""
        off = self.offsets.data
        b, gh, gw, _ = off.shape
        jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
        cx = (jj[None] + off[..., 0]) / gw
        cy = (ii[None] + off[..., 1]) / gh
        return np.stack([cx, cy, self.sizes.data[..., 0], self.sizes.data[..., 1]], axis=-1)


# A cell may point at a center inside itself or either neighbour, so an argmax
# that lands one cell off the target (common when the center sits on a patch
# boundary) still yields a usable box.
OFFSET_LOW, OFFSET_SPAN = -1.0, 3.0


class TrackerModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.fusion = ModalityFusion(cfg.channels, d, cfg.patch, rng, cfg.spatial_kernel, cfg.merge_kernel)
        self.meta_template = meta_embedding(d, cfg.template_grid, cfg.template_grid, rng)
        self.meta_search = meta_embedding(d, cfg.search_grid, cfg.search_grid, rng)
        self.pos_template = parameter(rng.normal(0.0, 0.02, size=(1, cfg.template_grid ** 2, d)))
        self.pos_search = parameter(rng.normal(0.0, 0.02, size=(1, cfg.search_grid ** 2, d)))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.norm = LayerNorm(d)
        self.head_fc = Linear(d, d, rng)
        self.head_out = Linear(d, 5, rng, std=0.02)
        self.task_head = Linear(d, cfg.num_tasks, rng, std=0.02)

    def _tokens(self, rgb, x, meta: Tensor, pos: Tensor) -> Tensor:
        rgb, x = substitute_rgb_only(rgb, x)
        fused = self.fusion(rgb, x, meta)
        b, d, gh, gw = fused.shape
        return fused.reshape(b, d, gh * gw).transpose(0, 2, 1) + pos

    def forward(self, template: tuple, search: tuple, task_ids=None) -> ModelOutput:
        cfg = self.cfg
        t_rgb, t_x = template
        s_rgb, s_x = search
        for name, img, size in (("template", t_rgb, cfg.template_size), ("search", s_rgb, cfg.search_size)):
            shape = np.shape(img.data if isinstance(img, Tensor) else img)
            if len(shape) != 4 or shape[1] != cfg.channels or shape[2:] != (size, size):
                raise ConfigError(f"{name} images must be B x {cfg.channels} x {size} x {size}, got {shape}")
        if task_ids is not None and np.any((np.asarray(task_ids) < 0) | (np.asarray(task_ids) >= cfg.num_tasks)):
            raise ConfigError(f"task ids must lie in [0, {cfg.num_tasks})")

        zt = self._tokens(t_rgb, t_x, self.meta_template, self.pos_template)
        zs = self._tokens(s_rgb, s_x, self.meta_search, self.pos_search)
        n_t = zt.shape[1]
        z = ad.concat([zt, zs], axis=1)
        layers = []
        for block in self.blocks:
            z, out = block(z)
            if out is not None:
                layers.append(out)
        z = self.norm(z)
        b, n, d = z.shape
        search_tokens = z[:, n_t:, :]
        head = self.head_out(ad.gelu(self.head_fc(search_tokens)))
        g = cfg.search_grid
        head = head.reshape(b, g, g, 5)
        return ModelOutput(
            score_logits=head[..., 0],
            offsets=ad.sigmoid(head[..., 1:3]) * OFFSET_SPAN + OFFSET_LOW,
            sizes=ad.sigmoid(head[..., 3:5]),
            task_logits=self.task_head(z.mean(axis=1)),
            layers=layers,
            tokens_per_sample=n,
            num_template_tokens=n_t,
        )


# -- losses -----------------------------------------------------------------------

def gaussian_center_map(centers: np.ndarray, grid: int, sigma: float = 1.0) -> np.ndarray:
    """B x grid x grid maps with a unit-peak Gaussian on the cell holding each center.

    ``centers`` are normalized (cx, cy) in [0, 1].
    """
    centers = np.atleast_2d(centers)
    cells = np.clip(np.floor(centers * grid), 0, grid - 1)
    ii, jj = np.mgrid[0:grid, 0:grid]
    d2 = (jj[None] - cells[:, 0, None, None]) ** 2 + (ii[None] - cells[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma * sigma))


def classification_loss(score_map, gt_map, eps: float = 1e-6) -> Tensor:
    """Focal-weighted binary cross-entropy against a Gaussian target, averaged over pixels.

    Cells where the target equals 1 are positives; elsewhere the negative term
    is down-weighted by (1 - gt)^4.
    """
    p = ad.clamp(ad.as_tensor(score_map), eps, 1.0 - eps)
    gt = np.asarray(gt_map, dtype=float)
    if p.shape != gt.shape:
        raise ShapeError(f"score map {p.shape} and target {gt.shape} differ")
    pos = (gt >= 1.0).astype(float)
    neg_w = (1.0 - pos) * (1.0 - gt) ** 4
    one_minus = 1.0 - p
    loss = -(one_minus * one_minus * ad.log(p) * pos) - (p * p * ad.log(one_minus) * neg_w)
    return loss.mean()


def cxcywh_to_xyxy(box):
    box = ad.as_tensor(box)
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return ad.stack([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=-1)


def giou(pred_xyxy, gt_xyxy) -> Tensor:
    p, g = ad.as_tensor(pred_xyxy), ad.as_tensor(gt_xyxy)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = ad.relu(ad.minimum(p[..., 2], g[..., 2]) - ad.maximum(p[..., 0], g[..., 0]))
    ih = ad.relu(ad.minimum(p[..., 3], g[..., 3]) - ad.maximum(p[..., 1], g[..., 1]))
    inter = iw * ih
    union = area_p + area_g - inter
    ew = ad.maximum(p[..., 2], g[..., 2]) - ad.minimum(p[..., 0], g[..., 0])
    eh = ad.maximum(p[..., 3], g[..., 3]) - ad.minimum(p[..., 1], g[..., 1])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def iou_loss(pred, gt, fmt: str = "cxcywh") -> Tensor:
    """Mean of 1 - GIoU; boxes as (cx, cy, w, h) or corner form (x0, y0, x1, y1)."""
    gt = np.atleast_2d(np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=float))
    pred = ad.as_tensor(pred)
    if pred.ndim == 1:
        pred = pred.reshape(1, -1)
    if fmt == "cxcywh":
        if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
            raise ValidationError("ground-truth box has zero area")
        pred, gt = cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt)
    elif fmt == "xyxy":
        if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
            raise ValidationError("ground-truth box has zero area")
        gt = ad.Tensor(gt)
    else:
        raise ConfigError(f"unknown box format {fmt!r}")
    return (1.0 - giou(pred, gt)).mean()


def l1_loss(pred, gt) -> Tensor:
    return ad.abs_(ad.as_tensor(pred) - ad.as_tensor(gt)).mean()


def task_loss(task_logits, task_ids) -> Tensor:
    logits = ad.as_tensor(task_logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    ids = np.atleast_1d(np.asarray(task_ids, dtype=int))
    if np.any(ids < 0) or np.any(ids >= logits.shape[-1]):
        raise ValidationError(f"task ids {ids} out of range for {logits.shape[-1]} tasks")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(ids)), ids].mean()


COMPONENTS = ("class", "giou", "l1", "task", "dis", "cluster", "balance")


def total_loss(components: dict, w: LossWeights | None = None) -> Tensor:
    """class + w.giou*giou + w.l1*l1 + task + w.dis*dis + w.cluster*cluster + w.balance*balance."""
    w = w or LossWeights()
    coef = {"class": 1.0, "giou": w.giou, "l1": w.l1, "task": 1.0, "dis": w.dis,
            "cluster": w.cluster, "balance": w.balance}
    total = ad.Tensor(0.0)
    for name in COMPONENTS:
        value = ad.as_tensor(components.get(name, 0.0))
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"loss component {name!r} is not finite")
        total = total + value * coef[name]
    return total


def compute_losses(out: ModelOutput, gt_boxes: np.ndarray, task_ids, cfg: ModelConfig,
                   delta: float = 0.1) -> dict[str, Tensor]:
    """All objective components for a batch; ``gt_boxes`` are normalized to the search region."""
    b = gt_boxes.shape[0]
    g = cfg.search_grid
    gt_map = gaussian_center_map(gt_boxes[:, :2], g)
    comps = {"class": classification_loss(ad.sigmoid(out.score_logits), gt_map)}

    # box supervision on the 3x3 cells around the ground-truth cell (clipped at the border)
    cells = np.clip(np.floor(gt_boxes[:, :2] * g), 0, g - 1).astype(int)
    rows, cols_x, cols_y = [], [], []
    for i in range(b):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                cx, cy = cells[i, 0] + dx, cells[i, 1] + dy
                if 0 <= cx < g and 0 <= cy < g:
                    rows.append(i)
                    cols_x.append(cx)
                    cols_y.append(cy)
    rows, cols_x, cols_y = np.array(rows), np.array(cols_x), np.array(cols_y)
    off = out.offsets[rows, cols_y, cols_x]
    size = out.sizes[rows, cols_y, cols_x]
    cx = (off[:, 0] + cols_x.astype(float)) * (1.0 / g)
    cy = (off[:, 1] + cols_y.astype(float)) * (1.0 / g)
    pred = ad.stack([cx, cy, size[:, 0], size[:, 1]], axis=-1)
    target = gt_boxes[rows]
    comps["giou"] = iou_loss(pred, target)
    comps["l1"] = l1_loss(pred, target)
    comps["task"] = task_loss(out.task_logits, task_ids)

    if out.layers:
        n_layers = len(out.layers)
        comps["dis"] = sum((dissimilarity_loss(l.y_t, l.y_m) for l in out.layers), ad.Tensor(0.0)) * (1.0 / n_layers)
        comps["cluster"] = sum((cluster_loss(sample_distributions(l.gate_m, b), task_ids, delta, cfg.experts)
                                for l in out.layers), ad.Tensor(0.0)) * (1.0 / n_layers)
        bal_t = balance_loss([l.gate_t for l in out.layers], cfg.experts, cfg.top_k)
        bal_m = balance_loss([l.gate_m for l in out.layers], cfg.experts, cfg.top_k)
        comps["balance"] = (bal_t + bal_m) * 0.5
    else:
        for name in ("dis", "cluster", "balance"):
            comps[name] = ad.Tensor(0.0)
    return comps


# -- inference post-processing ---------------------------------------------------

def hanning_window(h: int, w: int | None = None, influence: float = 1.0) -> np.ndarray:
    """Outer-product Hanning window; ``influence`` < 1 blends it toward a flat prior.

    With influence 1 the peak is 1 at the center (odd sizes) and 0 on the border.
    """
    w = h if w is None else w
    win = np.outer(np.hanning(h) if h > 1 else np.ones(1), np.hanning(w) if w > 1 else np.ones(1))
    return (1.0 - influence) + influence * win


def predict_box(score_map: np.ndarray, box_map: np.ndarray, window: np.ndarray):
    """Box at the argmax of the window-penalized score map.

    ``box_map`` is H x W x 4. Returns (box, raw score at the chosen cell, (row, col)).
    """
    if window.shape != score_map.shape:
        raise ShapeError(f"window {window.shape} does not match score map {score_map.shape}")
    penalized = score_map * window
    i, j = np.unravel_index(int(np.argmax(penalized)), penalized.shape)
    return box_map[i, j].copy(), float(score_map[i, j]), (int(i), int(j))


def maybe_update_template(frame_idx: int, confidence: float, threshold: float = 0.7, period: int = 25) -> bool:
    return frame_idx > 0 and frame_idx % period == 0 and confidence > threshold
