"""Dual mixture-of-experts feed-forward layer and its auxiliary losses.

A token passes through a shared feed-forward block plus two routed banks of
low-rank experts: a T bank (spatio-temporal matching) and an M bank
(multimodal integration). Each bank keeps its own router and selects the
top-k of K experts per token; only selected experts are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError
from .nn import Linear, Module, parameter


@dataclass
class GateResult:
    """Routing record for a batch of N tokens.

    ``g`` is the N x K softmax distribution, ``selected`` the N x k chosen
    expert indices (by decreasing weight) and ``g_hat`` their renormalized
    weights.
    """

    g: Tensor
    selected: np.ndarray
    g_hat: Tensor

    @property
    def num_experts(self) -> int:
        return self.g.shape[-1]


class Expert(Module):
    """W_up @ GELU(W_down @ x) with rank r < d."""

    def __init__(self, dim: int, rank: int, rng: np.random.Generator, up_std: float = 0.02):
        if not rank < dim:
            raise ConfigError(f"expert rank {rank} must be below model dim {dim}")
        self.w_down = parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(rank, dim)))
        self.w_up = parameter(rng.normal(0.0, up_std, size=(dim, rank)))

    def forward(self, x: Tensor) -> Tensor:
        # rows of x are tokens
        return ad.gelu(x @ self.w_down.transpose()) @ self.w_up.transpose()


class Router(Module):
    def __init__(self, dim: int, num_experts: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(num_experts, dim)))

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    def logits(self, x: Tensor) -> Tensor:
        return x @ self.weight.transpose()


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def route(x, router: Router, k: int) -> GateResult:
    """Softmax gate, top-k selection (ties to the lower index), renormalized weights."""
    x = ad.as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if k > router.num_experts:
        raise ConfigError(f"k={k} exceeds the number of experts {router.num_experts}")
    g = ad.softmax(router.logits(x), axis=-1)
    selected, g_sel = ad.topk(g, k, axis=-1)
    g_hat = g_sel / g_sel.sum(axis=-1, keepdims=True)
    return GateResult(g, selected, g_hat)


def expert_forward(x, expert: Expert) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return expert(x.reshape(1, -1)).reshape(-1)
    return expert(x)


def mix_experts(x: Tensor, experts: list[Expert], gate: GateResult) -> Tensor:
    """Sum over selected experts of g_hat * E(x), evaluating each expert only on its tokens."""
    n = x.shape[0]
    outputs, rows_all = [], []
    for e, expert in enumerate(experts):
        rows, slots = np.nonzero(gate.selected == e)
        if rows.size == 0:
            continue
        weight = gate.g_hat[rows, slots].reshape(-1, 1)
        outputs.append(expert(x[rows]) * weight)
        rows_all.append(rows)
    if not outputs:
        return ad.Tensor(np.zeros(x.shape))
    return ad.index_add(ad.concat(outputs, axis=0), np.concatenate(rows_all), n)


@dataclass
class DMoEOutput:
    y: Tensor
    y_t: Tensor
    y_m: Tensor
    gate_t: GateResult
    gate_m: GateResult


class DMoELayer(Module):
    def __init__(self, dim: int, num_experts: int = 8, k: int = 2, rank: int = 16,
                 rng: np.random.Generator | None = None, mlp_ratio: int = 4):
        if not 1 <= k <= num_experts:
            raise ConfigError(f"need 1 <= k <= K, got k={k}, K={num_experts}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.shared = FeedForward(dim, mlp_ratio * dim, rng)
        self.t_experts = [Expert(dim, rank, rng) for _ in range(num_experts)]
        self.m_experts = [Expert(dim, rank, rng) for _ in range(num_experts)]
        self.t_router = Router(dim, num_experts, rng)
        self.m_router = Router(dim, num_experts, rng)

    @property
    def num_experts(self) -> int:
        return len(self.t_experts)

    def forward(self, x: Tensor) -> DMoEOutput:
        return dmoe_forward(x, self)


def dmoe_forward(x, layer: DMoELayer) -> DMoEOutput:
    """y = shared(x) + y_T + y_M on an N x d token matrix (or a single d vector)."""
    x = ad.as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    gate_t = route(x, layer.t_router, layer.k)
    gate_m = route(x, layer.m_router, layer.k)
    y_t = mix_experts(x, layer.t_experts, gate_t)
    y_m = mix_experts(x, layer.m_experts, gate_m)
    y = layer.shared(x) + y_t + y_m
    if squeeze:
        y, y_t, y_m = y.reshape(-1), y_t.reshape(-1), y_m.reshape(-1)
    return DMoEOutput(y, y_t, y_m, gate_t, gate_m)


def dissimilarity_loss(y_t, y_m, eps: float = 1e-8) -> Tensor:
    """Mean over tokens of the squared cosine similarity between the two bank outputs.

    Computed as <a,b>^2 / max(|a|^2 |b|^2, eps^2), which stays differentiable
    at zero vectors.
    """
    a, b = ad.as_tensor(y_t), ad.as_tensor(y_m)
    if a.ndim == 1:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    dot = (a * b).sum(axis=-1)
    denom = ad.maximum((a * a).sum(axis=-1) * (b * b).sum(axis=-1), eps * eps)
    return (dot * dot / denom).mean()


def sample_distributions(gate: GateResult, batch: int) -> Tensor:
    """Per-sample routing distribution: mean of g over each sample's tokens.

    Tokens are assumed laid out sample-major (batch x tokens_per_sample).
    """
    n, k = gate.g.shape
    return gate.g.reshape(batch, n // batch, k).mean(axis=1)


def cluster_loss(G, task_ids, delta: float = 0.1, num_experts: int | None = None) -> Tensor:
    """Margin hinge around the 1/K baseline on pairwise routing similarities.

    Same-task pairs are pushed above 1/K + delta, different-task pairs below
    1/K - delta. An empty pair set contributes zero.
    """
    G = ad.as_tensor(G)
    b, k_dim = G.shape
    num_experts = num_experts or k_dim
    if b < 2:
        raise ValidationError(f"cluster loss needs at least 2 samples, got {b}")
    row_sums = G.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValidationError(f"routing distributions must sum to 1, got row sums {row_sums}")
    task_ids = np.asarray(task_ids)
    S = G @ G.transpose()
    off_diag = ~np.eye(b, dtype=bool)
    same = (task_ids[:, None] == task_ids[None, :]) & off_diag
    diff = (task_ids[:, None] != task_ids[None, :])
    base = 1.0 / num_experts
    loss = ad.Tensor(0.0)
    if same.any():
        hinge = ad.relu((base + delta) - S)
        loss = loss + (hinge * same).sum() * (1.0 / same.sum())
    if diff.any():
        hinge = ad.relu(S - (base - delta))
        loss = loss + (hinge * diff).sum() * (1.0 / diff.sum())
    return loss


def balance_loss(gates: list[GateResult], num_experts: int, k: int) -> Tensor:
    """K * sum_i f_i * P_i over all tokens of the given gates.

    f_i is the share of the N*k selections that went to expert i and P_i the
    mean gate probability of expert i.
    """
    g = ad.concat([gate.g for gate in gates], axis=0)
    selected = np.concatenate([gate.selected for gate in gates], axis=0)
    n = g.shape[0]
    counts = np.bincount(selected.reshape(-1), minlength=num_experts).astype(float)
    f = counts / (n * k)
    return (g.mean(axis=0) * f).sum() * float(num_experts)


def selection_frequencies(gates: list[GateResult], num_experts: int) -> np.ndarray:
    selected = np.concatenate([gate.selected.reshape(-1) for gate in gates])
    counts = np.bincount(selected, minlength=num_experts).astype(float)
    return counts / counts.sum()
