"""Training objectives and reconstruction metrics.

Scalar objectives: the rendering loss (mean absolute depth difference over
all poses), Chamfer distance in its l1 and l2 variants, symmetric two-way
InfoNCE between modality pairs with a learnable temperature, MoCo-style
InfoNCE against a FIFO key queue, masked-token cross-entropy, and the
weighted total. Metrics: Chamfer plus F-score at an absolute distance
threshold.

Every objective is implemented once on autodiff tensors (the `*_t`
functions used by the trainer); the plain-array wrappers below them return
values, and the `*_grad` variants return analytic gradients obtained from
the same tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat, custom, gather_rows, getitem, logsumexp, matmul
from .errors import DomainError
from .geometry import PointCloud
from .renderer import DepthImage

Array = np.ndarray

_NORM_TOL = 1e-6

TAU_MIN = 0.01
TAU_MAX = 1.0
LOSS_KEYS = ("l_rd", "l_rp", "l_pd", "l_moco", "l_ce", "l_dr", "l_cd")


# -- domain types -----------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBatch:
    """One unit-norm embedding row per object, tagged with its modality."""

    rows: Array
    modality: str

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DomainError(f"embeddings must be (B, E), got {rows.shape}")
        if self.modality not in ("P", "R", "D"):
            raise DomainError(f"modality must be P, R or D, got {self.modality!r}")
        norms = np.linalg.norm(rows, axis=1)
        if np.max(np.abs(norms - 1.0)) > _NORM_TOL:
            raise DomainError("embedding rows must have unit norm")
        object.__setattr__(self, "rows", rows)

    @property
    def batch_size(self) -> int:
        return self.rows.shape[0]


@dataclass
class ContrastiveHead:
    """Learnable log-temperature; tau = exp(log_tau) clamped to [0.01, 1]."""

    log_tau: float = math.log(0.07)

    @property
    def tau(self) -> float:
        return float(np.clip(math.exp(self.log_tau), TAU_MIN, TAU_MAX))


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the three cross-modal terms; the rest weigh 1."""

    alpha: float = 0.1
    beta: float = 0.1
    theta: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.theta) < 0:
            raise DomainError("loss weights must be nonnegative")


@dataclass(frozen=True)
class MocoState:
    """FIFO queue of unit-norm key embeddings plus the MoCo constants."""

    queue: Array
    capacity: int
    momentum: float = 0.999
    moco_tau: float = 0.07

    def __post_init__(self):
        queue = np.asarray(self.queue, dtype=np.float64)
        if queue.ndim != 2:
            raise DomainError(f"queue must be (n, E), got {queue.shape}")
        if queue.shape[0] > self.capacity:
            raise DomainError("queue exceeds its capacity")
        if not 0.0 <= self.momentum <= 1.0:
            raise DomainError("momentum must lie in [0, 1]")
        if not self.moco_tau > 0:
            raise DomainError("moco_tau must be positive")
        if queue.shape[0] and np.max(np.abs(np.linalg.norm(queue, axis=1) - 1.0)) > _NORM_TOL:
            raise DomainError("queued keys must have unit norm")
        object.__setattr__(self, "queue", queue)

    @staticmethod
    def empty(capacity: int, dim: int, momentum: float = 0.999, moco_tau: float = 0.07) -> "MocoState":
        return MocoState(np.zeros((0, dim)), capacity, momentum, moco_tau)


# -- tensor-level objectives ----------------------------------------------------------


def dr_loss_t(pred: Tensor, gt: Array) -> Tensor:
    """Mean absolute difference between two (T, H, W) image stacks."""
    return (pred - Tensor.const(gt)).abs().mean()


def _row_norms(diff: Tensor) -> Tensor:
    """Euclidean norm per row with zero gradient on zero-length rows."""
    value = np.linalg.norm(diff.data, axis=1)

    def vjp(g):
        safe = np.where(value > 0.0, value, 1.0)
        return ((g / safe * (value > 0.0))[:, None] * diff.data,)

    return custom(value, parents=(diff,), vjp=vjp)


def chamfer_t(pred: Tensor, target: Array, variant: str) -> Tensor:
    """Chamfer distance with the nearest-neighbor assignment held fixed.

    Assignments are computed once from the forward values (ties to the
    lowest index via argmin) and treated as constants by the tape.
    """
    if variant not in ("l1", "l2"):
        raise DomainError(f"variant must be 'l1' or 'l2', got {variant!r}")
    p = pred.data
    q = np.asarray(target, dtype=np.float64)
    if p.shape[0] < 1 or q.shape[0] < 1:
        raise DomainError("chamfer requires nonempty clouds")
    d2 = np.sum(p * p, axis=1)[:, None] + np.sum(q * q, axis=1)[None, :] - 2.0 * (p @ q.T)
    fwd = np.argmin(d2, axis=1)
    bwd = np.argmin(d2, axis=0)
    diff_fwd = pred - Tensor.const(q[fwd])
    diff_bwd = getitem(pred, bwd) - Tensor.const(q)
    if variant == "l2":
        a = (diff_fwd * diff_fwd).sum(axis=1).mean()
        b = (diff_bwd * diff_bwd).sum(axis=1).mean()
    else:
        a = _row_norms(diff_fwd).mean()
        b = _row_norms(diff_bwd).mean()
    return (a + b) * 0.5


def tau_t(log_tau: Tensor) -> Tensor:
    """Clamped temperature; gradient is zero where the clamp is active."""
    return log_tau.exp().clip(TAU_MIN, TAU_MAX)


def cross_modal_nce_t(ga: Tensor, gb: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE of Eq-style pairing: row i of ga matches row i of gb."""
    b = ga.shape[0]
    sim = matmul(ga, gb.transpose(1, 0)) / tau_t(log_tau)
    diag = getitem(sim, (np.arange(b), np.arange(b)))
    row = logsumexp(sim, axis=1) - diag
    col = logsumexp(sim, axis=0) - diag
    return (row * 0.5 + col * 0.5).mean()


def moco_loss_t(query: Tensor, key_pos: Array, queue: Array, tau: float) -> Tensor:
    """InfoNCE with one positive key and the queue as negatives."""
    pos = (query * Tensor.const(key_pos)).sum(axis=1, keepdims=True)
    if queue.shape[0]:
        logits = concat([pos, matmul(query, Tensor.const(queue.T))], axis=1) * (1.0 / tau)
    else:
        logits = pos * (1.0 / tau)
    return (logsumexp(logits, axis=1) - getitem(logits, (slice(None), 0))).mean()


def token_ce_t(logits: Tensor, targets: Array) -> Tensor:
    """Mean cross-entropy of (M, V) logits against integer targets."""
    m = logits.shape[0]
    picked = getitem(logits, (np.arange(m), np.asarray(targets, dtype=np.int64)))
    return (logsumexp(logits, axis=1) - picked).mean()


# -- public array-level API -------------------------------------------------------------


def _image_stack(images: list[DepthImage]) -> Array:
    return np.stack([im.pixels for im in images])


def _check_stacks(pred: list[DepthImage], gt: list[DepthImage]) -> tuple[Array, Array]:
    if len(pred) != len(gt) or len(pred) < 1:
        raise DomainError("prediction and ground truth stacks must have equal nonzero length")
    p, g = _image_stack(pred), _image_stack(gt)
    if p.shape != g.shape:
        raise DomainError(f"image shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dr_loss(pred: list[DepthImage], gt: list[DepthImage]) -> float:
    """(1 / TWH) * sum of absolute pixel differences over all poses."""
    p, g = _check_stacks(pred, gt)
    return float(np.mean(np.abs(p - g)))


def dr_loss_grad(pred: list[DepthImage], gt: list[DepthImage]) -> tuple[float, Array]:
    """Loss plus its gradient w.r.t. the predicted stack (0 at exact ties)."""
    p, g = _check_stacks(pred, gt)
    leaf = Tensor.leaf(p)
    loss = dr_loss_t(leaf, g)
    loss.backward()
    return loss.item(), leaf.grad


def chamfer(p: PointCloud, q: PointCloud, variant: str = "l2") -> float:
    """Symmetric mean nearest-neighbor distance (l1) or squared distance (l2)."""
    if p.count < 1 or q.count < 1:
        raise DomainError("chamfer requires nonempty clouds")
    return chamfer_t(Tensor.const(p.points), q.points, variant).item()


def chamfer_grad(p: PointCloud, q: PointCloud, variant: str = "l2") -> tuple[float, Array]:
    """Chamfer value plus gradient w.r.t. the points of `p`."""
    if p.count < 1 or q.count < 1:
        raise DomainError("chamfer requires nonempty clouds")
    leaf = Tensor.leaf(p.points)
    loss = chamfer_t(leaf, q.points, variant)
    loss.backward()
    return loss.item(), leaf.grad


def fscore(p: PointCloud, q: PointCloud, threshold: float) -> float:
    """Harmonic mean of match precision/recall at an absolute distance."""
    if p.count < 1 or q.count < 1:
        raise DomainError("fscore requires nonempty clouds")
    if not threshold > 0:
        raise DomainError("threshold must be positive")
    a, b = p.points, q.points
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    d2 = np.maximum(d2, 0.0)
    precision = float(np.mean(np.sqrt(d2.min(axis=1)) <= threshold))
    recall = float(np.mean(np.sqrt(d2.min(axis=0)) <= threshold))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def cross_modal_nce(ga: EmbeddingBatch, gb: EmbeddingBatch, head: ContrastiveHead) -> float:
    if ga.batch_size != gb.batch_size:
        raise DomainError("batch sizes must match")
    return cross_modal_nce_t(
        Tensor.const(ga.rows), Tensor.const(gb.rows), Tensor.const(head.log_tau)
    ).item()


def cross_modal_nce_grad(
    ga: EmbeddingBatch, gb: EmbeddingBatch, head: ContrastiveHead
) -> tuple[float, Array, Array, float]:
    """Loss plus gradients w.r.t. both embedding batches and log_tau."""
    if ga.batch_size != gb.batch_size:
        raise DomainError("batch sizes must match")
    ta, tb = Tensor.leaf(ga.rows), Tensor.leaf(gb.rows)
    tl = Tensor.leaf(np.asarray(head.log_tau))
    loss = cross_modal_nce_t(ta, tb, tl)
    loss.backward()
    return loss.item(), ta.grad, tb.grad, float(tl.grad)


def moco_loss(query: EmbeddingBatch, key_pos: EmbeddingBatch, state: MocoState) -> float:
    """Queue-contrastive loss; does not touch the queue."""
    if query.batch_size != key_pos.batch_size:
        raise DomainError("query and key batches must match")
    return moco_loss_t(
        Tensor.const(query.rows), key_pos.rows, state.queue, state.moco_tau
    ).item()


def moco_update(state: MocoState, new_keys: EmbeddingBatch) -> MocoState:
    """Enqueue keys, evicting the oldest rows beyond capacity."""
    merged = np.concatenate([state.queue, new_keys.rows], axis=0)
    if merged.shape[0] > state.capacity:
        merged = merged[merged.shape[0] - state.capacity :]
    return replace(state, queue=merged)


def token_ce(logits: Array, targets: Array, mask: Array) -> float:
    """Mean negative log-likelihood over masked positions only."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DomainError("logits must be (G, V) with V >= 2")
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise DomainError("targets and mask must have one entry per position")
    if not mask.any():
        raise DomainError("token_ce requires at least one masked position")
    return token_ce_t(Tensor.const(logits[mask]), targets[mask]).item()


def token_ce_grad(logits: Array, targets: Array, mask: Array) -> tuple[float, Array]:
    """Loss plus gradient w.r.t. the full (G, V) logits (zero where unmasked)."""
    value = token_ce(logits, targets, mask)  # validates inputs
    mask = np.asarray(mask, dtype=bool)
    leaf = Tensor.leaf(np.asarray(logits, dtype=np.float64)[mask])
    loss = token_ce_t(leaf, np.asarray(targets, dtype=np.int64)[mask])
    loss.backward()
    grad = np.zeros_like(np.asarray(logits, dtype=np.float64))
    grad[mask] = leaf.grad
    return value, grad


def total_loss(parts: dict[str, float], weights: LossWeights = LossWeights()) -> float:
    """alpha*L(R,D) + beta*L(R,P) + theta*L(P,D) + MoCo + CE + DR + CD."""
    missing = [k for k in LOSS_KEYS if k not in parts]
    if missing:
        raise DomainError(f"missing loss parts: {missing}")
    for key in LOSS_KEYS:
        if not np.isfinite(parts[key]):
            raise DomainError(f"loss part {key} is not finite: {parts[key]}")
    return float(
        weights.alpha * parts["l_rd"]
        + weights.beta * parts["l_rp"]
        + weights.theta * parts["l_pd"]
        + parts["l_moco"]
        + parts["l_ce"]
        + parts["l_dr"]
        + parts["l_cd"]
    )
