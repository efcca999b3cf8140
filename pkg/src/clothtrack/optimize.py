"""Test-time optimization of a per-vertex correction field.

The objective is ``alpha * chamfer + beta * rigidity``: a one-way Chamfer term
pulling the displaced visible vertices onto the observed cloud, and a
translation-only as-rigid-as-possible term penalising differences between the
corrections of neighbouring vertices.  Gradients are analytic and the
optimizer is a plain Adam.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class TtoConfig:
    alpha: float = 1.0
    beta: float = 10.0
    iterations: int = 200
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    correspondence_refresh: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.correspondence_refresh < 1:
            raise ValueError("correspondence_refresh must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrectionField:
    """Optimized per-vertex translations plus optimizer bookkeeping."""

    deltas: np.ndarray
    initial_loss: float = float("nan")
    best_loss: float = float("nan")
    best_iteration: int = 0
    history: list = field(default_factory=list)
    nonfinite: bool = False

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.deltas)):
            raise ValueError("correction field must be finite")


class Adam:
    def __init__(self, shape, lr=2e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``params``."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def _edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        raise ValueError("rigidity loss needs at least one edge")
    return e


def rigidity_loss(deltas: np.ndarray, edges) -> float:
    """Mean over edges of the squared difference between endpoint corrections."""
    e = _edges(edges)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 3)
    diff = d[e[:, 0]] - d[e[:, 1]]
    return float(np.einsum("ij,ij->", diff, diff) / len(e))


def incidence_matrix(edges, num_vertices: int) -> sp.csr_matrix:
    """Signed edge-vertex incidence: row ``e`` is +1 at ``i`` and -1 at ``j``."""
    e = _edges(edges)
    m = len(e)
    rows = np.repeat(np.arange(m), 2)
    cols = e.ravel()
    vals = np.tile([1.0, -1.0], m)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, num_vertices))


def rigidity_loss_and_grad(
    deltas: np.ndarray, incidence: sp.csr_matrix, incidence_t: Optional[sp.csr_matrix] = None
) -> tuple[float, np.ndarray]:
    """Rigidity loss and its gradient; pass ``incidence_t`` to reuse a cached transpose."""
    diff = incidence @ deltas
    m = incidence.shape[0]
    loss = float(np.einsum("ij,ij->", diff, diff) / m)
    if incidence_t is None:
        incidence_t = incidence.T.tocsr()
    return loss, (2.0 / m) * (incidence_t @ diff)


def chamfer_correspondences(observation: np.ndarray, displaced_visible: np.ndarray) -> np.ndarray:
    """Index into ``displaced_visible`` of each observation point's nearest vertex."""
    _, idx = cKDTree(displaced_visible, balanced_tree=False, compact_nodes=False).query(observation, k=1)
    return idx


def _check_inputs(observation, visible_set):
    if len(visible_set) == 0:
        raise ValueError("empty visible set: tracking has lost the cloth")
    if len(observation) == 0:
        raise ValueError("empty observation")


def tto_objective(
    pred_positions: np.ndarray,
    deltas: np.ndarray,
    observation: np.ndarray,
    visible_set: np.ndarray,
    edges,
    alpha: float = 1.0,
    beta: float = 10.0,
    correspondences: Optional[np.ndarray] = None,
    incidence: Optional[sp.csr_matrix] = None,
    incidence_t: Optional[sp.csr_matrix] = None,
) -> tuple[float, np.ndarray]:
    """Loss and analytic gradient with respect to ``deltas``.

    Each observation point contributes only through its nearest displaced
    visible vertex; pass ``correspondences`` to hold those assignments fixed.
    """
    obs = np.asarray(observation, dtype=np.float64).reshape(-1, 3)
    vis = np.asarray(visible_set, dtype=np.int64)
    _check_inputs(obs, vis)
    pred = np.asarray(pred_positions, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64).reshape(pred.shape)
    if incidence is None:
        incidence = incidence_matrix(edges, len(pred))

    moved = pred[vis] + d[vis]
    if correspondences is None:
        correspondences = chamfer_correspondences(obs, moved)
    resid = moved[correspondences] - obs
    n_obs = len(obs)
    chamf = float(np.einsum("ij,ij->", resid, resid) / n_obs)
    grad = np.zeros_like(d)
    if alpha != 0.0:
        target = vis[correspondences]
        scale = 2.0 * alpha / n_obs
        for c in range(3):
            grad[:, c] += scale * np.bincount(target, weights=resid[:, c], minlength=len(d))

    loss = alpha * chamf
    if beta != 0.0:
        rig, rig_grad = rigidity_loss_and_grad(d, incidence, incidence_t)
        loss += beta * rig
        grad += beta * rig_grad
    return loss, grad


def run_tto(
    pred_positions: np.ndarray,
    observation: np.ndarray,
    visible_set: np.ndarray,
    edges,
    config: TtoConfig = TtoConfig(),
    initial_deltas: Optional[np.ndarray] = None,
) -> CorrectionField:
    """Adam on the correction field, returning the lowest-loss iterate seen."""
    pred = np.asarray(pred_positions, dtype=np.float64)
    obs = np.asarray(observation, dtype=np.float64).reshape(-1, 3)
    vis = np.asarray(visible_set, dtype=np.int64)
    _check_inputs(obs, vis)
    incidence = incidence_matrix(edges, len(pred))
    incidence_t = incidence.T.tocsr()
    d = np.zeros_like(pred) if initial_deltas is None else np.array(initial_deltas, dtype=np.float64)
    opt = Adam(d.shape, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    best_d, best_loss, best_it = d.copy(), np.inf, 0
    history: list[float] = []
    initial_loss = np.nan
    corr = None
    nonfinite = False
    for it in range(config.iterations + 1):
        if corr is None or it % config.correspondence_refresh == 0:
            corr = chamfer_correspondences(obs, pred[vis] + d[vis])
        loss, grad = tto_objective(
            pred, d, obs, vis, None, config.alpha, config.beta, corr, incidence, incidence_t
        )
        if it == 0:
            initial_loss = loss
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            nonfinite = True
            break
        if loss < best_loss:
            best_d, best_loss, best_it = d.copy(), loss, it
        history.append(best_loss)
        if it == config.iterations or loss == 0.0:
            break
        opt.step(d, grad)
    return CorrectionField(best_d, float(initial_loss), float(best_loss), best_it, history, nonfinite)
