"""Per-video test-time adaptation over three phase-prediction streams.

Streams, each an ``L x K`` row-stochastic matrix:

* reference: soft nearest-neighbour vote over labelled reference frames,
  ``softmax(f_v(V) f_v(R)^T / tau_ref) C``;
* vision-language: ``softmax(f_v(V) f_t(T)^T / tau)`` against phase texts;
* few-shot: the trained few-shot classifier on the raw embeddings.

The adapters ``f_v`` and ``f_t`` are square linear maps, identity at start,
fitted per video by gradient descent on the mutual-agreement loss
``M(S_ref, S_vl) + M(S_fs, S_ref)`` with ``M(A, B) = -mean_l sum_k A log B``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embedding_store import ReferenceSet
from .errors import DimensionMismatch, InvalidTemperature, NonFiniteLoss, WeightViolation
from .fewshot import PROB_FLOOR, FewShotClassifier, predict_proba, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterPair:
    f_v: np.ndarray
    f_t: np.ndarray
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidTemperature(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class StreamBundle:
    s_ref: np.ndarray
    s_vl: np.ndarray
    s_fs: np.ndarray

    def __post_init__(self):
        if not (self.s_ref.shape == self.s_vl.shape == self.s_fs.shape):
            raise DimensionMismatch(
                f"stream shapes differ: {self.s_ref.shape}, {self.s_vl.shape}, {self.s_fs.shape}")


@dataclass
class TTAConfig:
    epochs: int = 15
    lr: float = 1e-4
    tau: float = 0.07
    tau_ref: float = 0.07
    momentum: float = 0.0


@dataclass
class TTAResult:
    adapters: AdapterPair
    losses: list = field(default_factory=list)


def init_adapters(d: int, tau: float = 0.07) -> AdapterPair:
    if d < 1:
        raise DimensionMismatch(f"adapter dimension must be >= 1, got {d}")
    return AdapterPair(np.eye(d), np.eye(d), tau)


def _check_dims(v, other, what):
    if v.ndim != 2 or other.ndim != 2 or v.shape[1] != other.shape[1]:
        raise DimensionMismatch(f"video embeddings {v.shape} incompatible with {what} {other.shape}")


def stream_reference(v, refs: ReferenceSet, a: AdapterPair | None = None, tau_ref: float = 0.07) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_dims(v, refs.embeddings, "reference embeddings")
    if a is None:
        av, ar = v, refs.embeddings
    else:
        av, ar = v @ a.f_v.T, refs.embeddings @ a.f_v.T
    return softmax(av @ ar.T / tau_ref) @ refs.assoc


def stream_vision_language(v, t, a: AdapterPair | None = None, tau: float | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_dims(v, t, "text embeddings")
    if a is None:
        tau = 0.07 if tau is None else tau
        return softmax(v @ t.T / tau)
    tau = a.tau if tau is None else tau
    return softmax((v @ a.f_v.T) @ (t @ a.f_t.T).T / tau)


def stream_fewshot(clf: FewShotClassifier, v) -> np.ndarray:
    return predict_proba(clf, v)


def compute_streams(v, refs: ReferenceSet, t, clf: FewShotClassifier, a: AdapterPair,
                    tau_ref: float = 0.07) -> StreamBundle:
    return StreamBundle(stream_reference(v, refs, a, tau_ref), stream_vision_language(v, t, a),
                        stream_fewshot(clf, v))


def mutual_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatch(f"mutual loss needs equal L x K shapes, got {a.shape} and {b.shape}")
    return float(-np.sum(a * np.log(np.maximum(b, PROB_FLOOR))) / a.shape[0])


def _mutual_grads(a, b):
    """d M(a, b) / d a and d M(a, b) / d b (clamped entries of b get no gradient)."""
    n = a.shape[0]
    safe = np.maximum(b, PROB_FLOOR)
    da = -np.log(safe) / n
    db = np.where(b > PROB_FLOOR, -a / safe, 0.0) / n
    return da, db


def _softmax_backward(p, dp):
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


def tta_loss_and_grads(v, refs: ReferenceSet, t, s_fs, a: AdapterPair, tau_ref: float = 0.07):
    """Total agreement loss and its gradients w.r.t. ``f_v`` and ``f_t``.

    ``s_fs`` is a constant target; gradients flow through both arguments of
    both loss terms otherwise.
    """
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    r, c = refs.embeddings, refs.assoc
    av = v @ a.f_v.T            # L x D
    ar = r @ a.f_v.T            # N x D
    at = t @ a.f_t.T            # K x D

    w_ref = softmax(av @ ar.T / tau_ref)   # L x N
    s_ref = w_ref @ c
    s_vl = softmax(av @ at.T / a.tau)

    loss = mutual_loss(s_ref, s_vl) + mutual_loss(s_fs, s_ref)

    d_ref1, d_vl = _mutual_grads(s_ref, s_vl)
    _, d_ref2 = _mutual_grads(s_fs, s_ref)
    d_sref = d_ref1 + d_ref2

    dz_ref = _softmax_backward(w_ref, d_sref @ c.T) / tau_ref
    dz_vl = _softmax_backward(s_vl, d_vl) / a.tau

    d_av = dz_ref @ ar + dz_vl @ at
    d_ar = dz_ref.T @ av
    d_at = dz_vl.T @ av
    grad_fv = d_av.T @ v + d_ar.T @ r
    grad_ft = d_at.T @ t
    return loss, grad_fv, grad_ft


def tta_adapt(v, refs: ReferenceSet, t, clf: FewShotClassifier, cfg: TTAConfig | None = None) -> TTAResult:
    """Fit fresh identity adapters to one video; returns the adapters and per-epoch losses.

    The loss trace has ``epochs + 1`` entries: the loss before each update and
    the loss after the last one.
    """
    cfg = cfg or TTAConfig()
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_dims(v, refs.embeddings, "reference embeddings")
    _check_dims(v, t, "text embeddings")
    a = init_adapters(v.shape[1], cfg.tau)
    s_fs = stream_fewshot(clf, v)
    fv, ft = a.f_v, a.f_t
    vel_v, vel_t = np.zeros_like(fv), np.zeros_like(ft)
    losses = []
    for epoch in range(cfg.epochs):
        loss, gv, gt = tta_loss_and_grads(v, refs, t, s_fs, a, cfg.tau_ref)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"test-time adaptation diverged at epoch {epoch}")
        losses.append(loss)
        vel_v = cfg.momentum * vel_v + gv
        vel_t = cfg.momentum * vel_t + gt
        fv = fv - cfg.lr * vel_v
        ft = ft - cfg.lr * vel_t
        a = AdapterPair(fv, ft, cfg.tau)
    if cfg.epochs:
        final, _, _ = tta_loss_and_grads(v, refs, t, s_fs, a, cfg.tau_ref)
        losses.append(final)
    return TTAResult(a, losses)


def fuse_streams(s: StreamBundle, weights=(1 / 3, 1 / 3, 1 / 3)) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or not np.isfinite(w).all() or abs(w.sum() - 1.0) > 1e-9:
        raise WeightViolation(f"fusion weights must be 3 non-negative reals summing to 1, got {weights}")
    return w[0] * s.s_ref + w[1] * s.s_vl + w[2] * s.s_fs
