"""Text-blended linear classifier trained on a handful of labelled frames.

Class ``k`` scores a frame embedding ``f`` with ``f . (w_k + alpha_k * t_k)``
where ``t_k`` is the frozen text embedding of the phase description, ``w_k``
a learnable visual prototype and ``alpha_k`` a learnable blend multiplier.
Probabilities are the softmax of those scores over phases.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding_store import load_embedding_matrix, save_embedding_matrix
from .errors import DimensionMismatch, MalformedHeader, NonFiniteLoss, NormViolation

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_TOL = 1e-6


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


@dataclass(frozen=True)
class FewShotClassifier:
    w: np.ndarray       # K x D prototypes
    alpha: np.ndarray   # K blend multipliers
    text: np.ndarray    # K x D, frozen

    def __post_init__(self):
        if self.w.shape != self.text.shape or self.alpha.shape != (self.text.shape[0],):
            raise DimensionMismatch(
                f"inconsistent shapes w={self.w.shape} alpha={self.alpha.shape} text={self.text.shape}")
        self.text.flags.writeable = False

    @property
    def k(self) -> int:
        return self.text.shape[0]

    @property
    def d(self) -> int:
        return self.text.shape[1]

    def blended_prototypes(self) -> np.ndarray:
        return self.w + self.alpha[:, None] * self.text


@dataclass
class TrainConfig:
    lr: float = 0.01
    steps: int = 500
    # early stop once the loss improved by less than `tol` over `patience` steps
    tol: float = 1e-7
    patience: int = 20


@dataclass
class TrainResult:
    classifier: FewShotClassifier
    losses: list = field(default_factory=list)


def init_classifier(text, seed: int = 0) -> FewShotClassifier:
    """Zero prototypes and unit multipliers: the zero-shot text classifier.

    ``seed`` is accepted for interface symmetry; the initialization is
    deterministic and consumes no randomness.
    """
    text = np.array(text, dtype=np.float64)
    if text.ndim != 2 or min(text.shape) < 1:
        raise DimensionMismatch(f"text embeddings must be a non-empty K x D matrix, got {text.shape}")
    norms = np.linalg.norm(text, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise NormViolation("text embeddings must have unit-norm rows")
    k, d = text.shape
    return FewShotClassifier(w=np.zeros((k, d)), alpha=np.ones(k), text=text)


def _check_features(clf: FewShotClassifier, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != clf.d:
        raise DimensionMismatch(f"embeddings of shape {f.shape} do not match classifier dimension {clf.d}")
    return f


def logits(clf: FewShotClassifier, f) -> np.ndarray:
    f = _check_features(clf, f)
    return f @ clf.blended_prototypes().T


def predict_proba(clf: FewShotClassifier, f) -> np.ndarray:
    return softmax(logits(clf, f))


def ce_loss_and_grads(clf: FewShotClassifier, f, y):
    """Mean cross-entropy over frames and its gradients w.r.t. ``w`` and ``alpha``.

    Log-probabilities are floored at ``log(1e-12)``; floored entries carry no
    gradient.
    """
    f = _check_features(clf, f)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (f.shape[0],):
        raise DimensionMismatch(f"{len(y)} labels for {f.shape[0]} frames")
    if f.shape[0] == 0:
        raise DimensionMismatch("cannot compute a loss on zero frames")
    n = f.shape[0]
    z = f @ clf.blended_prototypes().T
    logp = log_softmax(z)
    picked = logp[np.arange(n), y]
    floor = np.log(PROB_FLOOR)
    loss = -np.mean(np.maximum(picked, floor))

    active = (picked > floor).astype(np.float64)
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz *= active[:, None] / n
    grad_blend = dz.T @ f
    grad_w = grad_blend
    grad_alpha = np.sum(grad_blend * clf.text, axis=1)
    return float(loss), grad_w, grad_alpha


def train_fewshot(clf: FewShotClassifier, f, y, cfg: TrainConfig | None = None) -> TrainResult:
    """Full-batch gradient descent on ``w`` and ``alpha``; the text rows never move."""
    cfg = cfg or TrainConfig()
    w, alpha = clf.w.copy(), clf.alpha.copy()
    cur = clf
    losses = []
    for step in range(cfg.steps):
        loss, gw, ga = ce_loss_and_grads(cur, f, y)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"few-shot loss diverged at step {step}")
        losses.append(loss)
        if len(losses) > cfg.patience and losses[-cfg.patience - 1] - loss < cfg.tol:
            log.debug("few-shot training converged at step %d (loss %.6g)", step, loss)
            break
        w = w - cfg.lr * gw
        alpha = alpha - cfg.lr * ga
        cur = replace(cur, w=w, alpha=alpha)
    return TrainResult(cur, losses)


def save_classifier(directory, clf: FewShotClassifier) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"k": clf.k, "d": clf.d, "alpha": [float(a) for a in clf.alpha], "kind": "fewshot_classifier"}
    (directory / "classifier.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    save_embedding_matrix(directory / "w.json", clf.w)
    save_embedding_matrix(directory / "text.json", clf.text)


def load_classifier(directory) -> FewShotClassifier:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "classifier.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{directory}: unreadable classifier metadata ({exc})") from exc
    w = load_embedding_matrix(directory / "w.json")
    text = load_embedding_matrix(directory / "text.json")
    alpha = np.asarray(meta.get("alpha", []), dtype=np.float64)
    if w.shape != (meta.get("k"), meta.get("d")):
        raise MalformedHeader(f"{directory}: metadata k/d disagree with stored prototypes {w.shape}")
    return FewShotClassifier(w=w, alpha=alpha, text=text)
