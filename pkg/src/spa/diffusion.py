"""Gaussian diffusion over phase-label sequences.

Label sequences are embedded in a signed one-hot space (``+1`` for the
active phase, ``-1`` elsewhere), noised with a linear variance schedule, and
a small temporal convolution network learns to predict the clean sequence
from a noisy one.  At inference a coarse per-frame prediction is treated as
a partially noised state and walked back to step 0 with the posterior mean
of the forward process.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding_store import load_embedding_matrix, save_embedding_matrix
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidRange,
    MalformedHeader,
    NonFiniteLoss,
    OutOfRangeLabel,
    StepOutOfRange,
)
from .fewshot import softmax
from .task_graph import PhaseSequence

log = logging.getLogger(__name__)

DEFAULT_T = 100
DEFAULT_BETA_1 = 1e-4
DEFAULT_BETA_T = 0.02
DECODE_TEMPERATURE = 0.5


# ---------------------------------------------------------------------------
# schedule and encodings

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal retention after ``t`` steps; step 0 is the clean signal."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_noise_schedule(T: int = DEFAULT_T, beta_1: float = DEFAULT_BETA_1,
                         beta_T: float = DEFAULT_BETA_T, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise InvalidRange(f"unsupported schedule kind {kind!r}")
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise InvalidRange(f"T must be a positive integer, got {T!r}")
    if not (0.0 <= beta_1 <= beta_T < 1.0):
        raise InvalidRange(f"need 0 <= beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    betas = np.linspace(beta_1, beta_T, int(T)) if T > 1 else np.array([float(beta_1)])
    return NoiseSchedule(betas)


def encode_labels(s, k: int) -> np.ndarray:
    labels = s.labels if isinstance(s, PhaseSequence) else np.asarray(s, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise OutOfRangeLabel(f"labels must lie in [0, {k})")
    h = -np.ones((labels.size, k))
    h[np.arange(labels.size), labels] = 1.0
    return h


def encode_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionMismatch(f"expected an L x K probability matrix, got shape {p.shape}")
    return 2.0 * p - 1.0


def decode_phases(p) -> PhaseSequence:
    # np.argmax returns the first maximum, i.e. the lowest phase index on ties
    return PhaseSequence(np.argmax(np.asarray(p), axis=1).astype(np.int64))


def forward_noise(h0, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample ``H_t`` given ``H_0`` from the closed-form marginal of the forward chain."""
    if not 1 <= t <= sched.T:
        raise StepOutOfRange(f"step {t} outside [1, {sched.T}]")
    h0 = np.asarray(h0, dtype=np.float64)
    ab = sched.alpha_bar_at(t)
    eps = rng.standard_normal(h0.shape)
    return math.sqrt(ab) * h0 + math.sqrt(1.0 - ab) * eps


def posterior_coefficients(sched: NoiseSchedule, t: int):
    """Coefficients of ``q(H_{t-1} | H_t, H_0)``: mean = c0*H_0 + ct*H_t, variance."""
    beta = float(sched.betas[t - 1])
    ab, ab_prev = sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1)
    if 1.0 - ab <= 0.0:
        # zero-noise step: the posterior collapses onto H_0
        return 1.0, 0.0, 0.0
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct, var


def mean_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return float(np.mean(np.sum(terms, axis=1))) if p.shape[0] else 0.0


def estimate_noise_step(p, sched: NoiseSchedule, t_cap: int | None = None) -> int:
    """Map mean per-frame entropy onto a starting step: 0 for confident input, ``t_cap`` at most."""
    p = np.asarray(p, dtype=np.float64)
    t_cap = sched.T // 2 if t_cap is None else int(t_cap)
    k = p.shape[1]
    if k < 2 or p.shape[0] == 0:
        return 0
    t_star = int(round(sched.T * mean_entropy(p) / math.log(k)))
    return max(0, min(t_star, t_cap))


# ---------------------------------------------------------------------------
# denoiser network

@dataclass(frozen=True)
class DenoiserArch:
    k: int
    width: int = 64
    n_blocks: int = 4
    kernel: int = 9
    temb_dim: int = 32
    # block b uses dilation dilation_base**b; 1 disables dilation
    dilation_base: int = 2

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise InvalidRange("kernel width must be odd for same padding")
        if self.dilation_base < 1:
            raise InvalidRange("dilation_base must be >= 1")

    def dilation(self, block: int) -> int:
        return self.dilation_base ** block

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilation(b) for b in range(self.n_blocks))


def step_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def init_denoiser_params(arch: DenoiserArch, rng: np.random.Generator) -> dict:
    k, w, kw, e = arch.k, arch.width, arch.kernel, arch.temb_dim
    p = {
        "in_w": rng.standard_normal((k, w)) / math.sqrt(k),
        "in_b": np.zeros(w),
    }
    for b in range(arch.n_blocks):
        p[f"t{b}_w"] = rng.standard_normal((e, w)) / math.sqrt(e)
        p[f"t{b}_b"] = np.zeros(w)
        p[f"conv{b}_w"] = rng.standard_normal((kw, w, w)) / math.sqrt(kw * w)
        p[f"conv{b}_b"] = np.zeros(w)
        p[f"out{b}_w"] = rng.standard_normal((w, w)) / math.sqrt(w)
        p[f"out{b}_b"] = np.zeros(w)
    p["fin_w"] = np.zeros((w + k, k))
    p["fin_b"] = np.zeros(k)
    return p


def _conv_same(x, weight, bias, dilation=1):
    # x: (B, L, Cin); weight: (kw, Cin, Cout)
    kw = weight.shape[0]
    pad = dilation * (kw // 2)
    length = x.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias, x.shape[:2] + (weight.shape[2],)).copy()
    for j in range(kw):
        o = j * dilation
        out += xp[:, o:o + length, :] @ weight[j]
    return out, xp


def _conv_same_backward(dz, xp, weight, dilation=1):
    kw = weight.shape[0]
    pad = dilation * (kw // 2)
    length = dz.shape[1]
    dz2 = dz.reshape(-1, dz.shape[2])
    dw = np.empty_like(weight)
    dxp = np.zeros_like(xp)
    for j in range(kw):
        o = j * dilation
        win = xp[:, o:o + length, :]
        dw[j] = win.reshape(-1, win.shape[2]).T @ dz2
        dxp[:, o:o + length, :] += dz @ weight[j].T
    return dxp[:, pad:pad + length, :], dw, dz2.sum(axis=0)


def denoiser_apply(params: dict, arch: DenoiserArch, x, t, with_cache: bool = False):
    """Predict clean sequences from noisy ones.

    ``x`` is ``(B, L, K)`` (or ``(L, K)``), ``t`` a step per batch element.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[2] != arch.k:
        raise DimensionMismatch(f"denoiser expects {arch.k} channels, got {x.shape[2]}")
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    emb = step_embedding(t, arch.temb_dim)
    h = x @ params["in_w"] + params["in_b"]
    cache = {"x": x, "emb": emb, "blocks": []}
    for b in range(arch.n_blocks):
        u = h + (emb @ params[f"t{b}_w"] + params[f"t{b}_b"])[:, None, :]
        z, up = _conv_same(u, params[f"conv{b}_w"], params[f"conv{b}_b"], arch.dilation(b))
        a = np.tanh(z)
        h = u + a @ params[f"out{b}_w"] + params[f"out{b}_b"]
        if with_cache:
            cache["blocks"].append((up, a))
    cat = np.concatenate([h, x], axis=2)
    out = cat @ params["fin_w"] + params["fin_b"]
    cache["cat"] = cat
    if squeeze:
        out = out[0]
    return (out, cache) if with_cache else out


def denoiser_backward(params: dict, arch: DenoiserArch, cache: dict, dout) -> dict:
    """Parameter gradients given the upstream gradient ``dout`` of the output."""
    if dout.ndim == 2:
        dout = dout[None]
    grads = {}
    cat = cache["cat"]
    w = arch.width
    dout2 = dout.reshape(-1, dout.shape[2])
    grads["fin_w"] = cat.reshape(-1, cat.shape[2]).T @ dout2
    grads["fin_b"] = dout2.sum(axis=0)
    dh = (dout @ params["fin_w"].T)[:, :, :w]
    emb = cache["emb"]
    for b in reversed(range(arch.n_blocks)):
        up, a = cache["blocks"][b]
        du = dh.copy()
        dh2 = dh.reshape(-1, w)
        grads[f"out{b}_w"] = a.reshape(-1, w).T @ dh2
        grads[f"out{b}_b"] = dh2.sum(axis=0)
        dz = (dh @ params[f"out{b}_w"].T) * (1.0 - a * a)
        dx_conv, grads[f"conv{b}_w"], grads[f"conv{b}_b"] = _conv_same_backward(
            dz, up, params[f"conv{b}_w"], arch.dilation(b))
        du += dx_conv
        dvec = du.sum(axis=1)
        grads[f"t{b}_w"] = emb.T @ dvec
        grads[f"t{b}_b"] = dvec.sum(axis=0)
        dh = du
    x = cache["x"]
    grads["in_w"] = x.reshape(-1, x.shape[2]).T @ dh.reshape(-1, w)
    grads["in_b"] = dh.reshape(-1, w).sum(axis=0)
    return grads


@dataclass(frozen=True)
class DiffusionModel:
    schedule: NoiseSchedule
    arch: DenoiserArch
    params: dict

    @property
    def k(self) -> int:
        return self.arch.k


def init_diffusion_model(k: int, schedule: NoiseSchedule | None = None, seed: int = 0, **arch_kw) -> DiffusionModel:
    arch = DenoiserArch(k=k, **arch_kw)
    rng = np.random.default_rng(seed)
    return DiffusionModel(schedule or build_noise_schedule(), arch, init_denoiser_params(arch, rng))


def denoiser_forward(m: DiffusionModel, ht, t: int) -> np.ndarray:
    ht = np.asarray(ht, dtype=np.float64)
    if ht.ndim != 2 or ht.shape[1] != m.k:
        raise DimensionMismatch(f"expected an L x {m.k} hidden sequence, got shape {ht.shape}")
    return denoiser_apply(m.params, m.arch, ht, t)


def mse_loss_and_grads(params: dict, arch: DenoiserArch, xt, t, x0):
    """Mean squared error of the clean-sequence prediction and its parameter gradients."""
    pred, cache = denoiser_apply(params, arch, xt, t, with_cache=True)
    diff = pred - x0
    loss = float(np.mean(diff * diff))
    grads = denoiser_backward(params, arch, cache, 2.0 * diff / diff.size)
    return loss, grads


# ---------------------------------------------------------------------------
# training

@dataclass
class DiffusionTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0
    train_len: int = 512
    T: int = DEFAULT_T
    beta_1: float = DEFAULT_BETA_1
    beta_T: float = DEFAULT_BETA_T
    width: int = 64
    n_blocks: int = 4
    kernel: int = 9
    temb_dim: int = 32
    dilation_base: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class DiffusionTrainResult:
    model: DiffusionModel
    epoch_losses: list = field(default_factory=list)
    # MSE on a fixed probe batch (fixed crops, steps and noise) before and after training
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def crop_or_pad(labels: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop of a longer sequence, cyclic repetition of a shorter one."""
    n = len(labels)
    if n >= length:
        off = int(rng.integers(0, n - length + 1))
        return labels[off:off + length]
    return np.resize(labels, length)


def _batch(seqs, idx, cfg, k, rng):
    x0 = np.stack([encode_labels(crop_or_pad(seqs[i].labels, cfg.train_len, rng), k) for i in idx])
    t = rng.integers(1, cfg.T + 1, size=len(idx))
    return x0, t


def _noised(x0, t, sched, rng):
    ab = sched.alpha_bar[t - 1][:, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def train_diffusion(seqs, k: int, cfg: DiffusionTrainConfig | None = None) -> DiffusionTrainResult:
    """Fit the denoiser with Adam on mini-batches of noised synthetic sequences."""
    cfg = cfg or DiffusionTrainConfig()
    seqs = list(seqs)
    if not seqs:
        raise EmptyDataset("no training sequences")
    for s in seqs:
        if len(s) == 0:
            raise EmptyDataset("training set contains an empty sequence")
    sched = build_noise_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    model = init_diffusion_model(k, sched, seed=cfg.seed, width=cfg.width, n_blocks=cfg.n_blocks,
                                 kernel=cfg.kernel, temb_dim=cfg.temb_dim,
                                 dilation_base=cfg.dilation_base)
    params = {name: v.copy() for name, v in model.params.items()}
    arch = model.arch

    rng = np.random.default_rng(cfg.seed + 1)
    probe_rng = np.random.default_rng(cfg.seed + 2)
    probe_idx = np.arange(min(len(seqs), cfg.batch_size))
    probe_x0, probe_t = _batch(seqs, probe_idx, cfg, k, probe_rng)
    probe_xt = _noised(probe_x0, probe_t, sched, probe_rng)

    def probe_loss():
        pred = denoiser_apply(params, arch, probe_xt, probe_t)
        return float(np.mean((pred - probe_x0) ** 2))

    initial = probe_loss()
    m1 = {n: np.zeros_like(v) for n, v in params.items()}
    m2 = {n: np.zeros_like(v) for n, v in params.items()}
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x0, t = _batch(seqs, idx, cfg, k, rng)
            xt = _noised(x0, t, sched, rng)
            loss, grads = mse_loss_and_grads(params, arch, xt, t, x0)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"diffusion loss diverged at epoch {epoch}, step {step}")
            step += 1
            bc1 = 1.0 - cfg.adam_beta1 ** step
            bc2 = 1.0 - cfg.adam_beta2 ** step
            for name, g in grads.items():
                m1[name] = cfg.adam_beta1 * m1[name] + (1.0 - cfg.adam_beta1) * g
                m2[name] = cfg.adam_beta2 * m2[name] + (1.0 - cfg.adam_beta2) * g * g
                params[name] -= cfg.lr * (m1[name] / bc1) / (np.sqrt(m2[name] / bc2) + cfg.adam_eps)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("diffusion epoch %d/%d  loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])
    final = probe_loss()
    trained = DiffusionModel(sched, arch, params)
    return DiffusionTrainResult(trained, epoch_losses, initial, final)


# ---------------------------------------------------------------------------
# inference

def refine_sequence(m: DiffusionModel, p, t_star: int, rng: np.random.Generator | None = None,
                    renoise: bool = False, tau_dec: float = DECODE_TEMPERATURE,
                    clip_denoised: bool = True) -> np.ndarray:
    """Walk a coarse prediction back from step ``t_star`` to a clean sequence.

    The coarse input is used directly as ``H_{t_star}``.  Each reverse step
    takes the posterior mean given the denoiser's clean estimate; fresh
    posterior noise is only added when ``rng`` is supplied.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != m.k:
        raise DimensionMismatch(f"expected an L x {m.k} probability matrix, got shape {p.shape}")
    if not 0 <= t_star <= m.schedule.T:
        raise StepOutOfRange(f"noise step {t_star} outside [0, {m.schedule.T}]")
    if t_star == 0:
        return p
    h = encode_probs(p)
    if renoise:
        noise_rng = rng if rng is not None else np.random.default_rng(0)
        h = forward_noise(h, t_star, m.schedule, noise_rng)
    x0_hat = h
    for t in range(t_star, 0, -1):
        x0_hat = denoiser_apply(m.params, m.arch, h, t)
        if clip_denoised:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        c0, ct, var = posterior_coefficients(m.schedule, t)
        h = c0 * x0_hat + ct * h
        if rng is not None and t > 1 and var > 0:
            h = h + math.sqrt(var) * rng.standard_normal(h.shape)
    return softmax(x0_hat / tau_dec)


# ---------------------------------------------------------------------------
# checkpoints

def save_diffusion_model(directory, m: DiffusionModel) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(m.params)
    flat = np.concatenate([m.params[n].ravel() for n in names])[None, :]
    meta = {
        "kind": "sequence_diffusion",
        "k": m.k,
        "T": m.schedule.T,
        "beta_1": float(m.schedule.betas[0]),
        "beta_T": float(m.schedule.betas[-1]),
        "arch": asdict(m.arch),
        "params": [{"name": n, "shape": list(m.params[n].shape)} for n in names],
    }
    (directory / "diffusion.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    save_embedding_matrix(directory / "params.json", flat)


def load_diffusion_model(directory) -> DiffusionModel:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "diffusion.json").read_text(encoding="utf-8"))
        arch = DenoiserArch(**meta["arch"])
        sched = build_noise_schedule(meta["T"], meta["beta_1"], meta["beta_T"])
        layout = [(e["name"], tuple(e["shape"])) for e in meta["params"]]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{directory}: unreadable diffusion metadata ({exc})") from exc
    flat = load_embedding_matrix(directory / "params.json")[0]
    params, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        params[name] = flat[off:off + n].reshape(shape).copy()
        off += n
    if off != flat.size:
        raise MalformedHeader(f"{directory}: parameter payload has {flat.size} values, layout needs {off}")
    return DiffusionModel(sched, arch, params)
