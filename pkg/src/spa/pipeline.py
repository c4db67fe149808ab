"""Adaptation and inference flows on top of the individual modules.

Inference for one video runs left to right:
test-time adaptation -> three streams -> fusion -> noise-step estimate ->
diffusion refinement -> argmax decoding.  ``use_tta`` and ``use_diffusion``
bypass a stage without touching the stages before it, which gives the
ablation settings ``baseline`` (both off), ``tta`` (diffusion off) and
``full``.

The noise step comes from the entropy of the fused probabilities, while
the refined state starts, by default, from their one-hot argmax
(``refine_input="labels"``).  A denoiser trained on signed one-hot
sequences treats near-uniform rows ``2p - 1`` as out of distribution.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffusion as dm
from .embedding_store import (
    ReferenceSet,
    check_paired,
    l2_normalize,
    load_embedding_matrix,
    load_labels,
    load_reference_set,
    save_embedding_matrix,
    save_labels,
    save_reference_set,
)
from .errors import ConfigError
from .fewshot import (
    FewShotClassifier,
    TrainConfig,
    init_classifier,
    load_classifier,
    predict_proba,
    save_classifier,
    train_fewshot,
)
from .metrics import F1_PROTOCOL, aggregate, evaluate, format_table
from .synth_bench import (
    FEWSHOT_NOISE,
    VIDEO_NOISE,
    make_fewshot_split,
    make_synthetic_world,
    sample_video,
)
from .task_graph import TaskGraph, load_task_graph, synthesize_dataset
from .tta import AdapterPair, TTAConfig, compute_streams, fuse_streams, init_adapters, tta_adapt

log = logging.getLogger(__name__)

ABLATION_SETTINGS = {
    "baseline": {"use_tta": False, "use_diffusion": False},
    "tta": {"use_tta": True, "use_diffusion": False},
    "full": {"use_tta": True, "use_diffusion": True},
}


REFINE_INPUTS = ("labels", "probs")


@dataclass
class RunConfig:
    seed: int = 0
    normalize_embeddings: bool = True
    # few-shot classifier
    fewshot_lr: float = 0.01
    fewshot_steps: int = 500
    fewshot_tol: float = 1e-7
    fewshot_patience: int = 20
    # synthetic sequences and diffusion training
    num_sequences: int = 10000
    max_len: int = 100000
    transition_model: str = "segment"
    diffusion_epochs: int = 20
    diffusion_batch: int = 128
    diffusion_lr: float = 1e-4
    diffusion_train_len: int = 512
    diffusion_T: int = dm.DEFAULT_T
    diffusion_beta_1: float = dm.DEFAULT_BETA_1
    diffusion_beta_T: float = dm.DEFAULT_BETA_T
    diffusion_width: int = 64
    diffusion_blocks: int = 4
    diffusion_kernel: int = 9
    diffusion_temb_dim: int = 32
    diffusion_dilation_base: int = 2
    # test-time adaptation and fusion
    tta_epochs: int = 15
    tta_lr: float = 1e-4
    tta_momentum: float = 0.0
    tau: float = 0.07
    tau_ref: float = 0.07
    fusion_weights: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    # refinement
    noise_step: int | None = None
    t_cap: int | None = None
    tau_dec: float = dm.DECODE_TEMPERATURE
    renoise: bool = False
    # "labels": refine the one-hot argmax of the fused stream; "probs": refine the fused rows
    refine_input: str = "labels"
    # stage switches
    use_tta: bool = True
    use_diffusion: bool = True

    def updated(self, **overrides) -> "RunConfig":
        return config_from_dict({**asdict(self), **overrides})

    def fewshot_config(self) -> TrainConfig:
        return TrainConfig(lr=self.fewshot_lr, steps=self.fewshot_steps, tol=self.fewshot_tol,
                           patience=self.fewshot_patience)

    def tta_config(self) -> TTAConfig:
        return TTAConfig(epochs=self.tta_epochs, lr=self.tta_lr, tau=self.tau, tau_ref=self.tau_ref,
                         momentum=self.tta_momentum)

    def diffusion_config(self) -> dm.DiffusionTrainConfig:
        return dm.DiffusionTrainConfig(
            epochs=self.diffusion_epochs, batch_size=self.diffusion_batch, lr=self.diffusion_lr,
            seed=self.seed, train_len=self.diffusion_train_len, T=self.diffusion_T,
            beta_1=self.diffusion_beta_1, beta_T=self.diffusion_beta_T, width=self.diffusion_width,
            n_blocks=self.diffusion_blocks, kernel=self.diffusion_kernel, temb_dim=self.diffusion_temb_dim,
            dilation_base=self.diffusion_dilation_base)


def config_from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**d)
    if len(cfg.fusion_weights) != 3:
        raise ConfigError("fusion_weights must have exactly 3 entries")
    if cfg.refine_input not in REFINE_INPUTS:
        raise ConfigError(f"refine_input must be one of {REFINE_INPUTS}, got {cfg.refine_input!r}")
    return cfg


def load_config(path=None, **overrides) -> RunConfig:
    """Read a flat JSON config; keys given as ``overrides`` (non-None) win."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# adaptation (training) flow

@dataclass
class AdaptResult:
    classifier: FewShotClassifier
    diffusion: dm.DiffusionModel | None
    report: dict


def fit_classifier(refs: ReferenceSet, text, cfg: RunConfig):
    clf = init_classifier(text, cfg.seed)
    return train_fewshot(clf, refs.embeddings, refs.labels, cfg.fewshot_config())


def fit_diffusion(graph: TaskGraph, cfg: RunConfig) -> dm.DiffusionTrainResult:
    rng = np.random.default_rng(cfg.seed)
    seqs = synthesize_dataset(graph, cfg.num_sequences, rng, cfg.max_len, cfg.transition_model)
    return dm.train_diffusion(seqs, graph.k, cfg.diffusion_config())


def adapt(refs: ReferenceSet, text, graph: TaskGraph | None, cfg: RunConfig, holdout=()) -> AdaptResult:
    """Train the few-shot classifier and, given a task graph, the sequence diffusion model.

    ``holdout`` is an optional iterable of ``(embeddings, labels)`` used only
    for reporting classifier accuracy on unseen frames.
    """
    fs = fit_classifier(refs, text, cfg)
    train_acc = float(np.mean(np.argmax(predict_proba(fs.classifier, refs.embeddings), axis=1) == refs.labels))
    report = {
        "config": asdict(cfg),
        "fewshot": {"steps_run": max(len(fs.losses) - 1, 0), "losses": fs.losses,
                    "train_accuracy": train_acc},
    }
    holdout = list(holdout)
    if holdout:
        correct = total = 0
        for emb, lab in holdout:
            pred = np.argmax(predict_proba(fs.classifier, emb), axis=1)
            correct += int(np.sum(pred == lab))
            total += len(lab)
        report["fewshot"]["holdout_accuracy"] = correct / total if total else float("nan")
    model = None
    if graph is not None:
        dres = fit_diffusion(graph, cfg)
        model = dres.model
        report["diffusion"] = {"epoch_losses": dres.epoch_losses, "probe_loss_initial": dres.initial_loss,
                               "probe_loss_final": dres.final_loss}
    return AdaptResult(fs.classifier, model, report)


def run_adapt(refs_path, text_path, graph_path, out_dir, cfg: RunConfig, holdout_paths=()) -> dict:
    """File-level adaptation: writes ``classifier/``, ``diffusion/`` and ``train_report.json``."""
    out_dir = Path(out_dir)
    refs = load_reference_set(refs_path, normalize=cfg.normalize_embeddings)
    text = load_text(text_path, cfg)
    graph = load_task_graph(graph_path) if graph_path is not None else None
    holdout = []
    for header, labels_path in holdout_paths:
        emb = load_video(header, cfg)
        lab = load_labels(labels_path, refs.k)
        check_paired(emb, lab)
        holdout.append((emb, lab))
    res = adapt(refs, text, graph, cfg, holdout)
    save_classifier(out_dir / "classifier", res.classifier)
    if res.diffusion is not None:
        dm.save_diffusion_model(out_dir / "diffusion", res.diffusion)
    write_json(out_dir / "train_report.json", res.report)
    return res.report


# ---------------------------------------------------------------------------
# inference flow

def load_video(header_path, cfg: RunConfig) -> np.ndarray:
    v = load_embedding_matrix(header_path)
    return l2_normalize(v) if cfg.normalize_embeddings else v


def load_text(header_path, cfg: RunConfig) -> np.ndarray:
    # text rows must be unit-norm for the classifier regardless of the switch
    return l2_normalize(load_embedding_matrix(header_path))


def infer_video(v, refs: ReferenceSet, text, clf: FewShotClassifier, model: dm.DiffusionModel | None,
                cfg: RunConfig) -> dict:
    """Run the inference chain on one video held in memory."""
    v = np.asarray(v, dtype=np.float64)
    if cfg.use_tta:
        tres = tta_adapt(v, refs, text, clf, cfg.tta_config())
        adapters, losses = tres.adapters, tres.losses
    else:
        adapters, losses = init_adapters(v.shape[1], cfg.tau), []
    streams = compute_streams(v, refs, text, clf, adapters, cfg.tau_ref)
    fused = fuse_streams(streams, cfg.fusion_weights)
    t_star = None
    refined = fused
    if cfg.use_diffusion:
        if model is None:
            raise ConfigError("diffusion stage enabled but no diffusion model was given")
        if cfg.noise_step is not None:
            t_star = int(cfg.noise_step)
        else:
            t_star = dm.estimate_noise_step(fused, model.schedule, cfg.t_cap)
        rng = np.random.default_rng(cfg.seed) if cfg.renoise else None
        coarse = fused
        if cfg.refine_input == "labels" and t_star > 0:
            coarse = np.eye(fused.shape[1])[np.argmax(fused, axis=1)]
        refined = dm.refine_sequence(model, coarse, t_star, rng=rng, renoise=cfg.renoise, tau_dec=cfg.tau_dec)
    labels = dm.decode_phases(refined).labels
    return {"adapters": adapters, "streams": streams, "fused": fused, "refined": refined,
            "labels": labels, "loss_trace": losses, "t_star": t_star}


def prediction_to_json(result: dict, cfg: RunConfig, debug: bool = False) -> dict:
    out = {
        "config": asdict(cfg),
        "frames": int(len(result["labels"])),
        "k": int(result["fused"].shape[1]),
        "t_star": result["t_star"],
        "loss_trace": [float(x) for x in result["loss_trace"]],
        "labels": [int(x) for x in result["labels"]],
        "fused": result["fused"].tolist(),
        "refined": result["refined"].tolist(),
    }
    if debug:
        s = result["streams"]
        out["streams"] = {"s_ref": s.s_ref.tolist(), "s_vl": s.s_vl.tolist(), "s_fs": s.s_fs.tolist()}
    return out


def run_infer(video_path, refs_path, text_path, clf_dir, diffusion_dir, cfg: RunConfig, out_path=None,
              debug: bool = False) -> dict:
    v = load_video(video_path, cfg)
    refs = load_reference_set(refs_path, normalize=cfg.normalize_embeddings)
    text = load_text(text_path, cfg)
    clf = load_classifier(clf_dir)
    model = dm.load_diffusion_model(diffusion_dir) if (cfg.use_diffusion and diffusion_dir) else None
    result = infer_video(v, refs, text, clf, model, cfg)
    out = prediction_to_json(result, cfg, debug)
    if out_path is not None:
        write_json(out_path, out)
    return out


# ---------------------------------------------------------------------------
# evaluation and reporting

def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def evaluate_prediction(pred_json: dict, gt, setting: str | None = None) -> dict:
    k = int(pred_json["k"])
    m = evaluate(pred_json["labels"], gt, k).to_dict()
    if setting is not None:
        m["setting"] = setting
    return m


def report(metrics: list, cfg: dict | None = None) -> dict:
    """Aggregate per-video metric dicts, grouped by their ``setting`` key."""
    groups = {}
    for m in metrics:
        groups.setdefault(m.get("setting", "all"), []).append(m)
    rows = {name: aggregate(ms) for name, ms in sorted(groups.items())}
    return {"f1_protocol": F1_PROTOCOL, "config": cfg, "settings": rows, "table": format_table(rows)}


# ---------------------------------------------------------------------------
# synthetic benchmark

@dataclass
class Bench:
    world: object
    graph: TaskGraph
    refs: ReferenceSet
    videos: list          # list of (embeddings, labels)


def make_bench(graph: TaskGraph, k: int = 7, d: int = 64, videos: int = 10, shots: int = 16,
               drift: float = 0.4, seed: int = 0, video_noise: float = VIDEO_NOISE,
               fewshot_noise: float = FEWSHOT_NOISE, modality_gap: float = 1.0,
               min_separation: float = 0.3, max_len: int = 100000) -> Bench:
    world = make_synthetic_world(k, d, seed, min_separation, modality_gap)
    rng = np.random.default_rng(seed + 1)
    refs, _ = make_fewshot_split(world, shots, fewshot_noise, rng)
    vids = [sample_video(world, graph, max_len, video_noise, drift, rng) for _ in range(videos)]
    return Bench(world, graph, refs, vids)


def write_bench(bench: Bench, out_dir, meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_embedding_matrix(out_dir / "text.json", bench.world.text_prototypes)
    save_reference_set(out_dir / "refs.json", bench.refs)
    write_json(out_dir / "graph.json", bench.graph.to_dict())
    names = []
    for i, (emb, lab) in enumerate(bench.videos):
        name = f"video_{i:03d}"
        save_embedding_matrix(out_dir / "videos" / f"{name}.json", emb)
        save_labels(out_dir / "videos" / f"{name}.labels.txt", lab)
        names.append(name)
    write_json(out_dir / "bench.json", {"k": bench.world.k, "d": bench.world.d, "videos": names,
                                        **(meta or {})})
