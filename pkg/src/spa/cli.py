"""``spa`` command line interface.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import diffusion as dm
from .embedding_store import load_labels, load_reference_set
from .errors import ComputeError, SPAError, ValidationError
from .fewshot import save_classifier
from .pipeline import (
    evaluate_prediction,
    fit_classifier,
    fit_diffusion,
    load_config,
    load_text,
    make_bench,
    report,
    run_adapt,
    run_infer,
    write_bench,
    write_json,
)
from .synth_bench import branching_graph
from .task_graph import load_task_graph

log = logging.getLogger("spa")


def _cmd_synth_bench(args):
    graph = load_task_graph(args.graph) if args.graph else branching_graph()
    bench = make_bench(graph, k=args.k, d=args.d, videos=args.videos, shots=args.shots, drift=args.drift,
                       seed=args.seed, video_noise=args.noise, fewshot_noise=args.fewshot_noise,
                       modality_gap=args.modality_gap, min_separation=args.min_separation,
                       max_len=args.max_len)
    meta = {"shots": args.shots, "drift": args.drift, "seed": args.seed, "noise": args.noise,
            "fewshot_noise": args.fewshot_noise, "modality_gap": args.modality_gap}
    write_bench(bench, args.out, meta)
    print(f"wrote {args.videos} videos, {bench.refs.embeddings.shape[0]} references to {args.out}")
    return 0


def _cmd_graph_validate(args):
    try:
        g = load_task_graph(args.file)
    except ValidationError as exc:
        print(f"invalid: {exc}")
        return 1
    print(f"valid: {g.k} phases, {len(g.edges)} edges, start phases {g.start_phases}")
    return 0


def _cmd_train_fewshot(args):
    cfg = load_config(args.config, seed=args.seed, fewshot_lr=args.lr, fewshot_steps=args.steps)
    refs = load_reference_set(args.refs, normalize=cfg.normalize_embeddings)
    text = load_text(args.text, cfg)
    res = fit_classifier(refs, text, cfg)
    save_classifier(args.out, res.classifier)
    write_json(Path(args.out) / "train_report.json", {"losses": res.losses, "config": asdict(cfg)})
    final = res.losses[-1] if res.losses else float("nan")
    print(f"few-shot classifier trained for {len(res.losses)} steps, final loss {final:.4f}")
    return 0


def _cmd_train_diffusion(args):
    cfg = load_config(args.config, seed=args.seed, diffusion_epochs=args.epochs, diffusion_batch=args.batch,
                      diffusion_lr=args.lr, num_sequences=args.num_sequences,
                      diffusion_train_len=args.train_len, max_len=args.max_len)
    graph = load_task_graph(args.graph)
    res = fit_diffusion(graph, cfg)
    dm.save_diffusion_model(args.out, res.model)
    write_json(Path(args.out) / "train_report.json",
               {"epoch_losses": res.epoch_losses, "probe_loss_initial": res.initial_loss,
                "probe_loss_final": res.final_loss, "config": asdict(cfg)})
    print(f"diffusion model trained, probe loss {res.initial_loss:.4f} -> {res.final_loss:.4f}")
    return 0


def _cmd_adapt(args):
    cfg = load_config(args.config, seed=args.seed)
    holdout = []
    for header in args.holdout or []:
        holdout.append((header, str(Path(header).with_suffix("")) + ".labels.txt"))
    rep = run_adapt(args.refs, args.text, args.graph, args.out, cfg, holdout)
    print(json.dumps(rep["fewshot"].get("holdout_accuracy", rep["fewshot"]["train_accuracy"])))
    return 0


def _cmd_infer(args):
    cfg = load_config(args.config, seed=args.seed, noise_step=args.noise_step)
    if args.no_tta:
        cfg = cfg.updated(use_tta=False)
    if args.no_diffusion:
        cfg = cfg.updated(use_diffusion=False)
    out = run_infer(args.video, args.refs, args.text, args.clf, args.diffusion, cfg, args.out, debug=args.debug)
    print(f"{out['frames']} frames, t*={out['t_star']}, {len(set(out['labels']))} phases predicted")
    return 0


def _cmd_eval(args):
    pred = json.loads(Path(args.pred).read_text(encoding="utf-8"))
    gt = load_labels(args.gt, int(pred["k"]))
    m = evaluate_prediction(pred, gt, args.setting)
    if args.out:
        write_json(args.out, m)
    print(f"macro F1 {100 * m['macro_f1']:.2f}  accuracy {100 * m['accuracy']:.2f}  "
          f"segments {m['segment_count']}")
    return 0


def _cmd_report(args):
    metrics = [json.loads(Path(p).read_text(encoding="utf-8")) for p in args.metrics]
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else None
    rep = report(metrics, cfg)
    write_json(args.out, rep)
    print(rep["table"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spa", description="Few-shot phase recognition with test-time "
                                "adaptation and task-graph guided diffusion refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-bench", help="write a synthetic embedding benchmark")
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--graph", help="task graph JSON (default: built-in 7-phase branching graph)")
    s.add_argument("--videos", type=int, default=10)
    s.add_argument("--shots", type=int, default=16)
    s.add_argument("--drift", type=float, default=0.4)
    s.add_argument("--noise", type=float, default=0.15)
    s.add_argument("--fewshot-noise", type=float, default=0.1)
    s.add_argument("--modality-gap", type=float, default=1.0, help="text/vision angle in radians")
    s.add_argument("--min-separation", type=float, default=0.3)
    s.add_argument("--max-len", type=int, default=100000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth_bench)

    g = sub.add_parser("graph", help="task graph utilities")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    gv = gsub.add_parser("validate", help="validate a task graph file")
    gv.add_argument("file")
    gv.set_defaults(func=_cmd_graph_validate)

    s = sub.add_parser("train-fewshot", help="train the few-shot classifier")
    s.add_argument("--refs", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lr", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_train_fewshot)

    s = sub.add_parser("train-diffusion", help="train the sequence diffusion model on a task graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--num-sequences", type=int)
    s.add_argument("--train-len", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_train_diffusion)

    s = sub.add_parser("adapt", help="train classifier and diffusion model in one go")
    s.add_argument("--refs", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--graph")
    s.add_argument("--out", required=True)
    s.add_argument("--holdout", nargs="*", help="video headers with sibling .labels.txt files")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_adapt)

    s = sub.add_parser("infer", help="adapt to one video and predict its phases")
    s.add_argument("--video", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--clf", required=True)
    s.add_argument("--diffusion")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-step", type=int, help="force the refinement start step")
    s.add_argument("--no-tta", action="store_true")
    s.add_argument("--no-diffusion", action="store_true")
    s.add_argument("--debug", action="store_true", help="also write the three individual streams")
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("eval", help="score a prediction against ground-truth labels")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--setting", help="label stored with the metrics, used to group rows in reports")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("report", help="aggregate per-video metric files")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; that is invalid input here
        return 1 if exc.code == 2 else (exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ComputeError, SPAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
