"""Baseline, +TTA and full pipeline on the synthetic benchmark.

Uses configs/bench.json (diffusion training takes about four minutes).
Pass a seed count as the first argument to change the number of benches.
"""
import sys
from pathlib import Path

import numpy as np

from spa.metrics import evaluate
from spa.pipeline import ABLATION_SETTINGS, fit_classifier, fit_diffusion, infer_video, load_config, make_bench
from spa.synth_bench import branching_graph

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "bench.json")
g = branching_graph()
model = fit_diffusion(g, cfg).model

scores = {name: [] for name in ABLATION_SETTINGS}
for seed in range(seeds):
    bench = make_bench(g, seed=seed)
    clf = fit_classifier(bench.refs, bench.world.text_prototypes, cfg).classifier
    for v, lab in bench.videos:
        for name, flags in ABLATION_SETTINGS.items():
            out = infer_video(v, bench.refs, bench.world.text_prototypes, clf, model, cfg.updated(**flags))
            scores[name].append(evaluate(out["labels"], lab, 7).macro_f1)
for name, s in scores.items():
    print(f"{name:>9}: macro F1 {100 * np.mean(s):.2f} over {len(s)} videos")
