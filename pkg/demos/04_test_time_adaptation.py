"""Unsupervised adaptation to one drifted video.

The mutual-information loss couples the reference stream with the
vision-language stream, and the few-shot stream with the reference stream.
"""
import numpy as np

from spa.fewshot import init_classifier, train_fewshot
from spa.metrics import evaluate
from spa.synth_bench import branching_graph, make_fewshot_split, make_synthetic_world, sample_video
from spa.tta import TTAConfig, compute_streams, fuse_streams, init_adapters, tta_adapt

world = make_synthetic_world(k=7, d=64, seed=0, modality_gap=1.0)
rng = np.random.default_rng(3)
refs, labels = make_fewshot_split(world, shots=16, rng=rng)
text = world.text_prototypes
clf = train_fewshot(init_classifier(text), refs.embeddings, labels).classifier
video, truth = sample_video(world, branching_graph(), 100_000, drift=0.4, rng=rng)

for lr in (1e-4, 1e-3, 3e-3):
    res = tta_adapt(video, refs, text, clf, TTAConfig(lr=lr))
    fused = fuse_streams(compute_streams(video, refs, text, clf, res.adapters, 0.07))
    f1 = evaluate(np.argmax(fused, axis=1), truth, 7).macro_f1
    print(f"lr {lr:g}: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}, fused macro F1 {100 * f1:.1f}")

fused = fuse_streams(compute_streams(video, refs, text, clf, init_adapters(64), 0.07))
print(f"no adaptation: fused macro F1 {100 * evaluate(np.argmax(fused, axis=1), truth, 7).macro_f1:.1f}")
