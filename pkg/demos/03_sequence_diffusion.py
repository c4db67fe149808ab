"""Training the sequence denoiser and using it to clean a corrupted labelling.

A small model trains in about a minute on one core.
"""
import numpy as np

from spa import diffusion as dm
from spa.synth_bench import chain_graph
from spa.task_graph import segment_count, synthesize_dataset, synthesize_sequence

g = chain_graph(7, 20, 40)
seqs = synthesize_dataset(g, 1000, np.random.default_rng(0), 100_000)
res = dm.train_diffusion(seqs, 7, dm.DiffusionTrainConfig(epochs=8, batch_size=32, lr=1e-3, train_len=128))
print("probe loss per epoch:", " ".join(f"{x:.4f}" for x in res.epoch_losses))

rng = np.random.default_rng(1)
truth = synthesize_sequence(g, rng, 100_000).labels
noisy = truth.copy()
idx = rng.choice(len(truth), len(truth) // 5, replace=False)
noisy[idx] = (truth[idx] + rng.integers(1, 7, len(idx))) % 7

for t_star in (5, 20, 50):
    clean = dm.decode_phases(dm.refine_sequence(res.model, np.eye(7)[noisy], t_star)).labels
    print(f"t*={t_star:>3}: accuracy {100 * np.mean(noisy == truth):.1f}% -> {100 * np.mean(clean == truth):.1f}%, "
          f"segments {segment_count(noisy)} -> {segment_count(clean)} (true {segment_count(truth)})")

p = np.full((len(truth), 7), 1 / 7)
print("estimated t* for uniform predictions:", dm.estimate_noise_step(p, res.model.schedule))
