"""Sampling phase sequences from a task graph and checking them."""
from collections import Counter

import numpy as np

from spa.synth_bench import branching_graph
from spa.task_graph import is_valid_sequence, synthesize_dataset

g = branching_graph()
print("phases:", ", ".join(f"{p.id}:{p.name}[{p.min_duration},{p.max_duration}]" for p in g.phases))
seqs = synthesize_dataset(g, 2000, np.random.default_rng(0), 100_000)
paths = Counter(tuple(ph for ph, _, _ in s.segments) for s in seqs)
print(f"{len(seqs)} sequences, {sum(is_valid_sequence(g, s)[0] for s in seqs)} valid")
for path, n in paths.most_common():
    print(f"  {' -> '.join(map(str, path)):<26} {n / len(seqs):.3f}")
lengths = [len(s.labels) for s in seqs]
print(f"length range {min(lengths)}..{max(lengths)}, mean {np.mean(lengths):.1f}")

bad = np.array([0] * 25 + [2] * 20 + [4] * 50 + [6] * 30)
print("skipping a phase:", is_valid_sequence(g, bad))
