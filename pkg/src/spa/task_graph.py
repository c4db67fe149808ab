"""Phase-transition graphs and the synthetic phase sequences sampled from them.

A graph lists phases with duration bounds ``[min_duration, max_duration]``
(in frames) and directed edges of permissible transitions.  Sampling uses a
segment model: on entering a phase, draw its duration uniformly from the
bounds, emit it for that many frames, then move to a successor chosen
uniformly.  Terminal phases end the sequence.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DeadEndPhase,
    DurationOrderViolation,
    GraphError,
    MaxLenTooSmall,
    NoStartPhase,
    OutOfRangeLabel,
    ParseError,
    UnknownNodeInEdge,
    UnreachableTerminal,
)

TRANSITION_MODELS = ("segment", "per_step")


@dataclass(frozen=True)
class PhaseNode:
    id: int
    name: str
    min_duration: int
    max_duration: int
    start: bool = False
    terminal: bool = False


@dataclass(frozen=True)
class TaskGraph:
    phases: tuple
    edges: frozenset
    time_unit: str = "frames"

    @property
    def k(self) -> int:
        return len(self.phases)

    @property
    def start_phases(self) -> list:
        return [p.id for p in self.phases if p.start]

    @cached_property
    def _successors(self) -> tuple:
        return tuple(sorted(j for (a, j) in self.edges if a == i and j != i) for i in range(self.k))

    def successors(self, i: int) -> list:
        """Distinct successors of phase ``i``, self-loops excluded, in id order."""
        return self._successors[i]

    def to_dict(self) -> dict:
        return {
            "phases": [
                {"id": p.id, "name": p.name, "min_duration": p.min_duration,
                 "max_duration": p.max_duration, "start": p.start, "terminal": p.terminal}
                for p in self.phases
            ],
            "edges": [list(e) for e in sorted(self.edges)],
            "time_unit": self.time_unit,
        }


def run_lengths(labels) -> list:
    """Maximal constant runs as ``(phase, start, length)`` triples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cut = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], cut))
    ends = np.concatenate((cut, [labels.size]))
    return [(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def segment_count(labels) -> int:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0
    return int(1 + np.count_nonzero(labels[1:] != labels[:-1]))


@dataclass(frozen=True)
class PhaseSequence:
    labels: np.ndarray

    @property
    def segments(self) -> list:
        return run_lengths(self.labels)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_segments(cls, segments) -> "PhaseSequence":
        parts = [np.full(length, phase, dtype=np.int64) for phase, _, length in segments]
        return cls(np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))


def _as_int(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    return value


def parse_task_graph(doc) -> TaskGraph:
    """Build and validate a graph from a JSON string or an already-decoded dict."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"task graph is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("phases"), list):
        raise ParseError("task graph must be an object with a 'phases' list")

    raw_phases = sorted(doc["phases"], key=lambda p: p.get("id", -1) if isinstance(p, dict) else -1)
    phases = []
    for pos, p in enumerate(raw_phases):
        if not isinstance(p, dict):
            raise ParseError("each phase must be an object")
        pid = _as_int(p.get("id"), "phase id")
        if pid != pos:
            raise ParseError(f"phase ids must be exactly 0..{len(raw_phases) - 1}; missing or duplicate near {pid}")
        lo = _as_int(p.get("min_duration"), f"phase {pid} min_duration")
        hi = _as_int(p.get("max_duration"), f"phase {pid} max_duration")
        if lo < 1:
            raise DurationOrderViolation(f"phase {pid}: min_duration {lo} must be >= 1")
        if lo > hi:
            raise DurationOrderViolation(f"phase {pid}: min_duration {lo} > max_duration {hi}")
        phases.append(PhaseNode(pid, str(p.get("name", f"phase{pid}")), lo, hi,
                                bool(p.get("start", False)), bool(p.get("terminal", False))))
    if not phases:
        raise ParseError("task graph has no phases")

    k = len(phases)
    edges = set()
    for e in doc.get("edges", []):
        if not (isinstance(e, (list, tuple)) and len(e) == 2):
            raise ParseError(f"edge {e!r} must be a pair [from, to]")
        a, b = _as_int(e[0], "edge endpoint"), _as_int(e[1], "edge endpoint")
        if not (0 <= a < k and 0 <= b < k):
            raise UnknownNodeInEdge(f"edge [{a}, {b}] references a phase outside 0..{k - 1}")
        edges.add((a, b))

    g = TaskGraph(tuple(phases), frozenset(edges), str(doc.get("time_unit", "frames")))
    _validate_structure(g)
    return g


def _validate_structure(g: TaskGraph) -> None:
    if not g.start_phases:
        raise NoStartPhase("no phase is flagged as a start phase")
    for p in g.phases:
        if not p.terminal and not g.successors(p.id):
            raise DeadEndPhase(f"phase {p.id} ({p.name}) is not terminal and has no outgoing edge")
    for s in g.start_phases:
        seen, queue = {s}, deque([s])
        found = False
        while queue:
            i = queue.popleft()
            if g.phases[i].terminal:
                found = True
                break
            for j in g.successors(i):
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        if not found:
            raise UnreachableTerminal(f"no terminal phase is reachable from start phase {s}")


def load_task_graph(path) -> TaskGraph:
    return parse_task_graph(Path(path).read_text(encoding="utf-8"))


def _check_max_len(g: TaskGraph, max_len: int, transition_model: str) -> None:
    if transition_model not in TRANSITION_MODELS:
        raise GraphError(f"unknown transition model {transition_model!r}")
    shortest = min(g.phases[s].min_duration for s in g.start_phases)
    if max_len < shortest:
        raise MaxLenTooSmall(f"max_len {max_len} cannot fit a minimal start segment of {shortest} frames")


def synthesize_sequence(g: TaskGraph, rng: np.random.Generator, max_len: int,
                        transition_model: str = "segment") -> PhaseSequence:
    _check_max_len(g, max_len, transition_model)
    if transition_model == "per_step":
        return _synthesize_per_step(g, rng, max_len)
    starts = g.start_phases
    phase = starts[rng.integers(len(starts))]
    segments, total = [], 0
    while total < max_len:
        node = g.phases[phase]
        d = int(rng.integers(node.min_duration, node.max_duration + 1))
        d = min(d, max_len - total)
        segments.append((phase, total, d))
        total += d
        if node.terminal:
            break
        succ = g.successors(phase)
        phase = succ[rng.integers(len(succ))]
    return PhaseSequence.from_segments(segments)


def _synthesize_per_step(g: TaskGraph, rng: np.random.Generator, max_len: int) -> PhaseSequence:
    # Per-frame Markov reading: stay is forced below min_duration and
    # forbidden at max_duration; in between, stay and every successor (or
    # stopping, for terminal phases) are equally likely.
    starts = g.start_phases
    phase = starts[rng.integers(len(starts))]
    out, elapsed = [], 0
    while len(out) < max_len:
        out.append(phase)
        elapsed += 1
        node = g.phases[phase]
        if elapsed < node.min_duration:
            continue
        moves = [("stop", None)] if node.terminal else [("go", j) for j in g.successors(phase)]
        if elapsed < node.max_duration:
            moves = [("stay", None)] + moves
        kind, nxt = moves[rng.integers(len(moves))]
        if kind == "stop":
            break
        if kind == "go":
            phase, elapsed = nxt, 0
    return PhaseSequence(np.asarray(out, dtype=np.int64))


def synthesize_dataset(g: TaskGraph, n: int, rng: np.random.Generator, max_len: int,
                       transition_model: str = "segment") -> list:
    _check_max_len(g, max_len, transition_model)
    return [synthesize_sequence(g, rng, max_len, transition_model) for _ in range(n)]


def is_valid_sequence(g: TaskGraph, s, allow_truncated_tail: bool = False):
    """Check a sequence against the graph; returns ``(valid, violations)``.

    With ``allow_truncated_tail`` the final segment may be shorter than its
    phase's minimum duration (a sequence cut off by a length cap).
    """
    labels = s.labels if isinstance(s, PhaseSequence) else np.asarray(s)
    if labels.size and (labels.min() < 0 or labels.max() >= g.k):
        raise OutOfRangeLabel(f"labels must lie in [0, {g.k})")
    segs = run_lengths(labels)
    violations = []
    if not segs:
        return False, ["empty sequence"]
    names = [p.name for p in g.phases]
    first = segs[0][0]
    if not g.phases[first].start:
        violations.append(f"sequence starts in phase {names[first]}, which is not a start phase")
    for (a, _, _), (b, _, _) in zip(segs, segs[1:]):
        if (a, b) not in g.edges:
            violations.append(f"{names[a]}→{names[b]} not an edge")
    for idx, (phase, start, length) in enumerate(segs):
        node = g.phases[phase]
        is_tail = idx == len(segs) - 1
        if length < node.min_duration and not (is_tail and allow_truncated_tail):
            violations.append(
                f"phase {names[phase]} duration {length} < {node.min_duration} (frame {start})")
        if length > node.max_duration:
            violations.append(
                f"phase {names[phase]} duration {length} > {node.max_duration} (frame {start})")
    return not violations, violations
