"""Consensus prediction: combine the outputs of all nested levels.

Two combiners over pre-softmax logits: elementwise averaging, and a
learned affine map (no nonlinearity) over the concatenated per-level
outputs. In hierarchical mode the learned head additionally owns an
auxiliary fine-class head on the core level's features, and consumes
three segments: fine(full), fine(core), coarse(core). The combiner is
learned after the nested network, whose weights stay frozen; updates use
plain SGD without momentum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import NestedNetwork, softmax_cross_entropy
from .tensor import DimensionError
from .training import TrainConfig, TrainingDiverged, lr_at

from . import data as data_mod


def consensus_defaults(iterations: int = 50000) -> TrainConfig:
    """Dedicated combiner schedule: lr 0.1 dropped 10x at 20k/30k/40k of
    50k iterations, momentum-free; scale ``iterations`` down for desk runs
    (the drop points scale along)."""
    scale = iterations / 50000
    drops = tuple(int(round(d * scale)) for d in (20000, 30000, 40000))
    return TrainConfig(lr=0.1, lr_drops=drops, lr_factor=0.1, momentum=0.0,
                       nesterov=False, weight_decay=0.0, iterations=iterations)


def consensus_average(level_logits) -> np.ndarray:
    """Elementwise mean of the per-level logits."""
    if len(level_logits) < 2:
        raise DimensionError("averaging needs at least two levels")
    first = level_logits[0]
    for lg in level_logits[1:]:
        if lg.shape != first.shape:
            raise DimensionError(
                f"level output shapes differ: {lg.shape} vs {first.shape}"
            )
    return np.mean(level_logits, axis=0)


@dataclass
class ConsensusHead:
    """Affine combiner over concatenated level outputs.

    ``kind`` is "average" or "learned". The learned variant holds a single
    (sum of segment sizes) x classes weight matrix plus bias; hierarchical
    heads also hold the auxiliary core-level fine head (features -> fine
    classes) whose output is the middle segment.
    """

    kind: str
    segment_sizes: tuple[int, ...]
    classes: int
    w: np.ndarray | None = None
    b: np.ndarray | None = None
    hierarchical: bool = False
    aux_w: np.ndarray | None = None  # core features -> fine classes
    aux_b: np.ndarray | None = None

    def parameter_count(self) -> int:
        if self.kind == "average":
            return 0
        n = self.w.size + self.b.size
        if self.hierarchical:
            n += self.aux_w.size + self.aux_b.size
        return n


def build_consensus(net: NestedNetwork, kind: str, hierarchical: bool = False,
                    seed: int = 0) -> ConsensusHead:
    """Create a combiner for a trained network.

    The learned combiner starts at the averaging solution when every
    segment has the consensus class count (average kind starts identical,
    training can only move away from it on the data); otherwise Xavier.
    """
    if kind not in ("average", "learned"):
        raise ValueError(f"consensus kind must be average or learned, got {kind!r}")
    classes = net.head_classes[-1]
    if hierarchical:
        if net.levels < 2:
            raise ValueError("hierarchical consensus needs at least two levels")
        feature_dim = net.heads[0].spec.fan_in
        segments = (classes, classes, net.head_classes[0])
    else:
        segments = tuple(net.head_classes)
    if kind == "average":
        if len(set(segments)) != 1:
            raise DimensionError(
                f"averaging needs equal class counts per level, got {segments}"
            )
        return ConsensusHead(kind, segments, classes)

    rng = np.random.default_rng(seed)
    dt = net.dtype
    total = sum(segments)
    head = ConsensusHead(kind, segments, classes, hierarchical=hierarchical)
    if all(s == classes for s in segments):
        w = np.zeros((total, classes), dtype=dt)
        for k in range(len(segments)):
            w[k * classes : (k + 1) * classes] = np.eye(classes, dtype=dt) / len(segments)
        head.w = w
    else:
        limit = np.sqrt(6.0 / (total + classes))
        head.w = rng.uniform(-limit, limit, size=(total, classes)).astype(dt)
    head.b = np.zeros(classes, dtype=dt)
    if hierarchical:
        limit = np.sqrt(6.0 / (feature_dim + classes))
        head.aux_w = rng.uniform(-limit, limit, size=(feature_dim, classes)).astype(dt)
        head.aux_b = np.zeros(classes, dtype=dt)
    return head


def collect_segments(net: NestedNetwork, head: ConsensusHead, x):
    """Frozen-backbone forward producing the combiner's input segments
    (eval mode, so no network state changes)."""
    if head.hierarchical:
        full_logits, _ = net.forward(x, net.levels, "eval")
        core_feats = net.features(x, 1, "eval")
        aux_logits = core_feats @ head.aux_w + head.aux_b if head.kind == "learned" else None
        core_logits, _ = net.forward(x, 1, "eval")
        if head.kind == "average":
            return [full_logits, core_logits], None
        return [full_logits, aux_logits, core_logits], core_feats
    logits = [net.forward(x, j, "eval")[0] for j in range(1, net.levels + 1)]
    return logits, None


def consensus_forward(head: ConsensusHead, segments) -> np.ndarray:
    """Combine segments: mean for averaging, affine map for learned."""
    sizes = tuple(s.shape[-1] for s in segments)
    if sizes != head.segment_sizes:
        raise DimensionError(f"segment layout {sizes} does not match head {head.segment_sizes}")
    if head.kind == "average":
        return consensus_average(segments)
    z = np.concatenate(segments, axis=1)
    return z @ head.w + head.b


def consensus_backward(head: ConsensusHead, segments, grad_logits):
    """Gradients of the affine combiner: (grad_w, grad_b, per-segment
    input gradients)."""
    if head.kind != "learned":
        raise ValueError("only the learned combiner has parameters")
    z = np.concatenate(segments, axis=1)
    gw = z.T @ grad_logits
    gb = grad_logits.sum(axis=0)
    gz = grad_logits @ head.w.T
    splits = np.cumsum(head.segment_sizes)[:-1]
    return gw, gb, np.split(gz, splits, axis=1)


def train_consensus(net: NestedNetwork, head: ConsensusHead, ds, config: TrainConfig,
                    *, iterations: int | None = None) -> ConsensusHead:
    """Fit the learned combiner on a frozen network with plain SGD (no
    momentum, per the dedicated schedule). Labels are the consensus task's
    own (fine) labels."""
    if head.kind != "learned":
        return head
    steps = config.iterations if iterations is None else iterations
    labels = ds.labels  # consensus predicts the fine task
    per_epoch = (len(ds) + config.batch_size - 1) // config.batch_size
    it = 0
    while it < steps:
        epoch = it // per_epoch
        for idx in data_mod.batches(ds, config.batch_size, config.seed, epoch):
            if it >= steps:
                break
            x = ds.images[idx]
            segments, core_feats = collect_segments(net, head, x)
            logits = consensus_forward(head, segments)
            loss, g = softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"consensus loss {loss} at iteration {it}")
            gw, gb, gsegs = consensus_backward(head, segments, g)
            lr = lr_at(it, config)
            head.w -= lr * gw
            head.b -= lr * gb
            if head.hierarchical:
                ga = gsegs[1]
                head.aux_w -= lr * (core_feats.T @ ga)
                head.aux_b -= lr * ga.sum(axis=0)
            it += 1
    return head


def evaluate_consensus(net: NestedNetwork, head: ConsensusHead, ds,
                       batch_size: int = 500):
    """Accuracy and mean loss of the combined prediction on the fine task."""
    n = len(ds)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        x = ds.images[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        segments, _ = collect_segments(net, head, x)
        logits = consensus_forward(head, segments)
        ce, _ = softmax_cross_entropy(logits, y)
        loss_sum += ce * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / n, loss_sum / n
