"""Joint nested training: SGD with Nesterov momentum, the multi-level
objective (mean of per-level cross-entropies plus full-level weight decay),
masked-gradient enforcement, the iterative prune-and-continue driver, and
evaluation.

The loop is single-threaded and deterministic: parameters update in sorted
name order, levels accumulate core-to-full, and batch order is a pure
function of (seed, epoch).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import nesting
from .nesting import ThresholdSchedule
from .nn import NestedNetwork, softmax_cross_entropy
from .tensor import NonFiniteError


class TrainingDiverged(ArithmeticError):
    """Loss or gradient became non-finite."""


class PruneError(RuntimeError):
    """The pruning driver cannot continue."""


@dataclass
class TrainConfig:
    """Optimizer and schedule hyperparameters (defaults follow the standard
    recipe: momentum 0.9 with Nesterov, weight decay 2e-4, lr 0.1 dropped
    10x at 40k/60k of 80k iterations, batch 128)."""

    lr: float = 0.1
    lr_drops: tuple[int, ...] = (40000, 60000)
    lr_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0002
    batch_size: int = 128
    iterations: int = 80000
    level_mode: str = "simultaneous"
    seed: int = 0
    eval_interval: int = 0  # 0 = log only at the end

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if list(self.lr_drops) != sorted(self.lr_drops):
            raise ValueError(f"lr drops must ascend, got {self.lr_drops}")
        if self.level_mode not in ("simultaneous", "sequential"):
            raise ValueError(f"level_mode must be simultaneous or sequential, got {self.level_mode}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


@dataclass
class PruneDriverConfig:
    """One training phase per threshold (densest first), then a joint
    fine-tune over all recorded levels."""

    schedule: ThresholdSchedule
    phase_iterations: int
    finetune_iterations: int | None = None  # default: one phase length

    def __post_init__(self):
        if self.phase_iterations < 1:
            raise ValueError("phase_iterations must be >= 1")


def init_optimizer(net: NestedNetwork) -> OptimizerState:
    return OptimizerState(
        velocity={name: np.zeros_like(info.value) for name, info in net.params.items()}
    )


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Piecewise-constant learning rate."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    lr = config.lr
    for drop in config.lr_drops:
        if iteration >= drop:
            lr *= config.lr_factor
    return lr


def _body_weight_names(net: NestedNetwork) -> list[str]:
    return [
        name
        for name, info in sorted(net.params.items())
        if info.kind == "shared" and name.endswith(".w")
    ]


def _full_projected(net: NestedNetwork, name: str) -> np.ndarray:
    w = net.params[name].value
    if net.hierarchy is not None and name in net.hierarchy.masks:
        return w * net.hierarchy.masks[name][-1]
    return w


def regularizer(net: NestedNetwork, config: TrainConfig) -> float:
    """0.5 * weight_decay * squared-L2 norm of the full-level projected
    body weights (biases, batch-norm, and heads are not decayed)."""
    if config.weight_decay == 0:
        return 0.0
    total = 0.0
    for name in _body_weight_names(net):
        w = _full_projected(net, name)
        total += float((w.astype(np.float64) ** 2).sum())
    return 0.5 * config.weight_decay * total


def _add_decay(net: NestedNetwork, grads, config: TrainConfig, masks=None) -> float:
    """Accumulate the decay gradient (on the given or full-level support)
    and return the decay loss term."""
    if config.weight_decay == 0:
        return 0.0
    total = 0.0
    for name in _body_weight_names(net):
        if masks is not None and name in masks:
            w = net.params[name].value * masks[name]
        else:
            w = _full_projected(net, name)
        grads[name] += config.weight_decay * w
        total += float((w.astype(np.float64) ** 2).sum())
    return 0.5 * config.weight_decay * total


def nested_loss(level_logits, level_labels, net: NestedNetwork, config: TrainConfig):
    """Joint objective: mean of per-level cross-entropies plus full-level
    weight decay. Returns the scalar and per-level logit gradients."""
    ln = net.levels
    if len(level_logits) != ln or len(level_labels) != ln:
        raise ValueError(
            f"expected {ln} logits/label sets, got {len(level_logits)}/{len(level_labels)}"
        )
    ces, grads = [], []
    for logits, labels in zip(level_logits, level_labels):
        ce, g = softmax_cross_entropy(logits, labels)
        ces.append(ce)
        grads.append(g / ln)
    return float(np.mean(ces)) + regularizer(net, config), grads


def accumulate_nested_gradients(net: NestedNetwork, x, level_labels, config: TrainConfig):
    """One simultaneous-mode gradient accumulation: forward/backward every
    level on the same batch, average parameter gradients over levels, add
    the full-level decay gradient.

    Returns (loss, grads, stats) with per-level (cross-entropy, correct
    count) pairs in stats."""
    ln = net.levels
    if len(level_labels) != ln:
        raise ValueError(f"expected {ln} label sets, got {len(level_labels)}")
    total = net.zero_grads()
    stats = []
    for j in range(1, ln + 1):
        logits, trace = net.forward(x, j, "train")
        ce, g = softmax_cross_entropy(logits, level_labels[j - 1])
        level_grads = net.backward(trace, g)
        for name, arr in level_grads.items():
            total[name] += arr
        stats.append((ce, int((np.argmax(logits, 1) == level_labels[j - 1]).sum())))
    inv = 1.0 / ln
    for arr in total.values():
        arr *= inv
    reg = _add_decay(net, total, config)
    return float(np.mean([s[0] for s in stats])) + reg, total, stats


def _level_param_names(net: NestedNetwork, level: int) -> list[str]:
    """Parameters involved at one level: shared tensors plus the level's
    own head and batch-norm scale/shift."""
    return [
        name
        for name, info in net.params.items()
        if info.kind == "shared" or info.level == level
    ]


def sgd_step(net: NestedNetwork, grads, state: OptimizerState, config: TrainConfig,
             lr: float, support=None) -> None:
    """v <- momentum*v - lr*g, then w <- w + momentum*v - lr*g (Nesterov)
    or w <- w + v (plain), applied to every parameter named in ``grads``.
    Positions outside ``support`` are re-projected to exactly 0 afterwards,
    velocity included."""
    mu = config.momentum
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                f"non-finite gradient in {name} at iteration {state.iteration}"
            )
        w = net.params[name].value
        v = state.velocity[name]
        v *= mu
        v -= lr * g
        if config.nesterov:
            w += mu * v - lr * g
        else:
            w += v
        if support is not None and name in support:
            outside = ~support[name]
            w[outside] = 0.0
            v[outside] = 0.0
    state.iteration += 1


def _train_support(net: NestedNetwork, level: int | None):
    """Re-projection masks: the trained level's support in weight-pruning
    mode (full level for joint training), nothing otherwise."""
    if net.mode != "weight_prune" or net.hierarchy is None:
        return None
    idx = (level if level is not None else net.levels) - 1
    return {name: masks[idx] for name, masks in net.hierarchy.masks.items()}


def train_step(net: NestedNetwork, x, level_labels, config: TrainConfig,
               state: OptimizerState, level: int | None = None):
    """One optimizer iteration.

    ``level=None`` trains the joint objective (simultaneous gradient
    averaging or a sequential core-to-full pass, per config); ``level=j``
    trains that single level, which is what pruning phases do.
    Returns (loss, {level: (cross-entropy, correct count)}).
    """
    lr = lr_at(state.iteration, config)
    if level is not None:
        support = _train_support(net, level)
        logits, trace = net.forward(x, level, "train")
        ce, g = softmax_cross_entropy(logits, level_labels[level - 1])
        grads = net.backward(trace, g)
        reg = _add_decay(net, grads, config, masks=support)
        active = {name: grads[name] for name in _level_param_names(net, level)}
        sgd_step(net, active, state, config, lr, support)
        correct = int((np.argmax(logits, 1) == level_labels[level - 1]).sum())
        return ce + reg, {level: (ce, correct)}

    support = _train_support(net, None)
    if config.level_mode == "simultaneous":
        loss, grads, stats = accumulate_nested_gradients(net, x, level_labels, config)
        sgd_step(net, grads, state, config, lr, support)
        return loss, {j + 1: s for j, s in enumerate(stats)}
    # sequential: one optimizer step per level, core to full; decay rides
    # on the full-level step
    ces = {}
    for j in range(1, net.levels + 1):
        logits, trace = net.forward(x, j, "train")
        ce, g = softmax_cross_entropy(logits, level_labels[j - 1])
        grads = net.backward(trace, g)
        reg = _add_decay(net, grads, config) if j == net.levels else 0.0
        active = {name: grads[name] for name in _level_param_names(net, j)}
        sgd_step(net, active, state, config, lr, support)
        ces[j] = (ce + reg, int((np.argmax(logits, 1) == level_labels[j - 1]).sum()))
    return float(np.mean([v[0] for v in ces.values()])), ces


def level_density(net: NestedNetwork, level: int) -> float:
    if net.mode == "weight_prune":
        return nesting.density(net.hierarchy, level)
    return nesting.density(net.schedule, level)


def evaluate(net: NestedNetwork, ds, level: int, batch_size: int = 500, labels=None):
    """Deterministic accuracy and mean loss of a level's head on a dataset."""
    n = len(ds)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if labels is None:
        labels = ds.labels_for_levels(net.levels)[level - 1]
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        x = ds.images[start : start + batch_size]
        y = labels[start : start + batch_size]
        logits, _ = net.forward(x, level, "eval")
        ce, _ = softmax_cross_entropy(logits, y)
        loss_sum += ce * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / n, loss_sum / n


def write_metrics(log, iteration: int, level: int, split: str, loss: float,
                  accuracy: float, dens: float, lr: float) -> None:
    """One tab-separated metrics line: iter, level, split, loss, accuracy,
    density, lr."""
    if log is None:
        return
    log.write(
        f"{iteration}\t{level}\t{split}\t{loss:.6f}\t{accuracy:.6f}\t{dens:.6f}\t{lr:.6g}\n"
    )
    log.flush()


def train(net: NestedNetwork, ds, config: TrainConfig, *, test_ds=None, log=None,
          level: int | None = None, iterations: int | None = None,
          state: OptimizerState | None = None, echo: bool = False) -> OptimizerState:
    """Run the training loop for ``iterations`` steps (continuing ``state``
    if given). Non-finite losses abort with TrainingDiverged."""
    if state is None:
        state = init_optimizer(net)
    steps = config.iterations if iterations is None else iterations
    labels = ds.labels_for_levels(net.levels)
    per_epoch = (len(ds) + config.batch_size - 1) // config.batch_size
    levels = [level] if level is not None else list(range(1, net.levels + 1))

    window = {lv: [0.0, 0, 0] for lv in levels}  # loss sum, correct, count

    def flush(iteration):
        lr = lr_at(iteration, config)
        for lv in levels:
            loss_sum, correct, count = window[lv]
            if count:
                write_metrics(log, iteration, lv, "train", loss_sum / count,
                              correct / count, level_density(net, lv), lr)
            window[lv] = [0.0, 0, 0]
            if test_ds is not None:
                acc, loss = evaluate(net, test_ds, lv)
                write_metrics(log, iteration, lv, "test", loss, acc,
                              level_density(net, lv), lr)
                if echo:
                    print(f"iter {iteration} level {lv} test acc {acc:.4f} "
                          f"loss {loss:.4f}", file=sys.stderr)

    done = 0
    while done < steps:
        epoch = state.iteration // per_epoch
        offset = state.iteration % per_epoch
        for b, idx in enumerate(data_mod.batches(ds, config.batch_size, config.seed, epoch)):
            if b < offset:
                continue
            if done >= steps:
                break
            x = ds.images[idx]
            batch_labels = [lab[idx] for lab in labels]
            try:
                loss, stats = train_step(net, x, batch_labels, config, state, level=level)
            except NonFiniteError as e:
                raise TrainingDiverged(f"{e} at iteration {state.iteration}") from e
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss {loss} at iteration {state.iteration}")
            done += 1
            for lv, (ce, correct) in stats.items():
                window[lv][0] += ce * len(idx)
                window[lv][1] += correct
                window[lv][2] += len(idx)
            if config.eval_interval and state.iteration % config.eval_interval == 0:
                flush(state.iteration)
    flush(state.iteration)
    return state


def iterative_prune(net: NestedNetwork, ds, driver: PruneDriverConfig, config: TrainConfig,
                    *, test_ds=None, log=None, state: OptimizerState | None = None,
                    echo: bool = False):
    """Carve the mask hierarchy by phases and fine-tune it jointly.

    Phase k trains under the current mask, then records the next-threshold
    mask intersected with the current one (guaranteeing nesting) at the
    next-lower level. After the core mask is fixed, a joint fine-tune over
    all recorded levels restores the denser ones.
    Returns (hierarchy, optimizer state).
    """
    if net.mode != "weight_prune":
        raise PruneError("iterative pruning needs a weight-pruning network")
    schedule = driver.schedule
    levels = net.levels
    if schedule.levels != levels:
        raise PruneError(
            f"{schedule.levels} thresholds for {levels} levels; need one per level"
        )
    if state is None:
        state = init_optimizer(net)
    names = net.shared_weight_names()
    current = {name: net.hierarchy.masks[name][-1].copy() for name in names}

    for k, threshold in enumerate(schedule.thresholds):
        target = levels - k  # level that this phase's mask will define
        train(net, ds, config, test_ds=test_ds, log=log, level=target,
              iterations=driver.phase_iterations, state=state, echo=echo)
        new = {}
        for name in names:
            w = net.params[name].value
            m = nesting.magnitude_mask(w, threshold, schedule.slope, schedule.cutoff)
            m &= current[name]
            if not m.any():
                raise PruneError(
                    f"threshold too aggressive: {threshold} empties {name} in phase {k + 1}"
                )
            new[name] = m
        for name in names:
            for lv in range(target):  # this level and every lower one
                net.hierarchy.masks[name][lv] = new[name]
        net.set_hierarchy(net.hierarchy)
        current = new

    violation = nesting.validate_nesting(net.hierarchy)
    if violation is not None:
        raise PruneError(f"pruning produced a broken hierarchy: {violation}")
    finetune = driver.finetune_iterations
    if finetune is None:
        finetune = driver.phase_iterations
    if finetune:
        train(net, ds, config, test_ds=test_ds, log=log, iterations=finetune,
              state=state, echo=echo)
    return net.hierarchy, state
