"""Nested sparsity machinery.

Two ways of carving sub-networks out of one parameter set:

* magnitude masks: a differentiable step surrogate turns weight magnitudes
  above a threshold into an (effectively binary) mask; ascending thresholds
  give a hierarchy of nested supports, core (sparsest) first;
* structured schedules: each level uses the leading block of input/output
  channels per layer (channel scheduling), the first blocks of each
  residual stage (layer scheduling), or both combined.

Level indices are 1-based in the public API: level 1 is the core,
level ``levels`` the full network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import HeadSpec, LayerSpec


class NestingError(ValueError):
    """Invalid schedule, mask, or level request."""


def approx_step(x, slope: float):
    """Smooth surrogate of the unit step: tanh(slope * max(x, 0)).

    Exactly 0 for x <= 0; saturates to 1 within ~1e-4 of the origin at the
    default slope of 1e5, which is what lets the soft mask stand in for a
    hard one.
    """
    if slope <= 0:
        raise NestingError(f"slope must be positive, got {slope}")
    return np.tanh(slope * np.maximum(x, 0))


def compute_soft_mask(w: np.ndarray, threshold: float, slope: float = 1e5) -> np.ndarray:
    """Soft pruning mask: approx_step(|w| - threshold)."""
    if threshold < 0:
        raise NestingError(f"threshold must be non-negative, got {threshold}")
    return approx_step(np.abs(w) - threshold, slope)


def binarize(soft: np.ndarray, cutoff: float = 0.5) -> np.ndarray:
    """Threshold a soft mask into a boolean mask (bit set iff value > cutoff)."""
    if not 0 < cutoff < 1:
        raise NestingError(f"cutoff must lie in (0, 1), got {cutoff}")
    return np.asarray(soft) > cutoff


def magnitude_mask(w: np.ndarray, threshold: float, slope: float = 1e5, cutoff: float = 0.5) -> np.ndarray:
    """Binary mask of weights whose magnitude clears the threshold.

    Composition of the soft mask and the cutoff; with the default slope the
    admitted margin is |w| - threshold > atanh(cutoff)/slope ~ 5.5e-6.
    """
    return binarize(compute_soft_mask(w, threshold, slope), cutoff)


def project(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero all entries outside the mask support (elementwise product)."""
    if w.shape != mask.shape:
        raise NestingError(f"mask shape {mask.shape} does not match weight shape {w.shape}")
    return w * np.asarray(mask, dtype=w.dtype)


@dataclass(frozen=True)
class NestingViolation:
    """First witness of a broken subset chain."""

    name: str
    level_low: int
    level_high: int
    index: int

    def __str__(self):
        return (
            f"mask {self.name or '<anonymous>'}: level {self.level_low} has an active "
            f"entry at flat index {self.index} that level {self.level_high} lacks"
        )


def validate_nesting(hierarchy) -> NestingViolation | None:
    """Check that every mask support is contained in all higher levels.

    Accepts a MaskHierarchy or a plain sequence of same-shaped mask arrays
    ordered core first. Returns None when nested, else the first violation.
    """
    if isinstance(hierarchy, MaskHierarchy):
        named = hierarchy.masks.items()
    else:
        named = [("", list(hierarchy))]
    for name, masks in named:
        for j in range(len(masks) - 1):
            low = np.asarray(masks[j], dtype=bool).reshape(-1)
            high = np.asarray(masks[j + 1], dtype=bool).reshape(-1)
            escaped = low & ~high
            if escaped.any():
                idx = int(np.argmax(escaped))
                return NestingViolation(name, j + 1, j + 2, idx)
    return None


@dataclass(frozen=True)
class ThresholdSchedule:
    """Ascending pruning thresholds (densest level first) plus the step
    surrogate parameters."""

    thresholds: tuple[float, ...]
    slope: float = 1e5
    cutoff: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.thresholds:
            raise NestingError("at least one threshold required")
        if any(t < 0 for t in self.thresholds):
            raise NestingError("thresholds must be non-negative")
        if list(self.thresholds) != sorted(self.thresholds):
            raise NestingError(f"thresholds must be non-decreasing, got {self.thresholds}")
        if self.slope <= 0:
            raise NestingError("slope must be positive")
        if not 0 < self.cutoff < 1:
            raise NestingError("cutoff must lie in (0, 1)")

    @property
    def levels(self) -> int:
        return len(self.thresholds)


@dataclass
class MaskHierarchy:
    """Per-parameter nested masks, core level first.

    ``exempt_params`` counts parameters of nesting-exempt layers (always
    active at every level); per-level batch-norm state and heads are owned
    by their level and are not part of the hierarchy.
    """

    levels: int
    masks: dict[str, list[np.ndarray]] = field(default_factory=dict)
    exempt_params: int = 0

    def add(self, name: str, level_masks: list[np.ndarray]) -> None:
        if len(level_masks) != self.levels:
            raise NestingError(
                f"{name}: expected {self.levels} masks, got {len(level_masks)}"
            )
        self.masks[name] = [np.asarray(m, dtype=bool) for m in level_masks]

    def mask(self, name: str, level: int) -> np.ndarray:
        return self.masks[name][_level_index(level, self.levels)]

    def active_params(self, level: int) -> int:
        i = _level_index(level, self.levels)
        return self.exempt_params + sum(int(m[i].sum()) for m in self.masks.values())


def _level_index(level: int, levels: int) -> int:
    if not 1 <= level <= levels:
        raise NestingError(f"level {level} out of range [1, {levels}]")
    return level - 1


@dataclass(frozen=True)
class ChannelCounts:
    """Active input/output channel counts per level for one body layer."""

    ins: tuple[int, ...]
    outs: tuple[int, ...]


@dataclass(frozen=True)
class LevelSchedule:
    """Structured nesting plan: per-layer channel counts, per-stage block
    counts, and derived per-level parameter counts."""

    levels: int
    fractions: tuple[float, ...]
    channel_counts: tuple  # ChannelCounts | None, aligned with the body specs
    head_ins: tuple[int, ...]
    head_classes: tuple[int, ...]
    blocks: tuple  # blocks[level-1][stage] = active residual blocks; () when no stages
    param_counts: tuple[int, ...]

    def block_active(self, level: int, stage: int, position: int) -> bool:
        i = _level_index(level, self.levels)
        if not self.blocks or not self.blocks[i]:
            return True
        return position < self.blocks[i][stage]


def _scaled_width(width: int, fraction: float) -> int:
    c = int(round(fraction * width))
    if c < 1:
        raise NestingError(f"fraction {fraction} yields zero width on a {width}-wide layer")
    return min(c, width)


def _stage_sizes(body: list[LayerSpec]) -> list[int]:
    sizes: dict[int, int] = {}
    for spec in body:
        if spec.kind == "residual_block":
            sizes[spec.stage] = sizes.get(spec.stage, 0) + 1
    return [sizes[s] for s in sorted(sizes)]


def _walk(body, head: HeadSpec, fractions, blocks) -> LevelSchedule:
    """Propagate per-level widths through the body and count parameters.

    The data-side input of the first parameterized layer is never scheduled;
    exempt layers keep full width on their output side.
    """
    levels = len(fractions)
    counts: list[ChannelCounts | None] = []
    cur: list[int] | None = None
    stage_pos: dict[int, int] = {}
    positions: list[int] = []  # per body index, -1 for non-blocks

    for spec in body:
        if spec.kind in ("dense", "conv"):
            ins = tuple(cur) if cur is not None else (spec.fan_in,) * levels
            if spec.exempt:
                outs = (spec.fan_out,) * levels
            else:
                outs = tuple(_scaled_width(spec.fan_out, f) for f in fractions)
            counts.append(ChannelCounts(ins, outs))
            positions.append(-1)
            cur = list(outs)
        elif spec.kind == "residual_block":
            if cur is None:
                raise NestingError("residual block cannot be the first layer")
            pos = stage_pos.get(spec.stage, 0)
            stage_pos[spec.stage] = pos + 1
            ins = tuple(cur)
            outs = tuple(_scaled_width(spec.fan_out, f) for f in fractions)
            for lv in range(levels):
                skipped = blocks and pos >= blocks[lv][spec.stage]
                if skipped and ins[lv] != outs[lv]:
                    raise NestingError(
                        f"stage {spec.stage} block {pos} cannot be skipped at level "
                        f"{lv + 1}: widths change {ins[lv]} -> {outs[lv]}"
                    )
            counts.append(ChannelCounts(ins, outs))
            positions.append(pos)
            cur = list(outs)
        elif spec.kind == "batchnorm":
            width = tuple(cur) if cur is not None else (spec.fan_in,) * levels
            counts.append(ChannelCounts(width, width))
            positions.append(-1)
        else:
            counts.append(None)
            positions.append(-1)

    if cur is None:
        raise NestingError("architecture has no parameterized layers")
    head_ins = tuple(cur)
    classes = head.classes if len(head.classes) == levels else (head.classes[-1],) * levels
    if len(head.classes) not in (1, levels):
        raise NestingError(
            f"{len(head.classes)} head class counts for {levels} levels"
        )

    param_counts = []
    for lv in range(levels):
        total = 0
        for spec, cc, pos in zip(body, counts, positions):
            if cc is None:
                continue
            ci, co = cc.ins[lv], cc.outs[lv]
            if spec.kind == "dense":
                total += ci * co + (co if spec.bias else 0)
            elif spec.kind == "conv":
                total += spec.kh * spec.kw * ci * co + (co if spec.bias else 0)
            elif spec.kind == "batchnorm":
                total += 2 * co
            elif spec.kind == "residual_block":
                if blocks and pos >= blocks[lv][spec.stage]:
                    continue
                total += 2 * ci + 9 * ci * co  # bn1 + conv1 (3x3)
                total += 2 * co + 9 * co * co  # bn2 + conv2 (3x3)
                if spec.fan_in != spec.fan_out or spec.stride != 1:
                    total += ci * co  # 1x1 projection
        total += head_ins[lv] * classes[lv] + classes[lv]
        param_counts.append(total)

    return LevelSchedule(
        levels=levels,
        fractions=tuple(float(f) for f in fractions),
        channel_counts=tuple(counts),
        head_ins=head_ins,
        head_classes=classes,
        blocks=tuple(tuple(b) for b in blocks) if blocks else (),
        param_counts=tuple(param_counts),
    )


def build_channel_schedule(body: list[LayerSpec], head: HeadSpec, fractions) -> LevelSchedule:
    """Channel scheduling: level k uses the leading ``fractions[k]`` share of
    input and output channels on every non-exempt layer."""
    fractions = tuple(float(f) for f in fractions)
    if not fractions:
        raise NestingError("at least one fraction required")
    if list(fractions) != sorted(fractions):
        raise NestingError(f"fractions must be ascending, got {fractions}")
    if fractions[-1] != 1.0:
        raise NestingError(f"last fraction must be 1, got {fractions[-1]}")
    if fractions[0] <= 0:
        raise NestingError("fractions must be positive")
    stages = _stage_sizes(body)
    blocks = tuple(tuple(stages) for _ in fractions) if stages else ()
    return _walk(body, head, fractions, blocks)


def build_layer_schedule(body: list[LayerSpec], head: HeadSpec, blocks_per_level) -> LevelSchedule:
    """Layer scheduling: level k runs the first ``blocks_per_level[k]``
    residual blocks of each stage, the rest pass through as identity."""
    stages = _stage_sizes(body)
    if not stages:
        raise NestingError("layer scheduling needs residual blocks")
    plan = []
    for entry in blocks_per_level:
        row = (int(entry),) * len(stages) if np.isscalar(entry) else tuple(int(e) for e in entry)
        if len(row) != len(stages):
            raise NestingError(f"expected {len(stages)} stage counts, got {row}")
        if any(c < 1 for c in row):
            raise NestingError("every level must keep at least one block per stage")
        plan.append(row)
    for s, full in enumerate(stages):
        col = [row[s] for row in plan]
        if col != sorted(col):
            raise NestingError(f"block counts must be ascending per stage, got {col}")
        if col[-1] != full:
            raise NestingError(f"last level must run all {full} blocks of stage {s}, got {col[-1]}")
    fractions = (1.0,) * len(plan)
    return _walk(body, head, fractions, tuple(plan))


def build_combined_schedule(body: list[LayerSpec], head: HeadSpec, levels_plan) -> LevelSchedule:
    """Channel+layer scheduling: each level pairs a channel fraction with
    per-stage block counts, ``[(fraction, blocks), ...]`` core first.

    The subset relation is enforced within each axis only; levels must be
    ordered by non-decreasing parameter count and end at the full network.
    """
    stages = _stage_sizes(body)
    if not stages:
        raise NestingError("combined scheduling needs residual blocks")
    fractions = []
    plan = []
    for fraction, entry in levels_plan:
        fractions.append(float(fraction))
        row = (int(entry),) * len(stages) if np.isscalar(entry) else tuple(int(e) for e in entry)
        if len(row) != len(stages):
            raise NestingError(f"expected {len(stages)} stage counts, got {row}")
        if any(c < 1 for c in row):
            raise NestingError("every level must keep at least one block per stage")
        plan.append(row)
    if fractions[-1] != 1.0 or list(plan[-1]) != stages:
        raise NestingError("last combined level must be the full network")
    schedule = _walk(body, head, tuple(fractions), tuple(plan))
    pc = schedule.param_counts
    if list(pc) != sorted(pc):
        raise NestingError(f"combined levels must have non-decreasing size, got {pc}")
    return schedule


def schedule_to_masks(schedule: LevelSchedule, body: list[LayerSpec]) -> MaskHierarchy:
    """Materialize the structured masks of a schedule.

    Level k's support is the leading input/output channel block of every
    scheduled tensor (and, with layer scheduling, only the active blocks).
    Exempt layers contribute their full size as always-active parameters.
    Single-axis schedules nest by construction; combined schedules only
    nest within each axis.
    """
    h = MaskHierarchy(levels=schedule.levels)
    exempt = 0
    stage_pos: dict[int, int] = {}
    for i, (spec, cc) in enumerate(zip(body, schedule.channel_counts)):
        if cc is None or spec.kind == "batchnorm":
            continue
        name = f"body{i}"
        if spec.kind == "dense":
            shape = (spec.fan_in, spec.fan_out)
            if spec.exempt:
                exempt += shape[0] * shape[1] + (shape[1] if spec.bias else 0)
                continue
            h.add(f"{name}.w", [_block_mask(shape, (ci, co)) for ci, co in zip(cc.ins, cc.outs)])
            if spec.bias:
                h.add(f"{name}.b", [_block_mask((shape[1],), (co,)) for co in cc.outs])
        elif spec.kind == "conv":
            shape = (spec.kh, spec.kw, spec.fan_in, spec.fan_out)
            if spec.exempt:
                exempt += spec.kh * spec.kw * shape[2] * shape[3] + (shape[3] if spec.bias else 0)
                continue
            h.add(
                f"{name}.w",
                [
                    _block_mask(shape, (spec.kh, spec.kw, ci, co))
                    for ci, co in zip(cc.ins, cc.outs)
                ],
            )
            if spec.bias:
                h.add(f"{name}.b", [_block_mask((shape[3],), (co,)) for co in cc.outs])
        elif spec.kind == "residual_block":
            pos = stage_pos.get(spec.stage, 0)
            stage_pos[spec.stage] = pos + 1
            full_in, full_out = spec.fan_in, spec.fan_out
            needs_proj = full_in != full_out or spec.stride != 1
            m1, m2, mp = [], [], []
            for lv in range(schedule.levels):
                active = schedule.block_active(lv + 1, spec.stage, pos)
                ci = cc.ins[lv] if active else 0
                co = cc.outs[lv] if active else 0
                m1.append(_block_mask((3, 3, full_in, full_out), (3, 3, ci, co)))
                m2.append(_block_mask((3, 3, full_out, full_out), (3, 3, co, co)))
                if needs_proj:
                    mp.append(_block_mask((1, 1, full_in, full_out), (1, 1, ci, co)))
            h.add(f"{name}.conv1.w", m1)
            h.add(f"{name}.conv2.w", m2)
            if needs_proj:
                h.add(f"{name}.proj.w", mp)
    h.exempt_params = exempt
    return h


def _block_mask(shape: tuple[int, ...], extents: tuple[int, ...]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    if all(e > 0 for e in extents):
        m[tuple(slice(0, e) for e in extents)] = True
    return m


def density(obj, level: int) -> float:
    """Active-parameter share of one level relative to the full network."""
    if isinstance(obj, LevelSchedule):
        i = _level_index(level, obj.levels)
        return obj.param_counts[i] / obj.param_counts[-1]
    if isinstance(obj, MaskHierarchy):
        full = obj.active_params(obj.levels)
        if full == 0:
            raise NestingError("hierarchy has no active parameters at the full level")
        return obj.active_params(level) / full
    raise TypeError(f"density expects a LevelSchedule or MaskHierarchy, got {type(obj)!r}")


def extract_standalone(net, level: int):
    """Materialize one scheduled level as an independent single-level network."""
    from . import nn

    return nn.extract_standalone(net, level)
