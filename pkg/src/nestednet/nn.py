"""Layers with hand-written forward/backward and the nested network graph.

Every non-exempt parameter tensor is shared by all levels; a forward pass
at level k touches the level-k view of it, either the leading channel
block (scheduling) or the masked support (weight pruning). Batch-norm
statistics and classifier heads are owned per level, because different
levels see different activation distributions and may target different
class counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .arch import HeadSpec, LayerSpec
from .nesting import LevelSchedule, MaskHierarchy, NestingError, _level_index
from .tensor import ConvGeometry, DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class TraceError(RuntimeError):
    """Backward called with a stale or foreign trace."""


@dataclass
class ParamInfo:
    """A trainable array, updated in place by the optimizer."""

    value: np.ndarray
    kind: str = "shared"  # "shared" (nested tensor) or "level" (owned by one level)
    level: int | None = None  # 1-based owning level for kind == "level"


def _xavier(rng: np.random.Generator, shape, fan_in, fan_out, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Layer:
    """Body layer interface; parameterized layers register into the network
    param table at construction."""

    def forward(self, x, lv, mode, caches):
        raise NotImplementedError

    def backward(self, g, lv, cache, grads):
        raise NotImplementedError

    def madds(self, lv, hw):
        return 0, hw


class Dense(_Layer):
    def __init__(self, net, name, spec: LayerSpec, ins, outs, rng):
        self.name = name
        self.spec = spec
        self.ins = ins  # active fan-in per level (index 0 = core)
        self.outs = outs
        dt = net.dtype
        self.w = net._register(f"{name}.w", _xavier(rng, (spec.fan_in, spec.fan_out),
                                                    spec.fan_in, spec.fan_out, dt))
        self.b = net._register(f"{name}.b", np.zeros(spec.fan_out, dtype=dt)) if spec.bias else None
        self.masks = None  # weight-prune hierarchy slot, core first

    def _view(self, lv):
        ci, co = self.ins[lv], self.outs[lv]
        w = self.w[:ci, :co]
        if self.masks is not None:
            w = w * self.masks[lv]
        b = self.b[:co] if self.b is not None else None
        return w, b

    def forward(self, x, lv, mode, caches):
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        w, b = self._view(lv)
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"{self.name}: input width {x.shape[1]} != fan-in {w.shape[0]}")
        y = tensor.matmul(x, np.ascontiguousarray(w))
        if b is not None:
            y = y + b
        caches.append((x, w))
        return y

    def backward(self, g, lv, cache, grads):
        x, w = cache
        ci, co = self.ins[lv], self.outs[lv]
        gw = x.T @ g
        if self.masks is not None:
            gw = gw * self.masks[lv]
        grads[f"{self.name}.w"][:ci, :co] += gw
        if self.b is not None:
            grads[f"{self.name}.b"][:co] += g.sum(axis=0)
        return g @ w.T

    def madds(self, lv, hw):
        if self.masks is not None:
            return int(self.masks[lv].sum()), hw
        return self.ins[lv] * self.outs[lv], hw


class Conv(_Layer):
    def __init__(self, net, name, spec: LayerSpec, ins, outs, rng):
        self.name = name
        self.spec = spec
        self.ins = ins
        self.outs = outs
        self.geom = ConvGeometry(stride=spec.stride, padding=spec.padding)
        dt = net.dtype
        shape = (spec.kh, spec.kw, spec.fan_in, spec.fan_out)
        rec = spec.kh * spec.kw
        self.w = net._register(f"{name}.w", _xavier(rng, shape, rec * spec.fan_in,
                                                    rec * spec.fan_out, dt))
        self.b = net._register(f"{name}.b", np.zeros(spec.fan_out, dtype=dt)) if spec.bias else None
        self.masks = None

    def _view(self, lv):
        ci, co = self.ins[lv], self.outs[lv]
        w = self.w[:, :, :ci, :co]
        if self.masks is not None:
            w = w * self.masks[lv]
        return np.ascontiguousarray(w), (self.b[:co] if self.b is not None else None)

    def forward(self, x, lv, mode, caches):
        w, b = self._view(lv)
        y = tensor.conv2d(x, w, self.geom)
        if b is not None:
            y = y + b
        caches.append((x, w))
        return y

    def backward(self, g, lv, cache, grads):
        x, w = cache
        ci, co = self.ins[lv], self.outs[lv]
        gx, gw = tensor.conv2d_backward(x, w, np.ascontiguousarray(g), self.geom)
        if self.masks is not None:
            gw = gw * self.masks[lv]
        grads[f"{self.name}.w"][:, :, :ci, :co] += gw
        if self.b is not None:
            grads[f"{self.name}.b"][:co] += g.sum(axis=(0, 1, 2))
        return gx

    def madds(self, lv, hw):
        h, w = hw
        ho = self.geom.out_size(h, self.spec.kh)
        wo = self.geom.out_size(w, self.spec.kw)
        if self.masks is not None:
            per_pos = int(self.masks[lv].sum())
        else:
            per_pos = self.spec.kh * self.spec.kw * self.ins[lv] * self.outs[lv]
        return ho * wo * per_pos, (ho, wo)


class BatchNorm(_Layer):
    """Per-level batch normalization over the trailing (channel) axis.

    Each level owns scale/shift parameters and running statistics sized to
    its active width; stored full width, sliced on use.
    """

    def __init__(self, net, name, widths):
        self.name = name
        self.widths = widths  # active channels per level
        dt = net.dtype
        full = max(widths)
        self.gamma, self.beta, self.rmean, self.rvar = [], [], [], []
        for lv in range(len(widths)):
            self.gamma.append(net._register(f"{name}.gamma.l{lv + 1}",
                                            np.ones(full, dtype=dt), kind="level", level=lv + 1))
            self.beta.append(net._register(f"{name}.beta.l{lv + 1}",
                                           np.zeros(full, dtype=dt), kind="level", level=lv + 1))
            self.rmean.append(net._state(f"{name}.rmean.l{lv + 1}", np.zeros(full, dtype=dt)))
            self.rvar.append(net._state(f"{name}.rvar.l{lv + 1}", np.ones(full, dtype=dt)))

    def forward(self, x, lv, mode, caches):
        c = self.widths[lv]
        if x.shape[-1] != c:
            raise DimensionError(f"{self.name}: {x.shape[-1]} channels, level expects {c}")
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.gamma[lv][:c], self.beta[lv][:c]
        if mode == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            istd = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * istd
            self.rmean[lv][:c] = BN_MOMENTUM * self.rmean[lv][:c] + (1 - BN_MOMENTUM) * mean
            self.rvar[lv][:c] = BN_MOMENTUM * self.rvar[lv][:c] + (1 - BN_MOMENTUM) * var
            caches.append((xhat, istd, gamma))
        else:
            istd = 1.0 / np.sqrt(self.rvar[lv][:c] + BN_EPS)
            xhat = (x - self.rmean[lv][:c]) * istd
            caches.append(None)
        return gamma * xhat + beta

    def backward(self, g, lv, cache, grads):
        xhat, istd, gamma = cache
        c = self.widths[lv]
        axes = tuple(range(g.ndim - 1))
        m = int(np.prod([g.shape[a] for a in axes]))
        grads[f"{self.name}.gamma.l{lv + 1}"][:c] += (g * xhat).sum(axis=axes)
        grads[f"{self.name}.beta.l{lv + 1}"][:c] += g.sum(axis=axes)
        gxhat = g * gamma
        gx = (istd / m) * (
            m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
        )
        return gx.astype(g.dtype, copy=False)


class ReLU(_Layer):
    def forward(self, x, lv, mode, caches):
        caches.append(x > 0)
        return tensor.max0(x)

    def backward(self, g, lv, cache, grads):
        return g * cache


class GlobalAvgPool(_Layer):
    def forward(self, x, lv, mode, caches):
        caches.append(x.shape)
        return x.mean(axis=(1, 2))

    def backward(self, g, lv, cache, grads):
        n, h, w, c = cache
        return np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).astype(g.dtype)

    def madds(self, lv, hw):
        return 0, (1, 1)


class ResidualBlock(_Layer):
    """Pre-activation residual block: BN-ReLU-conv3x3 twice, with a 1x1
    projection shortcut when the full block changes shape. Levels where the
    block is scheduled out pass the input through unchanged."""

    def __init__(self, net, name, spec: LayerSpec, ins, outs, active, rng):
        self.name = name
        self.spec = spec
        self.ins = ins
        self.outs = outs
        self.active = active  # per level
        dt = net.dtype
        fi, fo = spec.fan_in, spec.fan_out
        self.bn1 = BatchNorm(net, f"{name}.bn1", ins)
        self.bn2 = BatchNorm(net, f"{name}.bn2", outs)
        self.geom1 = ConvGeometry(stride=spec.stride, padding=1)
        self.geom2 = ConvGeometry(stride=1, padding=1)
        self.w1 = net._register(f"{name}.conv1.w", _xavier(rng, (3, 3, fi, fo), 9 * fi, 9 * fo, dt))
        self.w2 = net._register(f"{name}.conv2.w", _xavier(rng, (3, 3, fo, fo), 9 * fo, 9 * fo, dt))
        self.has_proj = fi != fo or spec.stride != 1 or spec.proj
        if self.has_proj:
            self.geom_p = ConvGeometry(stride=spec.stride, padding=0)
            self.wp = net._register(f"{name}.proj.w", _xavier(rng, (1, 1, fi, fo), fi, fo, dt))
        self.masks1 = self.masks2 = self.masksp = None

    def _kernel(self, w, lv, ci, co, masks):
        k = w[:, :, :ci, :co]
        if masks is not None:
            k = k * masks[lv]
        return np.ascontiguousarray(k)

    def forward(self, x, lv, mode, caches):
        if not self.active[lv]:
            caches.append(None)
            return x
        ci, co = self.ins[lv], self.outs[lv]
        sub: list = []
        h = self.bn1.forward(x, lv, mode, sub)
        r1 = h > 0
        h = tensor.max0(h)
        k1 = self._kernel(self.w1, lv, ci, co, self.masks1)
        a = tensor.conv2d(h, k1, self.geom1)
        a2 = self.bn2.forward(a, lv, mode, sub)
        r2 = a2 > 0
        a2 = tensor.max0(a2)
        k2 = self._kernel(self.w2, lv, co, co, self.masks2)
        y = tensor.conv2d(a2, k2, self.geom2)
        if self.has_proj:
            kp = self._kernel(self.wp, lv, ci, co, self.masksp)
            y = y + tensor.conv2d(h, kp, self.geom_p)
        else:
            y = y + x
        caches.append((sub, h, r1, k1, a2, r2, k2))
        return y

    def backward(self, g, lv, cache, grads):
        if cache is None:
            return g
        sub, h, r1, k1, a2, r2, k2 = cache
        ci, co = self.ins[lv], self.outs[lv]
        g = np.ascontiguousarray(g)

        ga2, gw2 = tensor.conv2d_backward(a2, k2, g, self.geom2)
        if self.masks2 is not None:
            gw2 = gw2 * self.masks2[lv]
        grads[f"{self.name}.conv2.w"][:, :, :co, :co] += gw2

        ga = ga2 * r2
        ga = self.bn2.backward(ga, lv, sub[1], grads)
        gh, gw1 = tensor.conv2d_backward(h, k1, np.ascontiguousarray(ga), self.geom1)
        if self.masks1 is not None:
            gw1 = gw1 * self.masks1[lv]
        grads[f"{self.name}.conv1.w"][:, :, :ci, :co] += gw1

        if self.has_proj:
            kp = self._kernel(self.wp, lv, ci, co, self.masksp)
            ghp, gwp = tensor.conv2d_backward(h, kp, g, self.geom_p)
            if self.masksp is not None:
                gwp = gwp * self.masksp[lv]
            grads[f"{self.name}.proj.w"][:, :, :ci, :co] += gwp
            gh = gh + ghp

        gx = self.bn1.backward(gh * r1, lv, sub[0], grads)
        if not self.has_proj:
            gx = gx + g
        return gx

    def madds(self, lv, hw):
        if not self.active[lv]:
            return 0, hw
        h, w = hw
        ho = self.geom1.out_size(h, 3)
        wo = self.geom1.out_size(w, 3)
        ci, co = self.ins[lv], self.outs[lv]
        if self.masks1 is not None:
            per1 = int(self.masks1[lv].sum())
            per2 = int(self.masks2[lv].sum())
            perp = int(self.masksp[lv].sum()) if self.has_proj else 0
        else:
            per1, per2 = 9 * ci * co, 9 * co * co
            perp = ci * co if self.has_proj else 0
        return ho * wo * (per1 + per2 + perp), (ho, wo)


@dataclass
class ForwardTrace:
    """Per-layer activation caches of one forward pass; valid only for the
    (network, level, mode) that produced it."""

    net_id: int
    level: int
    mode: str
    caches: list = field(default_factory=list)
    head_cache: tuple | None = None


class NestedNetwork:
    """Sequential body plus one classifier head per nested level."""

    def __init__(self, body_specs, head_spec: HeadSpec, levels: int, mode: str,
                 schedule: LevelSchedule | None, seed: int, bits: int = 32):
        if levels < 1:
            raise NestingError(f"levels must be >= 1, got {levels}")
        if mode not in ("weight_prune", "channel", "layer", "channel_layer"):
            raise NestingError(f"unknown nesting mode {mode!r}")
        if mode == "weight_prune":
            if schedule is not None:
                raise NestingError("weight-pruning mode does not take a level schedule")
        else:
            if schedule is None:
                raise NestingError(f"mode {mode!r} requires a level schedule")
            if schedule.levels != levels:
                raise NestingError(
                    f"schedule has {schedule.levels} levels, network wants {levels}"
                )
        self.body_specs = list(body_specs)
        self.head_spec = head_spec
        self.levels = levels
        self.mode = mode
        self.schedule = schedule
        self.seed = seed
        self.bits = bits
        self.dtype = np.float32 if bits == 32 else np.float64
        self.params: dict[str, ParamInfo] = {}
        self.state: dict[str, np.ndarray] = {}
        self.hierarchy: MaskHierarchy | None = None

        rng = np.random.default_rng(seed)
        full = lambda spec: (spec.fan_out,) * levels  # noqa: E731
        self.body: list[_Layer] = []
        counts = schedule.channel_counts if schedule is not None else None
        stage_pos: dict[int, int] = {}
        for i, spec in enumerate(self.body_specs):
            name = f"body{i}"
            cc = counts[i] if counts is not None else None
            if spec.kind == "dense":
                ins = cc.ins if cc else (spec.fan_in,) * levels
                outs = cc.outs if cc else full(spec)
                self.body.append(Dense(self, name, spec, ins, outs, rng))
            elif spec.kind == "conv":
                ins = cc.ins if cc else (spec.fan_in,) * levels
                outs = cc.outs if cc else full(spec)
                self.body.append(Conv(self, name, spec, ins, outs, rng))
            elif spec.kind == "batchnorm":
                widths = cc.ins if cc else (spec.fan_in,) * levels
                self.body.append(BatchNorm(self, name, widths))
            elif spec.kind == "relu":
                self.body.append(ReLU())
            elif spec.kind == "global_avg_pool":
                self.body.append(GlobalAvgPool())
            elif spec.kind == "residual_block":
                pos = stage_pos.get(spec.stage, 0)
                stage_pos[spec.stage] = pos + 1
                ins = cc.ins if cc else (spec.fan_in,) * levels
                outs = cc.outs if cc else full(spec)
                if schedule is not None:
                    active = tuple(
                        schedule.block_active(lv + 1, spec.stage, pos) for lv in range(levels)
                    )
                else:
                    active = (True,) * levels
                self.body.append(ResidualBlock(self, name, spec, ins, outs, active, rng))
            else:
                raise NestingError(f"unsupported layer kind {spec.kind!r}")

        if schedule is not None:
            head_ins = schedule.head_ins
            classes = schedule.head_classes
        else:
            head_ins = (head_spec.fan_in,) * levels
            classes = (
                head_spec.classes
                if len(head_spec.classes) == levels
                else (head_spec.classes[-1],) * levels
            )
        self.head_classes = classes
        self.heads = []
        for lv in range(levels):
            spec = LayerSpec("dense", fan_in=head_ins[lv], fan_out=classes[lv])
            head = Dense(self, f"head{lv + 1}", spec, (head_ins[lv],), (classes[lv],), rng)
            self.params[f"head{lv + 1}.w"].kind = "level"
            self.params[f"head{lv + 1}.w"].level = lv + 1
            self.params[f"head{lv + 1}.b"].kind = "level"
            self.params[f"head{lv + 1}.b"].level = lv + 1
            self.heads.append(head)

        if mode == "weight_prune":
            ones = MaskHierarchy(levels=levels)
            for name in self.shared_weight_names():
                shape = self.params[name].value.shape
                ones.add(name, [np.ones(shape, bool) for _ in range(levels)])
            self.set_hierarchy(ones)

    def _register(self, name, value, kind="shared", level=None) -> np.ndarray:
        if name in self.params:
            raise NestingError(f"duplicate parameter {name}")
        self.params[name] = ParamInfo(value=value, kind=kind, level=level)
        return value

    def _state(self, name, value) -> np.ndarray:
        self.state[name] = value
        return value

    def shared_weight_names(self) -> list[str]:
        """Nested (non-exempt, non-bias) weight tensors, the ones masks apply to."""
        names = []
        for i, spec in enumerate(self.body_specs):
            if spec.kind in ("dense", "conv") and not spec.exempt:
                names.append(f"body{i}.w")
            elif spec.kind == "residual_block":
                names.append(f"body{i}.conv1.w")
                names.append(f"body{i}.conv2.w")
                if f"body{i}.proj.w" in self.params:
                    names.append(f"body{i}.proj.w")
        return names

    def set_hierarchy(self, h: MaskHierarchy) -> None:
        """Attach weight-pruning masks (core first) to the shared tensors."""
        if self.mode != "weight_prune":
            raise NestingError("mask hierarchies only apply in weight-pruning mode")
        if h.levels != self.levels:
            raise NestingError(f"hierarchy has {h.levels} levels, network has {self.levels}")
        expected = set(self.shared_weight_names())
        if set(h.masks) != expected:
            raise NestingError(
                f"hierarchy masks {sorted(h.masks)} do not match shared weights {sorted(expected)}"
            )
        for i, spec in enumerate(self.body_specs):
            layer = self.body[i]
            if spec.kind in ("dense", "conv") and not spec.exempt:
                layer.masks = h.masks[f"body{i}.w"]
            elif spec.kind == "residual_block":
                layer.masks1 = h.masks[f"body{i}.conv1.w"]
                layer.masks2 = h.masks[f"body{i}.conv2.w"]
                if layer.has_proj:
                    layer.masksp = h.masks[f"body{i}.proj.w"]
        exempt = sum(
            info.value.size
            for name, info in self.params.items()
            if info.kind == "shared" and name not in h.masks
        )
        h.exempt_params = exempt
        self.hierarchy = h

    def forward(self, x, level: int, mode: str = "train") -> tuple[np.ndarray, ForwardTrace]:
        lv = _level_index(level, self.levels)
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        trace = ForwardTrace(net_id=id(self), level=level, mode=mode)
        for layer in self.body:
            x = layer.forward(x, lv, mode, trace.caches)
        head_caches: list = []
        logits = self.heads[lv].forward(x, 0, mode, head_caches)
        trace.head_cache = head_caches[0]
        return logits, trace

    def backward(self, trace: ForwardTrace, grad_logits) -> dict[str, np.ndarray]:
        if trace.net_id != id(self):
            raise TraceError("trace was produced by a different network")
        if trace.mode != "train":
            raise TraceError("backward needs a train-mode trace")
        if len(trace.caches) != len(self.body):
            raise TraceError("trace does not match the network body")
        lv = _level_index(trace.level, self.levels)
        grads = self.zero_grads()
        g = self.heads[lv].backward(np.asarray(grad_logits, dtype=self.dtype), 0,
                                    trace.head_cache, grads)
        for layer, cache in zip(reversed(self.body), reversed(trace.caches)):
            g = layer.backward(g, lv, cache, grads)
        return grads

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(info.value) for name, info in self.params.items()}

    def features(self, x, level: int, mode: str = "eval") -> np.ndarray:
        """Body output (head input) at a level; used by consensus heads."""
        lv = _level_index(level, self.levels)
        x = np.asarray(x, dtype=self.dtype)
        sink: list = []
        for layer in self.body:
            x = layer.forward(x, lv, mode, sink)
        return x

    def madds(self, level: int, input_hw=None) -> int:
        """Multiply-add count of one forward pass per sample at a level."""
        lv = _level_index(level, self.levels)
        hw = input_hw
        total = 0
        for layer in self.body:
            cost, hw = layer.madds(lv, hw)
            total += cost
        head = self.heads[lv]
        total += head.ins[0] * head.outs[0]
        return total

    def checksum(self) -> bytes:
        """Order-stable digest of every parameter tensor."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].value.tobytes())
        return h.digest()


def build_network(body_specs, head_spec, levels: int, seed: int, mode: str = "channel",
                  schedule: LevelSchedule | None = None, bits: int = 32) -> NestedNetwork:
    """Assemble a nested network with Xavier-initialized weights.

    Identical seeds produce bit-identical networks. In weight-pruning mode
    all levels start with full (all-ones) masks; the pruning driver carves
    the hierarchy out during training.
    """
    return NestedNetwork(body_specs, head_spec, levels, mode, schedule, seed, bits)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(nll.mean()), (grad / n).astype(logits.dtype)


def extract_standalone(net: NestedNetwork, level: int) -> NestedNetwork:
    """Materialize one scheduled level as an independent single-level network.

    Refused in weight-pruning mode: entry-wise masks keep dense tensor
    shapes, so nothing would shrink; the error reports the level's density
    instead.
    """
    from .nesting import build_channel_schedule, density

    lv = _level_index(level, net.levels)
    if net.mode == "weight_prune":
        d = density(net.hierarchy, level) if net.hierarchy is not None else 1.0
        raise NestingError(
            "extraction needs a scheduling-mode network; weight-pruned tensors stay "
            f"dense (level {level} density {d:.1%})"
        )

    specs: list[LayerSpec] = []
    copies: list[tuple] = []  # (new name, array) parameter/state payloads
    sched = net.schedule
    for i, spec in enumerate(net.body_specs):
        cc = sched.channel_counts[i]
        layer = net.body[i]
        name = f"body{i}"
        j = len(specs)
        new = f"body{j}"
        if spec.kind == "dense":
            ci, co = cc.ins[lv], cc.outs[lv]
            specs.append(LayerSpec("dense", fan_in=ci, fan_out=co, bias=spec.bias,
                                   exempt=spec.exempt))
            copies.append((f"{new}.w", layer.w[:ci, :co]))
            if spec.bias:
                copies.append((f"{new}.b", layer.b[:co]))
        elif spec.kind == "conv":
            ci, co = cc.ins[lv], cc.outs[lv]
            specs.append(LayerSpec("conv", fan_in=ci, fan_out=co, kh=spec.kh, kw=spec.kw,
                                   stride=spec.stride, padding=spec.padding, bias=spec.bias,
                                   exempt=spec.exempt))
            copies.append((f"{new}.w", layer.w[:, :, :ci, :co]))
            if spec.bias:
                copies.append((f"{new}.b", layer.b[:co]))
        elif spec.kind == "batchnorm":
            c = cc.ins[lv]
            specs.append(LayerSpec("batchnorm", fan_in=c, fan_out=c))
            copies.append((f"{new}.gamma.l1", layer.gamma[lv][:c]))
            copies.append((f"{new}.beta.l1", layer.beta[lv][:c]))
            copies.append((f"{new}.rmean.l1", layer.rmean[lv][:c]))
            copies.append((f"{new}.rvar.l1", layer.rvar[lv][:c]))
        elif spec.kind == "residual_block":
            if not net.body[i].active[lv]:
                continue  # scheduled out: identity
            ci, co = cc.ins[lv], cc.outs[lv]
            specs.append(LayerSpec("residual_block", fan_in=ci, fan_out=co, stride=spec.stride,
                                   stage=spec.stage, proj=layer.has_proj))
            copies.append((f"{new}.conv1.w", layer.w1[:, :, :ci, :co]))
            copies.append((f"{new}.conv2.w", layer.w2[:, :, :co, :co]))
            if layer.has_proj:
                copies.append((f"{new}.proj.w", layer.wp[:, :, :ci, :co]))
            for sub, bn in (("bn1", layer.bn1), ("bn2", layer.bn2)):
                c = ci if sub == "bn1" else co
                copies.append((f"{new}.{sub}.gamma.l1", bn.gamma[lv][:c]))
                copies.append((f"{new}.{sub}.beta.l1", bn.beta[lv][:c]))
                copies.append((f"{new}.{sub}.rmean.l1", bn.rmean[lv][:c]))
                copies.append((f"{new}.{sub}.rvar.l1", bn.rvar[lv][:c]))
        else:
            specs.append(spec)

    head = net.heads[lv]
    head_spec = HeadSpec(head.spec.fan_in, (head.spec.fan_out,))
    copies.append(("head1.w", head.w))
    copies.append(("head1.b", head.b))

    sub_schedule = build_channel_schedule(specs, head_spec, (1.0,))
    out = NestedNetwork(specs, head_spec, 1, "channel", sub_schedule, seed=net.seed,
                        bits=net.bits)
    for name, arr in copies:
        target = out.params[name].value if name in out.params else out.state[name]
        if target.shape != arr.shape:
            raise NestingError(f"extraction shape drift on {name}: {target.shape} vs {arr.shape}")
        target[...] = arr
    return out
