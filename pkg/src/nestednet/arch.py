"""Architecture descriptions: layer specs and builders for the supported
network families (MLP, plain CNN, pre-activation residual stacks).

A network body is a flat sequence of LayerSpec items; per-level output
heads are described separately because each nested level owns an
independent head (possibly with a different class count).
"""

from __future__ import annotations

from dataclasses import dataclass

KINDS = ("dense", "conv", "batchnorm", "relu", "residual_block", "global_avg_pool")


@dataclass(frozen=True)
class LayerSpec:
    """One body layer. Dimension fields are used per kind:

    dense:          fan_in, fan_out, bias, exempt
    conv:           fan_in/fan_out = channels, kh, kw, stride, padding, bias, exempt
    batchnorm:      fan_in = channels
    residual_block: fan_in/fan_out = channels, stride, stage (3x3 convs, bias-free)
    relu, global_avg_pool: no dimensions

    exempt layers keep a single full parameter tensor shared by all levels.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kh: int = 0
    kw: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = True
    exempt: bool = False
    stage: int = -1
    proj: bool = False  # residual blocks: force a 1x1 projection shortcut

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def dense(fan_in: int, fan_out: int, bias: bool = True, exempt: bool = False) -> LayerSpec:
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out, bias=bias, exempt=exempt)


def conv(
    in_ch: int,
    out_ch: int,
    kernel: int = 3,
    stride: int = 1,
    padding: int = 1,
    bias: bool = True,
    exempt: bool = False,
) -> LayerSpec:
    return LayerSpec(
        "conv", fan_in=in_ch, fan_out=out_ch, kh=kernel, kw=kernel,
        stride=stride, padding=padding, bias=bias, exempt=exempt,
    )


def batchnorm(channels: int) -> LayerSpec:
    return LayerSpec("batchnorm", fan_in=channels, fan_out=channels)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def residual_block(
    in_ch: int, out_ch: int, stride: int = 1, stage: int = 0, proj: bool = False
) -> LayerSpec:
    return LayerSpec(
        "residual_block", fan_in=in_ch, fan_out=out_ch, stride=stride, stage=stage, proj=proj
    )


@dataclass(frozen=True)
class HeadSpec:
    """Per-level classifier head dimensions. fan_in refers to the full-level
    feature width; scheduled levels slice it."""

    fan_in: int
    classes: tuple[int, ...]  # one entry per level, core first


def mlp(widths: tuple[int, ...], classes) -> tuple[list[LayerSpec], HeadSpec]:
    """Fully-connected body ``widths[0] -> ... -> widths[-1]`` with ReLU
    between layers, plus per-level heads on the last width."""
    if len(widths) < 2:
        raise ValueError("mlp needs at least input and one hidden width")
    body: list[LayerSpec] = []
    for i in range(len(widths) - 1):
        body.append(dense(widths[i], widths[i + 1]))
        body.append(relu())
    return body, HeadSpec(widths[-1], _classes_tuple(classes))


def cnn(
    in_ch: int, channels: tuple[int, ...], classes, kernel: int = 3, exempt_first: bool = True
) -> tuple[list[LayerSpec], HeadSpec]:
    """Plain conv stack: [conv-bn-relu] per width (stride 2 after the first),
    global average pooling, per-level heads. First conv is nesting-exempt
    by default."""
    body: list[LayerSpec] = []
    prev = in_ch
    for i, ch in enumerate(channels):
        stride = 1 if i == 0 else 2
        body.append(conv(prev, ch, kernel=kernel, stride=stride, padding=kernel // 2,
                         bias=False, exempt=(exempt_first and i == 0)))
        body.append(batchnorm(ch))
        body.append(relu())
        prev = ch
    body.append(global_avg_pool())
    return body, HeadSpec(channels[-1], _classes_tuple(classes))


def resnet(
    in_ch: int,
    stage_widths: tuple[int, ...],
    blocks_per_stage: int,
    classes,
    width_factor: int = 1,
    exempt_first: bool = True,
) -> tuple[list[LayerSpec], HeadSpec]:
    """Pre-activation residual stack: 3x3 stem conv (nesting-exempt by
    default), ``blocks_per_stage`` blocks in each stage (stride-2
    downsampling at stage boundaries), final BN-ReLU-pool. Depth is
    6*blocks_per_stage + 2 counting conv/dense layers.
    """
    widths = tuple(w * width_factor for w in stage_widths)
    body: list[LayerSpec] = [conv(in_ch, stage_widths[0], kernel=3, stride=1, padding=1,
                                  bias=False, exempt=exempt_first)]
    prev = stage_widths[0]
    for stage, w in enumerate(widths):
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            body.append(residual_block(prev, w, stride=stride, stage=stage))
            prev = w
    body.append(batchnorm(prev))
    body.append(relu())
    body.append(global_avg_pool())
    return body, HeadSpec(prev, _classes_tuple(classes))


def _classes_tuple(classes) -> tuple[int, ...]:
    if isinstance(classes, int):
        return (classes,)
    return tuple(int(c) for c in classes)


def conv_layer_count(body: list[LayerSpec]) -> int:
    """Number of weighted layers (convs/dense, residual blocks count 2) plus
    one for the classifier head."""
    n = 0
    for spec in body:
        if spec.kind in ("dense", "conv"):
            n += 1
        elif spec.kind == "residual_block":
            n += 2
    return n + 1
