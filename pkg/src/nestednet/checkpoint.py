"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic "NNET" | version u32 | precision u32 (32|64) | levels u32 | mode u32
    repeated records:
        name length u32 | name UTF-8 | rank u32 | dims u32 x rank | payload
    crc32 u32 over every preceding byte

Payload encoding by name prefix: ``mask/`` records pack one bit per
element (row-major, zero-padded to the byte); ``meta/`` records are
float64; everything else uses the header precision. Record names are
unique; writes go to a temp file renamed into place.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .arch import KINDS, HeadSpec, LayerSpec
from .consensus import ConsensusHead
from .nesting import (
    MaskHierarchy,
    build_channel_schedule,
    build_combined_schedule,
    build_layer_schedule,
)
from .nn import NestedNetwork, build_network
from .training import OptimizerState, init_optimizer

MAGIC = b"NNET"
VERSION = 1
MODES = ("weight_prune", "channel", "layer", "channel_layer")
CONSENSUS_KINDS = ("none", "average", "learned")


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incomplete checkpoint."""


def _spec_row(spec: LayerSpec) -> list[float]:
    return [
        float(KINDS.index(spec.kind)),
        float(spec.fan_in), float(spec.fan_out), float(spec.kh), float(spec.kw),
        float(spec.stride), float(spec.padding), float(spec.bias),
        float(spec.exempt), float(spec.stage), float(spec.proj),
    ]


def _row_spec(row) -> LayerSpec:
    return LayerSpec(
        kind=KINDS[int(row[0])],
        fan_in=int(row[1]), fan_out=int(row[2]), kh=int(row[3]), kw=int(row[4]),
        stride=int(row[5]), padding=int(row[6]), bias=bool(row[7]),
        exempt=bool(row[8]), stage=int(row[9]), proj=bool(row[10]),
    )


def _records_for(net: NestedNetwork, state: OptimizerState,
                 consensus: ConsensusHead | None) -> list[tuple[str, np.ndarray]]:
    records: list[tuple[str, np.ndarray]] = []
    records.append(("meta/arch", np.array([_spec_row(s) for s in net.body_specs],
                                          dtype=np.float64)))
    records.append(("meta/head", np.array(
        [net.head_spec.fan_in, *net.head_classes], dtype=np.float64)))
    records.append(("meta/misc", np.array([net.seed, state.iteration], dtype=np.float64)))
    if net.schedule is not None:
        records.append(("meta/fractions", np.array(net.schedule.fractions, dtype=np.float64)))
        if net.schedule.blocks:
            records.append(("meta/blocks", np.array(net.schedule.blocks, dtype=np.float64)))
    for name in sorted(net.params):
        records.append((f"param/{name}", net.params[name].value))
    for name in sorted(net.state):
        records.append((f"state/{name}", net.state[name]))
    for name in sorted(net.params):
        records.append((f"velocity/{name}", state.velocity[name]))
    if net.hierarchy is not None:
        for name in sorted(net.hierarchy.masks):
            for lv, mask in enumerate(net.hierarchy.masks[name]):
                records.append((f"mask/{name}/l{lv + 1}", mask))
    kind_code = 0 if consensus is None else CONSENSUS_KINDS.index(consensus.kind)
    meta = [kind_code]
    if consensus is not None:
        meta += [int(consensus.hierarchical), consensus.classes, *consensus.segment_sizes]
    records.append(("meta/consensus", np.array(meta, dtype=np.float64)))
    if consensus is not None and consensus.kind == "learned":
        records.append(("consensus/w", consensus.w))
        records.append(("consensus/b", consensus.b))
        if consensus.hierarchical:
            records.append(("consensus/aux_w", consensus.aux_w))
            records.append(("consensus/aux_b", consensus.aux_b))
    return records


def _payload_bytes(name: str, arr: np.ndarray, bits: int) -> bytes:
    if name.startswith("mask/"):
        return np.packbits(np.asarray(arr, dtype=bool).reshape(-1)).tobytes()
    if name.startswith("meta/"):
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()
    dt = "<f4" if bits == 32 else "<f8"
    return np.ascontiguousarray(arr, dtype=dt).tobytes()


def save_checkpoint(path, net: NestedNetwork, state: OptimizerState | None = None,
                    consensus: ConsensusHead | None = None) -> None:
    """Serialize network + optimizer + consensus state; atomic (temp file
    then rename)."""
    if state is None:
        state = init_optimizer(net)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIII", VERSION, net.bits, net.levels, MODES.index(net.mode))
    for name, arr in _records_for(net, state, consensus):
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += _payload_bytes(name, arr, net.bits)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(bytes(buf))
    os.replace(tmp, path)


def _parse(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 24:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    version, bits, levels, mode_code = struct.unpack_from("<IIII", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    if bits not in (32, 64):
        raise CheckpointError(f"{path}: bad precision flag {bits}")
    if mode_code >= len(MODES):
        raise CheckpointError(f"{path}: unknown mode tag {mode_code}")
    records: dict[str, np.ndarray] = {}
    pos = 20
    end = len(buf) - 4
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated record header")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if name.startswith("mask/"):
            nbytes = (count + 7) // 8
            arr = np.unpackbits(
                np.frombuffer(buf, np.uint8, nbytes, pos), count=count
            ).astype(bool).reshape(dims)
        else:
            dt = "<f8" if name.startswith("meta/") else ("<f4" if bits == 32 else "<f8")
            nbytes = count * np.dtype(dt).itemsize
            if pos + nbytes > end:
                raise CheckpointError(f"{path}: record {name} truncated")
            arr = np.frombuffer(buf, dt, count, pos).reshape(dims)
        pos += nbytes
        if name in records:
            raise CheckpointError(f"{path}: duplicate record {name}")
        records[name] = arr
    return records, bits, levels, MODES[mode_code]


def _take(records, name, path):
    if name not in records:
        raise CheckpointError(f"{path}: missing record {name}")
    return records[name]


def load_checkpoint(path):
    """Reconstruct (network, optimizer state, consensus head) bit-exactly."""
    records, bits, levels, mode = _parse(path)
    arch_rows = _take(records, "meta/arch", path)
    specs = [_row_spec(row) for row in np.atleast_2d(arch_rows)]
    head_meta = _take(records, "meta/head", path)
    head = HeadSpec(int(head_meta[0]), tuple(int(c) for c in head_meta[1:]))
    misc = _take(records, "meta/misc", path)
    seed, iteration = int(misc[0]), int(misc[1])

    schedule = None
    if mode != "weight_prune":
        fractions = tuple(float(f) for f in _take(records, "meta/fractions", path))
        if mode == "channel":
            schedule = build_channel_schedule(specs, head, fractions)
        else:
            blocks = np.atleast_2d(_take(records, "meta/blocks", path)).astype(int)
            rows = [tuple(int(c) for c in row) for row in blocks]
            if mode == "layer":
                schedule = build_layer_schedule(specs, head, rows)
            else:
                schedule = build_combined_schedule(specs, head, list(zip(fractions, rows)))

    net = build_network(specs, head, levels, seed=seed, mode=mode,
                        schedule=schedule, bits=bits)
    for name, info in net.params.items():
        arr = _take(records, f"param/{name}", path)
        if arr.shape != info.value.shape:
            raise CheckpointError(f"{path}: param {name} shape {arr.shape} != {info.value.shape}")
        info.value[...] = arr
    for name, target in net.state.items():
        target[...] = _take(records, f"state/{name}", path)
    state = OptimizerState(iteration=iteration)
    for name, info in net.params.items():
        state.velocity[name] = _take(records, f"velocity/{name}", path).copy()

    if mode == "weight_prune":
        hierarchy = MaskHierarchy(levels=levels)
        for name in net.shared_weight_names():
            masks = [_take(records, f"mask/{name}/l{lv + 1}", path) for lv in range(levels)]
            hierarchy.add(name, masks)
        net.set_hierarchy(hierarchy)

    cmeta = _take(records, "meta/consensus", path)
    consensus = None
    if int(cmeta[0]) != 0:
        kind = CONSENSUS_KINDS[int(cmeta[0])]
        consensus = ConsensusHead(
            kind=kind,
            segment_sizes=tuple(int(s) for s in cmeta[3:]),
            classes=int(cmeta[2]),
            hierarchical=bool(int(cmeta[1])),
        )
        if kind == "learned":
            consensus.w = _take(records, "consensus/w", path).copy()
            consensus.b = _take(records, "consensus/b", path).copy()
            if consensus.hierarchical:
                consensus.aux_w = _take(records, "consensus/aux_w", path).copy()
                consensus.aux_b = _take(records, "consensus/aux_b", path).copy()
    return net, state, consensus
