"""Tiling layer parameter tensors into uniform m x n blocks and back.

Tensor layouts (input dimension before output dimension throughout):

* dense:  ``(in, out)``
* conv1d: ``(k, in, out)``; one slot per kernel position
* conv2d: ``(kh, kw, in, out)``; slot = ``r * kw + c``
* lstm:   ``{"input": (4, in, hidden), "recurrent": (4, hidden, hidden)}``;
  slots 0-3 are the input-to-hidden gate matrices, 4-7 the recurrent ones

A block at ``(slot, i, j)`` maps inputs ``i*m .. (i+1)*m-1`` to outputs
``j*n .. (j+1)*n-1`` of the slot's matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

KINDS = ("dense", "conv1d", "conv2d", "lstm")


class ConfigurationError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_size: int
    out_size: int
    kernel: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.in_size <= 0 or self.out_size <= 0:
            raise ConfigurationError(f"{self.name}: layer sizes must be positive")
        kernel = tuple(int(k) for k in self.kernel)
        object.__setattr__(self, "kernel", kernel)
        expected = {"conv1d": 1, "conv2d": 2}.get(self.kind, 0)
        if len(kernel) != expected or any(k <= 0 for k in kernel):
            raise ConfigurationError(
                f"{self.name}: {self.kind} needs {expected} positive kernel extent(s), got {kernel}"
            )

    @property
    def receptive_field(self) -> int:
        return int(np.prod(self.kernel)) if self.kernel else 1

    def slot_shapes(self) -> list[tuple[int, int]]:
        """(rows, cols) of each separately tiled matrix."""
        if self.kind == "lstm":
            return [(self.in_size, self.out_size)] * 4 + [(self.out_size, self.out_size)] * 4
        return [(self.in_size, self.out_size)] * self.receptive_field

    def fan_in(self, slot: int = 0) -> int:
        if self.kind == "lstm":
            return self.slot_shapes()[slot][0]
        return self.in_size * self.receptive_field

    def param_count(self) -> int:
        return sum(r * c for r, c in self.slot_shapes())

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        allowed = {"name", "kind", "in", "out", "in_size", "out_size", "kernel"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown layer keys: {sorted(unknown)}")
        kernel = d.get("kernel", ())
        if isinstance(kernel, int):
            kernel = (kernel,)
        return cls(
            name=str(d.get("name", d["kind"])),
            kind=d["kind"],
            in_size=int(d.get("in_size", d.get("in"))),
            out_size=int(d.get("out_size", d.get("out"))),
            kernel=tuple(kernel),
        )


@dataclass(frozen=True)
class PseudoTaskLocation:
    index: int
    layer: str
    slot: int
    row: int
    col: int
    fan_in: int


def _tile_counts(spec: LayerSpec, m: int, n: int, policy: str) -> list[tuple[int, int]]:
    if policy not in ("strict", "truncate"):
        raise ConfigurationError(f"unknown overflow policy {policy!r}")
    counts = []
    for rows, cols in spec.slot_shapes():
        if policy == "strict" and (rows % m or cols % n):
            raise ConfigurationError(
                f"layer {spec.name!r}: matrix {rows}x{cols} is not divisible into {m}x{n} blocks"
            )
        counts.append((rows // m, cols // n))
    return counts


def _decompose(spec: LayerSpec, m: int, n: int, policy: str, start: int) -> list[PseudoTaskLocation]:
    out = []
    for slot, (p, q) in enumerate(_tile_counts(spec, m, n, policy)):
        fan_in = spec.fan_in(slot)
        for i in range(p):
            for j in range(q):
                out.append(PseudoTaskLocation(start + len(out), spec.name, slot, i, j, fan_in))
    return out


def decompose_dense(spec: LayerSpec, m: int, n: int, policy: str = "strict", start: int = 0):
    if spec.kind != "dense":
        raise ConfigurationError(f"{spec.name}: expected dense layer, got {spec.kind}")
    return _decompose(spec, m, n, policy, start)


def decompose_conv(spec: LayerSpec, m: int, n: int, policy: str = "strict", start: int = 0):
    if spec.kind not in ("conv1d", "conv2d"):
        raise ConfigurationError(f"{spec.name}: expected conv layer, got {spec.kind}")
    return _decompose(spec, m, n, policy, start)


def decompose_lstm(spec: LayerSpec, m: int, n: int, policy: str = "strict", start: int = 0):
    if spec.kind != "lstm":
        raise ConfigurationError(f"{spec.name}: expected lstm layer, got {spec.kind}")
    return _decompose(spec, m, n, policy, start)


def decompose_layer(spec: LayerSpec, m: int, n: int, policy: str = "strict", start: int = 0):
    return _decompose(spec, m, n, policy, start)


def block_count(spec: LayerSpec, m: int, n: int, policy: str = "strict") -> int:
    return sum(p * q for p, q in _tile_counts(spec, m, n, policy))


def decompose_architecture(
    layers: Sequence[LayerSpec],
    m: int,
    n: int,
    policy: str = "strict",
    reserve_adapters: bool = True,
    start: int = 0,
) -> list[PseudoTaskLocation]:
    """Locations for every layer in order, skipping the first and last layer
    when ``reserve_adapters`` is set."""
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ConfigurationError("layer names must be unique within an architecture")
    body = layers[1:-1] if reserve_adapters else layers
    locs: list[PseudoTaskLocation] = []
    for spec in body:
        locs.extend(_decompose(spec, m, n, policy, start + len(locs)))
    return locs


# ---------------------------------------------------------------- tensors <-> blocks


def _slot_matrices(spec: LayerSpec, params) -> list[np.ndarray]:
    if spec.kind == "lstm":
        inp, rec = np.asarray(params["input"]), np.asarray(params["recurrent"])
        return [inp[g] for g in range(4)] + [rec[g] for g in range(4)]
    w = np.asarray(params)
    if spec.kind == "dense":
        return [w]
    return list(w.reshape((-1,) + w.shape[-2:]))


def layer_shape(spec: LayerSpec):
    if spec.kind == "dense":
        return (spec.in_size, spec.out_size)
    if spec.kind == "lstm":
        return {
            "input": (4, spec.in_size, spec.out_size),
            "recurrent": (4, spec.out_size, spec.out_size),
        }
    return spec.kernel + (spec.in_size, spec.out_size)


def extract_blocks(
    spec: LayerSpec, params, locations: Iterable[PseudoTaskLocation], m: int, n: int
) -> dict[int, np.ndarray]:
    """Blocks of one layer's tensor(s), keyed by global location index."""
    mats = _slot_matrices(spec, params)
    out = {}
    for loc in locations:
        if loc.layer != spec.name:
            continue
        r, c = loc.row * m, loc.col * n
        out[loc.index] = mats[loc.slot][r : r + m, c : c + n].copy()
    return out


def assemble_layer(
    spec: LayerSpec,
    locations: Sequence[PseudoTaskLocation],
    blocks: Mapping[int, np.ndarray],
    m: int,
    n: int,
    fill=None,
):
    """Inverse of :func:`extract_blocks`.

    Every location of ``spec`` must have exactly one block. Entries not covered
    by any block (truncated edges) come from ``fill`` or are zero.
    """
    own = [loc for loc in locations if loc.layer == spec.name]
    seen = set()
    for loc in own:
        key = (loc.slot, loc.row, loc.col)
        if key in seen:
            raise IntegrityError(f"{spec.name}: duplicate block at {key}")
        seen.add(key)
        if loc.index not in blocks:
            raise IntegrityError(f"{spec.name}: missing block for location {loc.index}")
    expected = block_count(spec, m, n, policy="truncate")
    if len(own) != expected:
        raise IntegrityError(f"{spec.name}: expected {expected} blocks, got {len(own)}")

    shape = layer_shape(spec)
    if spec.kind == "lstm":
        if fill is None:
            out = {k: np.zeros(s) for k, s in shape.items()}
        else:
            out = {k: np.array(fill[k], dtype=float) for k in shape}
        mats = [out["input"][g] for g in range(4)] + [out["recurrent"][g] for g in range(4)]
    else:
        out = np.zeros(shape) if fill is None else np.array(fill, dtype=float)
        mats = [out] if spec.kind == "dense" else list(out.reshape((-1,) + out.shape[-2:]))
    for loc in own:
        b = np.asarray(blocks[loc.index])
        if b.shape != (m, n):
            raise IntegrityError(f"location {loc.index}: block shape {b.shape} != {(m, n)}")
        r, c = loc.row * m, loc.col * n
        mats[loc.slot][r : r + m, c : c + n] = b
    return out
