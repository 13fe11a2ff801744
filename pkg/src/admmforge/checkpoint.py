"""Single-file model checkpoints with dense/sparse/quantized payloads.

Layout: magic, format version, JSON manifest, length-prefixed named
sections, trailing CRC32 over everything before it. Sparse weights store
the support as zlib-compressed byte gaps (escape 0xFF advances 255
positions without emitting) plus raw float values; quantized weights
store the level table plus one index byte per stored weight. Loads are
bit-exact round trips of the saved parameters, masks, and level tables.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, InputError, VersionError
from .finalize import PruneMask
from .models import LayerSpec, Network, build_from_specs
from .projections import (Cardinality, ColumnGroup, ConstraintSpec, LevelGrid,
                          Levels)

MAGIC = b"AMFC"
FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def encode_gaps(indices: np.ndarray) -> bytes:
    """Delta-encode sorted flat indices as bytes; 0xFF = skip 255, no emit."""
    out = bytearray()
    prev = -1
    for idx in indices:
        gap = int(idx) - prev - 1
        while gap >= 255:
            out.append(255)
            gap -= 255
        out.append(gap)
        prev = int(idx)
    return bytes(out)


def decode_gaps(blob: bytes) -> np.ndarray:
    out = []
    pos = -1
    skip = 0
    for b in blob:
        if b == 255:
            skip += 255
            continue
        pos += skip + b + 1
        skip = 0
        out.append(pos)
    return np.asarray(out, dtype=np.int64)


def _spec_to_dict(spec: ConstraintSpec) -> dict:
    if isinstance(spec, Cardinality):
        return {"kind": "cardinality", "alpha": spec.alpha}
    if isinstance(spec, ColumnGroup):
        return {"kind": "column_group", "kept_columns": spec.kept_columns}
    if isinstance(spec, Levels):
        return {"kind": "levels", "values": list(spec.values)}
    if isinstance(spec, LevelGrid):
        return {"kind": "level_grid", "bit_width": spec.bit_width,
                "include_zero": spec.include_zero}
    raise InputError(f"cannot serialize constraint {type(spec).__name__}")


def _spec_from_dict(d: dict) -> ConstraintSpec:
    kind = d["kind"]
    if kind == "cardinality":
        return Cardinality(alpha=d["alpha"])
    if kind == "column_group":
        return ColumnGroup(kept_columns=d["kept_columns"])
    if kind == "levels":
        return Levels(values=tuple(d["values"]))
    if kind == "level_grid":
        return LevelGrid(bit_width=d["bit_width"], include_zero=d["include_zero"])
    raise FormatError(f"unknown constraint kind {kind!r}")


@dataclass
class CheckpointBundle:
    net: Network
    manifest: dict
    mask: PruneMask | None = None
    levels: dict[str, Levels] = field(default_factory=dict)
    constraints: dict[str, ConstraintSpec] = field(default_factory=dict)

    @property
    def stored_bytes(self) -> int:
        return self.manifest.get("total_stored_bytes", 0)


def _dense_payload(arr: np.ndarray) -> bytes:
    return arr.astype(np.float32, copy=False).tobytes()


def _sparse_payload(arr: np.ndarray, keep: np.ndarray) -> bytes:
    flat_keep = keep.ravel()
    idx = np.flatnonzero(flat_keep)
    gaps = zlib.compress(encode_gaps(idx), level=6)
    values = arr.ravel()[idx].astype(np.float32).tobytes()
    return struct.pack("<QI", idx.size, len(gaps)) + gaps + values


def _quant_payload(arr: np.ndarray, levels: Levels,
                   keep: np.ndarray | None) -> bytes:
    lv32 = levels.as_array(np.float32)
    if lv32.size > 255:
        raise InputError("more than 255 levels cannot be byte-indexed")
    flat = arr.ravel()
    if keep is None:
        idx_positions = np.arange(flat.size)
        gaps = b""
    else:
        idx_positions = np.flatnonzero(keep.ravel())
        gaps = zlib.compress(encode_gaps(idx_positions), level=6)
    vals = flat[idx_positions].astype(np.float32)
    codes = np.clip(np.searchsorted(lv32, vals), 0, lv32.size - 1)
    if (lv32[codes] != vals).any():
        raise InputError("quantized payload: values not on the level grid")
    head = struct.pack("<QIH", int(idx_positions.size), len(gaps), lv32.size)
    return head + gaps + lv32.tobytes() + codes.astype(np.uint8).tobytes()


def save_checkpoint(path, net: Network, *, mask: PruneMask | None = None,
                    levels: dict[str, Levels] | None = None,
                    constraints: dict[str, ConstraintSpec] | None = None,
                    meta: dict | None = None, config: dict | None = None):
    """Write the model; per-layer payload kind picked from mask/levels."""
    levels = levels or {}
    masks = mask.masks if mask else {}
    sections: list[tuple[str, bytes]] = []
    layer_info = {}
    for name, arr in net.state_arrays().items():
        layer, kind = name.rsplit(".", 1)
        raw = arr.size * 4
        if kind == "weight" and layer in levels:
            keep = ~masks[layer] if layer in masks else None
            payload = _quant_payload(arr, levels[layer], keep)
            ptype = "sparse_quant" if keep is not None else "quant"
            m = len(levels[layer].values)
            conceptual_bits = int(np.ceil(np.log2(m))) if m > 1 else 1
        elif kind == "weight" and layer in masks:
            payload = _sparse_payload(arr, ~masks[layer])
            ptype, conceptual_bits = "sparse", 32
        else:
            payload = _dense_payload(arr)
            ptype, conceptual_bits = "dense", 32
        sections.append((name, payload))
        layer_info[name] = {"payload": ptype, "shape": list(arr.shape),
                            "raw_bytes": raw, "stored_bytes": len(payload),
                            "bits_per_weight": conceptual_bits}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": getattr(net, "model_name", "net"),
        "seed": net.seed,
        "layer_specs": [s.to_dict() for s in net.specs],
        "layers": layer_info,
        "constraints": {n: _spec_to_dict(s) for n, s in (constraints or {}).items()},
        "levels": {n: list(lv.values) for n, lv in levels.items()},
        "masked_layers": sorted(masks),
        "total_stored_bytes": sum(len(p) for _, p in sections),
        "config_hash": config_hash(config or {}),
        "meta": meta or {},
    }
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", FORMAT_VERSION)
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    blob += struct.pack("<I", len(mbytes)) + mbytes
    blob += struct.pack("<I", len(sections))
    for name, payload in sections:
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 10:
        raise FormatError(f"{path}: too short to be a checkpoint")
    crc_stored = struct.unpack("<I", buf[-4:])[0]
    crc_actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise CorruptionError(f"{path}: CRC mismatch "
                              f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})")
    rd = _Reader(buf[:-4], path)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack("<H", rd.take(2, "version"))[0]
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version} unsupported "
                           f"(reader supports {FORMAT_VERSION})")
    mlen = struct.unpack("<I", rd.take(4, "manifest length"))[0]
    manifest = json.loads(rd.take(mlen, "manifest"))
    nsections = struct.unpack("<I", rd.take(4, "section count"))[0]
    arrays: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for _ in range(nsections):
        nlen = struct.unpack("<H", rd.take(2, "name length"))[0]
        name = rd.take(nlen, "name").decode()
        plen = struct.unpack("<Q", rd.take(8, "payload length"))[0]
        payload = rd.take(plen, f"payload of {name}")
        info = manifest["layers"][name]
        shape = tuple(info["shape"])
        numel = int(np.prod(shape))
        ptype = info["payload"]
        if ptype == "dense":
            arr = np.frombuffer(payload, dtype=np.float32, count=numel).reshape(shape)
        elif ptype == "sparse":
            nnz, glen = struct.unpack_from("<QI", payload)
            off = 12
            idx = decode_gaps(zlib.decompress(payload[off:off + glen]))
            if idx.size != nnz:
                raise CorruptionError(f"{path}: {name}: index count mismatch")
            vals = np.frombuffer(payload, dtype=np.float32,
                                 count=nnz, offset=off + glen)
            flat = np.zeros(numel, dtype=np.float32)
            flat[idx] = vals
            arr = flat.reshape(shape)
            keep = np.zeros(numel, dtype=bool)
            keep[idx] = True
            masks[name.rsplit(".", 1)[0]] = ~keep.reshape(shape)
        elif ptype in ("quant", "sparse_quant"):
            nstored, glen, m = struct.unpack_from("<QIH", payload)
            off = 14
            if ptype == "sparse_quant":
                idx = decode_gaps(zlib.decompress(payload[off:off + glen]))
            else:
                idx = np.arange(numel)
            off += glen
            lv = np.frombuffer(payload, dtype=np.float32, count=m, offset=off)
            off += 4 * m
            codes = np.frombuffer(payload, dtype=np.uint8, count=nstored, offset=off)
            flat = np.zeros(numel, dtype=np.float32)
            flat[idx] = lv[codes]
            arr = flat.reshape(shape)
            if ptype == "sparse_quant":
                keep = np.zeros(numel, dtype=bool)
                keep[idx] = True
                masks[name.rsplit(".", 1)[0]] = ~keep.reshape(shape)
        else:
            raise FormatError(f"{path}: unknown payload type {ptype!r}")
        arrays[name] = arr
    specs = [LayerSpec.from_dict(d) for d in manifest["layer_specs"]]
    net = build_from_specs(specs, seed=manifest.get("seed", 0))
    net.load_state(arrays)
    levels = {n: Levels(values=tuple(v)) for n, v in manifest.get("levels", {}).items()}
    constraints = {n: _spec_from_dict(d)
                   for n, d in manifest.get("constraints", {}).items()}
    return CheckpointBundle(net=net, manifest=manifest,
                            mask=PruneMask(masks) if masks else None,
                            levels=levels, constraints=constraints)
