"""Binary checkpoint format: magic "BSWK", version, named float32 tensor
table (trainable / frozen / running-stat entries), optimizer state, RNG seed
record, and the epoch counter. save -> load -> save is byte-identical."""

import struct

import numpy as np

from .nets import ParamStore

MAGIC = b"BSWK"
VERSION = 1

_KIND_TRAINABLE = 0
_KIND_FROZEN = 1
_KIND_STAT = 2


class CheckpointError(ValueError):
    """Bad magic, wrong version, or a truncated/garbled file."""


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def name(self):
        return self.take(self.u16()).decode("utf-8")

    def array(self):
        ndim = self.u8()
        dims = tuple(self.u32() for _ in range(ndim))
        count = 1
        for d in dims:
            count *= d
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    def done(self):
        if self.pos != len(self.blob):
            raise CheckpointError(f"trailing data: {len(self.blob) - self.pos} extra bytes")


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(arr):
    arr = np.asarray(arr, dtype="<f4")
    out = struct.pack("<B", arr.ndim)
    for d in arr.shape:
        out += struct.pack("<I", d)
    return out + arr.tobytes()


def save_checkpoint(path, params: ParamStore, optimizer_kind="none", optimizer_state=None, seed=0, epoch=0, name_filter=None):
    """Serialize the store (optionally only names passing name_filter)."""
    optimizer_state = optimizer_state or {"step": 0, "m": {}, "v": {}}
    entries = []
    for name in params.names():
        if name_filter and not name_filter(name):
            continue
        t = params.tensors[name]
        entries.append((name, _KIND_FROZEN if t.frozen else _KIND_TRAINABLE, t.data))
    for name in sorted(params.stats):
        if name_filter and not name_filter(name):
            continue
        entries.append((name, _KIND_STAT, params.stats[name]))

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", int(epoch))
    blob += struct.pack("<Q", int(seed) & 0xFFFFFFFFFFFFFFFF)
    blob += struct.pack("<I", len(entries))
    for name, kind, arr in entries:
        blob += _pack_name(name)
        blob += struct.pack("<B", kind)
        blob += _pack_array(arr)

    kind_raw = optimizer_kind.encode("utf-8")
    blob += struct.pack("<H", len(kind_raw)) + kind_raw
    blob += struct.pack("<Q", int(optimizer_state.get("step", 0)))
    slots = []
    for which, table in ((0, optimizer_state.get("m", {})), (1, optimizer_state.get("v", {}))):
        for name in sorted(table):
            slots.append((name, which, table[name]))
    blob += struct.pack("<I", len(slots))
    for name, which, arr in slots:
        blob += _pack_name(name)
        blob += struct.pack("<B", which)
        blob += _pack_array(arr)

    with open(path, "wb") as f:
        f.write(bytes(blob))


class Checkpoint:
    def __init__(self, epoch, seed, tensors, kinds, stats, optimizer_kind, optimizer_state):
        self.epoch = epoch
        self.seed = seed
        self.tensors = tensors  # name -> np.ndarray
        self.kinds = kinds  # name -> kind flag
        self.stats = stats  # name -> np.ndarray
        self.optimizer_kind = optimizer_kind
        self.optimizer_state = optimizer_state

    def frozen(self, name):
        return self.kinds.get(name) == _KIND_FROZEN

    def build_params(self) -> ParamStore:
        params = ParamStore()
        for name, arr in self.tensors.items():
            params.add(name, arr, frozen=self.frozen(name))
        for name, arr in self.stats.items():
            params.add_stat(name, arr)
        return params

    def merge_into(self, params: ParamStore, prefix, frozen=True):
        """Copy entries under `prefix` into an existing store."""
        for name, arr in self.tensors.items():
            if name.startswith(prefix):
                params.add(name, arr, frozen=frozen)
        for name, arr in self.stats.items():
            if name.startswith(prefix):
                params.add_stat(name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    epoch = r.u32()
    seed = r.u64()
    tensors, kinds, stats = {}, {}, {}
    for _ in range(r.u32()):
        name = r.name()
        kind = r.u8()
        arr = r.array()
        if kind == _KIND_STAT:
            stats[name] = arr
        elif kind in (_KIND_TRAINABLE, _KIND_FROZEN):
            tensors[name] = arr
            kinds[name] = kind
        else:
            raise CheckpointError(f"unknown tensor kind {kind} for {name!r}")
    optimizer_kind = r.take(r.u16()).decode("utf-8")
    step = r.u64()
    state = {"step": step, "m": {}, "v": {}}
    for _ in range(r.u32()):
        name = r.name()
        which = r.u8()
        arr = r.array()
        state["m" if which == 0 else "v"][name] = arr
    r.done()
    return Checkpoint(epoch, seed, tensors, kinds, stats, optimizer_kind, state)
