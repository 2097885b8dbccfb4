"""Binary checkpoint format.

Layout: 4-byte magic "UNF1", version u32 LE, entry count u32 LE, then per
entry: name length u16 LE, UTF-8 name, rank u8, one u64 LE per dimension,
and the float32 LE row-major payload. Entry names are namespaced:

    param.*    model parameters, in traversal order
    buffer.*   non-trainable state (batch-norm running statistics)
    adamw.*    optimizer first/second moments and step counts (m./v./t.)
    meta.*     run metadata and the model hyperparameters

Integer metadata is stored as float32 scalars, which is exact below 2**24;
the run seed is split into meta.seed = [high, low] halves at 2**24 so seeds
up to 2**48 survive. Saving, loading, and saving again produces an
identical file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .errors import CheckpointError
from .network import ModelConfig, UNetFormer
from .nn import Module
from .optim import AdamW

MAGIC = b"UNF1"
VERSION = 1

_PRESETS = ("full", "tiny")
_FLAG_KEYS = ("use_frh", "use_aux_head", "attention.cross_window_interaction",
              "attention.include_identity_term",
              "attention.relative_position_bias")
_INT_KEYS = ("num_classes", "input_channels", "attention.channels",
             "attention.window_size", "attention.num_heads",
             "attention.mlp_ratio")


@dataclass
class LoadReport:
    meta: dict
    skipped: list[str]
    missing: list[str]


def _meta_entries(meta: dict) -> list[tuple[str, np.ndarray]]:
    entries = []
    for key in sorted(meta):
        value = meta[key]
        if key == "seed":
            seed = int(value)
            if not 0 <= seed < 2 ** 48:
                raise CheckpointError(f"seed {seed} outside [0, 2**48)")
            arr = np.array([seed >> 24, seed & 0xFFFFFF], dtype=np.float32)
        else:
            value = float(value)
            if abs(value) >= 2 ** 24 and float(np.float32(value)) != value:
                raise CheckpointError(f"meta value {key}={value} not exact in float32")
            arr = np.array(value, dtype=np.float32)
        entries.append((f"meta.{key}", arr))
    return entries


def _decode_meta(name: str, arr: np.ndarray) -> tuple[str, object]:
    key = name[len("meta."):]
    if key == "seed":
        if arr.shape != (2,):
            raise CheckpointError(f"{name} must hold two halves, got shape {arr.shape}")
        return key, (int(arr[0]) << 24) | int(arr[1])
    value = float(arr.reshape(()))
    if key in _INT_KEYS or key in ("width_preset", "step", "epoch"):
        return key, int(value)
    if key in _FLAG_KEYS:
        return key, bool(value)
    return key, value


def _config_value(cfg: ModelConfig, key: str):
    if key.startswith("attention."):
        return getattr(cfg.attention, key[len("attention."):])
    return getattr(cfg, key)


def model_config_meta(cfg: ModelConfig) -> dict:
    meta = {"width_preset": _PRESETS.index(cfg.width_preset)}
    for key in _INT_KEYS:
        meta[key] = int(_config_value(cfg, key))
    for key in _FLAG_KEYS:
        meta[key] = int(_config_value(cfg, key))
    return meta


def model_config_from_meta(meta: dict) -> ModelConfig:
    try:
        preset_index = int(meta["width_preset"])
        values: dict[str, object] = {key: int(meta[key]) for key in _INT_KEYS}
        values.update({key: bool(meta[key]) for key in _FLAG_KEYS})
    except KeyError as e:
        raise CheckpointError(f"checkpoint metadata lacks {e.args[0]!r}") from e
    if not 0 <= preset_index < len(_PRESETS):
        raise CheckpointError(f"unknown width preset index {preset_index}")
    att = AttentionConfig(**{key[len("attention."):]: values[key]
                             for key in values if key.startswith("attention.")})
    return ModelConfig(num_classes=values["num_classes"], attention=att,
                       width_preset=_PRESETS[preset_index],
                       use_frh=values["use_frh"],
                       use_aux_head=values["use_aux_head"],
                       input_channels=values["input_channels"]).validate()


def _collect_entries(model: Module, optimizer: AdamW | None,
                     meta: dict) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    entries += [(f"buffer.{n}", b.data) for n, b in model.named_buffers()]
    if optimizer is not None:
        for name, _ in optimizer.params:
            entries.append((f"adamw.m.{name}", optimizer.m[name]))
        for name, _ in optimizer.params:
            entries.append((f"adamw.v.{name}", optimizer.v[name]))
        for name, _ in optimizer.params:
            entries.append((f"adamw.t.{name}",
                            np.array(optimizer.t[name], dtype=np.float32)))
    entries += _meta_entries(meta)
    return entries


def save_checkpoint(path, model: Module, optimizer: AdamW | None = None,
                    meta: dict | None = None) -> None:
    entries = _collect_entries(model, optimizer, dict(meta or {}))
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def read_entries(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into {name: float32 array}, validating the header
    before any payload is materialized."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    r = _Reader(buf, str(path))
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("name length")
        name = r.take(name_len, "name").decode("utf-8")
        if name in entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        rank = r.u8(f"rank of {name}")
        shape = tuple(r.u64(f"dimension of {name}") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if size > len(buf):
            raise CheckpointError(f"{path}: entry {name!r} claims {size} elements")
        payload = r.take(4 * size, f"payload of {name}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError(
            f"{path}: {len(buf) - r.pos} unexpected trailing bytes at {r.pos}")
    return entries


def load_checkpoint(path, model: Module, optimizer: AdamW | None = None,
                    partial: bool = False) -> LoadReport:
    """Restore model (and optionally optimizer) state from a file.

    Entry names that match nothing in the model raise CheckpointError
    unless `partial`, in which case they are skipped and reported; the same
    policy applies to model state missing from the file. Optimizer entries
    in the file are ignored when no optimizer is passed.
    """
    entries = read_entries(path)
    params = {f"param.{n}": p for n, p in model.named_parameters()}
    buffers = {f"buffer.{n}": b for n, b in model.named_buffers()}
    opt_keys: set[str] = set()
    if optimizer is not None:
        for n, _ in optimizer.params:
            opt_keys.update((f"adamw.m.{n}", f"adamw.v.{n}", f"adamw.t.{n}"))

    meta: dict = {}
    skipped: list[str] = []
    staged: list[tuple[str, np.ndarray]] = []
    for name, arr in entries.items():
        if name.startswith("meta."):
            key, value = _decode_meta(name, arr)
            meta[key] = value
        elif name in params or name in buffers or name in opt_keys:
            staged.append((name, arr))
        elif name.startswith("adamw.") and optimizer is None:
            continue
        elif partial:
            skipped.append(name)
        else:
            raise CheckpointError(f"{path}: entry {name!r} matches nothing in the "
                                  f"model (use partial loading to skip)")

    missing = [n for n in (*params, *buffers, *opt_keys) if n not in entries]
    if missing and not partial:
        raise CheckpointError(f"{path}: missing state for {missing[:4]}"
                              f"{'...' if len(missing) > 4 else ''}")

    for name, arr in staged:
        if name in params:
            target = params[name]
            if arr.shape != target.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                      f"model expects {target.shape}")
            target.data[...] = arr.astype(target.dtype)
        elif name in buffers:
            target = buffers[name]
            if arr.shape != target.data.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                      f"model expects {target.data.shape}")
            target.data[...] = arr.astype(target.data.dtype)
        else:
            kind, pname = name.split(".", 2)[1:]
            if kind == "m":
                slot = optimizer.m
            elif kind == "v":
                slot = optimizer.v
            else:
                optimizer.t[pname] = int(arr.reshape(()))
                continue
            if arr.shape != slot[pname].shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                      f"optimizer expects {slot[pname].shape}")
            slot[pname][...] = arr.astype(slot[pname].dtype)
    return LoadReport(meta=meta, skipped=sorted(skipped), missing=sorted(missing))


def load_model(path, partial: bool = False) -> tuple[UNetFormer, LoadReport]:
    """Build the model a checkpoint describes and load its weights."""
    entries = read_entries(path)
    meta = dict(_decode_meta(n, a) for n, a in entries.items()
                if n.startswith("meta."))
    model = UNetFormer(model_config_from_meta(meta))
    report = load_checkpoint(path, model, optimizer=None, partial=partial)
    return model, report


def load_encoder_weights(path, model: Module) -> int:
    """Copy only encoder parameters and buffers from a donor checkpoint.

    Everything else in the file is ignored; every encoder tensor of the
    model must be present with a matching shape. Returns the number of
    tensors loaded.
    """
    entries = read_entries(path)
    targets = [(f"param.{n}", p.data) for n, p in model.named_parameters()
               if n.startswith("encoder.")]
    targets += [(f"buffer.{n}", b.data) for n, b in model.named_buffers()
                if n.startswith("encoder.")]
    loaded = 0
    for name, dest in targets:
        if name not in entries:
            raise CheckpointError(f"{path}: no entry {name!r}; the file does "
                                  f"not hold matching encoder weights")
        arr = entries[name]
        if arr.shape != dest.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                  f"model expects {dest.shape}")
        dest[...] = arr.astype(dest.dtype)
        loaded += 1
    return loaded
