"""Bit-exact file formats binding the pipeline stages together.

Binary tensor container ("S5TN"): 4-byte magic, version u8, dtype u8
(0=f32, 1=f64, 2=u16 label maps), rank u8, reserved u8, then rank
little-endian u64 extents and the row-major little-endian payload.
Manifests are JSON lines; run configuration is a single JSON document
with unknown keys rejected.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

MAGIC = b"S5TN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint16"): 2}


def write_tensor_bytes(array: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ConfigError(f"unsupported tensor dtype {array.dtype}; use f32, f64, or u16")
    if array.ndim > 255:
        raise ConfigError("tensor rank exceeds container limit")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def read_tensor_bytes(buf: bytes, offset: int = 0):
    """Decode one tensor from `buf`; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise IngestionError(f"bad magic at offset {offset}: {buf[offset:offset + 4]!r}")
    version, code, rank, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise IngestionError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise IngestionError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 8)
    start = offset + 8 + 8 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise IngestionError("tensor payload truncated")
    array = np.frombuffer(buf[start:end], dtype=dtype).reshape(dims)
    return array, end


def save_tensor(path, array: np.ndarray):
    Path(path).write_bytes(write_tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing tensor file: {path}")
    array, _ = read_tensor_bytes(path.read_bytes())
    return array


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    id: str
    image: str
    mask: str | None
    dataset: str
    split: str


def write_manifest(path, records):
    lines = []
    for r in records:
        lines.append(json.dumps(
            {"id": r.id, "image": r.image, "mask": r.mask, "dataset": r.dataset, "split": r.split},
            sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing manifest: {path}")
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        rec = ManifestRecord(row["id"], row["image"], row.get("mask"), row["dataset"], row["split"])
        if rec.id in seen:
            raise IngestionError(f"{path}:{lineno}: duplicate patch id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def resolve(manifest_path, relative: str) -> Path:
    """Manifest paths are relative to the manifest file's directory."""
    return Path(manifest_path).parent / relative


# ---------------------------------------------------------------------------
# run configuration


def _check_keys(section: dict, allowed: dict, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")


@dataclass
class ModelSection:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    ffn_hidden: int = 256
    ffn_out: int = 64
    depth: int = 2
    heads: int = 4
    num_classes: int = 4
    alpha: float = 0.25
    moe_enabled: bool = False


@dataclass
class TrainSection:
    tau: float = 0.95
    lam: float = 1.0
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    steps: int = 1200
    eval_every: int = 200
    finetune_steps: int = 300
    schedule: str = "round_robin"


@dataclass
class CurationSection:
    clusters: int = 8
    budget: int = 800


@dataclass
class SynthSection:
    image_size: int = 64
    classes: int = 4
    labeled: int = 40
    val: int = 16
    unlabeled_clean: int = 800
    unlabeled_ood: int = 0
    styles: int = 1
    objects_min: int = 5
    objects_max: int = 9
    noise: float = 0.06
    ignore_label: int = 255


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    curation: CurationSection = field(default_factory=CurationSection)
    synth: SynthSection = field(default_factory=SynthSection)


_JSON_FIELD_NAMES = {"lam": "lambda"}  # documented file key for the unsupervised weight
_SECTIONS = {"model": ModelSection, "train": TrainSection, "curation": CurationSection, "synth": SynthSection}


def _load_section(cls, data: dict, where: str):
    fields = {f: _JSON_FIELD_NAMES.get(f, f) for f in cls.__dataclass_fields__}
    by_key = {v: k for k, v in fields.items()}
    _check_keys(data, by_key, where)
    kwargs = {by_key[k]: v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a RunConfig from JSON; unknown keys are rejected at every level."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(data, {"seed": None, **_SECTIONS}, "config root")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = int(data["seed"])
    for name, cls in _SECTIONS.items():
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"config section {name!r} must be an object")
            setattr(cfg, name, _load_section(cls, data[name], name))
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if leaf:
            setattr(getattr(cfg, section), leaf, value)
        else:
            setattr(cfg, section, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    m, t = cfg.model, cfg.train
    if m.image_size % m.patch_size:
        raise ConfigError(f"image_size {m.image_size} not divisible by patch_size {m.patch_size}")
    if m.embed_dim % m.heads:
        raise ConfigError(f"heads {m.heads} must divide embed_dim {m.embed_dim}")
    if not (0.0 <= m.alpha <= 1.0) or abs(m.alpha * m.ffn_out - round(m.alpha * m.ffn_out)) > 1e-9:
        raise ConfigError(f"alpha {m.alpha} must lie in [0,1] with alpha*ffn_out integral")
    if m.ffn_out != m.embed_dim:
        raise ConfigError("ffn_out must equal embed_dim (residual width)")
    if not (0.0 < t.tau <= 1.0):
        raise ConfigError(f"tau {t.tau} outside (0, 1]")
    if t.lam < 0:
        raise ConfigError(f"lambda {t.lam} must be nonnegative")
    if t.batch_labeled < 1 or t.batch_unlabeled < 1:
        raise ConfigError("batch sizes must be at least 1")
    if cfg.curation.budget < 0:
        raise ConfigError("curation budget must be nonnegative")
    if cfg.synth.classes < 2:
        raise ConfigError("synthetic corpus needs at least 2 classes")
