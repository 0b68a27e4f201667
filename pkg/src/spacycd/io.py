"""On-disk formats: the ``.spcy`` tensor container, JSON configs and manifests.

Tensor container layout (all integers little-endian)::

    b"SPCY" | u32 version (=1) | u32 dtype (1=float32, 2=float64) | u32 ndim
    | ndim x u64 dims | row-major little-endian payload
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import __version__

MAGIC = b"SPCY"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}
MAX_NDIM = 32

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class ConfigError(ValueError):
    """A configuration document failed validation."""


# ---------------------------------------------------------------- tensors


def encode_header(shape, dtype) -> bytes:
    dtype = np.dtype(dtype)
    if dtype not in _CODE_OF:
        raise FormatError(f"unsupported dtype {dtype}")
    return MAGIC + struct.pack("<III", FORMAT_VERSION, _CODE_OF[dtype], len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def write_tensor(path, tensor) -> None:
    """Write a float32/float64 array (ints and bools are stored as float64)."""
    arr = np.asarray(tensor)
    if arr.dtype not in _CODE_OF:
        arr = arr.astype(np.float64)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(encode_header(arr.shape, arr.dtype))
        fh.write(payload.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor, validating the header before touching the payload."""
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        head = fh.read(16)
        if len(head) < 4 or head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic")
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header")
        version, code, ndim = struct.unpack("<III", head[4:16])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        if code not in DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise FormatError(f"{path}: implausible ndim {ndim}")
        raw_dims = fh.read(8 * ndim)
        if len(raw_dims) != 8 * ndim:
            raise FormatError(f"{path}: truncated header")
        dims = struct.unpack(f"<{ndim}Q", raw_dims)
        dtype = DTYPE_CODES[code]
        count = 1
        for n in dims:
            count *= n
        nbytes = count * dtype.itemsize
        if nbytes > 2**62:
            raise FormatError(f"{path}: dims overflow")
        if size - (16 + 8 * ndim) != nbytes:
            raise FormatError(f"{path}: payload has {size - 16 - 8 * ndim} bytes, expected {nbytes}")
        data = np.frombuffer(fh.read(nbytes), dtype=dtype)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    try:
        from ._fnv import fnv1a64_array
    except ImportError:  # pragma: no cover - numba missing
        h = FNV_OFFSET
        for b in data:
            h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
        return h
    return int(fnv1a64_array(np.frombuffer(data, dtype=np.uint8)))


def fingerprint(array) -> str:
    """FNV-1a digest of an array's little-endian float64 bytes, as hex."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    return f"{fnv1a64(arr.tobytes()):016x}"


# ------------------------------------------------------------------- JSON


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _coerce(name: str, value, default, annotation: str):
    """Type-check ``value`` against the default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) or "float" in annotation and not isinstance(default, (tuple, list)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int) and "tuple" not in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def build_config(cls, doc: dict):
    """Instantiate dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if value is None:
            kwargs[name] = None
            continue
        kwargs[name] = _coerce(name, value, default, str(f.type))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, kind: str | None = None):
    """Load a ``TrainConfig`` (default) or ``GenConfig`` from JSON.

    The document may carry ``"kind": "train" | "generate"``; omitted keys
    take their defaults, unknown keys are rejected.
    """
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    doc = dict(doc)
    kind = doc.pop("kind", kind or "train")
    if kind == "train":
        from .trainer import TrainConfig

        return build_config(TrainConfig, doc)
    if kind in ("generate", "gen"):
        from .synthgen import GenConfig

        return build_config(GenConfig, doc)
    raise ConfigError(f"unknown config kind {kind!r}")


# --------------------------------------------------------------- datasets

DATASET_FILES = ("observations", "latents", "graph", "factors", "centers", "gammas", "node_variate")


def save_dataset(truth, out_dir) -> dict:
    """Persist a ``GroundTruth`` plus ``config.json`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inventory = []
    for name in DATASET_FILES + (("weights",) if truth.weights is not None else ()):
        write_tensor(out / f"{name}.spcy", getattr(truth, name))
        inventory.append(f"{name}.spcy")
    write_json(out / "config.json", {"kind": "generate", **truth.config.to_dict()})
    inventory.append("config.json")
    manifest = make_manifest(
        config=truth.config.to_dict(),
        inventory=inventory,
        seed=truth.config.seed,
        fingerprint_of=truth.observations,
        extra={"kind": "dataset"},
    )
    write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(path) -> dict:
    """Read a dataset directory into a dict of arrays (plus ``config``)."""
    root = Path(path)
    if not (root / "observations.spcy").exists():
        raise FileNotFoundError(f"{root} holds no observations.spcy")
    out = {"observations": read_tensor(root / "observations.spcy")}
    for name in DATASET_FILES[1:] + ("weights",):
        p = root / f"{name}.spcy"
        if p.exists():
            out[name] = read_tensor(p)
    if (root / "config.json").exists():
        out["config"] = read_json(root / "config.json")
    return out


def make_manifest(config: dict, inventory, seed, fingerprint_of=None, extra=None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "software_version": __version__,
        "config": config,
        "seed": seed,
        "inventory": sorted(inventory),
    }
    if fingerprint_of is not None:
        doc["dataset_fingerprint"] = fingerprint(fingerprint_of)
    if extra:
        doc.update(extra)
    return doc


# ------------------------------------------------------------- checkpoints
#
# A checkpoint directory holds one tensor file per key:
#   param.<name>.spcy   every learnable tensor, e.g. param.graph.logits.spcy
#   counters.spcy       float64 [step, epoch, outer, lambda_al, c, h_prev, best_val]
#   residual_scale.spcy running residual scale of the nonlinear SCM
#   rng.spcy            PCG64 state, see _rng_to_array
#   penalty.spcy        (n_outer, 4) rows of (outer, h, c, lambda_al)

COUNTER_KEYS = ("step", "epoch", "outer", "lambda_al", "c", "h_prev", "best_val")


def _split128(x: int) -> list[float]:
    return [float((x >> (16 * i)) & 0xFFFF) for i in range(8)]


def _join128(chunks) -> int:
    return sum(int(c) << (16 * i) for i, c in enumerate(chunks))


def _rng_to_array(state: dict) -> np.ndarray:
    """PCG64 state as 18 exactly representable floats."""
    if state.get("bit_generator") != "PCG64":
        raise FormatError("only PCG64 generator state can be stored")
    s = state["state"]
    return np.array(_split128(s["state"]) + _split128(s["inc"]) + [float(state["has_uint32"]), float(state["uinteger"])])


def _array_to_rng(arr) -> dict:
    arr = np.asarray(arr)
    if arr.shape != (18,):
        raise FormatError("rng tensor must have 18 entries")
    return {
        "bit_generator": "PCG64",
        "state": {"state": _join128(arr[:8]), "inc": _join128(arr[8:16])},
        "has_uint32": int(arr[16]),
        "uinteger": int(arr[17]),
    }


def save_checkpoint(state, out_dir, params=None) -> list[str]:
    """Write a ``RunState`` (or ``params`` in its place) as tensor files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, value in (state.params if params is None else params).items():
        write_tensor(out / f"param.{name}.spcy", value)
        written.append(f"param.{name}.spcy")
    counters = [float(getattr(state, k)) for k in COUNTER_KEYS]
    write_tensor(out / "counters.spcy", np.array(counters))
    written.append("counters.spcy")
    if state.residual_scale is not None:
        write_tensor(out / "residual_scale.spcy", np.asarray(state.residual_scale, dtype=np.float64))
        written.append("residual_scale.spcy")
    if state.rng_state is not None:
        write_tensor(out / "rng.spcy", _rng_to_array(state.rng_state))
        written.append("rng.spcy")
    pen = np.asarray(state.penalty_history, dtype=np.float64).reshape(-1, 4)
    write_tensor(out / "penalty.spcy", pen)
    written.append("penalty.spcy")
    return written


def load_checkpoint(path):
    """Read a checkpoint directory back into a ``RunState``."""
    from .trainer import RunState

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a checkpoint directory")
    params = {}
    for f in sorted(root.glob("param.*.spcy")):
        params[f.name[len("param.") : -len(".spcy")]] = read_tensor(f)
    if not params:
        raise FormatError(f"{root} holds no parameter tensors")
    counters = read_tensor(root / "counters.spcy")
    if counters.shape != (len(COUNTER_KEYS),):
        raise FormatError("counters tensor has the wrong length")
    c = dict(zip(COUNTER_KEYS, counters.tolist()))
    state = RunState(params=params, lambda_al=c["lambda_al"], c=c["c"], step=int(c["step"]),
                     epoch=int(c["epoch"]), outer=int(c["outer"]), h_prev=c["h_prev"], best_val=c["best_val"])
    if (root / "residual_scale.spcy").exists():
        state.residual_scale = read_tensor(root / "residual_scale.spcy")
    if (root / "rng.spcy").exists():
        state.rng_state = _array_to_rng(read_tensor(root / "rng.spcy"))
    if (root / "penalty.spcy").exists():
        state.penalty_history = [tuple(r) for r in read_tensor(root / "penalty.spcy").tolist()]
    return state
