"""Binary checkpoints.

Layout::

    b"DMRL" | u16 version | u32 header length | header JSON (utf-8)
    | 32-byte sha256 of the header | float32 little-endian tensors

The header lists tensor names and shapes in payload order, the module kind,
free-form metadata (architecture, schedule), a hash of the run config and a
sha256 of the payload.  Values are stored at 32-bit precision, so a round
trip reproduces float64 parameters to within 2**-24 relative error.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMRL"
VERSION = 1
KINDS = ("denoiser", "encoder")


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save(path, kind: str, tensors: dict, meta: dict | None = None, config: dict | None = None) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    arrays = [(name, np.ascontiguousarray(np.asarray(v, dtype="<f4"))) for name, v in tensors.items()]
    payload = b"".join(a.tobytes() for _, a in arrays)
    header = {
        "kind": kind,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
        "config_hash": config_hash(config or {}),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(hashlib.sha256(hbytes).digest())
        fh.write(payload)
    return path


def read_header(path) -> dict:
    return _read(path, header_only=True)[0]


def load(path, kind: str | None = None):
    """Return ``(tensors, header)``; tensors are float64 arrays."""
    return _read(path, kind=kind)


def _read(path, kind=None, header_only=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 10
    hbytes = raw[start:start + hlen]
    digest = raw[start + hlen:start + hlen + 32]
    if hashlib.sha256(hbytes).digest() != digest:
        raise CheckpointError(f"{path}: header hash mismatch")
    header = json.loads(hbytes)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    if header_only:
        return header, None
    payload = raw[start + hlen + 32:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch")
    tensors, off = {}, 0
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        tensors[entry["name"]] = a.astype(np.float64)
        off += 4 * n
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return tensors, header


# --- typed helpers --------------------------------------------------------------

LORA_PREFIX = "lora:"


def save_denoiser(path, model, schedule, config: dict | None = None) -> Path:
    from dataclasses import asdict

    tensors = dict(model.params.items())
    lora = None
    if model.adapters:
        first = next(iter(model.adapters.values()))
        lora = {"rank": first.rank, "alpha": first.alpha, "targets": list(model.adapters)}
        tensors.update({LORA_PREFIX + k: v for k, v in model.adapters.tensors().items()})
    meta = {"denoiser": asdict(model.config), "schedule": schedule.meta(), "lora": lora}
    return save(path, "denoiser", tensors, meta, config)


def load_denoiser(path):
    """Return ``(model, schedule)`` rebuilt from a denoiser checkpoint."""
    from .diffusion import Denoiser, DenoiserConfig, make_schedule
    from .nncore import LoraAdapter, LoraSet, ParamStore

    tensors, header = load(path, kind="denoiser")
    meta = header["meta"]
    cfg = DenoiserConfig(**meta["denoiser"])
    params = ParamStore()
    for name, v in tensors.items():
        if not name.startswith(LORA_PREFIX):
            params.add(name, v)
    model = Denoiser(cfg, params)
    expected = set(Denoiser.create(cfg, 0).params.names())
    if set(params.names()) != expected:
        raise CheckpointError(f"{path}: parameter set does not match the denoiser architecture")
    if meta["lora"]:
        lo = meta["lora"]
        model.adapters = LoraSet(
            (t, LoraAdapter(t, tensors[f"{LORA_PREFIX}{t}.lora_A"], tensors[f"{LORA_PREFIX}{t}.lora_B"], lo["alpha"]))
            for t in lo["targets"]
        )
    sm = meta["schedule"]
    return model, make_schedule(sm["T"], sm["kind"])


def save_encoder(path, enc, role: str, config: dict | None = None) -> Path:
    from dataclasses import asdict

    meta = {"encoder": asdict(enc.config), "role": role}
    return save(path, "encoder", dict(enc.params.items()), meta, config)


def load_encoder(path, role: str | None = None):
    from .nncore import ParamStore
    from .reward import DualEncoder, EncoderConfig

    tensors, header = load(path, kind="encoder")
    meta = header["meta"]
    if role is not None and meta["role"] != role:
        raise CheckpointError(f"{path}: expected the {role} encoder, found {meta['role']}")
    params = ParamStore()
    for name, v in tensors.items():
        params.add(name, v)
    return DualEncoder(EncoderConfig(**meta["encoder"]), params)
