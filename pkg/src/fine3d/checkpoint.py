"""Versioned little-endian checkpoint container.

Layout::

    b"FINECKPT" | u32 version | 32-byte sha256 of the model config JSON
    u32 len | run config JSON (utf-8)
    u32 n_params | per param: u16 name len, name, u8 ndim, u32 dims..., f64 data
    u32 n_banks  | per bank: u32 volume id, u64 len, bank stream
    optimiser    | u8 kind (0 SGD, 1 Adam), u32 n, f64 scalars[n],
                   u8 groups, per group one f64 buffer per param
    u32 len | rng state JSON
    u64 iteration | u64 n | f64 losses[n]
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import FormatError, MemoryBank
from .model import SegModel
from .training import SGD, Adam, TrainState

MAGIC = b"FINECKPT"
VERSION = 2
OPT_KINDS = ("sgd", "adam")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_digest(model_cfg: dict) -> bytes:
    return hashlib.sha256(canonical_json(model_cfg)).digest()


@dataclass
class Checkpoint:
    run_config: dict
    params: list  # [(name, ndarray)]
    banks: dict = field(default_factory=dict)
    optimizer: str = "sgd"
    opt_scalars: list = field(default_factory=list)  # SGD: momentum, nesterov; Adam: beta1, beta2, eps, t
    opt_buffers: list = field(default_factory=list)  # SGD: [buffers]; Adam: [m, v]
    rng_state: dict | None = None
    iteration: int = 0
    losses: list = field(default_factory=list)
    digest: bytes = b""

    @classmethod
    def capture(cls, model: SegModel, run_config: dict, opt: SGD | Adam | None,
                state: TrainState | None) -> "Checkpoint":
        params = [(n, p.data.copy()) for n, p in model.named_parameters()]
        if isinstance(opt, Adam):
            kind, scalars = "adam", [opt.beta1, opt.beta2, opt.eps, float(opt.t)]
            groups = [[a.copy() for a in opt.m], [a.copy() for a in opt.v]]
        elif opt is not None:
            kind, scalars = "sgd", [opt.momentum, float(opt.nesterov)]
            groups = [[b.copy() for b in opt.buffers]]
        else:
            kind, scalars, groups = "sgd", [0.0, 0.0], [[np.zeros_like(a) for _, a in params]]
        return cls(
            run_config=run_config,
            params=params,
            banks=dict(state.banks) if state is not None else {},
            optimizer=kind,
            opt_scalars=scalars,
            opt_buffers=groups,
            rng_state=state.rng.bit_generator.state if state is not None and state.rng is not None else None,
            iteration=state.iteration if state is not None else 0,
            losses=list(state.losses) if state is not None else [],
            digest=config_digest(run_config["model"]),
        )

    def restore(self, model: SegModel) -> tuple[SGD | Adam, TrainState]:
        named = list(model.named_parameters())
        if [n for n, _ in named] != [n for n, _ in self.params]:
            raise FormatError("checkpoint parameters do not match the model layout")
        for (_, p), (_, arr) in zip(named, self.params):
            if p.shape != arr.shape:
                raise FormatError(f"parameter shape {arr.shape} does not match model {p.shape}")
            p.data = arr.copy()
        if self.optimizer == "adam":
            b1, b2, eps, t = self.opt_scalars
            opt = Adam(model.parameters(), b1, b2, eps)
            opt.t = int(t)
            opt.m = [a.copy() for a in self.opt_buffers[0]]
            opt.v = [a.copy() for a in self.opt_buffers[1]]
        else:
            momentum, nesterov = self.opt_scalars
            opt = SGD(model.parameters(), momentum, bool(nesterov))
            opt.buffers = [b.copy() for b in self.opt_buffers[0]]
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        state = TrainState(self.iteration, list(self.losses), rng, dict(self.banks))
        return opt, state

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<I", VERSION))
        out.write(self.digest)
        _write_blob(out, canonical_json(self.run_config))
        out.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params:
            nm = name.encode()
            out.write(struct.pack("<H", len(nm)))
            out.write(nm)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(np.ascontiguousarray(arr, "<f8").tobytes())
        out.write(struct.pack("<I", len(self.banks)))
        for vid in sorted(self.banks):
            blob = self.banks[vid].to_bytes()
            out.write(struct.pack("<IQ", vid, len(blob)))
            out.write(blob)
        out.write(struct.pack("<BI", OPT_KINDS.index(self.optimizer), len(self.opt_scalars)))
        out.write(np.asarray(self.opt_scalars, "<f8").tobytes())
        out.write(struct.pack("<B", len(self.opt_buffers)))
        for group in self.opt_buffers:
            for b in group:
                out.write(np.ascontiguousarray(b, "<f8").tobytes())
        _write_blob(out, canonical_json(self.rng_state) if self.rng_state is not None else b"")
        out.write(struct.pack("<QQ", self.iteration, len(self.losses)))
        out.write(np.asarray(self.losses, "<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        r = _Reader(blob)
        if r.take(8) != MAGIC:
            raise FormatError("not a checkpoint (bad magic)")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        digest = r.take(32)
        run_config = json.loads(r.blob())
        if config_digest(run_config["model"]) != digest:
            raise FormatError("checkpoint config digest does not match its embedded config")
        (n,) = r.unpack("<I")
        params = []
        for _ in range(n):
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            params.append((name, np.frombuffer(r.take(8 * size), "<f8").reshape(shape).astype(np.float64)))
        (nb,) = r.unpack("<I")
        banks = {}
        for _ in range(nb):
            vid, ln = r.unpack("<IQ")
            banks[vid] = MemoryBank.from_bytes(r.take(ln))
        kind, ns = r.unpack("<BI")
        if kind >= len(OPT_KINDS):
            raise FormatError(f"unknown optimiser kind {kind}")
        scalars = np.frombuffer(r.take(8 * ns), "<f8").astype(np.float64).tolist()
        (ng,) = r.unpack("<B")
        groups = [[np.frombuffer(r.take(8 * a.size), "<f8").reshape(a.shape).astype(np.float64) for _, a in params]
                  for _ in range(ng)]
        if (kind, ns, ng) not in ((0, 2, 1), (1, 4, 2)):
            raise FormatError("optimiser section does not match its kind")
        rng_raw = r.blob()
        rng_state = json.loads(rng_raw) if rng_raw else None
        iteration, nl = r.unpack("<QQ")
        losses = np.frombuffer(r.take(8 * nl), "<f8").astype(np.float64).tolist()
        if not r.done():
            raise FormatError("trailing bytes after checkpoint")
        return cls(run_config, params, banks, OPT_KINDS[kind], scalars, groups, rng_state,
                   iteration, losses, digest)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _write_blob(out, data: bytes) -> None:
    out.write(struct.pack("<I", len(data)))
    out.write(data)


class _Reader:
    def __init__(self, blob: bytes):
        self.view, self.pos = memoryview(blob), 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.view):
            raise FormatError("truncated checkpoint")
        out = bytes(self.view[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def done(self) -> bool:
        return self.pos == len(self.view)
