"""Volume-token memory bank with seen-mask and warm-up masking.

A bank holds one ``[M * N_w, c]`` token matrix per memory stage of the
model plus a single seen flag per grid cell. Cells that no processed crop
has touched keep their initial values; they are hidden from attention and
receive no gradient.
"""
from __future__ import annotations

import io
import struct
from typing import Sequence

import numpy as np

from .geometry import IntersectionSet
from .tensor import Tensor, gather_rows, scatter_rows

BANK_MAGIC = b"FINEBANK"
BANK_VERSION = 1


class FormatError(ValueError):
    pass


class MemoryBank:
    def __init__(self, tokens: Sequence[Tensor], seen, n_w: int = 1, step: int = 0):
        self.tokens = list(tokens)
        self.seen = np.array(seen, dtype=bool)
        self.n_w = n_w
        self.step = step
        for t in self.tokens:
            if t.shape[0] != self.M * n_w:
                raise ValueError(f"bank tokens {t.shape} do not match M={self.M}, N_w={n_w}")

    @classmethod
    def fresh(cls, init_embeddings: Sequence[Tensor], M: int, n_w: int = 1) -> "MemoryBank":
        """New bank whose tokens are (detached) copies of the learned initialisation."""
        return cls([Tensor(e.data.copy()) for e in init_embeddings], np.zeros(M, dtype=bool), n_w)

    @property
    def M(self) -> int:
        return len(self.seen)

    def rows(self, cells: Sequence[int]) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        return (cells[:, None] * self.n_w + np.arange(self.n_w)[None, :]).reshape(-1)

    def gather_intersection(self, inter: IntersectionSet, stage: int = 0) -> Tensor:
        """Tokens of the intersecting cells in ascending cell order; marks them seen."""
        rows = self.rows(inter.cell_indices)
        self.seen[list(inter.cell_indices)] = True
        return gather_rows(self.tokens[stage], rows)

    def unseen_mask(self) -> np.ndarray:
        """True for every token row whose cell is still unseen."""
        return np.repeat(~self.seen, self.n_w)

    def activate(self, inter: IntersectionSet, init_embeddings: Sequence[Tensor]) -> None:
        """Mark the crop's cells seen; first-time cells take the live initial embedding.

        Substituting the parameter rows (rather than their stored copies) is
        what lets the initial embedding of a cell learn from the first crop
        that touches it.
        """
        cells = [c for c in inter.cell_indices if not self.seen[c]]
        if cells:
            rows = self.rows(cells)
            for s, emb in enumerate(init_embeddings):
                self.tokens[s] = scatter_rows(self.tokens[s], rows, gather_rows(emb, rows))
        self.seen[list(inter.cell_indices)] = True

    def detach(self) -> "MemoryBank":
        return MemoryBank([t.detach() for t in self.tokens], self.seen.copy(), self.n_w, self.step)

    def copy(self) -> "MemoryBank":
        return MemoryBank(list(self.tokens), self.seen.copy(), self.n_w, self.step)

    # serialisation ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(BANK_MAGIC)
        buf.write(struct.pack("<IIIIQ", BANK_VERSION, self.M, self.n_w, len(self.tokens), self.step))
        buf.write(np.packbits(self.seen, bitorder="little").tobytes())
        for t in self.tokens:
            buf.write(struct.pack("<II", *t.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, expect_M: int | None = None,
                   expect_dims: Sequence[int] | None = None) -> "MemoryBank":
        """Inverse of :meth:`to_bytes`; raises :class:`FormatError` before building any state."""
        view = memoryview(blob)
        head = 8 + struct.calcsize("<IIIIQ")
        if len(view) < head or bytes(view[:8]) != BANK_MAGIC:
            raise FormatError("not a memory-bank stream (bad magic or truncated header)")
        version, M, n_w, n_stages, step = struct.unpack_from("<IIIIQ", view, 8)
        if version != BANK_VERSION:
            raise FormatError(f"unsupported bank version {version}")
        if expect_M is not None and M != expect_M:
            raise FormatError(f"bank has M={M} cells but the model expects M={expect_M}")
        pos = head
        nbytes = (M + 7) // 8
        if len(view) < pos + nbytes:
            raise FormatError("truncated bank stream (seen flags)")
        seen = np.unpackbits(np.frombuffer(view[pos:pos + nbytes], np.uint8), bitorder="little")[:M].astype(bool)
        pos += nbytes
        tokens = []
        for s in range(n_stages):
            if len(view) < pos + 8:
                raise FormatError("truncated bank stream (token header)")
            rows, c = struct.unpack_from("<II", view, pos)
            pos += 8
            if rows != M * n_w:
                raise FormatError(f"token block {s} has {rows} rows, expected {M * n_w}")
            if expect_dims is not None and (s >= len(expect_dims) or c != expect_dims[s]):
                raise FormatError(f"token block {s} has width {c}, expected {list(expect_dims)}")
            size = rows * c * 8
            if len(view) < pos + size:
                raise FormatError("truncated bank stream (token payload)")
            tokens.append(Tensor(np.frombuffer(view[pos:pos + size], "<f8").reshape(rows, c).astype(np.float64)))
            pos += size
        if expect_dims is not None and len(expect_dims) != n_stages:
            raise FormatError(f"bank has {n_stages} token blocks, expected {len(expect_dims)}")
        if pos != len(view):
            raise FormatError("trailing bytes after bank stream")
        return cls(tokens, seen, n_w, step)
