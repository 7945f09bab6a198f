"""Compressed sparse row matrices and recursive diffusion-power evaluation.

Dense graph signals are plain 2-D ``float64`` numpy arrays throughout the
package; only transition matrices and Laplacians are stored sparse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

__all__ = [
    "SparseMatrix",
    "spmm",
    "diffusion_powers",
    "transpose",
    "spmm_calls",
    "reset_spmm_calls",
    "write_triplets",
    "read_triplets",
]

# Product counter backing the O(K|E|) evaluation contract.
_spmm_total = 0


def spmm_calls() -> int:
    """Number of :func:`spmm` products performed since the last reset."""
    return _spmm_total


def reset_spmm_calls() -> None:
    global _spmm_total
    _spmm_total = 0


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Immutable CSR matrix with 64-bit values.

    ``col_indices`` are strictly increasing within a row and no explicit
    zeros are stored.  Build instances with :meth:`from_triplets` or
    :meth:`from_dense`; the raw constructor trusts its inputs.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _row_ids: np.ndarray = field(init=False, repr=False)
    _kernel: scipy.sparse.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.diff(self.row_offsets)
        object.__setattr__(self, "_row_ids", np.repeat(np.arange(self.n_rows), counts))
        for arr in (self.row_offsets, self.col_indices, self.values):
            arr.setflags(write=False)
        # Product kernel only; storage and every other operation stay here.
        kernel = scipy.sparse.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=(self.n_rows, self.n_cols)
        )
        object.__setattr__(self, "_kernel", kernel)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[self.n_rows])

    @classmethod
    def from_triplets(cls, n_rows, n_cols, rows, cols, values) -> SparseMatrix:
        """Build from coordinate triplets.  Duplicates are summed and zeros dropped."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(values)):
            raise ValueError("triplet arrays must have equal length")
        if len(rows) and (rows.min() < 0 or rows.max() >= n_rows):
            raise ValueError(f"row index out of range for {n_rows} rows")
        if len(cols) and (cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError(f"column index out of range for {n_cols} columns")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows):
            start = np.ones(len(rows), dtype=bool)
            start[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            seg = np.flatnonzero(start)
            values = np.add.reduceat(values, seg)
            rows, cols = rows[seg], cols[seg]
        keep = values != 0.0
        rows, cols, values = rows[keep], cols[keep], values[keep]
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=offsets[1:])
        return cls(int(n_rows), int(n_cols), offsets, cols.copy(), values.copy())

    @classmethod
    def from_dense(cls, a) -> SparseMatrix:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {a.shape}")
        rows, cols = np.nonzero(a)
        return cls.from_triplets(a.shape[0], a.shape[1], rows, cols, a[rows, cols])

    @classmethod
    def identity(cls, n: int) -> SparseMatrix:
        idx = np.arange(n)
        return cls.from_triplets(n, n, idx, idx, np.ones(n))

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._row_ids.copy(), self.col_indices.copy(), self.values.copy()

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self._row_ids, self.col_indices] = self.values
        return out

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.shape))
        on_diag = self._row_ids == self.col_indices
        d[self._row_ids[on_diag]] = self.values[on_diag]
        return d

    def row_sums(self) -> np.ndarray:
        return np.bincount(self._row_ids, weights=self.values, minlength=self.n_rows).astype(np.float64)

    def scale_rows(self, s) -> SparseMatrix:
        """Return ``diag(s) @ self``."""
        s = np.asarray(s, dtype=np.float64)
        return SparseMatrix.from_triplets(
            self.n_rows, self.n_cols, self._row_ids, self.col_indices, self.values * s[self._row_ids]
        )

    def scale_cols(self, s) -> SparseMatrix:
        """Return ``self @ diag(s)``."""
        s = np.asarray(s, dtype=np.float64)
        return SparseMatrix.from_triplets(
            self.n_rows, self.n_cols, self._row_ids, self.col_indices, self.values * s[self.col_indices]
        )

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        t = transpose(self)
        if not np.array_equal(t.row_offsets, self.row_offsets) or not np.array_equal(
            t.col_indices, self.col_indices
        ):
            return False
        return bool(np.all(np.abs(t.values - self.values) <= tol))

    def __matmul__(self, x):
        return spmm(self, x)

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def spmm(a: SparseMatrix, x) -> np.ndarray:
    """Sparse-dense product ``a @ x`` for a 2-D (or 1-D) dense ``x``.

    Summation within an output row runs in stored column order (CSR row
    loop), so results are bitwise reproducible.
    """
    global _spmm_total
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != a.n_cols:
        raise ValueError(f"dimension mismatch: sparse {a.shape} @ dense {x.shape}")
    _spmm_total += 1
    out = np.asarray(a._kernel @ x)
    return out[:, 0] if vector else out


def diffusion_powers(p: SparseMatrix, x, k_max: int) -> list[np.ndarray]:
    """Return ``[x, p x, p^2 x, ..., p^(k_max-1) x]`` using ``k_max - 1`` products."""
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if p.n_rows != p.n_cols:
        raise ValueError(f"transition matrix must be square, got {p.shape}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != p.n_cols:
        raise ValueError(f"dimension mismatch: sparse {p.shape} @ dense {x.shape}")
    out = [x]
    for _ in range(k_max - 1):
        out.append(spmm(p, out[-1]))
    return out


def transpose(a: SparseMatrix) -> SparseMatrix:
    return SparseMatrix.from_triplets(a.n_cols, a.n_rows, a.col_indices, a._row_ids, a.values)


def write_triplets(path, a: SparseMatrix) -> None:
    """Write ``row,col,value`` records with a header line."""
    rows, cols, vals = a.triplets()
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(rows, cols, vals):
            fh.write(f"{r},{c},{float(v)!r}\n")


def read_triplets(path, n_rows: int, n_cols: int) -> SparseMatrix:
    rows, cols, vals = [], [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "row,col,value":
            raise ValueError(f"{path}:1: expected header 'row,col,value', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                rows.append(int(parts[0]))
                cols.append(int(parts[1]))
                vals.append(float(parts[2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return SparseMatrix.from_triplets(n_rows, n_cols, rows, cols, vals)
