"""Block vectors, norms, fixed-point maps and residual evaluation.

Every block norm is the max-abs norm inside the block. Global norms are
either L_p over the block norms or a weighted maximum of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse


class StructureError(ValueError):
    """Raised when block structures do not conform."""


class UnsupportedMapError(TypeError):
    """Raised when an operation needs the linear form of a nonlinear map."""


def _as_block(a) -> np.ndarray:
    b = np.array(a, dtype=np.float64, ndmin=1)
    if b.ndim != 1 or b.size == 0:
        raise StructureError("blocks must be non-empty 1-D arrays")
    b.setflags(write=False)
    return b


class BlockVector:
    """An immutable vector split into ``n`` one-dimensional blocks."""

    __slots__ = ("blocks",)

    def __init__(self, blocks: Sequence):
        blocks = tuple(_as_block(b) for b in blocks)
        if not blocks:
            raise StructureError("a block vector needs at least one block")
        self.blocks = blocks

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "BlockVector":
        return cls([np.zeros(d) for d in sizes])

    @classmethod
    def from_flat(cls, x, sizes: Sequence[int]) -> "BlockVector":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (sum(sizes),):
            raise StructureError(f"flat vector of shape {x.shape} does not match sizes {list(sizes)}")
        offsets = np.cumsum([0, *sizes])
        return cls([x[offsets[i]:offsets[i + 1]] for i in range(len(sizes))])

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def replace(self, i: int, block) -> "BlockVector":
        blocks = list(self.blocks)
        blocks[i] = block
        return BlockVector(blocks)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    def __sub__(self, other: "BlockVector") -> "BlockVector":
        _check_sizes(self.sizes, other.sizes)
        return BlockVector([a - b for a, b in zip(self.blocks, other.blocks)])

    def __add__(self, other: "BlockVector") -> "BlockVector":
        _check_sizes(self.sizes, other.sizes)
        return BlockVector([a + b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, s: float) -> "BlockVector":
        return BlockVector([s * b for b in self.blocks])

    __rmul__ = __mul__

    def bitwise_equal(self, other: "BlockVector") -> bool:
        return self.sizes == other.sizes and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.blocks, other.blocks))

    def __repr__(self):
        return f"BlockVector({[b.tolist() for b in self.blocks]})"


def _check_sizes(a, b):
    if tuple(a) != tuple(b):
        raise StructureError(f"block sizes {tuple(a)} and {tuple(b)} differ")


def _blocks_of(x) -> Sequence[np.ndarray]:
    return x.blocks if isinstance(x, BlockVector) else x


@dataclass(frozen=True)
class NormSpec:
    """Global norm built on per-block max-abs norms.

    ``kind`` is ``"lp"`` (uses ``p``) or ``"maxw"`` (uses ``weights``).
    The unweighted maximum norm is ``maxw`` with unit weights.
    """

    kind: str = "maxw"
    p: float = 2.0
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == "lp":
            if not (1.0 <= self.p < math.inf):
                raise ValueError(f"L_p norm needs 1 <= p < inf, got {self.p}")
        elif self.kind == "maxw":
            if self.weights is not None:
                object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
                if not all(w > 0 for w in self.weights):
                    raise ValueError("weighted max norm needs positive weights")
        else:
            raise ValueError(f"unknown norm kind {self.kind!r}")

    @classmethod
    def lp(cls, p: float) -> "NormSpec":
        return cls("lp", p=float(p))

    @classmethod
    def max_weighted(cls, weights: Sequence[float] | None = None) -> "NormSpec":
        return cls("maxw", weights=None if weights is None else tuple(weights))

    def weight_vector(self, n: int) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0,) * n
        if len(self.weights) != n:
            raise StructureError(f"norm has {len(self.weights)} weights for {n} blocks")
        return self.weights

    def contribution(self, i: int, block_norm_value: float) -> float:
        """Per-block scalar that a reduction combines into the global norm."""
        if self.kind == "maxw" and self.weights is not None:
            return block_norm_value / self.weights[i]
        return block_norm_value

    @property
    def reduce_op(self) -> str:
        return "max" if self.kind == "maxw" else "sum-p"

    def combine(self, contributions: Sequence[float]) -> float:
        if self.kind == "maxw":
            out = 0.0
            for c in contributions:
                if c > out:
                    out = c
            return out
        p = self.p
        s = 0.0
        for c in contributions:
            s += c ** p
        return s ** (1.0 / p)

    def label(self) -> str:
        if self.kind == "lp":
            return f"lp:{self.p:g}"
        if self.weights is None:
            return "max"
        return "maxw:" + ",".join(f"{w:g}" for w in self.weights)


def block_norm(a: np.ndarray) -> float:
    """Max-abs norm of one block."""
    return float(np.max(np.abs(a)))


def norm(x, spec: NormSpec) -> float:
    blocks = _blocks_of(x)
    if spec.kind == "maxw":
        spec.weight_vector(len(blocks))
    return spec.combine([spec.contribution(i, block_norm(b)) for i, b in enumerate(blocks)])


class FixedPointMap:
    """A map ``f = (f_1, ..., f_n)`` evaluated one block at a time.

    Subclasses implement :meth:`eval_block` and :meth:`dependency`.
    ``eval_block`` must be deterministic and must only read the blocks
    listed by ``dependency(i)``.
    """

    sizes: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.sizes)

    def eval_block(self, i: int, y) -> np.ndarray:
        raise NotImplementedError

    def dependency(self, i: int) -> tuple[int, ...]:
        raise NotImplementedError

    def linear_form(self):
        """Return ``(blocks, c)`` for affine maps, else ``None``.

        ``blocks`` maps ``(i, j)`` to the matrix block ``M_ij``; ``c`` is a
        list of arrays.
        """
        return None

    def dependents(self, j: int) -> tuple[int, ...]:
        """Blocks ``i != j`` whose update reads block ``j``."""
        return tuple(i for i in range(self.n) if i != j and j in self.dependency(i))

    def apply(self, x) -> BlockVector:
        blocks = _blocks_of(x)
        _check_sizes(tuple(b.size for b in blocks), self.sizes)
        return BlockVector([self.eval_block(i, blocks) for i in range(self.n)])


class LinearMap(FixedPointMap):
    """Affine map ``f(x) = M x + c`` with a block-sparse ``M``.

    Parameters
    ----------
    blocks : dict
        ``(i, j) -> M_ij``; dense arrays or scipy sparse matrices of shape
        ``(d_i, d_j)``. Missing pairs are zero.
    c : sequence of arrays
        Constant term, one array per block.
    """

    def __init__(self, blocks: dict, c: Sequence):
        self.c = [_as_block(ci) for ci in c]
        self.sizes = tuple(ci.size for ci in self.c)
        n = len(self.sizes)
        self.blocks = {}
        rows: list[list[tuple[int, object]]] = [[] for _ in range(n)]
        for (i, j), m in sorted(blocks.items()):
            if not (0 <= i < n and 0 <= j < n):
                raise StructureError(f"block index {(i, j)} out of range")
            if m.shape != (self.sizes[i], self.sizes[j]):
                raise StructureError(f"block {(i, j)} has shape {m.shape}, "
                                     f"expected {(self.sizes[i], self.sizes[j])}")
            if sparse.issparse(m):
                m = sparse.csr_matrix(m, dtype=np.float64)
            else:
                m = np.asarray(m, dtype=np.float64)
            self.blocks[(i, j)] = m
            rows[i].append((j, m))
        # one matrix per block row, acting on the concatenated blocks it reads
        self._rows = [_merge_row(r, self.sizes[i]) for i, r in enumerate(rows)]
        self._deps = tuple(tuple(sorted({i, *(j for j, _ in rows[i])})) for i in range(n))
        self._dependents = tuple(
            tuple(i for i in range(n) if i != j and j in self._deps[i]) for j in range(n))

    def eval_block(self, i, y):
        cols, m = self._rows[i]
        if m is None:
            return self.c[i]
        if len(cols) == 1:
            v = y[cols[0]]
        else:
            v = np.concatenate([y[j] for j in cols])
        return self.c[i] + m @ v

    def dependency(self, i):
        return self._deps[i]

    def dependents(self, j):
        return self._dependents[j]

    def linear_form(self):
        return self.blocks, self.c

    def with_constant(self, c: Sequence) -> "LinearMap":
        """Same matrix, new constant term."""
        out = object.__new__(LinearMap)
        out.__dict__.update(self.__dict__)
        out.c = [_as_block(ci) for ci in c]
        _check_sizes(tuple(ci.size for ci in out.c), self.sizes)
        return out


def _merge_row(row, d_i):
    if not row:
        return (), None
    cols = tuple(j for j, _ in row)
    mats = [m for _, m in row]
    if len(mats) == 1:
        return cols, mats[0]
    if any(sparse.issparse(m) for m in mats):
        return cols, sparse.hstack(mats, format="csr")
    return cols, np.hstack(mats)


def residual(f: FixedPointMap, xbar, spec: NormSpec) -> float:
    """``||f(xbar) - xbar||`` under ``spec``; each block of ``f`` is evaluated once."""
    blocks = _blocks_of(xbar)
    _check_sizes(tuple(b.size for b in blocks), f.sizes)
    return norm([f.eval_block(i, blocks) - blocks[i] for i in range(f.n)], spec)


def mixed_residual(f: FixedPointMap, ybar: Sequence, spec: NormSpec) -> tuple[float, BlockVector]:
    """Residual of the per-process evaluation ``g(ybar) = (f_1(ybar^1), ..., f_n(ybar^n))``.

    Returns ``(||g(ybar) - xbar||, xbar)`` where ``xbar`` is assembled from
    the diagonal entries ``ybar[i][i]``.
    """
    if len(ybar) != f.n:
        raise StructureError(f"expected {f.n} recorded vectors, got {len(ybar)}")
    views = [_blocks_of(y) for y in ybar]
    for v in views:
        _check_sizes(tuple(b.size for b in v), f.sizes)
    xbar = [views[i][i] for i in range(f.n)]
    diff = [f.eval_block(i, views[i]) - xbar[i] for i in range(f.n)]
    return norm(diff, spec), BlockVector(xbar)


@dataclass(frozen=True)
class DeltaCoeffs:
    """Block sensitivity coefficients and their maximum row sum."""

    delta: np.ndarray = field(repr=False)
    deltaF: float

    def __post_init__(self):
        if np.any(self.delta < 0):
            raise ValueError("sensitivity coefficients must be nonnegative")


def _max_abs_row_sum(m) -> float:
    if sparse.issparse(m):
        if m.nnz == 0:
            return 0.0
        return float(np.max(np.asarray(abs(m).sum(axis=1)).ravel()))
    return float(np.max(np.sum(np.abs(m), axis=1))) if m.size else 0.0


def delta_coeffs(f: FixedPointMap) -> DeltaCoeffs:
    """Sensitivity of block ``i`` of ``f`` to a perturbation of block ``j``.

    For affine maps the coefficient is the induced max-abs norm of ``M_ij``,
    i.e. its largest absolute row sum.
    """
    form = f.linear_form()
    if form is None:
        raise UnsupportedMapError(
            f"{type(f).__name__} has no linear form; supply DeltaCoeffs explicitly")
    blocks, _ = form
    n = f.n
    delta = np.zeros((n, n))
    for (i, j), m in blocks.items():
        delta[i, j] = _max_abs_row_sum(m)
    deltaF = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += delta[i, j]
        deltaF = max(deltaF, s)
    return DeltaCoeffs(delta, deltaF)


def adjusted_threshold(eps_prime: float, eta: int, w: Sequence[float]) -> float:
    """Local threshold that keeps the exact weighted-max residual below ``eps_prime``.

    Returns ``eps_prime / (1 + eta * min(w))``.
    """
    if not eps_prime > 0:
        raise ValueError(f"eps_prime must be positive, got {eps_prime}")
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if not w or min(w) <= 0:
        raise ValueError("weights must be positive")
    return eps_prime / (1 + eta * min(w))
