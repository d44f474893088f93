"""Problem generators.

``build_synthetic`` makes random block-sparse affine contractions whose
weighted-max contraction factor is exactly ``alpha``. ``build_convdiff``
discretizes a convection-diffusion equation on the unit cube (zero
Dirichlet boundary, backward Euler in time) and returns the Jacobi
fixed-point map of each implicit step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import BlockVector, LinearMap


class DominanceError(ValueError):
    """The discretized operator is not strictly diagonally dominant."""


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 8
    block_size: int | tuple[int, ...] = 1
    alpha: float = 0.9
    density: float = 0.0
    seed: int = 0
    weights: tuple[float, ...] | None = None
    zero_constant: bool = False

    def sizes(self) -> tuple[int, ...]:
        if isinstance(self.block_size, int):
            return (self.block_size,) * self.n
        if len(self.block_size) != self.n:
            raise ValueError("need one block size per block")
        return tuple(self.block_size)


@dataclass
class SyntheticProblem:
    config: SyntheticConfig
    fmap: LinearMap
    matrix: np.ndarray
    constant: np.ndarray
    weights: tuple[float, ...]

    @property
    def fixed_point(self) -> BlockVector:
        m = self.matrix.shape[0]
        x = np.linalg.solve(np.eye(m) - self.matrix, self.constant)
        return BlockVector.from_flat(x, self.fmap.sizes)


def _pattern(n: int, density: float, rng: np.random.Generator) -> set[tuple[int, int]]:
    edges = set()
    if n > 1:
        for i in range(n):
            edges.add((i, (i + 1) % n))
            edges.add(((i + 1) % n, i))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in edges and rng.random() < density:
                edges.add((i, j))
                edges.add((j, i))
    return edges


def build_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticProblem:
    """Random affine map ``x -> M x + c`` with ``||M||_w = alpha`` exactly.

    Every row of ``M`` is rescaled so that its weighted absolute row sum
    equals ``alpha``; the coupling graph is a ring plus random chords.
    """
    if not (0 <= cfg.alpha < 1):
        raise ValueError(f"alpha must lie in [0, 1), got {cfg.alpha}")
    sizes = cfg.sizes()
    n = cfg.n
    w = tuple(cfg.weights) if cfg.weights is not None else (1.0,) * n
    if len(w) != n or min(w) <= 0:
        raise ValueError("need n positive weights")
    rng = np.random.default_rng(cfg.seed)
    offsets = np.cumsum([0, *sizes])
    m = int(offsets[-1])
    big = np.zeros((m, m))
    pairs = sorted(_pattern(n, cfg.density, rng))
    for i in range(n):
        if sizes[i] > 1:
            pairs.append((i, i))
    pairs.sort()
    for i, j in pairs:
        blk = rng.uniform(-1.0, 1.0, (sizes[i], sizes[j]))
        if i == j:
            np.fill_diagonal(blk, 0.0)
        big[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = blk
    col_w = np.repeat(w, sizes)
    for r in range(m):
        s = np.sum(np.abs(big[r]) * col_w) / col_w[r]
        if s > 0:
            big[r] *= cfg.alpha / s
    if cfg.zero_constant:
        c = np.zeros(m)
    else:
        c = rng.uniform(-1.0, 1.0, m)
    blocks = {(i, j): big[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]].copy()
              for i, j in pairs}
    c_blocks = [c[offsets[i]:offsets[i + 1]] for i in range(n)]
    return SyntheticProblem(cfg, LinearMap(blocks, c_blocks), big, c, w)


@dataclass(frozen=True)
class ConvDiffConfig:
    """Convection-diffusion on ``[0, 1]^dims``.

    ``grid_n`` counts interior points per axis (mesh width
    ``1 / (grid_n + 1)``); ``partition`` is either the number of processes or
    the number of sub-domains along each axis.
    """

    grid_n: int = 12
    dims: int = 3
    nu: float = 0.5
    a: tuple[float, ...] = (0.1, -0.2, 0.3)
    dt: float = 0.01
    time_steps: int = 5
    partition: int | tuple[int, ...] = 8
    convection: str = "upwind"

    def __post_init__(self):
        if self.grid_n < 3:
            raise ValueError("grid_n must be at least 3")
        if self.dims not in (1, 2, 3):
            raise ValueError("dims must be 1, 2 or 3")
        if self.convection not in ("upwind", "centered"):
            raise ValueError(f"unknown convection scheme {self.convection!r}")

    def process_grid(self) -> tuple[int, ...]:
        if isinstance(self.partition, int):
            return default_partition(self.partition, self.dims)
        if len(self.partition) != self.dims:
            raise ValueError("partition needs one entry per axis")
        return tuple(self.partition)


def default_partition(n: int, dims: int) -> tuple[int, ...]:
    """Split ``n`` into ``dims`` factors as evenly as possible (largest first)."""
    factors = [1] * dims
    rest = n
    p = 2
    primes = []
    while rest > 1:
        while rest % p == 0:
            primes.append(p)
            rest //= p
        p += 1
    for q in sorted(primes, reverse=True):
        k = min(range(dims), key=lambda d: factors[d])
        factors[k] *= q
    return tuple(sorted(factors, reverse=True))


@dataclass
class ConvDiffProblem:
    config: ConvDiffConfig
    A: sparse.csr_matrix
    source: np.ndarray
    block_index: list[np.ndarray]
    iteration_matrix: sparse.csr_matrix
    diagonal: np.ndarray
    _template: LinearMap = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.block_index)

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def rhs(self, u_prev: np.ndarray) -> np.ndarray:
        """Right-hand side of the implicit step that follows ``u_prev``."""
        return u_prev + self.config.dt * self.source

    def map_for(self, u_prev: np.ndarray) -> LinearMap:
        """Jacobi map ``U -> D^-1 (D - A) U + D^-1 B`` of the next step."""
        c = self.rhs(u_prev) / self.diagonal
        return self._template.with_constant(self.to_blocks(c).blocks)

    def to_blocks(self, flat: np.ndarray) -> BlockVector:
        return BlockVector([flat[idx] for idx in self.block_index])

    def to_flat(self, x) -> np.ndarray:
        out = np.empty(self.size)
        for idx, b in zip(self.block_index, x):
            out[idx] = b
        return out

    def zero(self) -> np.ndarray:
        return np.zeros(self.size)


def _second_difference(N: int) -> sparse.csr_matrix:
    return sparse.diags([-np.ones(N - 1), 2 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1],
                        format="csr")


def _first_difference(N: int, a: float, scheme: str) -> sparse.csr_matrix:
    if scheme == "centered":
        return sparse.diags([-np.ones(N - 1), np.ones(N - 1)], [-1, 1], format="csr") * (a / 2)
    if a >= 0:
        return sparse.diags([-np.ones(N - 1), np.ones(N)], [-1, 0], format="csr") * a
    return sparse.diags([np.ones(N), -np.ones(N - 1)], [0, 1], format="csr") * (-a)


def assemble(cfg: ConvDiffConfig) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Implicit-step matrix ``I + dt L`` and source values at interior points."""
    N = cfg.grid_n
    d = cfg.dims
    h = 1.0 / (N + 1)
    eye = sparse.identity(N, format="csr")
    a = tuple(cfg.a[:d]) + (0.0,) * max(0, d - len(cfg.a))
    L = sparse.csr_matrix((N ** d, N ** d))
    for axis in range(d):
        op = cfg.nu / h ** 2 * _second_difference(N) + _first_difference(N, a[axis], cfg.convection) / h
        factors = [eye] * d
        factors[axis] = op
        term = factors[0]
        for fct in factors[1:]:
            term = sparse.kron(term, fct, format="csr")
        L = L + term
    A = (sparse.identity(N ** d, format="csr") + cfg.dt * L).tocsr()
    coords = np.arange(1, N + 1) * h
    grids = np.meshgrid(*([coords] * d), indexing="ij")
    source = np.ones_like(grids[0])
    for g in grids:
        source = source * np.sin(g)
    return A, source.ravel()


def dominance_report(A: sparse.csr_matrix) -> tuple[float, int]:
    """Largest ratio ``sum_{j != i} |a_ij| / |a_ii|`` and the row where it occurs."""
    absA = abs(A).tocsr()
    diag = np.abs(A.diagonal())
    off = np.asarray(absA.sum(axis=1)).ravel() - diag
    ratio = off / diag
    row = int(np.argmax(ratio))
    return float(ratio[row]), row


def build_convdiff(cfg: ConvDiffConfig = ConvDiffConfig()) -> ConvDiffProblem:
    """Discretize and split; refuse operators that are not diagonally dominant."""
    A, source = assemble(cfg)
    worst, row = dominance_report(A)
    if not worst < 1.0:
        raise DominanceError(
            f"implicit operator is not strictly diagonally dominant: row {row} has "
            f"off-diagonal/diagonal ratio {worst:.4g} (grid_n={cfg.grid_n}, "
            f"convection={cfg.convection}); refine the grid or use upwinding")
    N = cfg.grid_n
    d = cfg.dims
    grid = cfg.process_grid()
    chunks = [np.array_split(np.arange(N), g) for g in grid]
    if any(len(c) == 0 for ch in chunks for c in ch):
        raise ValueError(f"process grid {grid} is finer than the mesh")
    shape = (N,) * d
    block_index = []
    for parts in itertools.product(*chunks):
        mesh = np.meshgrid(*parts, indexing="ij")
        idx = np.ravel_multi_index(tuple(m.ravel() for m in mesh), shape)
        block_index.append(np.sort(idx))
    diag = A.diagonal()
    dinv = sparse.diags(1.0 / diag)
    J = (dinv @ (sparse.diags(diag) - A)).tocsr()
    J.eliminate_zeros()
    blocks = {}
    for i, ri in enumerate(block_index):
        rows = J[ri]
        for j, cj in enumerate(block_index):
            sub = rows[:, cj]
            if sub.nnz:
                blocks[(i, j)] = sub.tocsr()
    c0 = [np.zeros(len(idx)) for idx in block_index]
    template = LinearMap(blocks, c0)
    return ConvDiffProblem(cfg, A, source, block_index, J, diag, template)


def export_triplets(matrix, fh) -> None:
    """Write ``row col value`` lines (0-based) for every stored entry."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def contraction_factor(iteration_matrix, iters: int = 200, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius of ``|M|``."""
    absM = abs(sparse.csr_matrix(iteration_matrix))
    v = np.random.default_rng(seed).random(absM.shape[0]) + 0.1
    lam = 0.0
    for _ in range(iters):
        w = absM @ v
        lam = float(np.max(w) / np.max(v))
        v = w / np.max(w)
    return lam


__all__ = [
    "SyntheticConfig", "SyntheticProblem", "build_synthetic",
    "ConvDiffConfig", "ConvDiffProblem", "build_convdiff", "assemble", "dominance_report",
    "default_partition", "export_triplets", "contraction_factor", "DominanceError",
]
