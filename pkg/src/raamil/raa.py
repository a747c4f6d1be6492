"""Region-affinity token refinement.

Each token in a patch's grid is mixed with its k-by-k neighborhood: the
squared feature distance to every neighbor, scaled by 1/dim, is mapped
through a tiny MLP to an affinity logit, softmaxed over the neighborhood,
and the affinity-weighted neighbor average is layer-normalized and blended
back through a scalar residual gate.  The gate starts at exactly zero, so
an untrained refiner is the identity map.

Windows are clipped at grid borders (no padding -- fabricated tokens would
pollute the affinity statistics) and by default include the center cell,
which keeps the aggregate well-defined even for k = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from raamil.autodiff import Graph, Node, NonFiniteError, ShapeError, forward
from raamil.bags import GridTokens
from raamil.rng import Stream


@dataclass
class RaaParams:
    """Learnable state of the refiner plus its structural settings."""

    w1: np.ndarray          # (1, hidden) affinity MLP input weights
    b1: np.ndarray          # (hidden,)
    w2: np.ndarray          # (hidden, 1) affinity MLP output weights
    b2: np.ndarray          # (1,)
    gamma: np.ndarray       # (1,) residual gate, initialized to exactly 0
    ln_scale: np.ndarray    # (dim,)
    ln_shift: np.ndarray    # (dim,)
    k: int = 3
    include_self: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"neighborhood side k must be odd and >= 1, got {self.k}")
        if self.w1.shape[0] != 1 or self.w2.shape[1] != 1 or \
                self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError(
                f"affinity MLP shapes inconsistent: {self.w1.shape} -> {self.w2.shape}")

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def dim(self) -> int:
        return self.ln_scale.shape[0]


def init_raa_params(dim: int, rng: Stream, hidden: int = 16, k: int = 3,
                    include_self: bool = True) -> RaaParams:
    """Fresh parameters: gate exactly 0, biases 0, weights ~ N(0, 1/fan_in)."""
    return RaaParams(
        w1=rng.normal_array((1, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal_array((hidden, 1)) / np.sqrt(hidden),
        b2=np.zeros(1),
        gamma=np.zeros(1),
        ln_scale=np.ones(dim),
        ln_shift=np.zeros(dim),
        k=k,
        include_self=include_self,
    )


@dataclass
class NeighborhoodIndex:
    """Valid neighbor cell ids per grid cell, window clipped at borders.

    `padded` carries the same ids in a rectangular (cells, max_degree)
    array (invalid slots point at cell 0) with `mask` marking validity,
    which is the layout the vectorized refiner consumes.
    """

    rows: int
    cols: int
    k: int
    include_self: bool
    neighbors: list[list[int]] = field(repr=False)
    padded: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols

    @property
    def max_degree(self) -> int:
        return self.padded.shape[1]


@lru_cache(maxsize=64)
def build_neighborhood(rows: int, cols: int, k: int = 3,
                       include_self: bool = True) -> NeighborhoodIndex:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"neighborhood side k must be odd and >= 1, got {k}")
    half = k // 2
    neighbors: list[list[int]] = []
    for r in range(rows):
        for c in range(cols):
            cell = []
            for dr in range(-half, half + 1):
                for dc in range(-half, half + 1):
                    if not include_self and dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        cell.append(rr * cols + cc)
            if not cell:
                raise ValueError(
                    f"cell ({r},{c}) has an empty neighborhood (k={k}, "
                    f"include_self={include_self})")
            neighbors.append(cell)
    max_deg = max(len(cell) for cell in neighbors)
    padded = np.zeros((rows * cols, max_deg), dtype=np.intp)
    mask = np.zeros((rows * cols, max_deg), dtype=bool)
    for i, cell in enumerate(neighbors):
        padded[i, :len(cell)] = cell
        mask[i, :len(cell)] = True
    return NeighborhoodIndex(rows=rows, cols=cols, k=k, include_self=include_self,
                             neighbors=neighbors, padded=padded, mask=mask)


def _bag_index(nbr: NeighborhoodIndex, num_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor ids/mask for `num_patches` stacked grids (rows never cross
    a patch boundary)."""
    cells = nbr.num_cells
    offsets = (np.arange(num_patches) * cells)[:, None, None]
    ids = (nbr.padded[None, :, :] + offsets).reshape(num_patches * cells, nbr.max_degree)
    mask = np.broadcast_to(nbr.mask, (num_patches, cells, nbr.max_degree))
    return ids, mask.reshape(num_patches * cells, nbr.max_degree)


def build_refiner(g: Graph, tokens: Node, params: dict[str, Node],
                  nbr: NeighborhoodIndex, num_patches: int,
                  ln_eps: float = 1e-5) -> Node:
    """Append the refinement subgraph; `tokens` is (P*cells, dim).

    `params` must hold nodes named w1, b1, w2, b2, gamma, ln_scale, ln_shift.
    Returns the refined (P*cells, dim) node.  Every op is row-local to one
    patch, so patch order cannot affect any patch's result.
    """
    m, dim = tokens.shape
    if m != num_patches * nbr.num_cells:
        raise ShapeError(
            f"token rows {m} != {num_patches} patches x {nbr.num_cells} cells")
    ids, mask = _bag_index(nbr, num_patches)
    deg = nbr.max_degree

    zj = g.gather(tokens, ids)                              # (M, deg, dim)
    zc = g.reshape(tokens, (m, 1, dim))
    diff = g.sub(zj, zc)
    dist = g.mean(g.mul(diff, diff), axis=2)                # (M, deg)

    flat = g.reshape(dist, (m * deg, 1))
    hidden = g.tanh(g.add(g.matmul(flat, params["w1"]), params["b1"]))
    logits = g.reshape(g.add(g.matmul(hidden, params["w2"]), params["b2"]), (m, deg))
    alpha = g.softmax(logits, axis=1, mask=mask)            # rows sum to 1

    weighted = g.mul(g.reshape(alpha, (m, deg, 1)), zj)
    agg = g.sum(weighted, axis=1)                           # (M, dim)
    normed = g.layernorm(agg, params["ln_scale"], params["ln_shift"], eps=ln_eps)
    update = g.mul(g.sub(normed, tokens), params["gamma"])
    return g.add(tokens, update)


def add_raa_params(g: Graph, params: RaaParams, prefix: str = "raa.") -> dict[str, Node]:
    names = ("w1", "b1", "w2", "b2", "gamma", "ln_scale", "ln_shift")
    return {name: g.param(prefix + name, getattr(params, name)) for name in names}


# ------------------------------------------------- eager inspection ops

def pairwise_neighbor_distances(grid: GridTokens, nbr: NeighborhoodIndex) -> dict:
    """{(i, j): mean squared feature distance / dim} for every j in N(i)."""
    if grid.rows != nbr.rows or grid.cols != nbr.cols:
        raise ShapeError(
            f"grid {grid.rows}x{grid.cols} does not match neighborhood "
            f"{nbr.rows}x{nbr.cols}")
    flat = grid.values.reshape(nbr.num_cells, grid.dim)
    out = {}
    for i, cell in enumerate(nbr.neighbors):
        diff = flat[cell] - flat[i]
        dists = np.mean(diff * diff, axis=1)
        for j, d in zip(cell, dists):
            out[(i, j)] = float(d)
    return out


def affinity_weights(distances: dict, params: RaaParams) -> dict:
    """Softmax over each neighborhood of the MLP-mapped distances."""
    by_center: dict[int, list[tuple[int, float]]] = {}
    for (i, j), d in distances.items():
        by_center.setdefault(i, []).append((j, d))
    out = {}
    for i, pairs in by_center.items():
        d = np.array([v for _, v in pairs])
        hidden = np.tanh(d[:, None] @ params.w1 + params.b1)
        logits = (hidden @ params.w2 + params.b2).reshape(-1)
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError(f"non-finite affinity logit at cell {i}")
        e = np.exp(logits - logits.max())
        alpha = e / e.sum()
        for (j, _), a in zip(pairs, alpha):
            out[(i, j)] = float(a)
    return out


def refine_tokens(grid: GridTokens, params: RaaParams) -> GridTokens:
    """Refine one patch grid; output shape always equals input shape."""
    nbr = build_neighborhood(grid.rows, grid.cols, params.k, params.include_self)
    g = Graph()
    tokens = g.input("tokens", (nbr.num_cells, grid.dim))
    nodes = add_raa_params(g, params)
    g.output("refined", build_refiner(g, tokens, nodes, nbr, 1, ln_eps=params.ln_eps))
    out = forward(g, {"tokens": grid.values.reshape(nbr.num_cells, grid.dim)})
    return GridTokens(out["refined"].reshape(grid.values.shape))
