'''Topology encodings for scatter graphs.

GNE: per-node rows of the low-frequency eigenvectors of the normalized
Laplacian. EPE: per-edge visit frequency of a weight-biased random walk,
available both as a seeded simulation and in closed form (omega_ij / sum omega).
'''
import logging
import math
from fractions import Fraction
from typing import Iterable, List, NamedTuple, Tuple, Union

import numpy as np

from .asc_graph import ScatterGraph
from .exceptions import (AsymmetricMatrixException, ConvergenceException,
                         DegenerateGraphException, ValidationException)
from .schema import SpectralDecomposition

logger = logging.getLogger(__name__)

MAX_EIGEN_SIZE = 64
OFF_DIAGONAL_TOL = 1e-12
SYMMETRY_TOL = 1e-12
DEGENERACY_GAP = 1e-6
SIGN_TIE_TOL = 1e-10


#############
# Laplacian #
#############

def laplacian_from_adjacency(adjacency: np.ndarray) -> np.ndarray:
    '''L = I - D^-1/2 A D^-1/2 for a symmetric adjacency A with no self-loops.'''
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationException(f"Adjacency must be square, got {a.shape}.")
    if a.shape[0] < 2:
        raise DegenerateGraphException(f"The Laplacian needs K >= 2 nodes, got {a.shape[0]}.")
    degree = a.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    return np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def normalized_laplacian(g: ScatterGraph, weighted: bool = False) -> np.ndarray:
    '''Normalized Laplacian of the fully connected topology.

    Args:
        g (ScatterGraph): the graph
        weighted (bool): use the kernel weights as adjacency instead of the unweighted topology

    Returns:
        np.ndarray: symmetric K x K matrix; with the unweighted topology every degree is K - 1
    '''
    if g.num_nodes < 2:
        raise DegenerateGraphException(f"The Laplacian needs K >= 2 nodes, got {g.num_nodes}.")
    if weighted:
        adjacency = g.weight_matrix()
    else:
        adjacency = np.ones((g.num_nodes, g.num_nodes)) - np.eye(g.num_nodes)
    return laplacian_from_adjacency(adjacency)


##############
# Eigensolve #
##############

def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    for col in range(vectors.shape[1]):
        v = vectors[:, col]
        magnitude = np.abs(v)
        first = int(np.argmax(magnitude >= magnitude.max() - SIGN_TIE_TOL))
        if v[first] < 0:
            vectors[:, col] = -v
    return vectors


def eigendecompose_symmetric(m: np.ndarray, max_size: int = MAX_EIGEN_SIZE,
                             max_sweeps: int = 100) -> SpectralDecomposition:
    '''Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Sweeps over every (p, q) pair until the largest off-diagonal magnitude is at
    most 1e-12 (scaled by the Frobenius norm when that exceeds 1).

    Args:
        m (np.ndarray): K x K symmetric matrix
        max_size (int): largest accepted K
        max_sweeps (int): sweeps before ConvergenceException

    Returns:
        SpectralDecomposition: ascending eigenvalues, orthonormal sign-fixed eigenvector columns
    '''
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationException(f"Expected a square matrix, got {a.shape}.")
    n = a.shape[0]
    if n > max_size:
        raise ValidationException(f"Matrix size {n} exceeds the eigensolver cap {max_size}.")
    if not np.all(np.isfinite(a)):
        raise ValidationException("Matrix has non-finite entries.")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise AsymmetricMatrixException()
    a = 0.5 * (a + a.T)

    v = np.eye(n)
    tol = OFF_DIAGONAL_TOL * max(1.0, float(np.linalg.norm(a)))
    off = ~np.eye(n, dtype=bool)

    for sweep in range(max_sweeps + 1):
        if n < 2 or np.max(np.abs(a[off])) <= tol:
            break
        if sweep == max_sweeps:
            raise ConvergenceException(f"Jacobi did not converge after {max_sweeps} sweeps.")
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return SpectralDecomposition(values[order], _fix_signs(v[:, order]))


#######
# GNE #
#######

def degenerate_mask(eigenvalues: np.ndarray, gap: float = DEGENERACY_GAP) -> np.ndarray:
    '''True for eigenvalues within gap of another eigenvalue.'''
    diffs = np.abs(eigenvalues[:, None] - eigenvalues[None, :])
    np.fill_diagonal(diffs, np.inf)
    return diffs.min(axis=1) <= gap if eigenvalues.size > 1 else np.zeros(eigenvalues.size, dtype=bool)


def sign_ambiguous_mask(vectors: np.ndarray, tol: float = SIGN_TIE_TOL) -> np.ndarray:
    '''True for columns whose largest positive and largest negative entries tie in magnitude.

    Such a column and its negation can be carried onto each other by relabeling nodes, so
    no node-order-free sign choice exists for it.
    '''
    if vectors.size == 0:
        return np.zeros(vectors.shape[1], dtype=bool)
    top_positive = np.max(np.where(vectors > 0, vectors, 0.0), axis=0)
    top_negative = np.max(np.where(vectors < 0, -vectors, 0.0), axis=0)
    return (top_negative > tol) & (np.abs(top_positive - top_negative) <= tol)


def gne(g: ScatterGraph, n: int, weighted: bool = False, drop_degenerate: bool = False) -> np.ndarray:
    '''Global node encoding: row k holds node k's entries of the n lowest eigenvectors.

    Args:
        g (ScatterGraph): the graph
        n (int): number of eigenvectors; columns past K are zero
        weighted (bool): build the Laplacian from the kernel weights
        drop_degenerate (bool): zero columns whose eigenvalue is repeated or whose sign
                                cannot be fixed without reference to node order

    Returns:
        np.ndarray: K x n matrix
    '''
    if n < 1:
        raise ValidationException(f"GNE needs n >= 1, got {n}.")
    decomposition = eigendecompose_symmetric(normalized_laplacian(g, weighted=weighted))
    k = g.num_nodes
    used = min(n, k)
    out = np.zeros((k, n))
    out[:, :used] = decomposition.eigenvectors[:, :used]
    if drop_degenerate:
        vectors = decomposition.eigenvectors[:, :used]
        dropped = degenerate_mask(decomposition.eigenvalues)[:used] | sign_ambiguous_mask(vectors)
        out[:, :used][:, dropped] = 0.0
    return out


#######
# EPE #
#######

def stationary_distribution(g: ScatterGraph) -> np.ndarray:
    '''pi_i = d_i / 2W with d_i the weighted degree and W the total edge weight.'''
    degree = g.weight_matrix().sum(axis=1)
    return degree / degree.sum()


def stationary_distribution_exact(g: ScatterGraph) -> List[Fraction]:
    '''Stationary distribution in exact rational arithmetic over the float weights.'''
    degree = [Fraction(0)] * g.num_nodes
    for (i, j), w in zip(g.edges, g.weights):
        degree[int(i)] += Fraction(float(w))
        degree[int(j)] += Fraction(float(w))
    total = sum(degree)
    return [d / total for d in degree]


def epe_closed_form(g: ScatterGraph) -> np.ndarray:
    '''EPE(e_ij) = omega_ij / sum of all weights, per unordered edge in g.edges order.'''
    if g.num_nodes < 2:
        raise DegenerateGraphException()
    return g.weights / g.weights.sum()


class WalkStats(NamedTuple):
    '''Random-walk visit statistics, per unordered edge in graph edge order.'''
    edge_counts: np.ndarray
    walk_counts: np.ndarray
    starts: np.ndarray
    total_steps: int
    seed: int
    n_walks: int
    walk_length: int
    num_nodes: int
    generation: int = 0

    def frequencies(self) -> np.ndarray:
        return self.edge_counts / self.edge_counts.sum()

    def expected_counts(self, g: ScatterGraph, convention: str = "derived") -> np.ndarray:
        '''Expected raw counts: N_w l_w omega / W ("derived") or N_w l_w omega / 2W ("stated").

        Both conventions normalise to the same EPE.
        '''
        total = g.weights.sum()
        if convention == "derived":
            scale = 1.0
        elif convention == "stated":
            scale = 0.5
        else:
            raise ValidationException(f"Unknown count convention {convention!r}.")
        return self.n_walks * self.walk_length * scale * g.weights / total


def _transition_cdf(g: ScatterGraph) -> np.ndarray:
    weights = g.weight_matrix()
    cdf = np.cumsum(weights / weights.sum(axis=1, keepdims=True), axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _edge_ids(g: ScatterGraph) -> np.ndarray:
    ids = np.full((g.num_nodes, g.num_nodes), -1, dtype=np.int64)
    ids[g.edges[:, 0], g.edges[:, 1]] = np.arange(g.num_edges)
    ids[g.edges[:, 1], g.edges[:, 0]] = np.arange(g.num_edges)
    return ids


def _sample(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    picked = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(picked, cdf_rows.shape[1] - 1)


def _walk(g: ScatterGraph, starts: np.ndarray, walk_length: int, rng: np.random.Generator) -> np.ndarray:
    cdf = _transition_cdf(g)
    edge_ids = _edge_ids(g)
    counts = np.zeros((starts.shape[0], g.num_edges), dtype=np.int64)
    rows = np.arange(starts.shape[0])
    current = starts.copy()
    for _ in range(walk_length):
        following = _sample(cdf[current], rng.random(starts.shape[0]))
        counts[rows, edge_ids[current, following]] += 1
        current = following
    return counts


def _check_walk_args(n_walks: int, walk_length: int):
    if n_walks < 1 or walk_length < 1:
        raise ValidationException(f"Need N_w >= 1 and l_w >= 1, got {n_walks} and {walk_length}.")


def epe_simulate(g: ScatterGraph, n_walks: int, walk_length: int, seed: int = 0) -> Tuple[WalkStats, np.ndarray]:
    '''Estimate EPE by simulating weight-biased random walks.

    Start nodes are drawn from the stationary distribution and each step moves to a
    neighbor with probability omega_ij / d_i. A traversal counts for the unordered edge.

    Args:
        g (ScatterGraph): the graph
        n_walks (int): number of walks N_w
        walk_length (int): steps per walk l_w
        seed (int): generator seed; equal seeds give identical statistics

    Returns:
        tuple: (WalkStats, normalized edge frequencies)
    '''
    _check_walk_args(n_walks, walk_length)
    if g.num_nodes < 2:
        raise DegenerateGraphException()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    start_cdf = np.cumsum(stationary_distribution(g))
    start_cdf[-1] = 1.0
    starts = _sample(np.broadcast_to(start_cdf, (n_walks, g.num_nodes)), rng.random(n_walks))
    walk_counts = _walk(g, starts, walk_length, rng)
    stats = WalkStats(edge_counts=walk_counts.sum(axis=0), walk_counts=walk_counts, starts=starts,
                      total_steps=n_walks * walk_length, seed=seed, n_walks=n_walks,
                      walk_length=walk_length, num_nodes=g.num_nodes)
    logger.debug("Simulated %d walks of %d steps on K=%d", n_walks, walk_length, g.num_nodes)
    return stats, stats.frequencies()


def _edge_endpoints(g: ScatterGraph, changed_edges: Iterable[Union[int, Tuple[int, int]]]) -> set:
    nodes = set()
    for edge in changed_edges:
        if isinstance(edge, (int, np.integer)):
            if not 0 <= edge < g.num_edges:
                raise ValidationException(f"Edge id {edge} out of range.")
            i, j = g.edges[edge]
        else:
            i, j = edge
        if not (0 <= i < g.num_nodes and 0 <= j < g.num_nodes) or i == j:
            raise ValidationException(f"({i}, {j}) is not an edge of this graph.")
        nodes.update((int(i), int(j)))
    return nodes


def epe_update_local(stats: WalkStats, g: ScatterGraph, changed_edges: Iterable,
                     hops: int = 1, fallback_fraction: float = 0.5) -> WalkStats:
    '''Refresh walk statistics after some edge weights changed.

    Walks that started within `hops` of a changed edge endpoint are re-simulated from
    their recorded start on the new weights. When more than fallback_fraction of the
    walks qualify (always the case at hops >= 1 on a fully connected graph) the whole
    simulation is rerun with the original seed.

    Args:
        stats (WalkStats): statistics from epe_simulate on an earlier weight state of g
        g (ScatterGraph): the graph with its new weights
        changed_edges: edge ids or (i, j) pairs whose weight changed
        hops (int): neighborhood radius around changed endpoints
        fallback_fraction (float): share of qualifying walks that triggers a full rerun

    Returns:
        WalkStats: updated statistics
    '''
    if stats.num_nodes != g.num_nodes or stats.walk_counts.shape[1] != g.num_edges:
        raise ValidationException(
            f"Walk statistics are for K={stats.num_nodes}, the graph has K={g.num_nodes}.")
    region = _edge_endpoints(g, changed_edges)
    if not region:
        return stats

    adjacency = g.weight_matrix() > 0
    for _ in range(hops):
        region |= set(np.flatnonzero(adjacency[sorted(region)].any(axis=0)).tolist())

    affected = np.isin(stats.starts, sorted(region))
    if affected.mean() > fallback_fraction:
        logger.debug("Local EPE update touches %.0f%% of walks, resimulating", 100 * affected.mean())
        fresh, _ = epe_simulate(g, stats.n_walks, stats.walk_length, stats.seed)
        return fresh

    generation = stats.generation + 1
    rng = np.random.default_rng(np.random.SeedSequence([stats.seed, generation]))
    walk_counts = stats.walk_counts.copy()
    walk_counts[affected] = _walk(g, stats.starts[affected], stats.walk_length, rng)
    return stats._replace(edge_counts=walk_counts.sum(axis=0), walk_counts=walk_counts,
                          generation=generation)
