"""Communication topology: adjacency, Laplacian, pinning and interaction matrix.

Agents are 1-based in configs and edge lists (matching the usual ``[N]``
convention) and 0-based everywhere in arrays.  Stacked ensemble vectors are
agent-major, i.e. component ``k`` of agent ``i`` sits at ``i * n + k``; this is
the ordering under which ``H = (L + B) kron I_n`` acts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from rise_flock.errors import NumericalError, ValidationError


@dataclass(frozen=True)
class GraphTopology:
    """Static, weighted, undirected graph plus the target pinning vector."""

    N: int
    edges: tuple[tuple[int, int], ...]
    weights: tuple[float, ...]
    pinning: tuple[int, ...]
    n: int = 3

    def __post_init__(self):
        validate_topology(self)

    @classmethod
    def from_edges(cls, N, edges, pinning, n=3):
        """Build from ``[i, j]`` or ``[i, j, w]`` items (1-based; weight defaults to 1)."""
        pairs, weights = [], []
        for item in edges:
            item = list(item)
            if len(item) not in (2, 3):
                raise ValidationError(f"edge {item!r} must be [i, j] or [i, j, w]")
            i, j = item[0], item[1]
            if isinstance(i, float) and i.is_integer():
                i = int(i)
            if isinstance(j, float) and j.is_integer():
                j = int(j)
            if not (isinstance(i, (int, np.integer)) and isinstance(j, (int, np.integer))):
                raise ValidationError(f"edge {item!r} has non-integer endpoints")
            pairs.append((int(i), int(j)))
            weights.append(float(item[2]) if len(item) == 3 else 1.0)
        return cls(
            N=int(N),
            edges=tuple(pairs),
            weights=tuple(weights),
            pinning=tuple(int(b) for b in pinning),
            n=int(n),
        )

    @classmethod
    def from_dict(cls, data):
        try:
            return cls.from_edges(data["N"], data.get("edges", []), data["pinning"], data.get("n", 3))
        except KeyError as exc:
            raise ValidationError(f"topology is missing key {exc.args[0]!r}") from None

    def to_dict(self):
        return {
            "N": self.N,
            "n": self.n,
            "edges": [[i, j, w] for (i, j), w in zip(self.edges, self.weights)],
            "pinning": list(self.pinning),
        }

    @classmethod
    def cycle(cls, N, pinning, n=3):
        if N < 3:
            raise ValidationError("a cycle needs at least 3 vertices")
        return cls.from_edges(N, [(i, i % N + 1) for i in range(1, N + 1)], pinning, n)

    def neighbors(self, i):
        """Neighbor -> weight map of agent ``i`` (0-based in and out)."""
        out = {}
        for (a, b), w in zip(self.edges, self.weights):
            if a - 1 == i:
                out[b - 1] = w
            elif b - 1 == i:
                out[a - 1] = w
        return out


def validate_topology(topo):
    if not isinstance(topo.N, (int, np.integer)) or topo.N < 1:
        raise ValidationError(f"N must be an integer >= 1, got {topo.N!r}")
    if not isinstance(topo.n, (int, np.integer)) or topo.n < 1:
        raise ValidationError(f"n must be an integer >= 1, got {topo.n!r}")
    if len(topo.pinning) != topo.N:
        raise ValidationError(f"pinning has length {len(topo.pinning)}, expected N={topo.N}")
    if any(b not in (0, 1) for b in topo.pinning):
        raise ValidationError(f"pinning entries must be 0 or 1, got {list(topo.pinning)}")
    if len(topo.weights) != len(topo.edges):
        raise ValidationError("edges and weights differ in length")
    seen = set()
    for (i, j), w in zip(topo.edges, topo.weights):
        if not (1 <= i <= topo.N and 1 <= j <= topo.N):
            raise ValidationError(f"edge ({i}, {j}) has an endpoint outside [1, {topo.N}]")
        if i == j:
            raise ValidationError(f"edge ({i}, {j}) is a self-loop")
        if not (np.isfinite(w) and w > 0):
            raise ValidationError(f"edge ({i}, {j}) has nonpositive weight {w}")
        key = frozenset((i, j))
        if key in seen:
            raise ValidationError(f"edge ({i}, {j}) listed twice")
        seen.add(key)


def adjacency(topo):
    A = np.zeros((topo.N, topo.N))
    for (i, j), w in zip(topo.edges, topo.weights):
        A[i - 1, j - 1] = w
        A[j - 1, i - 1] = w
    return A


def laplacian(topo):
    """``L = D - A`` with ``D = diag(A 1)``."""
    validate_topology(topo)
    A = adjacency(topo)
    return np.diag(A.sum(axis=1)) - A


def pinning_matrix(topo):
    return np.diag(np.asarray(topo.pinning, dtype=float))


def directed_edges(topo):
    """Measurement channels as (src, dst, weight) arrays, grouped by the measuring agent ``src``.

    Agent ``src`` measures ``q_dst - q_src``.  Every undirected edge appears
    twice, once per endpoint.
    """
    src, dst, w = [], [], []
    for i in range(topo.N):
        for j, a in sorted(topo.neighbors(i).items()):
            src.append(i)
            dst.append(j)
            w.append(a)
    return np.array(src, dtype=int), np.array(dst, dtype=int), np.array(w, dtype=float)


@dataclass(frozen=True)
class InteractionMatrix:
    H: np.ndarray
    B_kron: np.ndarray
    base: np.ndarray = field(repr=False)  # the N x N factor L + B
    n: int = 1

    @property
    def N(self):
        return self.base.shape[0]


def interaction_matrix(topo):
    """``H = (L + B) kron I_n`` and ``B_kron = B kron I_n``."""
    LB = laplacian(topo) + pinning_matrix(topo)
    eye = np.eye(topo.n)
    return InteractionMatrix(
        H=np.kron(LB, eye),
        B_kron=np.kron(pinning_matrix(topo), eye),
        base=LB,
        n=topo.n,
    )


def check_pinned_connectivity(topo):
    """True iff the graph is connected and at least one agent senses the target."""
    if not any(topo.pinning):
        return False
    adj = {i: [] for i in range(topo.N)}
    for i, j in topo.edges:
        adj[i - 1].append(j - 1)
        adj[j - 1].append(i - 1)
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return len(seen) == topo.N


@dataclass(frozen=True)
class SpectralSummary:
    lambda_min_H: float
    lambda_max_H: float
    lambda_min_BmI: float
    lambda_max_BmI: float
    lambda_max_ImH2: float
    lambda_min_Q: float
    lambda_max_Q: float
    norm1_H: float  # induced 1-norm (max absolute column sum)

    def to_dict(self):
        return dict(self.__dict__)


def _eigvalsh(M, label):
    try:
        vals = np.linalg.eigvalsh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"symmetric eigensolver failed on {label} "
            f"(shape {M.shape}, cond {np.linalg.cond(M):.3e}, max|entry| {np.abs(M).max():.3e}): {exc}"
        ) from exc
    if not np.all(np.isfinite(vals)):
        raise NumericalError(f"non-finite eigenvalues for {label}")
    return vals


def spectral_summary(inter):
    """Eigen-extrema used by the gain conditions.

    Each nN x nN matrix is ``M kron I_n`` for an N x N ``M``, so it shares the
    spectrum of ``M`` (with multiplicity n); only the small factors are
    decomposed.
    """
    LB = inter.base
    N = LB.shape[0]
    B = np.diag(np.diag(inter.B_kron)[:: inter.n]) if inter.n else np.zeros((N, N))
    h = _eigvalsh(LB, "L + B")
    bmi = _eigvalsh(B - np.eye(N), "B - I")
    imh2 = _eigvalsh(np.eye(N) - LB @ LB, "I - (L + B)^2")
    lo_h, hi_h = float(h[0]), float(h[-1])
    return SpectralSummary(
        lambda_min_H=lo_h,
        lambda_max_H=hi_h,
        lambda_min_BmI=float(bmi[0]),
        lambda_max_BmI=float(bmi[-1]),
        lambda_max_ImH2=float(imh2[-1]),
        lambda_min_Q=min(1.0, lo_h),
        lambda_max_Q=max(1.0, hi_h),
        norm1_H=float(np.abs(LB).sum(axis=0).max()),
    )
