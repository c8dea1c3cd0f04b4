"""Sensor network digraphs and their consensus weights.

Nodes are numbered ``0 .. N-1``. An edge ``(j, i)`` means node ``j`` can
transmit to node ``i``. Every self-loop is part of the edge set.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidGraphError, NumericalError


def build_consensus(edges, num_nodes: int) -> np.ndarray:
    """Row-stochastic fusion weights ``pi[i, j] = 1/(d_i + 1)`` on ``N_i + {i}``.

    ``d_i`` is the number of in-neighbours of ``i``, self-loop excluded.
    """
    edges = set(edges)
    for i in range(num_nodes):
        if (i, i) not in edges:
            raise InvalidGraphError(f"missing self-loop at node {i}")
    pi = np.zeros((num_nodes, num_nodes))
    for j, i in edges:
        pi[i, j] = 1.0
    pi /= pi.sum(axis=1, keepdims=True)
    return pi


@dataclass(frozen=True)
class SensorNetwork:
    num_nodes: int
    sensors: tuple[int, ...]
    edges: frozenset
    consensus: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, num_nodes: int, sensors, edges) -> "SensorNetwork":
        if num_nodes < 1:
            raise InvalidGraphError("a network needs at least one node")
        sensors = tuple(int(s) for s in sensors)
        if len(set(sensors)) != len(sensors) or any(not 0 <= s < num_nodes for s in sensors):
            raise InvalidGraphError(f"invalid sensor set {sensors}")
        full = {(int(j), int(i)) for j, i in edges}
        for j, i in full:
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                raise InvalidGraphError(f"edge {(j, i)} outside 0..{num_nodes - 1}")
        full |= {(i, i) for i in range(num_nodes)}
        pi = build_consensus(full, num_nodes)
        pi.setflags(write=False)
        return cls(num_nodes, sensors, frozenset(full), pi)

    def in_neighbors(self, i: int) -> list[int]:
        return sorted(j for j, k in self.edges if k == i and j != i)

    def out_neighbors(self, j: int) -> list[int]:
        return sorted(i for k, i in self.edges if k == j and i != j)

    @property
    def num_links(self) -> int:
        """Directed edges excluding self-loops."""
        return len(self.edges) - self.num_nodes

    def is_sensor(self, i: int) -> bool:
        return i in self.sensors

    def to_dict(self) -> dict:
        links = sorted([j, i] for j, i in self.edges if j != i)
        return {"num_nodes": self.num_nodes, "sensors": list(self.sensors), "edges": links}

    @classmethod
    def from_dict(cls, data: dict) -> "SensorNetwork":
        try:
            return cls.from_edges(int(data["num_nodes"]), data["sensors"],
                                  [tuple(e) for e in data["edges"]])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidGraphError):
                raise
            raise InvalidGraphError(f"malformed network document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SensorNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _reaches_all(num_nodes: int, adjacency: list[list[int]]) -> bool:
    seen = [False] * num_nodes
    seen[0] = True
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if not seen[w]:
                seen[w] = True
                queue.append(w)
    return all(seen)


def is_strongly_connected(network: SensorNetwork) -> bool:
    """True iff every node reaches node 0 and node 0 reaches every node."""
    fwd = [[] for _ in range(network.num_nodes)]
    bwd = [[] for _ in range(network.num_nodes)]
    for j, i in network.edges:
        fwd[j].append(i)
        bwd[i].append(j)
    return _reaches_all(network.num_nodes, fwd) and _reaches_all(network.num_nodes, bwd)


def random_strongly_connected(num_nodes: int, num_sensors: int, edge_density: float,
                              rng: np.random.Generator) -> SensorNetwork:
    """Random strongly connected digraph with a planted Hamiltonian cycle.

    ``edge_density`` is the fraction of the ``N(N-1)`` possible directed links
    (self-loops excluded). The target link count is
    ``round(edge_density * N * (N - 1))`` and must be at least ``N`` so that
    the cycle fits.
    """
    if not 0 < edge_density <= 1:
        raise ConfigError(f"edge_density must be in (0, 1], got {edge_density}")
    if not 0 <= num_sensors <= num_nodes:
        raise ConfigError(f"num_sensors={num_sensors} must be in [0, num_nodes={num_nodes}]")
    n = num_nodes
    links: set[tuple[int, int]] = set()
    if n > 1:
        target = int(round(edge_density * n * (n - 1)))
        floor = n
        if target < floor:
            raise ConfigError(
                f"edge_density={edge_density} gives {target} links, below the "
                f"{floor} needed for a Hamiltonian cycle on {n} nodes")
        order = rng.permutation(n)
        links = {(int(order[k]), int(order[(k + 1) % n])) for k in range(n)}
        candidates = [(j, i) for j in range(n) for i in range(n) if j != i and (j, i) not in links]
        extra = max(0, target - len(links))
        if extra:
            pick = rng.choice(len(candidates), size=extra, replace=False)
            links |= {candidates[k] for k in sorted(pick)}
    sensors = sorted(int(s) for s in rng.choice(n, size=num_sensors, replace=False))
    return SensorNetwork.from_edges(n, sensors, links)


def perron_vector(consensus: np.ndarray, tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    """Left Perron vector ``p' Pi = p'`` with ``sum(p) = 1``, by power iteration."""
    pi = np.asarray(consensus, dtype=float)
    p = np.full(pi.shape[0], 1.0 / pi.shape[0])
    for _ in range(max_iter):
        nxt = p @ pi
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - p)) < tol:
            if np.max(np.abs(nxt @ pi - nxt)) < 1e-10 and nxt.min() > 0:
                return nxt
        p = nxt
    raise NumericalError("power iteration for the Perron vector did not converge")
