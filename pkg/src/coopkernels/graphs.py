"""Graph inputs in CSR form, deterministic generators and the BFS oracle."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class FrontierGraph:
    n: int
    offsets: tuple
    edges: tuple
    source: int = 0

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbours(self, v):
        return self.edges[self.offsets[v] : self.offsets[v + 1]]


def from_adjacency(adj, source=0) -> FrontierGraph:
    offsets = [0]
    edges = []
    for nbrs in adj:
        edges.extend(nbrs)
        offsets.append(len(edges))
    return FrontierGraph(len(adj), tuple(offsets), tuple(edges), source)


def _dedup(adj):
    return [sorted(set(a)) for a in adj]


def generate_graph(kind: str, size: int, seed: int = 0, degree: int = 4) -> FrontierGraph:
    """Deterministic graph generators.

    chain  directed path 0 -> 1 -> ... (size levels)
    star   centre 0 linked to every other node (2 levels)
    grid   undirected side x side lattice, side = ceil(sqrt(size))
    random undirected random graph with ``degree`` average degree plus a
           spanning tree, so it is connected: few levels, wide frontiers
    wide   alias of random
    deep   a path backbone with short random chords: many narrow levels
    """
    if size < 1:
        raise ConfigError("graph size must be at least 1")
    rng = random.Random(f"{kind}:{size}:{seed}")
    adj = [[] for _ in range(size)]
    if kind == "chain":
        for i in range(size - 1):
            adj[i].append(i + 1)
    elif kind == "star":
        for i in range(1, size):
            adj[0].append(i)
    elif kind == "grid":
        side = 1
        while side * side < size:
            side += 1
        adj = [[] for _ in range(side * side)]
        for r in range(side):
            for c in range(side):
                v = r * side + c
                if c + 1 < side:
                    adj[v].append(v + 1)
                    adj[v + 1].append(v)
                if r + 1 < side:
                    adj[v].append(v + side)
                    adj[v + side].append(v)
    elif kind in ("random", "wide"):
        for v in range(1, size):
            u = rng.randrange(v)
            adj[u].append(v)
            adj[v].append(u)
        extra = max(0, size * degree // 2 - (size - 1))
        for _ in range(extra):
            a, b = rng.randrange(size), rng.randrange(size)
            if a != b:
                adj[a].append(b)
                adj[b].append(a)
    elif kind == "deep":
        for v in range(size - 1):
            adj[v].append(v + 1)
            adj[v + 1].append(v)
        for v in range(size):
            if rng.random() < 0.5:
                u = min(size - 1, v + rng.randint(2, 3))
                if u != v:
                    adj[v].append(u)
                    adj[u].append(v)
    else:
        raise ConfigError(f"unknown graph kind {kind!r}")
    return from_adjacency(_dedup(adj) if kind not in ("chain", "star") else adj)


def bfs_levels(g: FrontierGraph) -> list:
    """Queue-based BFS; unreached nodes get -1."""
    levels = [-1] * g.n
    levels[g.source] = 0
    q = deque([g.source])
    while q:
        v = q.popleft()
        for u in g.neighbours(v):
            if levels[u] < 0:
                levels[u] = levels[v] + 1
                q.append(u)
    return levels


def level_count(g: FrontierGraph) -> int:
    return max(bfs_levels(g)) + 1


# text CSR format ---------------------------------------------------------------
#
#   # comment lines are ignored
#   csr <n> <m> <source>
#   <n+1 offsets, whitespace separated, any line breaks>
#   <m edge targets>


def dumps_csr(g: FrontierGraph) -> str:
    lines = [f"csr {g.n} {g.m} {g.source}", " ".join(map(str, g.offsets))]
    lines.append(" ".join(map(str, g.edges)))
    return "\n".join(lines) + "\n"


def loads_csr(text: str) -> FrontierGraph:
    toks = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        toks.extend(line.split())
    if len(toks) < 4 or toks[0] != "csr":
        raise ConfigError("not a CSR graph file (expected 'csr n m source' header)")
    try:
        n, m, src = int(toks[1]), int(toks[2]), int(toks[3])
        nums = [int(t) for t in toks[4:]]
    except ValueError as e:
        raise ConfigError(f"bad CSR graph file: {e}") from None
    if len(nums) != n + 1 + m:
        raise ConfigError(f"CSR graph file has {len(nums)} numbers, expected {n + 1 + m}")
    offsets, edges = tuple(nums[: n + 1]), tuple(nums[n + 1 :])
    if offsets[0] != 0 or offsets[-1] != m or any(b < a for a, b in zip(offsets, offsets[1:])):
        raise ConfigError("CSR offsets must start at 0, end at m and be non-decreasing")
    if any(not 0 <= e < n for e in edges) or not 0 <= src < n:
        raise ConfigError("CSR node id out of range")
    return FrontierGraph(n, offsets, edges, src)


def parse_input(spec: str) -> FrontierGraph:
    """``kind:size[:seed]`` or a path to a CSR file."""
    parts = spec.split(":")
    if parts[0] in ("chain", "star", "grid", "random", "wide", "deep"):
        try:
            size = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError):
            raise ConfigError(f"bad graph spec {spec!r}; expected kind:size[:seed]") from None
        return generate_graph(parts[0], size, seed)
    try:
        with open(spec) as f:
            return loads_csr(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read graph file {spec!r}: {e}") from None
