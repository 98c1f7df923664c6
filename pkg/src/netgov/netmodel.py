"""Discrete-time packet network: topologies, routing, queue service and the
congestion order parameter.

Every node is both a host and a router. One tick runs, in order: Bernoulli
injection, FIFO service of up to ``service_rate`` packets per node, delivery
accounting, TTL drops. Packets forwarded during a tick join the next hop's
queue only after every node has been served, so a packet moves at most one
hop per tick.
"""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

TOPOLOGY_KINDS = ("ring", "lattice", "random")
ROUTING_KINDS = ("static-shortest-path", "queue-aware-shortest-path", "local-greedy")
DESTINATION_POLICIES = ("uniform", "fixed")

TRACE_HEADER = ("tick", "created", "delivered", "dropped", "in_flight", "queue_total", "mean_delay")


class TopologyError(ValueError):
    """Invalid topology parameters, or a random graph that never came out connected."""


class ConservationError(RuntimeError):
    """Packet conservation was violated; always an internal bug."""


class UndefinedOrderParameter(ValueError):
    """No packets were created in the measurement window."""


@dataclass
class Topology:
    nodes: int
    links: tuple  # ((a, b, capacity), ...) with a < b, sorted
    kind: str
    params: dict = field(default_factory=dict)
    neighbors: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nbrs = [[] for _ in range(self.nodes)]
        for a, b, _ in self.links:
            nbrs[a].append(b)
            nbrs[b].append(a)
        self.neighbors = [sorted(x) for x in nbrs]

    def capacity(self, a, b):
        for x, y, c in self.links:
            if (x, y) == (min(a, b), max(a, b)):
                return c
        raise KeyError((a, b))

    def degree(self, node):
        return len(self.neighbors[node])


def _is_connected(n, links):
    nbrs = [[] for _ in range(n)]
    for a, b, _ in links:
        nbrs[a].append(b)
        nbrs[b].append(a)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def build_topology(kind, nodes=None, side=None, p=None, seed=None, capacity=1, max_attempts=100):
    """Build a connected topology.

    ``ring`` needs ``nodes``; ``lattice`` needs ``side`` (side x side grid, no
    wraparound); ``random`` is G(n, p) drawn with ``numpy.random.default_rng(seed)``,
    redrawn from the same generator until connected or ``max_attempts`` runs out.
    """
    if not isinstance(capacity, (int, np.integer)) or isinstance(capacity, bool) or capacity < 1:
        raise TopologyError(f"link capacity must be a positive integer, got {capacity!r}")
    capacity = int(capacity)
    if kind == "ring":
        if nodes is None or nodes < 2:
            raise TopologyError("ring needs nodes >= 2")
        if nodes == 2:
            pairs = [(0, 1)]
        else:
            pairs = [(i, (i + 1) % nodes) for i in range(nodes)]
        params = {"nodes": nodes}
    elif kind == "lattice":
        if side is None or side < 2:
            raise TopologyError("lattice needs side >= 2")
        nodes = side * side
        pairs = []
        for r in range(side):
            for c in range(side):
                u = r * side + c
                if c + 1 < side:
                    pairs.append((u, u + 1))
                if r + 1 < side:
                    pairs.append((u, u + side))
        params = {"side": side}
    elif kind == "random":
        if nodes is None or nodes < 2:
            raise TopologyError("random graph needs nodes >= 2")
        if p is None or not 0.0 < p <= 1.0:
            raise TopologyError("random graph needs 0 < p <= 1")
        if seed is None:
            raise TopologyError("random graph needs a seed")
        rng = np.random.default_rng(seed)
        iu = np.triu_indices(nodes, k=1)
        for _ in range(max_attempts):
            keep = rng.random(len(iu[0])) < p
            pairs = [(int(a), int(b)) for a, b, k in zip(iu[0], iu[1], keep) if k]
            if _is_connected(nodes, [(a, b, 1) for a, b in pairs]):
                break
        else:
            raise TopologyError(
                f"random graph (n={nodes}, p={p}, seed={seed}) not connected after {max_attempts} draws"
            )
        params = {"nodes": nodes, "p": p, "seed": seed}
    else:
        raise TopologyError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")

    links = tuple(sorted((min(a, b), max(a, b), capacity) for a, b in pairs))
    if not _is_connected(nodes, links):
        raise TopologyError("topology is not connected")
    params["capacity"] = capacity
    return Topology(nodes=nodes, links=links, kind=kind, params=params)


@dataclass
class RoutingTable:
    dist: list  # dist[u][d], hop count
    next_hop: list  # next_hop[u][d], -1 on the diagonal


def shortest_paths(topology):
    """Minimum-hop next hops for every (node, destination); ties go to the lowest neighbor id."""
    n = topology.nodes
    nbrs = topology.neighbors
    dist = [[-1] * n for _ in range(n)]
    for d in range(n):
        dist[d][d] = 0
        frontier = deque([d])
        while frontier:
            u = frontier.popleft()
            for v in nbrs[u]:
                if dist[v][d] < 0:
                    dist[v][d] = dist[u][d] + 1
                    frontier.append(v)
    next_hop = [[-1] * n for _ in range(n)]
    for u in range(n):
        for d in range(n):
            if u == d:
                continue
            target = dist[u][d] - 1
            for v in nbrs[u]:  # sorted ascending
                if dist[v][d] == target:
                    next_hop[u][d] = v
                    break
    return RoutingTable(dist=dist, next_hop=next_hop)


def mean_shortest_path_length(topology):
    """Mean hop distance over ordered pairs of distinct nodes."""
    table = shortest_paths(topology)
    n = topology.nodes
    total = sum(table.dist[u][d] for u in range(n) for d in range(n) if u != d)
    return total / (n * (n - 1))


def capacity_bound(topology, service_rate=1):
    """Critical injection rate mu / <d> for uniform traffic on a balanced topology."""
    return service_rate / mean_shortest_path_length(topology)


@dataclass(frozen=True)
class TrafficSpec:
    lam: float
    destinations: str = "uniform"
    pairs: tuple = ()  # ((source, destination), ...) for destinations="fixed"
    ttl: int | None = None
    admission_limit: int | None = None  # refuse injection when the source queue holds this many

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.destinations not in DESTINATION_POLICIES:
            raise ValueError(f"unknown destination policy {self.destinations!r}")
        if self.destinations == "fixed" and not self.pairs:
            raise ValueError("fixed destinations need at least one (source, destination) pair")
        for s, d in self.pairs:
            if s == d:
                raise ValueError(f"pair ({s}, {d}) has source == destination")
        if self.ttl is not None and self.ttl < 1:
            raise ValueError("ttl must be >= 1")
        if self.admission_limit is not None and self.admission_limit < 0:
            raise ValueError("admission_limit must be >= 0")


@dataclass(frozen=True)
class RoutingPolicy:
    kind: str = "static-shortest-path"
    queue_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ROUTING_KINDS:
            raise ValueError(f"unknown routing policy {self.kind!r}; expected one of {ROUTING_KINDS}")
        if self.queue_weight < 0:
            raise ValueError("queue_weight must be >= 0")


class Packet:
    __slots__ = ("id", "source", "destination", "created_at", "hops")

    def __init__(self, id, source, destination, created_at, hops=0):
        self.id = id
        self.source = source
        self.destination = destination
        self.created_at = created_at
        self.hops = hops

    def __repr__(self):
        return (
            f"Packet(id={self.id}, {self.source}->{self.destination}, "
            f"created_at={self.created_at}, hops={self.hops})"
        )


class NetworkState:
    """Mutable simulation state. ``step`` advances it in place."""

    def __init__(self, topology, service_rate=1, seed=0):
        if service_rate < 1:
            raise ValueError("service_rate must be >= 1")
        self.topology = topology
        self.service_rate = int(service_rate)
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)
        self.queues = [deque() for _ in range(topology.nodes)]
        self.tick = 0
        self.created_total = 0
        self.delivered_total = 0
        self.dropped_total = 0
        self.blocked_total = 0
        self.delay_sum = 0
        self.next_id = 0
        self.table = shortest_paths(topology)
        self._fixed_cache = None

    @property
    def queue_total(self):
        return sum(len(q) for q in self.queues)

    def conservation_ok(self):
        return self.created_total == self.delivered_total + self.dropped_total + self.queue_total

    def clone(self, seed=None):
        """Deep copy; with ``seed`` the copy gets a fresh generator seeded from it."""
        other = copy.copy(self)
        other.queues = [deque(Packet(p.id, p.source, p.destination, p.created_at, p.hops) for p in q)
                        for q in self.queues]
        if seed is None:
            other.rng = copy.deepcopy(self.rng)
        else:
            other.rng_seed = seed
            other.rng = np.random.default_rng(seed)
        return other


def _dynamic_costs(topology, qlen, weight):
    """All-pairs path costs where entering node v costs 1 + weight * qlen[v]."""
    rows, cols, vals = [], [], []
    for a, b, _ in topology.links:
        rows += [a, b]
        cols += [b, a]
        vals += [1.0 + weight * qlen[b], 1.0 + weight * qlen[a]]
    n = topology.nodes
    graph = csr_matrix((vals, (rows, cols)), shape=(n, n))
    return dijkstra(graph, directed=True)


def step(state, traffic, routing):
    """Advance ``state`` by one tick. Returns the number of packets delivered and their delay sum."""
    topo = state.topology
    n = topo.nodes
    queues = state.queues
    t = state.tick
    lam = traffic.lam

    # Always draw both vectors so the stream does not depend on lambda or queue state.
    u_inject = state.rng.random(n).tolist()
    u_dest = state.rng.random(n).tolist()

    # (1) injection
    limit = traffic.admission_limit
    if traffic.destinations == "uniform":
        for i in range(n):
            if u_inject[i] < lam:
                if limit is not None and len(queues[i]) >= limit:
                    state.blocked_total += 1
                    continue
                d = int(u_dest[i] * (n - 1))
                if d >= i:
                    d += 1
                queues[i].append(Packet(state.next_id, i, d, t))
                state.next_id += 1
                state.created_total += 1
    else:
        if state._fixed_cache is None or state._fixed_cache[0] is not traffic.pairs:
            by_src = {}
            for s, d in traffic.pairs:
                by_src.setdefault(s, []).append(d)
            state._fixed_cache = (traffic.pairs, by_src)
        by_src = state._fixed_cache[1]
        for i in range(n):
            dests = by_src.get(i)
            if dests and u_inject[i] < lam:
                if limit is not None and len(queues[i]) >= limit:
                    state.blocked_total += 1
                    continue
                d = dests[int(u_dest[i] * len(dests))]
                queues[i].append(Packet(state.next_id, i, d, t))
                state.next_id += 1
                state.created_total += 1

    # (2) service; dynamic policies see the queue lengths as they stand after injection
    mu = state.service_rate
    kind = routing.kind
    next_hop = state.table.next_hop
    dist = state.table.dist
    nbrs = topo.neighbors
    link_limited = any(c < mu for _, _, c in topo.links)
    qlen = [len(q) for q in queues]
    costs = None
    if kind == "queue-aware-shortest-path" and any(qlen):
        costs = _dynamic_costs(topo, qlen, routing.queue_weight)
    ttl = traffic.ttl
    arrivals = []
    delivered = 0
    delay_sum = 0
    for i in range(n):
        q = queues[i]
        if not q:
            continue
        served = 0
        used = {} if link_limited else None
        while q and served < mu:
            pkt = q[0]
            d = pkt.destination
            if kind == "static-shortest-path" or (kind == "queue-aware-shortest-path" and costs is None):
                nxt = next_hop[i][d]
            elif kind == "queue-aware-shortest-path":
                best = None
                for v in nbrs[i]:
                    c = (1.0 if v == d else 1.0 + routing.queue_weight * qlen[v] + costs[v][d])
                    if best is None or c < best:
                        best, nxt = c, v
            else:  # local-greedy: least-loaded neighbor among those on a shortest path
                target = dist[i][d] - 1
                nxt = -1
                for v in nbrs[i]:
                    if dist[v][d] == target and (nxt < 0 or qlen[v] < qlen[nxt]):
                        nxt = v
            if used is not None:
                cap = topo.capacity(i, nxt)
                if used.get(nxt, 0) >= cap:
                    break
                used[nxt] = used.get(nxt, 0) + 1
            q.popleft()
            served += 1
            pkt.hops += 1
            # (3) delivery, (4) ttl
            if nxt == d:
                delivered += 1
                delay_sum += t - pkt.created_at + 1
            elif ttl is not None and pkt.hops >= ttl:
                state.dropped_total += 1
            else:
                arrivals.append((nxt, pkt))
    for nxt, pkt in arrivals:
        queues[nxt].append(pkt)

    state.delivered_total += delivered
    state.delay_sum += delay_sum
    state.tick = t + 1
    return delivered, delay_sum


class SimulationTrace:
    """Per-tick records. Counter columns are cumulative since the state was created."""

    def __init__(self, nodes=0, service_rate=1, seed=None, origin=None):
        self.nodes = nodes
        self.service_rate = service_rate
        self.seed = seed
        # cumulative values just before the first record
        self.origin = origin or {"created": 0, "delivered": 0, "dropped": 0, "delay_sum": 0, "in_flight": 0}
        self.tick = []
        self.created = []
        self.delivered = []
        self.dropped = []
        self.in_flight = []
        self.queue_total = []
        self.mean_delay = []
        self.delay_sum = []  # cumulative
        self.queue_cum = []  # cumulative sum of queue_total

    def __len__(self):
        return len(self.tick)

    def record(self, state, delivered_now, delay_now):
        qt = state.queue_total
        if state.created_total != state.delivered_total + state.dropped_total + qt:
            raise ConservationError(
                f"tick {state.tick}: created {state.created_total} != delivered {state.delivered_total}"
                f" + dropped {state.dropped_total} + queued {qt}"
            )
        self.tick.append(state.tick - 1)
        self.created.append(state.created_total)
        self.delivered.append(state.delivered_total)
        self.dropped.append(state.dropped_total)
        self.in_flight.append(qt)
        self.queue_total.append(qt)
        self.mean_delay.append(delay_now / delivered_now if delivered_now else 0.0)
        self.delay_sum.append(state.delay_sum)
        self.queue_cum.append((self.queue_cum[-1] if self.queue_cum else 0) + qt)

    def rows(self):
        return zip(self.tick, self.created, self.delivered, self.dropped,
                   self.in_flight, self.queue_total, self.mean_delay)

    def before(self, column, index):
        """Value of a column just before record ``index``."""
        if index > 0:
            return getattr(self, column)[index - 1]
        return self.origin.get(column, 0)

    @classmethod
    def starting_from(cls, state):
        return cls(state.topology.nodes, state.service_rate, state.rng_seed, origin={
            "created": state.created_total, "delivered": state.delivered_total,
            "dropped": state.dropped_total, "delay_sum": state.delay_sum, "in_flight": state.queue_total,
        })


def run(state, traffic, routing, ticks, trace=None):
    """Run ``ticks`` steps, appending one record per tick to ``trace`` (a new one if omitted)."""
    if ticks < 1:
        raise ValueError("ticks must be >= 1")
    if trace is None:
        trace = SimulationTrace.starting_from(state)
    for _ in range(ticks):
        delivered, delay = step(state, traffic, routing)
        trace.record(state, delivered, delay)
    return trace


def order_parameter(trace, start, stop):
    """Congestion order parameter over records ``[start, stop)``.

    rho = (growth of in-flight packets over the window) / (packets created in the
    window), clipped to [0, 1].
    """
    if not 0 <= start < stop <= len(trace):
        raise ValueError(f"window [{start}, {stop}) outside trace of length {len(trace)}")
    if stop - start < 100:
        raise ValueError("order parameter window must span at least 100 ticks")
    created = trace.created[stop - 1] - trace.before("created", start)
    if created == 0:
        raise UndefinedOrderParameter(f"no packets created in window [{start}, {stop})")
    growth = trace.in_flight[stop - 1] - trace.before("in_flight", start)
    return min(1.0, max(0.0, growth / created))
