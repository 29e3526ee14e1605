"""Deterministic discrete-event engine, links, and topology builders.

Events execute in (time, insertion-sequence) order, so two runs of the
same scenario with the same seed produce identical traces. A link
direction is a drop-tail FIFO with an ECN threshold: enqueueing on a
full queue drops the packet, enqueueing past the threshold marks it
congestion-experienced. Random loss is drawn from a per-link-direction
generator seeded from (scenario seed, link name); it applies only to
switch egress, where in-fabric discard happens.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from . import wire


class SimError(Exception):
    pass


class TimeRegressionError(SimError):
    pass


class DeadlockError(SimError):
    """Workload unfinished with no possible progress."""


class InvalidParameterError(SimError):
    pass


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labels (never Python hash())."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


@dataclass
class SimConfig:
    # links
    bandwidth_bps: float = 100e9
    prop_delay_s: float = 1e-6
    queue_capacity_pkts: int = 256
    # Above the steady occupancy of a few window-limited flows (~64 each
    # minus one BDP), below capacity: marking engages only under real
    # overload instead of throttling fair FIFO sharing.
    ecn_threshold_pkts: int = 192
    switch_proc_delay_s: float = 300e-9
    # switch congestion-signal aging
    cnp_age_period_s: float = 40e-6
    cnp_age_factor: float = 0.5
    # host transport
    mtu_payload: int = 1024
    window: int = 64  # ~1 bandwidth-delay product at the default link
    ack_coalesce: int = 1
    rtt_estimate_s: float = 10e-6
    rto_multiple: float = 3.0
    rto_max_multiple: float = 16.0
    line_rate_bps: float = 100e9
    rate_min_bps: float = 1e9
    rate_ai_bps: float = 5e9
    rate_ai_period_s: float = 55e-6
    cnp_interval_s: float = 50e-6
    host_fwd_delay_s: float = 2e-6  # overlay relay RX->TX turnaround


class Engine:
    """Event queue with structured logging and counters."""

    def __init__(self, trace_path: Optional[str] = None):
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.counters: Dict[str, int] = {}
        self.records: List[dict] = []
        self._trace_fh = open(trace_path, "w") if trace_path else None

    def schedule(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            raise TimeRegressionError(f"event at {t} scheduled from {self.now}")
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def run_until(self, t: float) -> None:
        heap = self._heap
        while heap and heap[0][0] <= t:
            self.now, _, fn, args = heapq.heappop(heap)
            fn(*args)
        if t > self.now:
            self.now = t

    def pending(self) -> int:
        return len(self._heap)

    def count(self, key: str, n: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + n

    def log(self, kind: str, **fields) -> None:
        rec = {"t": self.now, "kind": kind}
        rec.update(fields)
        self.records.append(rec)
        self.count(kind)
        if self._trace_fh is not None:
            self._trace_fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self._trace_fh is not None:
            self._trace_fh.close()
            self._trace_fh = None


# ---------------------------------------------------------------------------
# Topology

HOST = "host"
SWITCH = "switch"


@dataclass
class NodeSpec:
    index: int
    role: str
    name: str
    ip: int
    mac: int
    n_ports: int


@dataclass
class LinkSpec:
    a: Tuple[int, int]  # (node index, port)
    b: Tuple[int, int]
    bandwidth_bps: float
    prop_delay_s: float
    loss_rate: float = 0.0


@dataclass
class Topology:
    nodes: List[NodeSpec]
    links: List[LinkSpec]

    def hosts(self) -> List[NodeSpec]:
        return [n for n in self.nodes if n.role == HOST]

    def switches(self) -> List[NodeSpec]:
        return [n for n in self.nodes if n.role == SWITCH]

    def mac_of(self, ip: int) -> int:
        for n in self.nodes:
            if n.ip == ip:
                return n.mac
        raise KeyError(wire.ip_str(ip))


def _host_spec(index, ordinal, n_ports=1):
    return NodeSpec(index, HOST, f"h{ordinal}", ip=(10 << 24) | ordinal + 1,
                    mac=0x020000000000 | index, n_ports=n_ports)


def _switch_spec(index, ordinal, n_ports):
    return NodeSpec(index, SWITCH, f"s{ordinal}",
                    ip=(10 << 24) | (255 << 16) | ordinal + 1,
                    mac=0x040000000000 | index, n_ports=n_ports)


class _Builder:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.nodes: List[NodeSpec] = []
        self.links: List[LinkSpec] = []
        self._ports: List[int] = []
        self._n_hosts = 0
        self._n_switches = 0

    def host(self) -> int:
        spec = _host_spec(len(self.nodes), self._n_hosts)
        self._n_hosts += 1
        self.nodes.append(spec)
        self._ports.append(0)
        return spec.index

    def switch(self, n_ports: int) -> int:
        spec = _switch_spec(len(self.nodes), self._n_switches, n_ports)
        self._n_switches += 1
        self.nodes.append(spec)
        self._ports.append(0)
        return spec.index

    def link(self, a: int, b: int) -> None:
        pa, pb = self._ports[a], self._ports[b]
        self._ports[a] += 1
        self._ports[b] += 1
        self.links.append(LinkSpec((a, pa), (b, pb),
                                   self.cfg.bandwidth_bps, self.cfg.prop_delay_s))

    def topology(self) -> Topology:
        for n in self.nodes:
            if n.role == HOST:
                n.n_ports = max(1, self._ports[n.index])
        return Topology(self.nodes, self.links)


def build_star(n_hosts: int, cfg: Optional[SimConfig] = None) -> Topology:
    """One switch, ``n_hosts`` hosts, one link per host."""
    if n_hosts < 1:
        raise InvalidParameterError("star needs at least one host")
    b = _Builder(cfg or SimConfig())
    sw = b.switch(n_hosts)
    for _ in range(n_hosts):
        b.link(b.host(), sw)
    return b.topology()


def build_leaf_spine(leaves: int, spines: int, hosts_per_leaf: int,
                     cfg: Optional[SimConfig] = None) -> Topology:
    if min(leaves, spines, hosts_per_leaf) < 1:
        raise InvalidParameterError("leaf-spine parameters must be positive")
    b = _Builder(cfg or SimConfig())
    spine_idx = [b.switch(leaves) for _ in range(spines)]
    for _ in range(leaves):
        leaf = b.switch(spines + hosts_per_leaf)
        for s in spine_idx:
            b.link(leaf, s)
        for _ in range(hosts_per_leaf):
            b.link(b.host(), leaf)
    return b.topology()


def build_fat_tree(k: int, cfg: Optional[SimConfig] = None) -> Topology:
    """k-ary fat tree: k pods, k^2/4 cores, k^3/4 hosts."""
    if k < 2 or k % 2:
        raise InvalidParameterError("fat tree arity must be even and >= 2")
    b = _Builder(cfg or SimConfig())
    half = k // 2
    cores = [b.switch(k) for _ in range(half * half)]
    for _pod in range(k):
        aggs = []
        for a in range(half):
            agg = b.switch(k)
            aggs.append(agg)
            for c in range(half):
                b.link(agg, cores[a * half + c])
        for _e in range(half):
            edge = b.switch(k)
            for agg in aggs:
                b.link(edge, agg)
            for _h in range(half):
                b.link(b.host(), edge)
    return b.topology()


def topology_from_dict(spec: dict, cfg: Optional[SimConfig] = None) -> Topology:
    """Build a topology from a scenario dictionary.

    Built-in kinds: ``star`` (hosts), ``leaf_spine`` (leaves, spines,
    hosts_per_leaf), ``fat_tree`` (k). ``custom`` takes explicit
    ``hosts`` (count) and ``links`` ([[a, b], ...] over node names
    h0..hN-1/s0..sM-1 with ``switches`` port counts inferred).
    """
    cfg = cfg or SimConfig()
    kind = spec.get("kind")
    if kind == "star":
        return build_star(int(spec["hosts"]), cfg)
    if kind == "leaf_spine":
        return build_leaf_spine(int(spec["leaves"]), int(spec["spines"]),
                                int(spec["hosts_per_leaf"]), cfg)
    if kind == "fat_tree":
        return build_fat_tree(int(spec["k"]), cfg)
    if kind == "custom":
        b = _Builder(cfg)
        names: Dict[str, int] = {}
        for i in range(int(spec["hosts"])):
            names[f"h{i}"] = b.host()
        for i in range(int(spec["switches"])):
            names[f"s{i}"] = b.switch(0)
        degree: Dict[int, int] = {}
        for a_name, b_name in spec["links"]:
            ia, ib = names[a_name], names[b_name]
            degree[ia] = degree.get(ia, 0) + 1
            degree[ib] = degree.get(ib, 0) + 1
        for name, idx in names.items():
            if b.nodes[idx].role == SWITCH:
                b.nodes[idx].n_ports = degree.get(idx, 0)
        for a_name, b_name in spec["links"]:
            b.link(names[a_name], names[b_name])
        return b.topology()
    raise InvalidParameterError(f"unknown topology kind {kind!r}")


def compute_routing(topo: Topology):
    """Shortest-path candidate ports toward every host.

    Returns (routing, attached): ``routing[switch][host_ip]`` is the
    sorted tuple of ports on equal-cost shortest paths;
    ``attached[switch][host_ip]`` is ``(port, mac)`` for directly
    connected hosts.
    """
    n = len(topo.nodes)
    adj: List[List[Tuple[int, int]]] = [[] for _ in range(n)]  # (peer, my_port)
    for l in topo.links:
        (ai, ap), (bi, bp) = l.a, l.b
        adj[ai].append((bi, ap))
        adj[bi].append((ai, bp))

    routing: Dict[int, Dict[int, Tuple[int, ...]]] = {
        s.index: {} for s in topo.switches()}
    attached: Dict[int, Dict[int, Tuple[int, int]]] = {
        s.index: {} for s in topo.switches()}

    for sw in topo.switches():
        for peer, port in adj[sw.index]:
            node = topo.nodes[peer]
            if node.role == HOST:
                attached[sw.index][node.ip] = (port, node.mac)

    for h in topo.hosts():
        dist = [None] * n
        dist[h.index] = 0
        frontier = [h.index]
        while frontier:
            nxt = []
            for v in frontier:
                for peer, _ in adj[v]:
                    if dist[peer] is None:
                        dist[peer] = dist[v] + 1
                        nxt.append(peer)
            frontier = nxt
        for sw in topo.switches():
            d = dist[sw.index]
            if d is None:
                continue
            ports = sorted(port for peer, port in adj[sw.index]
                           if dist[peer] is not None and dist[peer] == d - 1)
            if ports:
                routing[sw.index][h.ip] = tuple(ports)
    return routing, attached


# ---------------------------------------------------------------------------
# Links and the assembled network

class HalfLink:
    """One direction of a link: FIFO queue, ECN marking, seeded loss."""

    __slots__ = ("engine", "name", "dst", "dst_port", "bandwidth", "prop_delay",
                 "capacity", "ecn_k", "loss_rate", "rng", "occupancy",
                 "busy_until", "drop_hooks")

    def __init__(self, engine, name, dst, dst_port, bandwidth, prop_delay,
                 capacity, ecn_k, loss_rate, rng):
        self.engine = engine
        self.name = name
        self.dst = dst
        self.dst_port = dst_port
        self.bandwidth = bandwidth
        self.prop_delay = prop_delay
        self.capacity = capacity
        self.ecn_k = ecn_k
        self.loss_rate = loss_rate
        self.rng = rng
        self.occupancy = 0
        self.busy_until = 0.0
        self.drop_hooks: List[Callable] = []  # one-shot predicates for tests

    def send(self, pkt) -> None:
        eng = self.engine
        eng.count("tx")
        if self.occupancy >= self.capacity:
            eng.log("drop_queue", link=self.name)
            return
        if self.occupancy > self.ecn_k:
            pkt.ip.ecn = wire.ECN_CE
        self.occupancy += 1
        size = wire.encoded_size(pkt)
        start = self.busy_until if self.busy_until > eng.now else eng.now
        fin = start + size * 8.0 / self.bandwidth
        self.busy_until = fin
        eng.schedule(fin, self._dequeue)

        lost = False
        for i, hook in enumerate(self.drop_hooks):
            if hook(pkt):
                del self.drop_hooks[i]
                lost = True
                break
        if not lost and self.loss_rate > 0.0:
            lost = self.rng.random() < self.loss_rate
        if lost:
            eng.log("drop_loss", link=self.name, pkt=pkt.kind.value,
                    psn=pkt.bth.psn if pkt.bth else None)
            return
        eng.schedule(fin + self.prop_delay, self._arrive, pkt)

    def _arrive(self, pkt) -> None:
        self.engine.count("rx")
        self.dst.handle(pkt, self.dst_port)

    def _dequeue(self) -> None:
        self.occupancy -= 1


@dataclass
class NodeCtx:
    """What a node object needs from its surroundings."""
    engine: Engine
    index: int
    name: str
    ip: int
    mac: int
    n_ports: int
    send: Callable = None
    mac_of: Callable = None


class Network:
    """Topology instantiated over an engine: nodes wired by half links."""

    def __init__(self, topo: Topology, engine: Engine, cfg: SimConfig,
                 seed: int, loss_rate: float = 0.0):
        self.topo = topo
        self.engine = engine
        self.cfg = cfg
        self.seed = seed
        self.loss_rate = loss_rate
        self.nodes: List[object] = [None] * len(topo.nodes)
        self._out: List[Dict[int, HalfLink]] = [dict() for _ in topo.nodes]

    def ctx(self, index: int) -> NodeCtx:
        spec = self.topo.nodes[index]
        return NodeCtx(
            engine=self.engine, index=index, name=spec.name, ip=spec.ip,
            mac=spec.mac, n_ports=spec.n_ports,
            send=lambda port, pkt, _i=index: self.send(_i, port, pkt),
            mac_of=self.topo.mac_of,
        )

    def attach(self, index: int, node: object) -> None:
        self.nodes[index] = node

    def wire(self) -> None:
        """Create both directions of every link. Nodes must be attached."""
        for l in self.topo.links:
            for (src, sp), (dst, dp) in ((l.a, l.b), (l.b, l.a)):
                # Random in-fabric discard happens at switch egress only.
                loss = self.loss_rate if self.topo.nodes[src].role == SWITCH else 0.0
                if l.loss_rate:
                    loss = l.loss_rate
                name = f"{self.topo.nodes[src].name}:{sp}->{self.topo.nodes[dst].name}:{dp}"
                self._out[src][sp] = HalfLink(
                    self.engine, name, self.nodes[dst], dp,
                    l.bandwidth_bps, l.prop_delay_s,
                    self.cfg.queue_capacity_pkts, self.cfg.ecn_threshold_pkts,
                    loss, random.Random(derive_seed(self.seed, "loss", name)),
                )

    def send(self, index: int, port: int, pkt) -> None:
        link = self._out[index].get(port)
        if link is None:
            raise SimError(f"node {index} has no link on port {port}")
        link.send(pkt)

    def link_between(self, src_name: str, dst_name: str) -> HalfLink:
        """Directed link lookup by node names (test hook installation)."""
        for ports in self._out:
            for hl in ports.values():
                if hl.name.startswith(src_name + ":") and f"->{dst_name}:" in hl.name:
                    return hl
        raise KeyError(f"{src_name}->{dst_name}")
