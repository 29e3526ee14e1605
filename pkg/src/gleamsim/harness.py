"""Scenario harness: builds a network, drives a workload, reports metrics.

Scenario files are JSON or YAML with this shape::

    name: bcast-star4
    topology: {kind: star, hosts: 4}        # star | leaf_spine | fat_tree | custom
    workload:
      kind: bcast                           # see below
      msg_bytes: 1048576
      sender: 0
      receivers: [1, 2, 3]
    group: {group_ip: "239.1.1.1", initial_psn: 0}   # multicast workloads
    loss_rate: 0.0
    seed: 1
    sim: {mtu_payload: 1024}                # SimConfig overrides, optional
    limits: {max_time_s: 5.0, stall_timeout_s: 0.05}

Workload kinds and their parameters:

    bcast          msg_bytes, sender, receivers       (fabric multicast)
    multi_unicast  msg_bytes, sender, receivers       (one unicast per receiver)
    ring_overlay   msg_bytes, chunk_bytes, sender, receivers (chained relay)
    replication    io_bytes, n_copies, duration_s, transport(gleam|multi_unicast),
                   client, servers, queue_depth
    hpl            n, pb_bytes, rs_bytes, distribution(uniform|centralized),
                   transport(gleam|ring), chunk_bytes
    source_switch  first_bytes, second_bytes, members (first two are the sources)

Reports are written as JSON (one file per run) and CSV with the frozen
schema ``scenario,seed,metric,value`` (one row per metric).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import netsim, wire
from .host import GroupMembership, Host, MemoryRegion, QueuePair, WorkRequest, switch_source
from .netsim import DeadlockError, Engine, Network, SimConfig, derive_seed
from .switch import SwitchNode
from .wire import MrInfo, parse_ip

DEFAULT_GROUP_IP = "239.1.1.1"

log = logging.getLogger("gleamsim.harness")


class ScenarioError(Exception):
    pass


_WORKLOADS = {
    "bcast": ("msg_bytes",),
    "multi_unicast": ("msg_bytes",),
    "ring_overlay": ("msg_bytes", "chunk_bytes"),
    "replication": ("io_bytes", "n_copies", "duration_s"),
    "hpl": ("n", "pb_bytes", "rs_bytes"),
    "source_switch": ("first_bytes", "second_bytes"),
}


@dataclass
class Scenario:
    name: str
    topology: dict
    workload: dict
    group: dict = field(default_factory=dict)
    loss_rate: float = 0.0
    seed: int = 1
    sim: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(Scenario)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return Scenario(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @staticmethod
    def from_file(path: str) -> "Scenario":
        with open(path) as fh:
            text = fh.read()
        if path.endswith((".yaml", ".yml")):
            import yaml
            try:
                data = yaml.safe_load(text)
            except yaml.YAMLError as exc:
                raise ScenarioError(f"bad YAML: {exc}") from None
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"bad JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ScenarioError("scenario file must hold a mapping")
        return Scenario.from_dict(data)

    def sim_config(self) -> SimConfig:
        cfg = SimConfig()
        for key, val in self.sim.items():
            if not hasattr(cfg, key):
                raise ScenarioError(f"unknown sim parameter {key!r}")
            setattr(cfg, key, type(getattr(cfg, key))(val))
        return cfg

    def validate(self) -> None:
        from .psn import MAX_INFLIGHT

        if not isinstance(self.topology, dict) or "kind" not in self.topology:
            raise ScenarioError("topology.kind is required")
        kind = self.workload.get("kind")
        if kind not in _WORKLOADS:
            raise ScenarioError(f"unknown workload kind {kind!r}")
        for param in _WORKLOADS[kind]:
            val = self.workload.get(param)
            if val is None or (isinstance(val, (int, float)) and val <= 0):
                raise ScenarioError(f"workload.{param} must be positive")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ScenarioError("loss_rate must lie in [0, 1]")
        cfg = self.sim_config()
        if cfg.window > MAX_INFLIGHT:
            raise ScenarioError(f"window exceeds in-flight budget {MAX_INFLIGHT}")
        try:
            topo = netsim.topology_from_dict(self.topology, cfg)
        except netsim.InvalidParameterError as exc:
            raise ScenarioError(str(exc)) from None
        n_hosts = len(topo.hosts())
        for idx in self._involved_hosts():
            if not 0 <= idx < n_hosts:
                raise ScenarioError(f"host index {idx} outside topology ({n_hosts} hosts)")
        gip = parse_ip(self.group.get("group_ip", DEFAULT_GROUP_IP))
        if not wire.is_multicast_ip(gip):
            raise ScenarioError("group_ip must be an IPv4 multicast address")
        wl = self.workload
        if kind in ("bcast", "multi_unicast", "ring_overlay"):
            recv = wl.get("receivers")
            if recv is not None and len(recv) < (2 if kind == "ring_overlay" else 1):
                raise ScenarioError(f"{kind} needs more receivers")
        if kind == "ring_overlay" and "receivers" not in wl and n_hosts < 3:
            raise ScenarioError("ring_overlay needs at least two receivers")
        if kind == "replication" and int(wl["n_copies"]) > n_hosts - 1:
            raise ScenarioError("n_copies exceeds available servers")
        if kind == "hpl" and int(wl["n"]) ** 2 > n_hosts:
            raise ScenarioError(f"hpl n={wl['n']} needs {int(wl['n']) ** 2} hosts")
        if kind == "source_switch" and len(wl.get("members", range(n_hosts))) < 2:
            raise ScenarioError("source_switch needs at least two members")

    def _involved_hosts(self) -> List[int]:
        wl = self.workload
        out = []
        for key in ("sender", "client"):
            if key in wl:
                out.append(int(wl[key]))
        for key in ("receivers", "servers", "members"):
            out.extend(int(i) for i in wl.get(key, []))
        return out


# ---------------------------------------------------------------------------
# Metrics

@dataclass
class MetricsReport:
    scenario: str
    seed: int
    workload: str
    jct_s: float = 0.0
    setup_s: float = 0.0
    data_time_s: float = 0.0
    goodput_bps: float = 0.0
    normalized_goodput: Optional[float] = None
    per_flow_jct: Dict[str, float] = field(default_factory=dict)
    retransmissions: int = 0
    rto_events: int = 0
    nacks: int = 0
    cnps: int = 0
    drops_loss: int = 0
    drops_queue: int = 0
    host_drops: int = 0
    switch_drops: int = 0
    iops_proxy: Optional[float] = None
    io_latency_avg_s: Optional[float] = None
    checksum_ok: bool = True
    rate_samples: List[Tuple[float, float]] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, int, str, str]]:
        vals: List[Tuple[str, object]] = [
            ("jct_s", self.jct_s),
            ("setup_s", self.setup_s),
            ("data_time_s", self.data_time_s),
            ("goodput_bps", self.goodput_bps),
        ]
        if self.normalized_goodput is not None:
            vals.append(("normalized_goodput", self.normalized_goodput))
        vals += [
            ("retransmissions", self.retransmissions),
            ("rto_events", self.rto_events),
            ("nacks", self.nacks),
            ("cnps", self.cnps),
            ("drops_loss", self.drops_loss),
            ("drops_queue", self.drops_queue),
            ("host_drops", self.host_drops),
            ("switch_drops", self.switch_drops),
            ("checksum_ok", int(self.checksum_ok)),
        ]
        if self.iops_proxy is not None:
            vals.append(("iops_proxy", self.iops_proxy))
        if self.io_latency_avg_s is not None:
            vals.append(("io_latency_avg_s", self.io_latency_avg_s))
        for label in sorted(self.per_flow_jct):
            vals.append((f"jct_s[{label}]", self.per_flow_jct[label]))
        return [(self.scenario, self.seed, k, repr(v)) for k, v in vals]

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


def write_csv(reports: List[MetricsReport], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "seed", "metric", "value"])
        for rep in reports:
            w.writerows(rep.rows())


# ---------------------------------------------------------------------------
# Simulation context

class SimContext:
    def __init__(self, sc: Scenario, trace_path: Optional[str] = None):
        self.sc = sc
        self.cfg = sc.sim_config()
        self.engine = Engine(trace_path)
        self.topo = netsim.topology_from_dict(sc.topology, self.cfg)
        self.routing, self.attached = netsim.compute_routing(self.topo)
        self.net = Network(self.topo, self.engine, self.cfg, sc.seed, sc.loss_rate)
        self.hosts: List[Host] = []
        self.switches: List[SwitchNode] = []
        for spec in self.topo.nodes:
            ctx = self.net.ctx(spec.index)
            if spec.role == netsim.HOST:
                node = Host(ctx, self.cfg)
                self.hosts.append(node)
            else:
                node = SwitchNode(ctx, self.cfg, self.routing[spec.index],
                                  self.attached[spec.index],
                                  derive_seed(sc.seed, "ecmp", spec.index))
                self.switches.append(node)
            self.net.attach(spec.index, node)
        self.net.wire()
        for sw in self.switches:
            sw.start()

    def host_ip(self, ordinal: int) -> int:
        return self.topo.hosts()[ordinal].ip

    def payload(self, nbytes: int, label: str = "msg") -> bytes:
        rng = random.Random(derive_seed(self.sc.seed, "payload", label))
        return rng.randbytes(nbytes)


def _digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def setup_group(ctx: SimContext, member_idxs: List[int], master_idx: int,
                on_ready: Callable) -> Dict[int, QueuePair]:
    """Create group QPs on every member and run registration from the master."""
    group_ip = parse_ip(ctx.sc.group.get("group_ip", DEFAULT_GROUP_IP))
    initial_psn = int(ctx.sc.group.get("initial_psn", 0))
    membership = GroupMembership(group_ip, [], ctx.host_ip(master_idx), initial_psn)
    qps: Dict[int, QueuePair] = {}
    for i in member_idxs:
        qp = ctx.hosts[i].join_group(membership)
        membership.members.append((ctx.host_ip(i), qp.local_qpn))
        qps[i] = qp
    master = ctx.hosts[master_idx]
    ctx.engine.schedule(ctx.engine.now,
                        master.start_registration, group_ip, on_ready)
    return qps


def unicast_pair(ctx: SimContext, a: int, b: int) -> Tuple[QueuePair, QueuePair]:
    """RC connection between hosts a and b (returns a-side, b-side QPs)."""
    ha, hb = ctx.hosts[a], ctx.hosts[b]
    qa = ha.create_qp(hb.ip, 0, hb.mac)
    qb = hb.create_qp(ha.ip, qa.local_qpn, ha.mac)
    qa.dest_qpn = qb.local_qpn
    return qa, qb


# ---------------------------------------------------------------------------
# Workload drivers

class Driver:
    workload = "?"

    def __init__(self, ctx: SimContext):
        self.ctx = ctx
        self.wl = ctx.sc.workload
        self.t_data_start: Optional[float] = None
        self.t_end: Optional[float] = None
        self.checksum_ok = True
        self.extra: Dict[str, object] = {}

    def setup(self) -> None:
        raise NotImplementedError

    def done(self) -> bool:
        return self.t_end is not None

    def progress(self) -> float:
        raise NotImplementedError

    def delivered_app_bytes(self) -> int:
        return 0

    def fill(self, rep: MetricsReport) -> None:
        pass


class _DeliveryWatch:
    """Tracks per-receiver delivery targets on existing QPs."""

    def __init__(self, on_all_done: Callable):
        self.targets: Dict[QueuePair, int] = {}
        self.done_at: Dict[QueuePair, float] = {}
        self.on_all_done = on_all_done
        self._engine: Optional[Engine] = None

    def watch(self, qp: QueuePair, nbytes: int, engine: Engine) -> None:
        self.targets[qp] = qp.delivered_bytes + nbytes
        self._engine = engine
        qp.on_delivery = self._hook

    def _hook(self, qp: QueuePair, _n: int) -> None:
        if qp in self.done_at or qp not in self.targets:
            return
        if qp.delivered_bytes >= self.targets[qp]:
            self.done_at[qp] = self._engine.now
            if len(self.done_at) == len(self.targets):
                self.on_all_done(self._engine.now)


class BcastDriver(Driver):
    workload = "bcast"

    def setup(self) -> None:
        wl = self.wl
        self.sender = int(wl.get("sender", 0))
        n_hosts = len(self.ctx.hosts)
        self.receivers = [int(i) for i in wl.get(
            "receivers", [i for i in range(n_hosts) if i != self.sender])]
        self.msg = self.ctx.payload(int(wl["msg_bytes"]))
        self.digest = _digest(self.msg)
        self.sender_done: Optional[float] = None
        self.recv_done: Optional[float] = None
        self.watch = _DeliveryWatch(self._all_delivered)
        members = [self.sender] + self.receivers
        master = int(self.ctx.sc.group.get("master", self.sender))
        self.qps = setup_group(self.ctx, members, master, self._start)

    def _start(self) -> None:
        self.t_data_start = self.ctx.engine.now
        for r in self.receivers:
            self.watch.watch(self.qps[r], len(self.msg), self.ctx.engine)
        wr = WorkRequest("send", self.msg, on_complete=self._sender_complete)
        self.ctx.hosts[self.sender].post(self.qps[self.sender], wr)

    def _sender_complete(self, now: float) -> None:
        self.sender_done = now
        self._maybe_finish()

    def _all_delivered(self, now: float) -> None:
        self.recv_done = now
        self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self.sender_done is not None and self.recv_done is not None:
            self.t_end = max(self.sender_done, self.recv_done)

    def progress(self) -> float:
        return sum(self.qps[r].delivered_bytes for r in self.receivers) \
            + (self.t_data_start or 0)

    def delivered_app_bytes(self) -> int:
        return len(self.msg) * len(self.receivers)

    def fill(self, rep: MetricsReport) -> None:
        for r in self.receivers:
            qp = self.qps[r]
            rep.per_flow_jct[self.ctx.topo.hosts()[r].name] = self.watch.done_at.get(qp, 0.0)
            if qp.stream_digest() != self.digest:
                self.checksum_ok = False
        rep.rate_samples = list(self.qps[self.sender].rate_samples)


class MultiUnicastDriver(Driver):
    workload = "multi_unicast"

    def setup(self) -> None:
        wl = self.wl
        self.sender = int(wl.get("sender", 0))
        n_hosts = len(self.ctx.hosts)
        self.receivers = [int(i) for i in wl.get(
            "receivers", [i for i in range(n_hosts) if i != self.sender])]
        self.msg = self.ctx.payload(int(wl["msg_bytes"]))
        self.digest = _digest(self.msg)
        self.pairs = {r: unicast_pair(self.ctx, self.sender, r) for r in self.receivers}
        self.pending_acks = set(self.receivers)
        self.watch = _DeliveryWatch(self._all_delivered)
        self.recv_done: Optional[float] = None
        self.ctx.engine.schedule(0.0, self._start)

    def _start(self) -> None:
        self.t_data_start = self.ctx.engine.now
        for r in self.receivers:
            tx, rx = self.pairs[r]
            self.watch.watch(rx, len(self.msg), self.ctx.engine)
            wr = WorkRequest("send", self.msg,
                             on_complete=lambda now, r=r: self._acked(r, now))
            self.ctx.hosts[self.sender].post(tx, wr)

    def _acked(self, r: int, now: float) -> None:
        self.pending_acks.discard(r)
        self._maybe_finish(now)

    def _all_delivered(self, now: float) -> None:
        self.recv_done = now
        self._maybe_finish(now)

    def _maybe_finish(self, now: float) -> None:
        if not self.pending_acks and self.recv_done is not None:
            self.t_end = max(now, self.recv_done)

    def progress(self) -> float:
        return sum(rx.delivered_bytes for _, rx in self.pairs.values())

    def delivered_app_bytes(self) -> int:
        return len(self.msg) * len(self.receivers)

    def fill(self, rep: MetricsReport) -> None:
        for r, (tx, rx) in self.pairs.items():
            rep.per_flow_jct[self.ctx.topo.hosts()[r].name] = \
                self.watch.done_at.get(rx, 0.0)
            if rx.stream_digest() != self.digest:
                self.checksum_ok = False


def ring_pipeline_jct(msg_bytes: int, chunk_bytes: int, hops: int,
                      bandwidth_bps: float, hop_delay_s: float) -> float:
    """Ideal chained-relay completion time (no headers, no feedback).

    One chunk: every hop stores and forwards, so hops x (chunk/bw +
    hop_delay). Many chunks pipeline: msg/bw for the head link plus the
    drain of the remaining hops.
    """
    chunk_s = chunk_bytes * 8.0 / bandwidth_bps
    n_chunks = max(1, -(-msg_bytes // chunk_bytes))
    if n_chunks == 1:
        return hops * (chunk_s + hop_delay_s)
    return msg_bytes * 8.0 / bandwidth_bps + (hops - 1) * (chunk_s + hop_delay_s)


class _RingRelay:
    """Chained unicast relay with per-node store-and-forward of chunks."""

    def __init__(self, ctx: SimContext, chain: List[int], message: bytes,
                 chunk_bytes: int, on_done: Callable):
        self.ctx = ctx
        self.chain = chain
        self.message = message
        self.chunk = chunk_bytes
        self.on_done = on_done
        self.tx: Dict[int, QueuePair] = {}
        self.rx: Dict[int, QueuePair] = {}
        for a, b in zip(chain, chain[1:]):
            qa, qb = unicast_pair(ctx, a, b)
            self.tx[a], self.rx[b] = qa, qb
        for node in chain[1:]:
            self.rx[node].capture = bytearray()
            self.rx[node].on_delivery = self._on_delivery
        self.forwarded: Dict[int, int] = {node: 0 for node in chain[1:-1]}
        self.node_of: Dict[QueuePair, int] = {self.rx[n]: n for n in chain[1:]}

    def start(self) -> None:
        self._post_chunks(self.chain[0], self.message)

    def _post_chunks(self, node: int, data: bytes) -> None:
        qp = self.tx[node]
        for off in range(0, len(data), self.chunk):
            self.ctx.hosts[node].post(qp, WorkRequest("send", data[off:off + self.chunk]))

    def _on_delivery(self, qp: QueuePair, _n: int) -> None:
        node = self.node_of[qp]
        if node == self.chain[-1]:
            if qp.delivered_bytes >= len(self.message):
                self.on_done(self.ctx.engine.now)
            return
        sent = self.forwarded[node]
        avail = qp.delivered_bytes
        while sent < len(self.message):
            end = min(sent + self.chunk, len(self.message))
            if avail < end:
                break
            chunk = bytes(qp.capture[sent:end])
            self.ctx.engine.schedule(
                self.ctx.engine.now + self.ctx.cfg.host_fwd_delay_s,
                self._forward, node, chunk)
            sent = end
        self.forwarded[node] = sent

    def _forward(self, node: int, chunk: bytes) -> None:
        self.ctx.hosts[node].post(self.tx[node], WorkRequest("send", chunk))

    def delivered(self) -> int:
        return sum(qp.delivered_bytes for qp in self.rx.values())

    def tail_qp(self) -> QueuePair:
        return self.rx[self.chain[-1]]


class RingOverlayDriver(Driver):
    workload = "ring_overlay"

    def setup(self) -> None:
        wl = self.wl
        sender = int(wl.get("sender", 0))
        n_hosts = len(self.ctx.hosts)
        receivers = [int(i) for i in wl.get(
            "receivers", [i for i in range(n_hosts) if i != sender])]
        self.msg = self.ctx.payload(int(wl["msg_bytes"]))
        self.digest = _digest(self.msg)
        self.relay = _RingRelay(self.ctx, [sender] + receivers, self.msg,
                                int(wl["chunk_bytes"]), self._done)
        self.t_data_start = 0.0
        self.ctx.engine.schedule(0.0, self.relay.start)

    def _done(self, now: float) -> None:
        self.t_end = now

    def progress(self) -> float:
        return self.relay.delivered()

    def delivered_app_bytes(self) -> int:
        return len(self.msg) * (len(self.relay.chain) - 1)

    def fill(self, rep: MetricsReport) -> None:
        if self.relay.tail_qp().stream_digest() != self.digest:
            self.checksum_ok = False


class ReplicationDriver(Driver):
    workload = "replication"

    MR_BASE = 0x2000_0000
    ARENA = 128  # live MRs per server before old ones are retired

    def setup(self) -> None:
        wl = self.wl
        self.client = int(wl.get("client", 0))
        n_copies = int(wl["n_copies"])
        default_servers = [i for i in range(len(self.ctx.hosts)) if i != self.client]
        self.servers = [int(i) for i in wl.get("servers", default_servers)][:n_copies]
        self.io_bytes = int(wl["io_bytes"])
        self.duration = float(wl["duration_s"])
        self.qd = int(wl.get("queue_depth", 16))
        self.transport = wl.get("transport", "gleam")
        self.verify_first = int(wl.get("verify_ios", 32))
        self.completed = 0
        self.latencies: List[float] = []
        self.t_stop: Optional[float] = None
        self._issued = 0
        self._live_mrs: Dict[Tuple[int, int], MemoryRegion] = {}
        self._inflight: Dict[int, dict] = {}
        if self.transport == "gleam":
            members = [self.client] + self.servers
            master = int(self.ctx.sc.group.get("master", self.client))
            self.qps = setup_group(self.ctx, members, master, self._start)
        elif self.transport == "multi_unicast":
            self.pairs = {s: unicast_pair(self.ctx, self.client, s) for s in self.servers}
            self.ctx.engine.schedule(0.0, self._start)
        else:
            raise ScenarioError(f"unknown replication transport {self.transport!r}")

    def _start(self) -> None:
        self.t_data_start = self.ctx.engine.now
        self.t_stop = self.t_data_start + self.duration
        for _ in range(self.qd):
            self._issue()

    def _mr_slot(self, io: int) -> Tuple[int, int]:
        va = self.MR_BASE + (io % self.ARENA) * (self.io_bytes + 0x100)
        rkey = 0x1000 + io
        return va, rkey

    def _issue(self) -> None:
        now = self.ctx.engine.now
        if now >= self.t_stop:
            return
        io = self._issued
        self._issued += 1
        va, rkey = self._mr_slot(io)
        payload = bytes((io % 251,)) * self.io_bytes
        mr_map = {}
        for s in self.servers:
            mr = MemoryRegion(va, rkey, bytearray(self.io_bytes))
            self.ctx.hosts[s].register_mr(mr)
            self._live_mrs[(io, s)] = mr
            mr_map[self.ctx.host_ip(s)] = MrInfo(va, rkey)
        self._inflight[io] = {"t0": now, "payload": payload, "waiting": len(self.servers)}
        if self.transport == "gleam":
            wr = WorkRequest("write", payload, mr_map=mr_map,
                             on_complete=lambda t, io=io: self._complete(io, t))
            self.ctx.hosts[self.client].post(self.qps[self.client], wr)
        else:
            for s in self.servers:
                tx, _ = self.pairs[s]
                wr = WorkRequest("write", payload, mr_map=mr_map,
                                 on_complete=lambda t, io=io: self._part_done(io, t))
                self.ctx.hosts[self.client].post(tx, wr)

    def _part_done(self, io: int, now: float) -> None:
        st = self._inflight[io]
        st["waiting"] -= 1
        if st["waiting"] == 0:
            self._complete(io, now)

    def _complete(self, io: int, now: float) -> None:
        st = self._inflight.pop(io)
        if now <= self.t_stop:
            self.completed += 1
            self.latencies.append(now - st["t0"])
        if io < self.verify_first:
            for s in self.servers:
                if bytes(self._live_mrs[(io, s)].buf) != st["payload"]:
                    self.checksum_ok = False
        self._retire(io)
        self._issue()

    def _retire(self, io: int) -> None:
        old = io - 2 * self.qd
        if old < 0:
            return
        for s in self.servers:
            mr = self._live_mrs.pop((old, s), None)
            if mr is not None:
                try:
                    self.ctx.hosts[s].mrs.remove(mr)
                except ValueError:
                    pass

    def done(self) -> bool:
        if self.t_stop is not None and self.ctx.engine.now >= self.t_stop:
            self.t_end = self.t_stop
            return True
        return False

    def progress(self) -> float:
        return self._issued + self.completed + (self.t_data_start or 0)

    def delivered_app_bytes(self) -> int:
        return self.completed * self.io_bytes * len(self.servers)

    def fill(self, rep: MetricsReport) -> None:
        self.t_end = self.t_stop
        rep.iops_proxy = self.completed / self.duration
        if self.latencies:
            rep.io_latency_avg_s = sum(self.latencies) / len(self.latencies)
        rep.extra["ios_completed"] = self.completed


class SourceSwitchDriver(Driver):
    workload = "source_switch"

    def setup(self) -> None:
        wl = self.wl
        n_hosts = len(self.ctx.hosts)
        self.members = [int(i) for i in wl.get("members", range(n_hosts))]
        self.first, self.second = self.members[0], self.members[1]
        self.msg_a = self.ctx.payload(int(wl["first_bytes"]), "a")
        self.msg_b = self.ctx.payload(int(wl["second_bytes"]), "b")
        self.phase = 0
        self.watch_a = _DeliveryWatch(self._phase_a_delivered)
        self.watch_b = _DeliveryWatch(self._phase_b_delivered)
        self._a_acked = self._a_recv = self._b_acked = self._b_recv = False
        master = int(self.ctx.sc.group.get("master", self.first))
        self.qps = setup_group(self.ctx, self.members, master, self._start_a)

    def _start_a(self) -> None:
        self.t_data_start = self.ctx.engine.now
        for m in self.members[1:]:
            self.watch_a.watch(self.qps[m], len(self.msg_a), self.ctx.engine)
        wr = WorkRequest("send", self.msg_a, on_complete=self._a_ack)
        self.ctx.hosts[self.first].post(self.qps[self.first], wr)

    def _a_ack(self, _now: float) -> None:
        self._a_acked = True
        self._maybe_switch()

    def _phase_a_delivered(self, _now: float) -> None:
        self._a_recv = True
        self._maybe_switch()

    def _maybe_switch(self) -> None:
        if not (self._a_acked and self._a_recv) or self.phase != 0:
            return
        self.phase = 1
        switch_source(self.qps[self.first], self.qps[self.second])
        self.extra["psn_after_switch"] = self.qps[self.second].sq_psn
        for m in self.members:
            if m != self.second:
                self.watch_b.watch(self.qps[m], len(self.msg_b), self.ctx.engine)
        wr = WorkRequest("send", self.msg_b, on_complete=self._b_ack)
        self.ctx.hosts[self.second].post(self.qps[self.second], wr)

    def _b_ack(self, _now: float) -> None:
        self._b_acked = True
        self._maybe_end()

    def _phase_b_delivered(self, _now: float) -> None:
        self._b_recv = True
        self._maybe_end()

    def _maybe_end(self) -> None:
        if self._b_acked and self._b_recv:
            self.t_end = self.ctx.engine.now

    def progress(self) -> float:
        return sum(qp.delivered_bytes for qp in self.qps.values()) + self.phase

    def delivered_app_bytes(self) -> int:
        n = len(self.members)
        return len(self.msg_a) * (n - 1) + len(self.msg_b) * (n - 1)

    def fill(self, rep: MetricsReport) -> None:
        digest_b = _digest(self.msg_b)
        rep.extra.update(self.extra)
        rep.extra["nacks_total"] = sum(qp.stats.nacks_sent for qp in self.qps.values())
        rep.extra["source_switch_events"] = self.ctx.engine.counters.get("source_switch", 0)
        # second-phase stream at the old source must equal the new message
        old_qp = self.qps[self.first]
        self.checksum_ok &= old_qp.stream_digest() == digest_b


class _GroupSend:
    """One multicast message on an established group, with completion."""

    def __init__(self, ctx: SimContext, qps: Dict[int, QueuePair], sender: int,
                 message: bytes, on_done: Callable):
        self.ctx = ctx
        self.qps = qps
        self.sender = sender
        self.message = message
        self.on_done = on_done
        self._acked = False
        self.watch = _DeliveryWatch(self._delivered)
        self._recv = False

    def start(self) -> None:
        for m, qp in self.qps.items():
            if m != self.sender:
                self.watch.watch(qp, len(self.message), self.ctx.engine)
        self.ctx.hosts[self.sender].post(
            self.qps[self.sender],
            WorkRequest("send", self.message, on_complete=self._ack))

    def _ack(self, _now: float) -> None:
        self._acked = True
        self._check()

    def _delivered(self, _now: float) -> None:
        self._recv = True
        self._check()

    def _check(self) -> None:
        if self._acked and self._recv:
            self.on_done(self.ctx.engine.now)


class HplDriver(Driver):
    """Communication pattern of a blocked LU factorization epoch.

    n row groups broadcast panel data (one source per row), then n column
    groups exchange row-swap data where per-member volumes follow the
    configured distribution. Transport is either fabric multicast or the
    chained-relay baseline.
    """

    workload = "hpl"

    def setup(self) -> None:
        wl = self.wl
        self.n = int(wl["n"])
        if self.n * self.n > len(self.ctx.hosts):
            raise ScenarioError(f"hpl n={self.n} needs {self.n ** 2} hosts")
        self.pb_bytes = int(wl["pb_bytes"])
        self.rs_bytes = int(wl["rs_bytes"])
        self.distribution = wl.get("distribution", "uniform")
        self.transport = wl.get("transport", "gleam")
        self.chunk = int(wl.get("chunk_bytes", 16384))
        self.rows = [[r * self.n + c for c in range(self.n)] for r in range(self.n)]
        self.cols = [[r * self.n + c for r in range(self.n)] for c in range(self.n)]
        self._outstanding = 0
        self._phase = "setup"
        if self.transport == "gleam":
            self.row_qps: List[Dict[int, QueuePair]] = []
            self.col_qps: List[Dict[int, QueuePair]] = []
            self._pending_groups = 2 * self.n
            for r, members in enumerate(self.rows):
                self.row_qps.append(self._register(members, f"row{r}", 1 + r))
            for c, members in enumerate(self.cols):
                self.col_qps.append(self._register(members, f"col{c}", 1 + self.n + c))
        else:
            self.ctx.engine.schedule(0.0, self._start_pb)

    def _register(self, members: List[int], label: str, offset: int) -> Dict[int, QueuePair]:
        base_ip = parse_ip(self.ctx.sc.group.get("group_ip", DEFAULT_GROUP_IP))
        group_ip = base_ip + offset
        initial_psn = int(self.ctx.sc.group.get("initial_psn", 0))
        membership = GroupMembership(group_ip, [], self.ctx.host_ip(members[0]), initial_psn)
        qps = {}
        for i in members:
            qp = self.ctx.hosts[i].join_group(membership)
            membership.members.append((self.ctx.host_ip(i), qp.local_qpn))
            qps[i] = qp
        self.ctx.engine.schedule(0.0, self.ctx.hosts[members[0]].start_registration,
                                 group_ip, self._group_ready)
        return qps

    def _group_ready(self) -> None:
        self._pending_groups -= 1
        if self._pending_groups == 0:
            self._start_pb()

    def _weights(self) -> List[float]:
        if self.distribution == "centralized":
            rest = 0.2 / (self.n - 1) if self.n > 1 else 0.0
            return [0.8] + [rest] * (self.n - 1)
        return [1.0 / self.n] * self.n

    def _start_pb(self) -> None:
        self.t_data_start = self.ctx.engine.now
        self._phase = "pb"
        payload = self.ctx.payload(self.pb_bytes, "pb")
        for r, members in enumerate(self.rows):
            self._outstanding += 1
            if self.transport == "gleam":
                _GroupSend(self.ctx, self.row_qps[r], members[0], payload,
                           self._transfer_done).start()
            else:
                _RingRelay(self.ctx, members, payload, self.chunk,
                           self._transfer_done).start()

    def _start_rs(self) -> None:
        self._phase = "rs"
        self._rs_round = 0
        self._run_rs_round()

    def _run_rs_round(self) -> None:
        r = self._rs_round
        weights = self._weights()
        nbytes = max(1, int(weights[r] * self.rs_bytes))
        payload = self.ctx.payload(nbytes, f"rs{r}")
        for c, members in enumerate(self.cols):
            source = members[r]
            self._outstanding += 1
            if self.transport == "gleam":
                qps = self.col_qps[c]
                if r > 0:
                    switch_source(qps[members[r - 1]], qps[source])
                _GroupSend(self.ctx, qps, source, payload, self._transfer_done).start()
            else:
                chain = members[r:] + members[:r]
                _RingRelay(self.ctx, chain, payload, self.chunk,
                           self._transfer_done).start()

    def _transfer_done(self, now: float) -> None:
        self._outstanding -= 1
        if self._outstanding:
            return
        if self._phase == "pb":
            self._start_rs()
        elif self._phase == "rs":
            self._rs_round += 1
            if self._rs_round < self.n:
                self._run_rs_round()
            else:
                self.t_end = now

    def progress(self) -> float:
        return sum(qp.delivered_bytes for h in self.ctx.hosts for qp in h.qps.values())

    def delivered_app_bytes(self) -> int:
        per_row = self.pb_bytes * (self.n - 1)
        per_col = sum(max(1, int(w * self.rs_bytes)) for w in self._weights()) * (self.n - 1)
        return self.n * (per_row + per_col)


_DRIVERS = {
    "bcast": BcastDriver,
    "multi_unicast": MultiUnicastDriver,
    "ring_overlay": RingOverlayDriver,
    "replication": ReplicationDriver,
    "hpl": HplDriver,
    "source_switch": SourceSwitchDriver,
}


# ---------------------------------------------------------------------------
# Run / sweep

def run(sc: Scenario, out_dir: Optional[str] = None,
        trace_path: Optional[str] = None) -> MetricsReport:
    """Execute one scenario to completion and report its metrics."""
    sc.validate()
    log.info("run %s seed=%s loss=%g", sc.name, sc.seed, sc.loss_rate)
    ctx = SimContext(sc, trace_path)
    driver: Driver = _DRIVERS[sc.workload["kind"]](ctx)
    driver.setup()
    _run_loop(ctx, driver)
    rep = _report(ctx, driver)
    ctx.engine.close()
    log.info("done %s seed=%s jct=%.6gs goodput=%.4g bps",
             sc.name, sc.seed, rep.jct_s, rep.goodput_bps)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv([rep], os.path.join(out_dir, f"{sc.name}-{rep.seed}.csv"))
        with open(os.path.join(out_dir, f"{sc.name}-{rep.seed}.json"), "w") as fh:
            json.dump(rep.to_json_dict(), fh, indent=2, sort_keys=True)
    return rep


def _run_loop(ctx: SimContext, driver: Driver) -> None:
    limits = ctx.sc.limits
    max_time = float(limits.get("max_time_s", 5.0))
    stall = float(limits.get("stall_timeout_s", 0.05))
    step = max(min(stall / 8.0, 1e-3), 1e-5)
    last_progress = driver.progress()
    last_change = 0.0
    while not driver.done():
        if ctx.engine.pending() == 0:
            raise DeadlockError("event queue empty with unfinished work")
        ctx.engine.run_until(ctx.engine.now + step)
        p = driver.progress()
        if p != last_progress:
            last_progress, last_change = p, ctx.engine.now
        elif ctx.engine.now - last_change >= stall:
            raise DeadlockError(f"no workload progress for {stall}s of simulated time")
        if ctx.engine.now > max_time:
            raise DeadlockError(f"exceeded max simulated time {max_time}s")


def _report(ctx: SimContext, driver: Driver) -> MetricsReport:
    rep = MetricsReport(scenario=ctx.sc.name, seed=ctx.sc.seed, workload=driver.workload)
    rep.jct_s = driver.t_end or 0.0
    rep.setup_s = driver.t_data_start or 0.0
    rep.data_time_s = max(rep.jct_s - rep.setup_s, 0.0)
    delivered = driver.delivered_app_bytes()
    if rep.data_time_s > 0 and delivered:
        rep.goodput_bps = delivered * 8.0 / rep.data_time_s
    for h in ctx.hosts:
        for qp in h.qps.values():
            rep.retransmissions += qp.stats.retransmissions
            rep.rto_events += qp.stats.rto_events
            rep.nacks += qp.stats.nacks_sent
            rep.cnps += qp.stats.cnps_sent
    c = ctx.engine.counters
    rep.drops_loss = c.get("drop_loss", 0)
    rep.drops_queue = c.get("drop_queue", 0)
    rep.host_drops = c.get("host_drop", 0)
    rep.switch_drops = c.get("switch_drop", 0)
    driver.fill(rep)
    rep.checksum_ok = driver.checksum_ok
    return rep


def sweep(sc: Scenario, loss_rates: List[float], seeds: int = 5,
          out_dir: Optional[str] = None,
          max_workers: Optional[int] = None) -> List[MetricsReport]:
    """Run the scenario across loss rates with derived per-seed seeds.

    Runs are independent (each owns its engine), so they fan out over a
    worker pool and reports are merged in deterministic (seed, rate)
    order after the join. Each seed gets its own zero-loss baseline;
    normalized goodput is the ratio against that baseline, so a requested
    rate of 0 reports exactly 1.0.
    """
    from concurrent.futures import ThreadPoolExecutor

    for rate in loss_rates:
        if not 0.0 <= rate <= 1.0:
            raise ScenarioError(f"loss rate {rate} outside [0, 1]")
    sc.validate()
    jobs = []  # (seed index, rate or None for the baseline, scenario)
    for si in range(seeds):
        seed_i = derive_seed(sc.seed, "sweep", si) & 0x7FFFFFFF
        jobs.append((si, None, dataclasses.replace(
            sc, loss_rate=0.0, seed=seed_i, name=f"{sc.name}@loss=0")))
        for rate in loss_rates:
            if rate != 0.0:
                jobs.append((si, rate, dataclasses.replace(
                    sc, loss_rate=rate, seed=seed_i,
                    name=f"{sc.name}@loss={rate:g}")))
    workers = max_workers or min(8, os.cpu_count() or 1, len(jobs))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {(si, rate): pool.submit(run, scen) for si, rate, scen in jobs}
    reports: List[MetricsReport] = []
    for si in range(seeds):
        base = futures[(si, None)].result()
        base.normalized_goodput = 1.0
        for rate in loss_rates:
            if rate == 0.0:
                reports.append(base)
                continue
            rep = futures[(si, rate)].result()
            rep.normalized_goodput = rep.goodput_bps / base.goodput_bps \
                if base.goodput_bps else None
            reports.append(rep)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(reports, os.path.join(out_dir, f"{sc.name}-sweep.csv"))
        with open(os.path.join(out_dir, f"{sc.name}-sweep.json"), "w") as fh:
            json.dump([r.to_json_dict() for r in reports], fh, indent=2, sort_keys=True)
    return reports


def ring_overlay(sc: Scenario, **kw) -> MetricsReport:
    """Convenience: run a scenario that must use the chained-relay baseline."""
    if sc.workload.get("kind") != "ring_overlay":
        raise ScenarioError("scenario workload is not ring_overlay")
    return run(sc, **kw)
