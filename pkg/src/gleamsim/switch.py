"""Switch-side multicast state machine.

Each switch keeps one forwarding table indexed by multicast group IP.
A group maps to group-level aggregation state plus one entry per port in
the distribution tree. ``connected`` entries point at a directly attached
receiver and carry its IP/QPN/MAC (and, for one-sided writes, the
current memory-region target); ``forwarded`` entries point at another
switch. Data packets fan out over the entries; ACK/NACK/CNP feedback is
condensed so the sender sees a single unicast-like stream:

* an aggregated ACK carries the minimum cumulative PSN over the entries,
  so it confirms delivery at every receiver downstream;
* a NACK is held back until every other branch has acknowledged all
  PSNs below its expected PSN, so one receiver's loss can never be
  masked by another's progress;
* a congestion notification passes only when it arrives from the port
  whose (aged) congestion tally is currently the largest.

One detail matters for liveness: the entry sitting at ``ack_out_port``
is the sender's own leaf entry (the sender registers like any other
member so this switch can rewrite feedback headers toward it). The
sender never acknowledges its own stream, so that entry is skipped when
the minimum is computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .psn import psn_add, psn_min, psn_newer_or_equal, psn_sub
from .wire import (
    EnvelopeBody,
    EnvelopeEntry,
    MrInfo,
    OP_ACK,
    Packet,
    PacketKind,
    MULTICAST_QPN,
    ROCE_PORT,
    SYNDROME_ACK,
    SYNDROME_NACK_SEQ,
    Aeth,
    Bth,
    Eth,
    Ip,
    Udp,
    BROADCAST_MAC,
    is_mr_update,
    is_multicast_ip,
    unpack_mr_update,
)

GROUP_OVERHEAD_BYTES = 24  # group-level state per table row
ENTRY_BYTES = 14           # ip(4) + qpn(3) + mac(6) + packed type/psn(1)


class SwitchError(Exception):
    pass


class UnknownGroupError(SwitchError):
    pass


class NoRouteError(SwitchError):
    pass


class GroupConflictError(SwitchError):
    pass


class MissingMrError(SwitchError):
    pass


@dataclass(slots=True)
class PortEntry:
    port: int
    connected: bool
    ack_psn: int
    dst_ip: int = 0
    dst_qpn: int = 0
    dst_mac: int = 0
    mr: Optional[MrInfo] = None


@dataclass(slots=True)
class GroupState:
    group_ip: int
    init_ack_psn: int
    entries: List[PortEntry] = field(default_factory=list)
    last_ack_psn: int = 0
    ack_out_port: int = -1
    initialized_ack_out: bool = False
    min_port: int = -1
    # Lazily re-derived: any fresh-enough ACK triggers generation while
    # stale (before the first generation and right after a source switch).
    min_port_stale: bool = True
    pending_nack: Optional[int] = None  # recorded minimum expected PSN
    cong_counter: Dict[int, float] = field(default_factory=dict)

    def entry_at(self, port: int) -> Optional[PortEntry]:
        for e in self.entries:
            if e.port == port:
                return e
        return None


class SwitchTable:
    """Forwarding tables and aggregation state for one switch.

    ``attached`` maps directly connected host IPs to ``(port, mac)``.
    ``log`` receives structured event records (kind, **fields) when set.
    """

    def __init__(self, n_ports: int, attached: Dict[int, Tuple[int, int]],
                 switch_mac: int = 0, log: Optional[Callable] = None):
        self.n_ports = n_ports
        self.attached = attached
        self.switch_mac = switch_mac
        self.log = log
        self.groups: Dict[int, GroupState] = {}
        self.port_utilization = [0] * n_ports

    def _log(self, kind: str, **fields) -> None:
        if self.log is not None:
            self.log(kind, **fields)

    def _group(self, group_ip: int) -> GroupState:
        g = self.groups.get(group_ip)
        if g is None:
            raise UnknownGroupError(f"no table for group {group_ip:#010x}")
        return g

    # ------------------------------------------------------------------
    # Registration

    def handle_envelope(self, p: Packet, candidates: Callable[[int], Tuple[int, ...]],
                        in_port: Optional[int] = None) -> List[Tuple[int, Packet]]:
        """Install/extend a group from an envelope and split it downstream.

        ``candidates`` yields the usable output ports for a non-attached
        node IP. Ports already marked forwarded for this group are reused
        so the tree stays a tree; otherwise the least-utilized candidate
        (lowest port on ties) is picked, which load-balances groups over
        the fabric. One new envelope is emitted per distinct output port,
        carrying exactly the entries routed through that port. Envelopes
        also go to connected ports so members can confirm membership.

        When the envelope arrived from another switch (``in_port`` given
        and not a host port), that port also gets a forwarded entry: the
        tree then carries traffic from any member toward the rest, which
        a later source switch relies on. During normal operation that
        entry sits at ack_out_port and is skipped by aggregation.
        """
        body = p.envelope
        group_ip = p.ip.dst_ip
        g = self.groups.get(group_ip)
        if g is None:
            g = GroupState(
                group_ip=group_ip,
                init_ack_psn=body.init_ack_psn(),
                last_ack_psn=body.init_ack_psn(),
            )
            self.groups[group_ip] = g

        if in_port is not None and g.entry_at(in_port) is None and \
                not any(port == in_port for port, _mac in self.attached.values()):
            g.entries.append(PortEntry(port=in_port, connected=False,
                                       ack_psn=g.init_ack_psn))
            g.cong_counter.setdefault(in_port, 0.0)
            self.port_utilization[in_port] += 1

        routed: Dict[int, List[EnvelopeEntry]] = {}
        for node in body.entries:
            att = self.attached.get(node.ip)
            if att is not None:
                port, mac = att
                existing = g.entry_at(port)
                if existing is None:
                    g.entries.append(PortEntry(
                        port=port, connected=True, ack_psn=g.init_ack_psn,
                        dst_ip=node.ip, dst_qpn=node.qpn, dst_mac=mac,
                    ))
                    g.cong_counter.setdefault(port, 0.0)
                    self.port_utilization[port] += 1
                elif existing.connected:
                    if (existing.dst_ip, existing.dst_qpn) != (node.ip, node.qpn):
                        raise GroupConflictError(
                            f"port {port} already holds {existing.dst_ip:#010x}"
                        )
                else:
                    raise GroupConflictError(f"port {port} already forwarded")
            else:
                cands = tuple(candidates(node.ip))
                if not cands:
                    raise NoRouteError(f"no route to {node.ip:#010x}")
                port = None
                for e in g.entries:
                    if not e.connected and e.port in cands:
                        port = e.port
                        break
                if port is None:
                    port = min(cands, key=lambda c: (self.port_utilization[c], c))
                    if g.entry_at(port) is not None:
                        raise GroupConflictError(f"port {port} already in use")
                    g.entries.append(PortEntry(port=port, connected=False,
                                               ack_psn=g.init_ack_psn))
                    g.cong_counter.setdefault(port, 0.0)
                    self.port_utilization[port] += 1
            routed.setdefault(port, []).append(EnvelopeEntry(node.ip, node.qpn))

        out = []
        for port in sorted(routed):
            sub = EnvelopeBody(seq=1, total=1, entries=routed[port])
            sub.set_init_ack_psn(g.init_ack_psn)
            entry = g.entry_at(port)
            dst_mac = entry.dst_mac if entry is not None and entry.connected else BROADCAST_MAC
            out.append((port, Packet(
                PacketKind.ENVELOPE,
                Eth(dst_mac, self.switch_mac),
                Ip(p.ip.src_ip, group_ip),
                Udp(p.udp.src_port, p.udp.dst_port),
                envelope=sub,
            )))
        return out

    # ------------------------------------------------------------------
    # Data plane

    def forward_data(self, p: Packet, in_port: int) -> List[Tuple[int, Packet]]:
        """Duplicate a data packet over the group, rewriting per entry.

        Copies toward forwarded ports go out untouched. Copies toward
        connected ports get the receiver's IP/QPN/MAC and the group IP as
        source, and a WRITE's first packet gets its RETH retargeted at
        that receiver's registered memory region. MR-update messages are
        absorbed here: they refresh the per-receiver MR state and travel
        on to other switches, but never to a host.
        """
        g = self._group(p.ip.dst_ip)
        if g.initialized_ack_out and in_port != g.ack_out_port:
            self._log("source_switch", group=g.group_ip,
                      old_port=g.ack_out_port, new_port=in_port)
            g.min_port_stale = True
        g.ack_out_port = in_port
        g.initialized_ack_out = True

        mr_msg = is_mr_update(p)
        if mr_msg:
            self.mr_update(p, in_port)

        out = []
        for e in g.entries:
            if e.port == in_port:
                continue
            if not e.connected:
                out.append((e.port, p.copy()))
                continue
            if mr_msg:
                continue
            c = p.copy()
            c.ip.dst_ip = e.dst_ip
            c.ip.src_ip = g.group_ip
            c.bth.dst_qpn = e.dst_qpn
            c.eth.dst_mac = e.dst_mac
            if c.reth is not None:
                if e.mr is None:
                    raise MissingMrError(
                        f"no MR state for receiver {e.dst_ip:#010x} in group {g.group_ip:#010x}"
                    )
                c.reth.va = e.mr.va
                c.reth.rkey = e.mr.rkey
            out.append((e.port, c))
        return out

    def mr_update(self, p: Packet, in_port: int) -> None:
        """Refresh per-receiver MR state from an MR-update payload.

        Receivers listed but not connected here are ignored; they hang
        off some other leaf of the tree.
        """
        g = self._group(p.ip.dst_ip)
        for ip, mr in unpack_mr_update(p.payload):
            for e in g.entries:
                if e.connected and e.dst_ip == ip:
                    e.mr = mr

    # ------------------------------------------------------------------
    # Feedback plane

    def handle_feedback(self, p: Packet, in_port: int) -> List[Tuple[int, Packet]]:
        """Fold one ACK/NACK into the table, possibly emitting upstream.

        ACK: advance the port's cumulative PSN; regenerate when the ACK
        came from the port holding the minimum (or while that cache is
        stale) and is not older than the last aggregated ACK.

        NACK with expected PSN e: the port has everything below e, so its
        cumulative advances to e-1; the pending NACK keeps the smallest
        expected PSN seen, and generation re-checks whether it is now
        safe to surface.
        """
        g = self._group(p.ip.dst_ip)
        e = g.entry_at(in_port)
        if e is None:
            raise UnknownGroupError(
                f"feedback on port {in_port} without an entry (group {g.group_ip:#010x})"
            )
        if p.kind is PacketKind.ACK:
            if psn_newer_or_equal(p.bth.psn, e.ack_psn):
                e.ack_psn = p.bth.psn
            if (in_port == g.min_port or g.min_port_stale) and \
                    psn_newer_or_equal(p.bth.psn, g.last_ack_psn):
                return self.generate(g)
        else:
            prev = psn_sub(p.bth.psn, 1)
            if psn_newer_or_equal(prev, e.ack_psn):
                e.ack_psn = prev
            if g.pending_nack is None or psn_newer_or_equal(g.pending_nack, p.bth.psn):
                g.pending_nack = p.bth.psn
                return self.generate(g)
        return []

    def generate(self, g: GroupState) -> List[Tuple[int, Packet]]:
        """Emit the aggregated ACK (and a due NACK) toward the sender."""
        if not g.initialized_ack_out:
            return []
        elig = [(e.port, e.ack_psn) for e in g.entries if e.port != g.ack_out_port]
        if not elig:
            return []
        min_port, min_psn = psn_min(elig)
        out = [(g.ack_out_port, self._feedback_packet(g, min_psn, SYNDROME_ACK))]
        if g.pending_nack is not None and \
                psn_newer_or_equal(psn_add(min_psn, 1), g.pending_nack):
            out.append((g.ack_out_port,
                        self._feedback_packet(g, g.pending_nack, SYNDROME_NACK_SEQ)))
            self._log("nack_forward", group=g.group_ip, epsn=g.pending_nack)
            g.pending_nack = None
        g.last_ack_psn = min_psn
        g.min_port = min_port
        g.min_port_stale = False
        return out

    def _feedback_packet(self, g: GroupState, psn: int, syndrome: int) -> Packet:
        kind = PacketKind.NACK if syndrome == SYNDROME_NACK_SEQ else PacketKind.ACK
        pkt = Packet(
            kind,
            Eth(BROADCAST_MAC, self.switch_mac),
            Ip(g.group_ip, g.group_ip),
            Udp(ROCE_PORT, ROCE_PORT),
            bth=Bth(OP_ACK, False, MULTICAST_QPN, psn),
            aeth=Aeth(syndrome),
        )
        self._rewrite_toward_sender(g, pkt)
        return pkt

    def _rewrite_toward_sender(self, g: GroupState, pkt: Packet) -> None:
        # Last hop: if the sender hangs off ack_out_port, retarget the
        # feedback at its QP so its NIC can match the connection.
        e = g.entry_at(g.ack_out_port)
        if e is not None and e.connected:
            pkt.ip.dst_ip = e.dst_ip
            pkt.bth.dst_qpn = e.dst_qpn
            pkt.eth.dst_mac = e.dst_mac

    # ------------------------------------------------------------------
    # Congestion signal filtering

    def filter_congestion(self, p: Packet, in_port: int) -> Optional[Tuple[int, Packet]]:
        """Count the signal; pass it only from the most congested port."""
        g = self._group(p.ip.dst_ip)
        g.cong_counter[in_port] = g.cong_counter.get(in_port, 0.0) + 1.0
        best_port = None
        best = -1.0
        for port in sorted(g.cong_counter):
            v = g.cong_counter[port]
            if v > best:
                best, best_port = v, port
        if best_port != in_port or not g.initialized_ack_out:
            return None
        c = p.copy()
        c.ip.dst_ip = g.group_ip
        c.ip.src_ip = g.group_ip
        self._rewrite_toward_sender(g, c)
        return (g.ack_out_port, c)

    def age_counters(self, factor: float = 0.5) -> None:
        for g in self.groups.values():
            for port in g.cong_counter:
                g.cong_counter[port] *= factor

    # ------------------------------------------------------------------

    def table_footprint(self) -> int:
        """Accounting-model memory use: 24 B per group + 14 B per entry."""
        return sum(GROUP_OVERHEAD_BYTES + ENTRY_BYTES * len(g.entries)
                   for g in self.groups.values())


class SwitchNode:
    """Event-loop adapter: one switch instance wired into the network.

    Dispatches arrivals by packet class, applies the per-hop processing
    delay, and converts table errors on live traffic into counted drops
    so a malformed or early packet cannot take the simulation down.
    """

    def __init__(self, ctx, cfg, routing: Dict[int, Tuple[int, ...]],
                 attached: Dict[int, Tuple[int, int]], ecmp_seed: int):
        self.ctx = ctx  # NodeCtx: engine, send(), ip, mac, index
        self.cfg = cfg
        self.routing = routing
        self.table = SwitchTable(
            n_ports=ctx.n_ports, attached=attached, switch_mac=ctx.mac,
            log=lambda kind, **kw: ctx.engine.log(kind, node=ctx.name, **kw),
        )
        self._ecmp_seed = ecmp_seed
        self._aging_started = False

    # -- aging timer ----------------------------------------------------
    def start(self) -> None:
        if self.cfg.cnp_age_period_s > 0 and not self._aging_started:
            self._aging_started = True
            self.ctx.engine.schedule(
                self.ctx.engine.now + self.cfg.cnp_age_period_s, self._age)

    def _age(self) -> None:
        self.table.age_counters(self.cfg.cnp_age_factor)
        self.ctx.engine.schedule(
            self.ctx.engine.now + self.cfg.cnp_age_period_s, self._age)

    # -- forwarding -----------------------------------------------------
    def handle(self, p: Packet, in_port: int) -> None:
        try:
            if p.kind is PacketKind.ENVELOPE and is_multicast_ip(p.ip.dst_ip):
                out = self.table.handle_envelope(p, self._candidates, in_port)
            elif p.ip.dst_ip in self.table.groups:
                if p.kind is PacketKind.DATA:
                    out = self.table.forward_data(p, in_port)
                elif p.kind is PacketKind.CNP:
                    hit = self.table.filter_congestion(p, in_port)
                    out = [hit] if hit else []
                else:
                    out = self.table.handle_feedback(p, in_port)
            else:
                out = self._unicast(p)
        except SwitchError as exc:
            self.ctx.engine.log("switch_drop", node=self.ctx.name,
                                reason=type(exc).__name__, pkt=p.kind.value)
            return
        delay = self.cfg.switch_proc_delay_s
        for port, pkt in out:
            self.ctx.engine.schedule(
                self.ctx.engine.now + delay, self.ctx.send, port, pkt)

    def _candidates(self, ip: int) -> Tuple[int, ...]:
        return self.routing.get(ip, ())

    def _unicast(self, p: Packet) -> List[Tuple[int, Packet]]:
        cands = self.routing.get(p.ip.dst_ip)
        if not cands:
            raise UnknownGroupError(f"no route for {p.ip.dst_ip:#010x}")
        if len(cands) == 1:
            return [(cands[0], p)]
        h = _flow_hash(p, self._ecmp_seed)
        return [(cands[h % len(cands)], p)]


def _flow_hash(p: Packet, seed: int) -> int:
    import zlib
    key = (p.ip.src_ip, p.ip.dst_ip, p.udp.src_port, p.udp.dst_port, p.ip.proto)
    return zlib.crc32(repr(key).encode()) ^ seed
