"""End-host transport: simplified RC queue pairs over the simulated fabric.

A QueuePair carries one direction of an RC connection: cumulative ACKs,
NACK-triggered go-back-N retransmission, a retransmission timer with
exponential backoff, and a minimal reactive rate controller (halve on a
congestion notification, recover additively). A multicast QP is an
ordinary QP whose destination is the group IP and the agreed virtual QPN;
the fabric rewrites per-receiver headers, so the same state machine serves
unicast and multicast traffic.

Multicast WRITE support: group QPs precede every WRITE with a small
MR-update message listing each receiver's current memory-region target.
That message is consumed by the fabric and never reaches a receiver, so
it shares the PSN of the WRITE's first packet instead of consuming its
own, and go-back-N re-emits it whenever that first packet is
retransmitted.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from .psn import (
    psn_add,
    psn_distance,
    psn_newer_exact,
    psn_newer_or_equal,
    psn_sub,
)
from . import wire
from .wire import (
    EnvelopeBody,
    EnvelopeEntry,
    MrInfo,
    Packet,
    PacketKind,
    Reth,
    ECN_CE,
    MULTICAST_QPN,
    OP_SEND,
    OP_WRITE_FIRST,
    OP_WRITE_MIDDLE,
    OP_WRITE_LAST,
    SYNDROME_CONFIRM,
    group_mac,
    make_ack,
    make_cnp,
    make_data,
    make_envelope,
    make_nack,
    pack_mr_update,
)

MAX_MESSAGE_BYTES = 2 << 30  # 2 GB


class HostError(Exception):
    pass


class NotRegisteredError(HostError):
    pass


class MessageTooLargeError(HostError):
    pass


class NotQuiescedError(HostError):
    pass


@dataclass(slots=True)
class MemoryRegion:
    va: int
    rkey: int
    buf: bytearray

    def contains(self, va: int, length: int) -> bool:
        return self.va <= va and va + length <= self.va + len(self.buf)


@dataclass
class WorkRequest:
    kind: str  # "send" | "write"
    message: bytes
    mr_map: Optional[Dict[int, MrInfo]] = None  # receiver ip -> MR target
    on_complete: Optional[Callable] = None


@dataclass
class GroupMembership:
    group_ip: int
    members: List[Tuple[int, int]]  # (ip, qpn)
    master_ip: int
    initial_psn: int = 0

    def member_ips(self):
        return [ip for ip, _ in self.members]


@dataclass(slots=True)
class QpStats:
    data_sent: int = 0
    retransmissions: int = 0
    rto_events: int = 0
    acks_sent: int = 0
    nacks_sent: int = 0
    cnps_sent: int = 0
    duplicates_rx: int = 0
    out_of_order_rx: int = 0
    mr_rejects: int = 0


@dataclass(slots=True)
class _Segment:
    opcode: int
    msg: bytes
    off: int
    length: int
    ack_req: bool
    dma_len: int
    va: int
    rkey: int
    mr_update: Optional[bytes]
    fin: bool
    wr: WorkRequest


def master_register(membership: GroupMembership, initial_psn: int,
                    src_ip: int, src_mac: int) -> List[Packet]:
    """Pack the member list into registration envelopes toward the fabric.

    Members are split into ceil(n/183) envelopes with sequential seq
    numbers; every envelope carries the group's initial ack_psn seed
    (initial_psn - 1 mod 2^24).
    """
    if not membership.members:
        raise ValueError("membership has no members")
    chunks = [membership.members[i:i + wire.ENV_MAX_ENTRIES]
              for i in range(0, len(membership.members), wire.ENV_MAX_ENTRIES)]
    seed = psn_sub(initial_psn, 1)
    out = []
    for i, chunk in enumerate(chunks):
        body = EnvelopeBody(
            seq=i + 1, total=len(chunks),
            entries=[EnvelopeEntry(ip, qpn) for ip, qpn in chunk],
        )
        body.set_init_ack_psn(seed)
        out.append(make_envelope(src_ip, membership.group_ip, src_mac,
                                 group_mac(membership.group_ip), body))
    return out


def switch_source(old: "QueuePair", new: "QueuePair") -> None:
    """Hand the multicast sender role from ``old`` to ``new``.

    Both QPs must be quiescent. The new source starts numbering where the
    receivers expect (its rqPSN), and the old source arms its receive side
    at its own send position so it accepts the new stream.
    """
    if not old.quiesced() or not new.quiesced():
        raise NotQuiescedError("source switch requires quiesced QPs")
    new.sq_psn = new.rq_psn
    new._cursor = new.sq_psn
    new.acked_psn = psn_sub(new.sq_psn, 1)
    old.rq_psn = old.sq_psn
    old.nack_armed = False


class QueuePair:
    """One RC endpoint. Owned and driven by a Host."""

    def __init__(self, local_qpn, local_ip, local_mac, dest_ip, dest_qpn, dest_mac,
                 cfg, initial_psn=0, group: Optional[GroupMembership] = None,
                 mr_lookup: Optional[Callable] = None):
        self.local_qpn = local_qpn
        self.local_ip = local_ip
        self.local_mac = local_mac
        self.dest_ip = dest_ip
        self.dest_qpn = dest_qpn
        self.dest_mac = dest_mac
        self.cfg = cfg
        self.group = group
        self.ready = group is None  # group QPs wait for their envelope
        self.mr_lookup = mr_lookup

        # sender
        self.sq_psn = initial_psn
        self.acked_psn = psn_sub(initial_psn, 1)
        self._cursor = initial_psn
        self._pending: deque = deque()
        self._segments: Dict[int, _Segment] = {}
        self._completions: deque = deque()
        self.window = cfg.window
        self.rate_bps = cfg.line_rate_bps
        self.rto_base = cfg.rtt_estimate_s * cfg.rto_multiple
        self.rto_max = self.rto_base * cfg.rto_max_multiple
        self.rto_cur = self.rto_base
        self.rto_deadline: Optional[float] = None
        self.rto_timer_live = False
        self.pacer_armed = False
        self.recovery_armed = False

        # receiver
        self.rq_psn = initial_psn
        self.nack_armed = False
        self._coalesce = 0
        self._last_cnp = -1e18
        self._hasher = hashlib.blake2b(digest_size=16)
        self.delivered_bytes = 0
        self.delivered_psns = 0
        self.capture: Optional[bytearray] = None
        self.on_delivery: Optional[Callable] = None
        self._wr_mr: Optional[MemoryRegion] = None
        self._wr_off = 0

        self.stats = QpStats()
        self.rate_samples: List[Tuple[float, float]] = []

    # -- sender side ----------------------------------------------------

    def quiesced(self) -> bool:
        return (not self._pending and self._cursor == self.sq_psn
                and psn_distance(self.sq_psn, self.acked_psn) == 1)

    def unacked(self) -> int:
        return psn_distance(self.sq_psn, self.acked_psn) - 1

    def post_send(self, wr: WorkRequest) -> None:
        if not self.ready:
            raise NotRegisteredError("group registration incomplete")
        if len(wr.message) > MAX_MESSAGE_BYTES:
            raise MessageTooLargeError(f"{len(wr.message)} bytes exceeds 2 GB")
        mtu = self.cfg.mtu_payload
        msg = wr.message
        n_seg = max(1, -(-len(msg) // mtu))
        if wr.kind == "send":
            for i in range(n_seg):
                last = i == n_seg - 1
                self._pending.append(_Segment(
                    opcode=OP_SEND, msg=msg, off=i * mtu,
                    length=min(mtu, len(msg) - i * mtu) if msg else 0,
                    ack_req=last or (i + 1) % self.cfg.ack_coalesce == 0,
                    dma_len=0, va=0, rkey=0, mr_update=None, fin=last, wr=wr,
                ))
        elif wr.kind == "write":
            multicast = self.group is not None
            if multicast:
                mr_payload = pack_mr_update(sorted(wr.mr_map.items()))
                va = rkey = 0  # placeholders, rewritten at the leaf
            else:
                mr_payload = None
                target = wr.mr_map[self.dest_ip]
                va, rkey = target.va, target.rkey
            for i in range(n_seg):
                last = i == n_seg - 1
                first = i == 0
                if first:
                    opcode = OP_WRITE_FIRST
                elif last:
                    opcode = OP_WRITE_LAST
                else:
                    opcode = OP_WRITE_MIDDLE
                self._pending.append(_Segment(
                    opcode=opcode, msg=msg, off=i * mtu,
                    length=min(mtu, len(msg) - i * mtu) if msg else 0,
                    ack_req=last or (i + 1) % self.cfg.ack_coalesce == 0,
                    dma_len=len(msg) if first else 0,
                    va=va if first else 0, rkey=rkey if first else 0,
                    mr_update=mr_payload if first else None,
                    fin=last, wr=wr,
                ))
        else:
            raise ValueError(f"unknown work request kind {wr.kind!r}")

    def can_transmit(self) -> bool:
        if self._cursor != self.sq_psn:
            return True
        # Gate keeps (sq_psn - acked_psn) mod 2^24 <= window at all times.
        return bool(self._pending) and psn_distance(self.sq_psn, self.acked_psn) < self.window

    def next_tx_packets(self) -> List[Packet]:
        """Pull the next wire transmission: [] if blocked, else one data
        packet, preceded by its MR-update companion when it has one."""
        if self._cursor != self.sq_psn:
            psn = self._cursor
            seg = self._segments.get(psn)
            if seg is None:  # raced with a cumulative ACK
                self._cursor = psn_add(self.acked_psn, 1)
                return self.next_tx_packets() if self._cursor != self.sq_psn else []
            self._cursor = psn_add(psn, 1)
            self.stats.retransmissions += 1
        elif self._pending and psn_distance(self.sq_psn, self.acked_psn) < self.window:
            seg = self._pending.popleft()
            psn = self.sq_psn
            self._segments[psn] = seg
            self.sq_psn = psn_add(psn, 1)
            self._cursor = self.sq_psn
            if seg.fin:
                self._completions.append((psn, seg.wr))
        else:
            return []

        out = []
        if seg.mr_update is not None:
            out.append(make_data(
                self.local_ip, self.dest_ip, self.local_mac, self.dest_mac,
                self.dest_qpn, psn, seg.mr_update,
                opcode=OP_WRITE_FIRST, ack_req=False, reth=Reth(0, 0, 0),
            ))
        reth = None
        if seg.opcode == OP_WRITE_FIRST:
            reth = Reth(seg.va, seg.rkey, seg.dma_len)
        out.append(make_data(
            self.local_ip, self.dest_ip, self.local_mac, self.dest_mac,
            self.dest_qpn, psn, seg.msg[seg.off:seg.off + seg.length],
            opcode=seg.opcode, ack_req=seg.ack_req, reth=reth,
        ))
        self.stats.data_sent += 1
        return out

    def _retire_through(self, psn: int) -> None:
        p = psn_add(self.acked_psn, 1)
        while True:
            self._segments.pop(p, None)
            if p == psn:
                break
            p = psn_add(p, 1)

    def _clamp_cursor(self) -> None:
        lo = psn_add(self.acked_psn, 1)
        if psn_distance(self._cursor, lo) > psn_distance(self.sq_psn, lo):
            self._cursor = lo

    def on_ack(self, p: Packet, now: float) -> bool:
        """Cumulative acknowledgment. Returns True on progress."""
        psn = p.bth.psn
        if not psn_newer_exact(psn, self.acked_psn):
            return False
        if psn_distance(psn, self.acked_psn) >= psn_distance(self.sq_psn, self.acked_psn):
            return False  # acknowledges past everything sent: not ours
        self._retire_through(psn)
        self.acked_psn = psn
        self._clamp_cursor()
        self.rto_cur = self.rto_base
        self.rto_deadline = None if self.unacked() == 0 and not self._pending \
            else now + self.rto_cur
        return True

    def on_nack(self, p: Packet, now: float) -> bool:
        """Go-back-N: resume transmission at the expected PSN."""
        psn = p.bth.psn
        if not psn_newer_exact(psn, self.acked_psn):
            return False  # stale
        if psn_distance(psn, self.acked_psn) > psn_distance(self.sq_psn, self.acked_psn):
            return False  # expects past everything sent: not ours
        prev = psn_sub(psn, 1)
        if psn_newer_exact(prev, self.acked_psn):
            self._retire_through(prev)
            self.acked_psn = prev
        self._cursor = psn
        self.rto_cur = self.rto_base
        self.rto_deadline = None if self.unacked() == 0 and not self._pending \
            else now + self.rto_cur
        return True

    def take_completed(self) -> List[WorkRequest]:
        done = []
        while self._completions and psn_newer_or_equal(self.acked_psn, self._completions[0][0]):
            done.append(self._completions.popleft()[1])
        return done

    def rto_expire(self, now: float) -> bool:
        """Retransmit everything unacknowledged; double the timeout."""
        if self.unacked() == 0:
            self.rto_deadline = None
            return False
        self._cursor = psn_add(self.acked_psn, 1)
        self.rto_cur = min(self.rto_cur * 2, self.rto_max)
        self.rto_deadline = now + self.rto_cur
        self.stats.rto_events += 1
        return True

    def on_cnp(self, now: float) -> None:
        self.rate_bps = max(self.cfg.rate_min_bps, self.rate_bps * 0.5)
        self.rate_samples.append((now, self.rate_bps))

    def rate_recover(self, now: float) -> bool:
        """Additive increase step; True while below line rate."""
        self.rate_bps = min(self.cfg.line_rate_bps, self.rate_bps + self.cfg.rate_ai_bps)
        self.rate_samples.append((now, self.rate_bps))
        return self.rate_bps < self.cfg.line_rate_bps

    # -- receiver side ----------------------------------------------------

    def on_data(self, p: Packet, now: float) -> List[Packet]:
        """Receive one data packet; return the feedback to emit."""
        out: List[Packet] = []
        psn = p.bth.psn
        if psn == self.rq_psn:
            if self._accept(p):
                self.rq_psn = psn_add(self.rq_psn, 1)
                self.delivered_psns += 1
                self.nack_armed = False
                self._coalesce += 1
                if p.bth.ack_req or self._coalesce >= self.cfg.ack_coalesce:
                    self._coalesce = 0
                    out.append(self._feedback(psn))
                    self.stats.acks_sent += 1
        elif psn_newer_exact(self.rq_psn, psn):
            # Duplicate of something already delivered: re-acknowledge.
            self.stats.duplicates_rx += 1
            out.append(self._feedback(psn_sub(self.rq_psn, 1)))
            self.stats.acks_sent += 1
        else:
            self.stats.out_of_order_rx += 1
            if not self.nack_armed:
                self.nack_armed = True
                out.append(make_nack(self.local_ip, p.ip.src_ip, self.local_mac,
                                     self.dest_mac, self.dest_qpn, self.rq_psn))
                self.stats.nacks_sent += 1
        if p.ip.ecn == ECN_CE and now - self._last_cnp >= self.cfg.cnp_interval_s:
            self._last_cnp = now
            out.append(make_cnp(self.local_ip, p.ip.src_ip, self.local_mac,
                                self.dest_mac, self.dest_qpn))
            self.stats.cnps_sent += 1
        return out

    def _accept(self, p: Packet) -> bool:
        payload = p.payload
        if p.bth.opcode == OP_WRITE_FIRST:
            mr = self.mr_lookup(p.reth.va, p.reth.rkey, p.reth.dma_len) \
                if self.mr_lookup else None
            if mr is None:
                self.stats.mr_rejects += 1
                return False
            self._wr_mr = mr
            self._wr_off = p.reth.va - mr.va
        elif p.bth.opcode in (OP_WRITE_MIDDLE, OP_WRITE_LAST):
            if self._wr_mr is None:
                self.stats.mr_rejects += 1
                return False
        if p.bth.opcode in (OP_WRITE_FIRST, OP_WRITE_MIDDLE, OP_WRITE_LAST):
            self._wr_mr.buf[self._wr_off:self._wr_off + len(payload)] = payload
            self._wr_off += len(payload)
            if p.bth.opcode == OP_WRITE_LAST:
                self._wr_mr = None
        self._hasher.update(payload)
        self.delivered_bytes += len(payload)
        if self.capture is not None:
            self.capture.extend(payload)
        if self.on_delivery is not None:
            self.on_delivery(self, len(payload))
        return True

    def _feedback(self, psn: int) -> Packet:
        return make_ack(self.local_ip, self.dest_ip, self.local_mac,
                        self.dest_mac, self.dest_qpn, psn)

    def stream_digest(self) -> str:
        return self._hasher.hexdigest()


class Host:
    """Event-loop adapter owning the QPs, MRs and timers of one server."""

    def __init__(self, ctx, cfg):
        self.ctx = ctx
        self.cfg = cfg
        self.ip = ctx.ip
        self.mac = ctx.mac
        self.qps: Dict[int, QueuePair] = {}
        self.mrs: List[MemoryRegion] = []
        self.memberships: Dict[int, GroupMembership] = {}
        self.group_qpn: Dict[int, int] = {}
        self._master: Dict[int, dict] = {}
        self._next_qpn = 0x10
        self._ready_transitions = 0
        self.counters: Dict[str, int] = {}

    # -- setup ------------------------------------------------------------

    def create_qp(self, dest_ip, dest_qpn, dest_mac, group=None, initial_psn=0) -> QueuePair:
        qpn = self._next_qpn
        self._next_qpn += 1
        qp = QueuePair(qpn, self.ip, self.mac, dest_ip, dest_qpn, dest_mac,
                       self.cfg, initial_psn=initial_psn, group=group,
                       mr_lookup=self._find_mr)
        self.qps[qpn] = qp
        return qp

    def join_group(self, membership: GroupMembership) -> QueuePair:
        qp = self.create_qp(membership.group_ip, MULTICAST_QPN,
                            group_mac(membership.group_ip), group=membership,
                            initial_psn=membership.initial_psn)
        self.memberships[membership.group_ip] = membership
        self.group_qpn[membership.group_ip] = qp.local_qpn
        return qp

    def register_mr(self, mr: MemoryRegion) -> None:
        self.mrs.append(mr)

    def _find_mr(self, va, rkey, length) -> Optional[MemoryRegion]:
        for mr in self.mrs:
            if mr.rkey == rkey and mr.contains(va, length):
                return mr
        return None

    def start_registration(self, group_ip: int, on_complete=None) -> None:
        """Master only: emit the envelopes and collect confirmations."""
        membership = self.memberships[group_ip]
        self._master[group_ip] = {
            "waiting": set(membership.member_ips()),
            "cb": on_complete,
        }
        for pkt in master_register(membership, membership.initial_psn, self.ip, self.mac):
            self._emit(pkt)

    # -- arrivals ---------------------------------------------------------

    def handle(self, p: Packet, in_port: int) -> None:
        if p.eth.dst_mac not in (self.mac, wire.BROADCAST_MAC):
            self._count("bad_mac_drop")
            return
        now = self.ctx.engine.now
        if p.kind is PacketKind.ENVELOPE:
            self._on_envelope(p)
            return
        if p.kind is PacketKind.ACK and p.aeth.syndrome == SYNDROME_CONFIRM:
            self._on_confirmation(p)
            return
        qp = self.qps.get(p.bth.dst_qpn)
        if qp is None:
            self._count("unknown_qpn_drop")
            return
        if p.kind is PacketKind.DATA:
            for fb in qp.on_data(p, now):
                self._emit(fb)
        elif p.kind is PacketKind.ACK:
            if qp.on_ack(p, now):
                self._finish(qp, now)
            self._kick(qp)
        elif p.kind is PacketKind.NACK:
            if qp.on_nack(p, now):
                self._finish(qp, now)
                self.ctx.engine.log("goback", node=self.ctx.name,
                                    psn=p.bth.psn, acked=qp.acked_psn)
            self._kick(qp)
        elif p.kind is PacketKind.CNP:
            qp.on_cnp(now)
            if not qp.recovery_armed:
                qp.recovery_armed = True
                self.ctx.engine.schedule(now + self.cfg.rate_ai_period_s,
                                         self._recover, qp)

    def _on_envelope(self, p: Packet) -> None:
        membership = self.memberships.get(p.ip.dst_ip)
        if membership is None:
            self._count("stray_envelope")
            return
        if self.ip not in (e.ip for e in p.envelope.entries):
            return
        qp = self.qps[self.group_qpn[p.ip.dst_ip]]
        if not qp.ready:
            qp.ready = True
            self._ready_transitions += 1
        confirm = make_ack(self.ip, membership.master_ip, self.mac,
                           self.ctx.mac_of(membership.master_ip), 0, 0,
                           syndrome=SYNDROME_CONFIRM)
        confirm.payload = p.ip.dst_ip.to_bytes(4, "big")
        self._emit(confirm)

    def _on_confirmation(self, p: Packet) -> None:
        group_ip = int.from_bytes(p.payload[:4], "big")
        rec = self._master.get(group_ip)
        if rec is None:
            return
        rec["waiting"].discard(p.ip.src_ip)
        if not rec["waiting"] and rec["cb"] is not None:
            cb, rec["cb"] = rec["cb"], None
            cb()

    # -- transmission -----------------------------------------------------

    def post(self, qp: QueuePair, wr: WorkRequest) -> None:
        qp.post_send(wr)
        self._kick(qp)

    def _kick(self, qp: QueuePair) -> None:
        if not qp.pacer_armed and qp.can_transmit():
            qp.pacer_armed = True
            self.ctx.engine.schedule(self.ctx.engine.now, self._pace, qp)

    def _pace(self, qp: QueuePair) -> None:
        pkts = qp.next_tx_packets()
        if not pkts:
            qp.pacer_armed = False
            return
        bits = 0
        for pkt in pkts:
            bits += wire.encoded_size(pkt) * 8
            self._emit(pkt)
        now = self.ctx.engine.now
        if qp.rto_deadline is None:
            qp.rto_deadline = now + qp.rto_cur
        if not qp.rto_timer_live:
            qp.rto_timer_live = True
            self.ctx.engine.schedule(qp.rto_deadline, self._rto_check, qp)
        self.ctx.engine.schedule(now + bits / qp.rate_bps, self._pace, qp)

    def _rto_check(self, qp: QueuePair) -> None:
        now = self.ctx.engine.now
        deadline = qp.rto_deadline
        if deadline is None:
            qp.rto_timer_live = False
            return
        if now < deadline - 1e-15:
            self.ctx.engine.schedule(deadline, self._rto_check, qp)
            return
        if qp.rto_expire(now):
            self._count("rto")
            self._kick(qp)
        if qp.rto_deadline is not None:
            self.ctx.engine.schedule(qp.rto_deadline, self._rto_check, qp)
        else:
            qp.rto_timer_live = False

    def _recover(self, qp: QueuePair) -> None:
        if qp.rate_recover(self.ctx.engine.now):
            self.ctx.engine.schedule(self.ctx.engine.now + self.cfg.rate_ai_period_s,
                                     self._recover, qp)
        else:
            qp.recovery_armed = False

    def _finish(self, qp: QueuePair, now: float) -> None:
        for wr in qp.take_completed():
            if wr.on_complete is not None:
                wr.on_complete(now)

    def _emit(self, pkt: Packet) -> None:
        self.ctx.send(0, pkt)

    def _count(self, key: str) -> None:
        self.counters[key] = self.counters.get(key, 0) + 1
        self.ctx.engine.count("host_drop" if key.endswith("drop") else key)
