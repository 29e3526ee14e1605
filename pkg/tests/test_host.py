import pytest

from gleamsim import wire
from gleamsim.host import (
    GroupMembership,
    MemoryRegion,
    NotQuiescedError,
    NotRegisteredError,
    QueuePair,
    WorkRequest,
    master_register,
    switch_source,
)
from gleamsim.netsim import SimConfig
from gleamsim.psn import PSN_MASK
from gleamsim.wire import (
    MrInfo,
    PacketKind,
    Reth,
    make_ack,
    make_data,
    make_nack,
)

A_IP, B_IP = 0x0A000001, 0x0A000002
G_IP = 0xEF010101
MAC = 0x020000000000


def cfg(**kw):
    c = SimConfig()
    for k, v in kw.items():
        setattr(c, k, v)
    return c


def make_qp(initial_psn=0, group=None, mr_lookup=None, **cfg_kw):
    return QueuePair(0x10, A_IP, MAC, B_IP, 0x20, MAC + 1, cfg(**cfg_kw),
                     initial_psn=initial_psn, group=group, mr_lookup=mr_lookup)


def drain(qp, limit=10_000):
    """Pull packets from the pacer until it blocks."""
    out = []
    for _ in range(limit):
        pkts = qp.next_tx_packets()
        if not pkts:
            break
        out += pkts
    return out


def ack_to(qp, psn, now=0.0):
    return qp.on_ack(make_ack(B_IP, A_IP, MAC + 1, MAC, qp.local_qpn, psn), now)


def nack_to(qp, psn, now=0.0):
    return qp.on_nack(make_nack(B_IP, A_IP, MAC + 1, MAC, qp.local_qpn, psn), now)


def data_to(qp, psn, payload=b"d", opcode=wire.OP_SEND, reth=None,
            ack_req=False, ecn=0, now=0.0):
    p = make_data(B_IP, A_IP, MAC + 1, MAC, qp.local_qpn, psn, payload,
                  opcode=opcode, ack_req=ack_req, reth=reth)
    p.ip.ecn = ecn
    return qp.on_data(p, now)


# ---------------------------------------------------------------------------
# Registration helpers

def membership(n, group_ip=G_IP, master=A_IP):
    return GroupMembership(group_ip, [(0x0A000001 + i, 0x10 + i) for i in range(n)],
                           master, initial_psn=0)


def test_master_register_three_members_one_envelope():
    out = master_register(membership(3), 0, A_IP, MAC)
    assert len(out) == 1
    env = out[0].envelope
    assert (env.seq, env.total, env.count) == (1, 1, 3)
    assert out[0].ip.dst_ip == G_IP


def test_master_register_splits_at_183():
    out = master_register(membership(184), 0, A_IP, MAC)
    assert [p.envelope.count for p in out] == [183, 1]
    assert [(p.envelope.seq, p.envelope.total) for p in out] == [(1, 2), (2, 2)]
    for p in out:
        assert wire.decode(wire.encode(p)) == p


def test_master_register_empty_group_rejected():
    with pytest.raises(ValueError):
        master_register(membership(0), 0, A_IP, MAC)


def test_master_register_carries_initial_psn_seed():
    out = master_register(membership(2), 0x50, A_IP, MAC)
    assert out[0].envelope.init_ack_psn() == 0x4F
    out = master_register(membership(2), 0, A_IP, MAC)
    assert out[0].envelope.init_ack_psn() == PSN_MASK


# ---------------------------------------------------------------------------
# Send path

def test_post_send_segments_consecutive_psns():
    qp = make_qp(mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 4096))
    pkts = drain(qp)
    assert [p.bth.psn for p in pkts] == [0, 1, 2, 3]
    assert all(p.bth.opcode == wire.OP_SEND for p in pkts)
    assert pkts[-1].bth.ack_req
    assert qp.sq_psn == 4


def test_post_send_zero_byte_message_consumes_one_psn():
    qp = make_qp()
    qp.post_send(WorkRequest("send", b""))
    pkts = drain(qp)
    assert len(pkts) == 1 and pkts[0].payload == b"" and pkts[0].bth.psn == 0
    assert qp.sq_psn == 1


def test_post_send_requires_registration():
    qp = make_qp(group=membership(2))
    assert not qp.ready
    with pytest.raises(NotRegisteredError):
        qp.post_send(WorkRequest("send", b"x"))
    qp.ready = True
    qp.post_send(WorkRequest("send", b"x"))


def test_multicast_write_emits_mr_update_before_first_packet():
    qp = make_qp(group=membership(2), mtu_payload=1024)
    qp.ready = True
    mr_map = {0x0A000002 + i: MrInfo(0x1000 * i, i) for i in range(3)}
    qp.post_send(WorkRequest("write", b"w" * 2048, mr_map=mr_map))
    pkts = drain(qp)
    assert len(pkts) == 3  # update + first + last
    upd, first, last = pkts
    assert wire.is_mr_update(upd)
    assert upd.bth.psn == first.bth.psn == 0  # shares the first packet's PSN
    assert first.bth.opcode == wire.OP_WRITE_FIRST
    assert (first.reth.va, first.reth.rkey, first.reth.dma_len) == (0, 0, 2048)
    assert last.bth.opcode == wire.OP_WRITE_LAST and last.bth.psn == 1
    assert wire.unpack_mr_update(upd.payload) == sorted(mr_map.items())


def test_unicast_write_carries_real_mr_and_no_update():
    qp = make_qp(mtu_payload=1024)
    qp.post_send(WorkRequest("write", b"w" * 100,
                             mr_map={B_IP: MrInfo(0x7000, 0x9)}))
    pkts = drain(qp)
    assert len(pkts) == 1
    assert (pkts[0].reth.va, pkts[0].reth.rkey) == (0x7000, 0x9)


def test_window_gates_transmission():
    # The gate keeps (sq - acked) mod 2^24 <= window, so at most
    # window - 1 packets ride unacknowledged.
    qp = make_qp(window=4, mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 10240))
    pkts = drain(qp)
    assert len(pkts) == 3  # window-limited
    assert qp.unacked() <= 4
    assert (qp.sq_psn - qp.acked_psn) % (PSN_MASK + 1) <= 4
    ack_to(qp, 1)
    assert len(drain(qp)) == 2
    assert (qp.sq_psn - qp.acked_psn) % (PSN_MASK + 1) <= 4


def test_go_back_n_on_nack():
    qp = make_qp(window=16, mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 10240))
    drain(qp)
    assert qp.sq_psn == 10
    nack_to(qp, 7)
    assert qp.acked_psn == 6
    retx = drain(qp)
    assert [p.bth.psn for p in retx] == [7, 8, 9]
    assert qp.stats.retransmissions == 3


def test_stale_nack_ignored():
    qp = make_qp()
    qp.post_send(WorkRequest("send", b"x" * 2048))
    drain(qp)
    ack_to(qp, 1)
    assert qp.acked_psn == 1
    assert nack_to(qp, 1) is False  # expects 1, but 0..1 already acked
    assert qp.acked_psn == 1
    assert drain(qp) == []


def test_nack_at_sq_psn_acts_as_full_ack():
    qp = make_qp(mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 3072))
    drain(qp)
    nack_to(qp, qp.sq_psn)
    assert qp.acked_psn == 2
    assert drain(qp) == []
    assert qp.quiesced()


def test_ack_monotone_and_wrap():
    qp = make_qp(initial_psn=0xFFFFF0, window=64, mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * (1024 * 40)))
    drain(qp)
    assert ack_to(qp, 0xFFFFFE)
    assert not ack_to(qp, 0xFFFFF5)  # stale
    assert qp.acked_psn == 0xFFFFFE
    assert ack_to(qp, 0x000002)  # wraps forward
    assert qp.acked_psn == 0x000002


def test_completion_fires_when_last_psn_acked():
    done = []
    qp = make_qp(mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 2048, on_complete=done.append))
    drain(qp)
    ack_to(qp, 0)
    assert qp.take_completed() == []
    ack_to(qp, 1, now=3.5)
    wrs = qp.take_completed()
    assert len(wrs) == 1
    wrs[0].on_complete(3.5)
    assert done == [3.5]


def test_rto_retransmits_everything_unacked_with_backoff():
    qp = make_qp(window=16, mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * 5120))
    drain(qp)
    base = qp.rto_base
    assert qp.rto_expire(10.0) is True
    assert qp.rto_cur == 2 * base
    assert [p.bth.psn for p in drain(qp)] == [0, 1, 2, 3, 4]
    assert qp.rto_expire(11.0) is True
    assert qp.rto_cur == 4 * base
    ack_to(qp, 4, now=12.0)
    assert qp.rto_cur == base  # progress resets backoff
    assert qp.rto_expire(13.0) is False  # nothing unacked: disarmed
    assert qp.rto_deadline is None


def test_cnp_halves_rate_with_floor_and_recovery():
    qp = make_qp(line_rate_bps=100e9, rate_min_bps=30e9, rate_ai_bps=5e9)
    qp.on_cnp(0.0)
    assert qp.rate_bps == 50e9
    qp.on_cnp(1.0)
    assert qp.rate_bps == 30e9  # floor
    qp.on_cnp(2.0)
    assert qp.rate_bps == 30e9
    for _ in range(13):
        qp.rate_recover(3.0)
    assert qp.rate_bps == 95e9
    assert qp.rate_recover(4.0) is False  # reaches line rate
    assert qp.rate_bps == 100e9


# ---------------------------------------------------------------------------
# Receive path

def test_in_order_delivery_acks_and_advances():
    qp = make_qp()
    out = data_to(qp, 0, b"hello")
    assert [p.kind for p in out] == [PacketKind.ACK]
    assert out[0].bth.psn == 0
    assert qp.rq_psn == 1 and qp.delivered_bytes == 5


def test_out_of_order_nacks_once():
    qp = make_qp()
    data_to(qp, 0)
    out = data_to(qp, 2)
    assert [p.kind for p in out] == [PacketKind.NACK]
    assert out[0].bth.psn == 1  # expected PSN
    assert data_to(qp, 3) == []  # armed: no second NACK
    out = data_to(qp, 1)  # the gap fills, arming clears
    assert [p.kind for p in out] == [PacketKind.ACK]
    out = data_to(qp, 4)
    assert [p.kind for p in out] == [PacketKind.NACK]


def test_duplicate_reacked_not_delivered():
    qp = make_qp()
    for psn in range(5):
        data_to(qp, psn, b"z")
    delivered = qp.delivered_bytes
    out = data_to(qp, 3, b"z")
    assert [p.kind for p in out] == [PacketKind.ACK]
    assert out[0].bth.psn == 4  # cumulative, one below expected
    assert qp.delivered_bytes == delivered
    assert qp.delivered_psns == 5


def test_delivered_psns_strictly_sequential():
    qp = make_qp()
    import random
    rng = random.Random(0)
    want = 0
    for _ in range(200):
        psn = rng.randrange(0, 12)
        before = qp.rq_psn
        data_to(qp, psn)
        if psn == before:
            want += 1
    assert qp.delivered_psns == want
    assert qp.rq_psn == want


def test_ack_coalescing_every_fourth_and_on_request():
    qp = make_qp(ack_coalesce=4)
    outs = [data_to(qp, psn) for psn in range(3)]
    assert all(o == [] for o in outs)
    out = data_to(qp, 3)
    assert [p.kind for p in out] == [PacketKind.ACK] and out[0].bth.psn == 3
    out = data_to(qp, 4, ack_req=True)  # forced by the sender
    assert [p.kind for p in out] == [PacketKind.ACK] and out[0].bth.psn == 4


def test_ecn_triggers_paced_cnp():
    qp = make_qp(cnp_interval_s=50e-6)
    out = data_to(qp, 0, ecn=wire.ECN_CE, now=0.0)
    assert [p.kind for p in out] == [PacketKind.ACK, PacketKind.CNP]
    out = data_to(qp, 1, ecn=wire.ECN_CE, now=10e-6)
    assert [p.kind for p in out] == [PacketKind.ACK]  # paced out
    out = data_to(qp, 2, ecn=wire.ECN_CE, now=60e-6)
    assert PacketKind.CNP in [p.kind for p in out]
    assert qp.stats.cnps_sent == 2


def test_write_lands_in_registered_region():
    mr = MemoryRegion(0x5000, 0xAA, bytearray(2048))
    qp = make_qp(mr_lookup=lambda va, rk, ln:
                 mr if (rk == mr.rkey and mr.contains(va, ln)) else None,
                 mtu_payload=1024)
    data_to(qp, 0, b"A" * 1024, opcode=wire.OP_WRITE_FIRST,
            reth=Reth(0x5000, 0xAA, 2048))
    data_to(qp, 1, b"B" * 1024, opcode=wire.OP_WRITE_LAST)
    assert bytes(mr.buf) == b"A" * 1024 + b"B" * 1024
    assert qp.delivered_bytes == 2048


def test_write_with_wrong_mr_is_discarded():
    mr = MemoryRegion(0x5000, 0xAA, bytearray(1024))
    qp = make_qp(mr_lookup=lambda va, rk, ln:
                 mr if (rk == mr.rkey and mr.contains(va, ln)) else None)
    out = data_to(qp, 0, b"A" * 64, opcode=wire.OP_WRITE_FIRST,
                  reth=Reth(0x9000, 0xBB, 64))
    assert out == []  # silently dropped, no ACK, no advance
    assert qp.rq_psn == 0 and qp.stats.mr_rejects == 1
    assert bytes(mr.buf) == bytes(1024)


# ---------------------------------------------------------------------------
# Source switching

def test_switch_source_direction_matches_worked_example():
    a = make_qp()
    b = make_qp()
    a.sq_psn, a._cursor, a.acked_psn = 100, 100, 99
    a.rq_psn = 0
    b.rq_psn = 100  # received A's 100 packets
    switch_source(a, b)
    assert b.sq_psn == 100
    assert a.rq_psn == 100
    assert b.acked_psn == 99


def test_switch_source_fresh_group_is_noop():
    a, b = make_qp(), make_qp()
    switch_source(a, b)
    assert (a.sq_psn, a.rq_psn, b.sq_psn, b.rq_psn) == (0, 0, 0, 0)


def test_switch_source_requires_quiesced():
    a, b = make_qp(), make_qp()
    a.post_send(WorkRequest("send", b"x" * 2048))
    drain(a)
    with pytest.raises(NotQuiescedError):
        switch_source(a, b)
    ack_to(a, 1)
    switch_source(a, b)  # fine once fully acknowledged


# ---------------------------------------------------------------------------
# Host node behavior (stub surroundings, no network)

class FakeEngine:
    def __init__(self):
        self.now = 0.0
        self.scheduled = []
        self.counters = {}

    def schedule(self, t, fn, *args):
        self.scheduled.append((t, fn, args))

    def log(self, kind, **kw):
        pass

    def count(self, key, n=1):
        self.counters[key] = self.counters.get(key, 0) + n


class FakeCtx:
    def __init__(self, ip, mac):
        self.engine = FakeEngine()
        self.index = 0
        self.name = "h0"
        self.ip = ip
        self.mac = mac
        self.n_ports = 1
        self.sent = []
        self.send = lambda port, pkt: self.sent.append(pkt)
        self.mac_of = lambda ip: 0x02FFFF000000 | ip & 0xFFFF


def make_host(ip=A_IP, mac=MAC):
    from gleamsim.host import Host
    return Host(FakeCtx(ip, mac), cfg())


def envelope_for(member_ips, group_ip=G_IP):
    from gleamsim.wire import EnvelopeBody, EnvelopeEntry, make_envelope
    body = EnvelopeBody(1, 1, entries=[EnvelopeEntry(ip, 0x10) for ip in member_ips])
    return make_envelope(B_IP, group_ip, MAC + 9, wire.BROADCAST_MAC, body)


def test_on_envelope_listed_member_confirms_and_readies():
    h = make_host()
    m = membership(2, master=B_IP)
    m.members[0] = (A_IP, 0x10)
    qp = h.join_group(m)
    assert not qp.ready
    h.handle(envelope_for([A_IP]), 0)
    assert qp.ready
    confirms = [p for p in h.ctx.sent if p.kind is PacketKind.ACK
                and p.aeth.syndrome == wire.SYNDROME_CONFIRM]
    assert len(confirms) == 1
    assert confirms[0].ip.dst_ip == B_IP
    assert confirms[0].payload[:4] == G_IP.to_bytes(4, "big")


def test_on_envelope_unlisted_member_stays_silent():
    h = make_host()
    h.join_group(membership(2, master=B_IP))
    h.handle(envelope_for([0x0A0000FE]), 0)
    assert h.ctx.sent == []
    assert not h.qps[h.group_qpn[G_IP]].ready


def test_on_envelope_duplicate_is_idempotent():
    h = make_host()
    m = membership(2, master=B_IP)
    m.members[0] = (A_IP, 0x10)
    h.join_group(m)
    h.handle(envelope_for([A_IP]), 0)
    h.handle(envelope_for([A_IP]), 0)
    assert h._ready_transitions == 1  # single ready transition
    confirms = [p for p in h.ctx.sent
                if p.kind is PacketKind.ACK
                and p.aeth.syndrome == wire.SYNDROME_CONFIRM]
    assert len(confirms) == 2  # re-sent confirmation is harmless


def test_master_collects_confirmations_once_per_member():
    h = make_host(ip=B_IP, mac=MAC + 1)
    m = GroupMembership(G_IP, [(B_IP, 0x10), (A_IP, 0x11)], B_IP, 0)
    h.join_group(m)
    fired = []
    h._master[G_IP] = {"waiting": {A_IP, B_IP}, "cb": lambda: fired.append(1)}
    confirm = make_ack(A_IP, B_IP, MAC, MAC + 1, 0, 0,
                       syndrome=wire.SYNDROME_CONFIRM)
    confirm.payload = G_IP.to_bytes(4, "big")
    h.handle(confirm, 0)
    assert fired == []
    own = make_ack(B_IP, B_IP, MAC + 1, MAC + 1, 0, 0,
                   syndrome=wire.SYNDROME_CONFIRM)
    own.payload = G_IP.to_bytes(4, "big")
    h.handle(own, 0)
    h.handle(own, 0)  # duplicate confirmation is absorbed
    assert fired == [1]


def test_host_drops_foreign_mac_and_unknown_qpn():
    h = make_host()
    stray = make_ack(B_IP, A_IP, MAC + 9, MAC + 5, 0x55, 3)
    h.handle(stray, 0)
    assert h.counters["bad_mac_drop"] == 1
    stray2 = make_ack(B_IP, A_IP, MAC + 9, MAC, 0x55, 3)
    h.handle(stray2, 0)
    assert h.counters["unknown_qpn_drop"] == 1


def test_goback_reemits_mr_update_before_write_first():
    qp = make_qp(group=membership(2), mtu_payload=1024)
    qp.ready = True
    qp.post_send(WorkRequest("write", b"w" * 2048,
                             mr_map={B_IP: MrInfo(0x1000, 1)}))
    first_pass = drain(qp)
    assert wire.is_mr_update(first_pass[0])
    nack_to(qp, 0)  # lose everything: go back to the write's first packet
    second_pass = drain(qp)
    assert wire.is_mr_update(second_pass[0])
    assert second_pass[1].bth.opcode == wire.OP_WRITE_FIRST
    assert second_pass[1].bth.psn == second_pass[0].bth.psn == 0


def test_acked_psn_never_regresses():
    import random
    rng = random.Random(3)
    qp = make_qp(window=32, mtu_payload=1024)
    qp.post_send(WorkRequest("send", b"x" * (1024 * 200)))
    history = []
    for _ in range(500):
        drain(qp, limit=8)
        history.append(qp.acked_psn)
        psn = rng.randrange(0, 210)
        if rng.random() < 0.3:
            nack_to(qp, psn)
        else:
            ack_to(qp, psn)
        history.append(qp.acked_psn)
    prev = history[0]
    for cur in history[1:]:
        assert (cur - prev) % (PSN_MASK + 1) <= 210
        prev = cur
