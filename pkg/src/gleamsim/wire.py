"""Wire formats for every packet kind the simulator exchanges.

All multi-byte fields are network byte order. Frame layouts:

    Ethernet (14)   dst_mac[6] src_mac[6] ethertype[2]=0x0800
    IPv4     (20)   ver_ihl=0x45 tos[1] total_len[2] id[2]=0 frag[2]=0
                    ttl[1]=64 proto[1]=17 checksum[2] src_ip[4] dst_ip[4]
                    (ECN is the low 2 bits of tos)
    UDP      (8)    src_port[2] dst_port[2] length[2] checksum[2]=0
    BTH      (12)   opcode[1] flags[1] resv[2] dst_qpn[3] resv[1]
                    psn[3] resv[1]        (ack_req is bit 7 of flags)
    RETH     (16)   va[8] rkey[4] dma_len[4]   (first packet of a WRITE)
    AETH     (4)    syndrome[1] resv[3]        (ACK/NACK only)

RC-style traffic (Data/Ack/Nack/Cnp) uses UDP port 4791 and carries a
BTH. Envelope registration packets use UDP port 4792 and carry, instead
of a BTH, an 8-byte metadata word followed by 8-byte member entries:

    meta  (8)    seq[2] total[2] count[2] flags[2]
    entry (8)    ip[4] qpn[3] pad[1]

At the 1500-byte IP MTU the envelope payload budget is 1472 bytes, which
fits exactly 183 entries after the metadata. The group's initial
``ack_psn`` seed (a 24-bit value) rides in ``flags`` (low 16 bits) plus
the first entry's pad byte (high 8 bits).

There is no ICRC; hosts in this model do not checksum RC frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

ETHERTYPE_IPV4 = 0x0800
PROTO_UDP = 17
ROCE_PORT = 4791
ENVELOPE_PORT = 4792

# BTH opcodes (frozen; fixtures depend on these values).
OP_SEND = 0x04
OP_WRITE_FIRST = 0x06
OP_WRITE_MIDDLE = 0x07
OP_WRITE_LAST = 0x08
OP_ACK = 0x11  # ACK and NACK, distinguished by the AETH syndrome
OP_CNP = 0x81

SYNDROME_ACK = 0x00
SYNDROME_NACK_SEQ = 0x60  # sequence error, psn = receiver's expected PSN
SYNDROME_CONFIRM = 0x7F   # registration confirmation toward the master

# Virtual destination QPN that multicast senders/receivers agree on.
MULTICAST_QPN = 0x1

ECN_CE = 0b11  # congestion experienced

ETH_LEN = 14
IP_LEN = 20
UDP_LEN = 8
BTH_LEN = 12
RETH_LEN = 16
AETH_LEN = 4
MAX_FRAME = 1514  # 1500 MTU + Ethernet header

ENV_META_LEN = 8
ENV_ENTRY_LEN = 8
ENV_MAX_ENTRIES = 183  # (1472 - 8) // 8

L2L3L4_LEN = ETH_LEN + IP_LEN + UDP_LEN
DATA_MAX_PAYLOAD = MAX_FRAME - L2L3L4_LEN - BTH_LEN              # 1460
WRITE_FIRST_MAX_PAYLOAD = DATA_MAX_PAYLOAD - RETH_LEN            # 1444

BROADCAST_MAC = 0xFFFFFFFFFFFF

# Payload magic marking the out-of-band memory-region update message.
MR_UPDATE_MAGIC = b"MR"

_ETH = struct.Struct("!6s6sH")
_IP = struct.Struct("!BBHHHBBH4s4s")
_UDP = struct.Struct("!HHHH")
_RETH = struct.Struct("!QII")
_ENV_META = struct.Struct("!HHHH")


class WireError(Exception):
    """Base class for serialization errors."""


class OversizePayloadError(WireError):
    """Serialized frame would exceed 1514 bytes (or 183 envelope entries)."""


class MalformedError(WireError):
    """Byte sequence disagrees with its declared structure."""


class UnknownOpcodeError(WireError):
    """BTH opcode not recognized."""


class PacketKind(Enum):
    DATA = "data"
    ACK = "ack"
    NACK = "nack"
    CNP = "cnp"
    ENVELOPE = "envelope"


def is_multicast_ip(ip: int) -> bool:
    """True for addresses in 224.0.0.0/4."""
    return (ip >> 28) == 0b1110


def ip_str(ip: int) -> str:
    return f"{(ip >> 24) & 0xFF}.{(ip >> 16) & 0xFF}.{(ip >> 8) & 0xFF}.{ip & 0xFF}"


def parse_ip(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {text!r}")
    val = 0
    for p in parts:
        b = int(p)
        if not 0 <= b <= 255:
            raise ValueError(f"bad IPv4 address {text!r}")
        val = (val << 8) | b
    return val


def mac_str(mac: int) -> str:
    return ":".join(f"{(mac >> s) & 0xFF:02x}" for s in range(40, -8, -8))


def group_mac(group_ip: int) -> int:
    """IPv4 multicast MAC mapping: 01:00:5e + low 23 bits of the group."""
    return 0x01005E000000 | (group_ip & 0x7FFFFF)


@dataclass(slots=True)
class Eth:
    dst_mac: int
    src_mac: int
    ethertype: int = ETHERTYPE_IPV4


@dataclass(slots=True)
class Ip:
    src_ip: int
    dst_ip: int
    ecn: int = 0
    proto: int = PROTO_UDP


@dataclass(slots=True)
class Udp:
    src_port: int
    dst_port: int


@dataclass(slots=True)
class Bth:
    opcode: int
    ack_req: bool
    dst_qpn: int
    psn: int


@dataclass(slots=True)
class Reth:
    va: int
    rkey: int
    dma_len: int


@dataclass(slots=True)
class Aeth:
    syndrome: int


@dataclass(slots=True)
class MrInfo:
    va: int
    rkey: int


@dataclass(slots=True)
class EnvelopeEntry:
    ip: int
    qpn: int
    pad: int = 0


@dataclass(slots=True)
class EnvelopeBody:
    seq: int
    total: int
    flags: int = 0
    entries: List[EnvelopeEntry] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.entries)

    def init_ack_psn(self) -> int:
        """Initial per-port ack_psn seed carried by registration envelopes."""
        hi = self.entries[0].pad if self.entries else 0
        return (hi << 16) | self.flags

    def set_init_ack_psn(self, psn24: int) -> None:
        self.flags = psn24 & 0xFFFF
        if self.entries:
            self.entries[0].pad = (psn24 >> 16) & 0xFF


@dataclass(slots=True)
class Packet:
    kind: PacketKind
    eth: Eth
    ip: Ip
    udp: Udp
    bth: Optional[Bth] = None
    reth: Optional[Reth] = None
    aeth: Optional[Aeth] = None
    payload: bytes = b""
    envelope: Optional[EnvelopeBody] = None

    def copy(self) -> "Packet":
        """Deep-enough copy for per-port duplication and header rewrite."""
        return Packet(
            kind=self.kind,
            eth=Eth(self.eth.dst_mac, self.eth.src_mac, self.eth.ethertype),
            ip=Ip(self.ip.src_ip, self.ip.dst_ip, self.ip.ecn, self.ip.proto),
            udp=Udp(self.udp.src_port, self.udp.dst_port),
            bth=Bth(self.bth.opcode, self.bth.ack_req, self.bth.dst_qpn, self.bth.psn)
            if self.bth
            else None,
            reth=Reth(self.reth.va, self.reth.rkey, self.reth.dma_len) if self.reth else None,
            aeth=Aeth(self.aeth.syndrome) if self.aeth else None,
            payload=self.payload,
            envelope=EnvelopeBody(
                self.envelope.seq,
                self.envelope.total,
                self.envelope.flags,
                [EnvelopeEntry(e.ip, e.qpn, e.pad) for e in self.envelope.entries],
            )
            if self.envelope
            else None,
        )


def encoded_size(p: Packet) -> int:
    """Frame length on the wire, without building the bytes."""
    n = L2L3L4_LEN
    if p.kind is PacketKind.ENVELOPE:
        return n + ENV_META_LEN + ENV_ENTRY_LEN * len(p.envelope.entries)
    n += BTH_LEN
    if p.reth is not None:
        n += RETH_LEN
    if p.aeth is not None:
        n += AETH_LEN
    return n + len(p.payload)


def _ip_checksum(header: bytes) -> int:
    s = 0
    for i in range(0, len(header), 2):
        s += (header[i] << 8) | header[i + 1]
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def _u24(v: int) -> bytes:
    return (v & 0xFFFFFF).to_bytes(3, "big")


def encode(p: Packet) -> bytes:
    """Serialize a packet. Raises OversizePayloadError past 1514 bytes."""
    if p.kind is PacketKind.ENVELOPE:
        body = p.envelope
        if len(body.entries) > ENV_MAX_ENTRIES:
            raise OversizePayloadError(
                f"envelope holds {len(body.entries)} entries, max {ENV_MAX_ENTRIES}"
            )
        parts = [_ENV_META.pack(body.seq, body.total, len(body.entries), body.flags)]
        for e in body.entries:
            parts.append(
                (e.ip & 0xFFFFFFFF).to_bytes(4, "big") + _u24(e.qpn) + bytes((e.pad & 0xFF,))
            )
        l4 = b"".join(parts)
        dport = ENVELOPE_PORT
    else:
        bth = p.bth
        flags = 0x80 if bth.ack_req else 0x00
        hdr = bytes((bth.opcode & 0xFF, flags)) + b"\x00\x00" + _u24(bth.dst_qpn) + b"\x00" + _u24(bth.psn) + b"\x00"
        l4 = hdr
        if p.reth is not None:
            l4 += _RETH.pack(p.reth.va, p.reth.rkey, p.reth.dma_len)
        if p.aeth is not None:
            l4 += bytes((p.aeth.syndrome,)) + b"\x00\x00\x00"
        l4 += p.payload
        dport = p.udp.dst_port

    udp = _UDP.pack(p.udp.src_port, dport, UDP_LEN + len(l4), 0)
    total_len = IP_LEN + UDP_LEN + len(l4)
    tos = p.ip.ecn & 0x03
    iphdr = _IP.pack(
        0x45, tos, total_len, 0, 0, 64, PROTO_UDP, 0,
        (p.ip.src_ip & 0xFFFFFFFF).to_bytes(4, "big"),
        (p.ip.dst_ip & 0xFFFFFFFF).to_bytes(4, "big"),
    )
    csum = _ip_checksum(iphdr)
    iphdr = iphdr[:10] + csum.to_bytes(2, "big") + iphdr[12:]
    eth = _ETH.pack(
        (p.eth.dst_mac & BROADCAST_MAC).to_bytes(6, "big"),
        (p.eth.src_mac & BROADCAST_MAC).to_bytes(6, "big"),
        p.eth.ethertype,
    )
    frame = eth + iphdr + udp + l4
    if len(frame) > MAX_FRAME:
        raise OversizePayloadError(f"frame length {len(frame)} exceeds {MAX_FRAME}")
    return frame


def decode(buf: bytes) -> Packet:
    """Parse a frame back into a Packet.

    Classification: UDP dst port 4792 means envelope; 4791 dispatches on
    the BTH opcode, with ACK vs NACK decided by the AETH syndrome.
    """
    if len(buf) < L2L3L4_LEN:
        raise MalformedError(f"frame too short ({len(buf)} bytes)")
    dst_mac_b, src_mac_b, ethertype = _ETH.unpack_from(buf, 0)
    (ver_ihl, tos, total_len, _ident, _frag, _ttl, proto, _csum, src_b, dst_b) = _IP.unpack_from(
        buf, ETH_LEN
    )
    if ver_ihl != 0x45:
        raise MalformedError(f"unsupported IP header 0x{ver_ihl:02X}")
    if ETH_LEN + total_len != len(buf):
        raise MalformedError("IP total_length disagrees with frame length")
    sport, dport, udp_len, _ = _UDP.unpack_from(buf, ETH_LEN + IP_LEN)
    if udp_len != total_len - IP_LEN:
        raise MalformedError("UDP length disagrees with IP total_length")
    eth = Eth(int.from_bytes(dst_mac_b, "big"), int.from_bytes(src_mac_b, "big"), ethertype)
    ip = Ip(int.from_bytes(src_b, "big"), int.from_bytes(dst_b, "big"), ecn=tos & 0x03, proto=proto)
    udp = Udp(sport, dport)
    body = buf[L2L3L4_LEN:]

    if dport == ENVELOPE_PORT:
        if len(body) < ENV_META_LEN:
            raise MalformedError("envelope shorter than its metadata")
        seq, total, count, flags = _ENV_META.unpack_from(body, 0)
        if len(body) != ENV_META_LEN + ENV_ENTRY_LEN * count:
            raise MalformedError("envelope length disagrees with entry count")
        entries = []
        off = ENV_META_LEN
        for _ in range(count):
            entries.append(
                EnvelopeEntry(
                    ip=int.from_bytes(body[off : off + 4], "big"),
                    qpn=int.from_bytes(body[off + 4 : off + 7], "big"),
                    pad=body[off + 7],
                )
            )
            off += ENV_ENTRY_LEN
        env = EnvelopeBody(seq=seq, total=total, flags=flags, entries=entries)
        return Packet(PacketKind.ENVELOPE, eth, ip, udp, envelope=env)

    if len(body) < BTH_LEN:
        raise MalformedError("truncated BTH")
    opcode = body[0]
    ack_req = bool(body[1] & 0x80)
    dst_qpn = int.from_bytes(body[4:7], "big")
    psn = int.from_bytes(body[8:11], "big")
    bth = Bth(opcode, ack_req, dst_qpn, psn)
    rest = body[BTH_LEN:]

    if opcode in (OP_SEND, OP_WRITE_MIDDLE, OP_WRITE_LAST):
        return Packet(PacketKind.DATA, eth, ip, udp, bth=bth, payload=rest)
    if opcode == OP_WRITE_FIRST:
        if len(rest) < RETH_LEN:
            raise MalformedError("truncated RETH")
        va, rkey, dma_len = _RETH.unpack_from(rest, 0)
        return Packet(
            PacketKind.DATA, eth, ip, udp, bth=bth,
            reth=Reth(va, rkey, dma_len), payload=rest[RETH_LEN:],
        )
    if opcode == OP_ACK:
        if len(rest) < AETH_LEN:
            raise MalformedError("truncated AETH")
        syndrome = rest[0]
        kind = PacketKind.NACK if syndrome == SYNDROME_NACK_SEQ else PacketKind.ACK
        return Packet(kind, eth, ip, udp, bth=bth, aeth=Aeth(syndrome), payload=rest[AETH_LEN:])
    if opcode == OP_CNP:
        return Packet(PacketKind.CNP, eth, ip, udp, bth=bth, payload=rest)
    raise UnknownOpcodeError(f"opcode 0x{opcode:02X}")


# ---------------------------------------------------------------------------
# Factories

def make_data(
    src_ip, dst_ip, src_mac, dst_mac, dst_qpn, psn, payload,
    opcode=OP_SEND, ack_req=False, reth=None,
):
    return Packet(
        PacketKind.DATA,
        Eth(dst_mac, src_mac),
        Ip(src_ip, dst_ip),
        Udp(ROCE_PORT, ROCE_PORT),
        bth=Bth(opcode, ack_req, dst_qpn, psn),
        reth=reth,
        payload=payload,
    )


def make_ack(src_ip, dst_ip, src_mac, dst_mac, dst_qpn, psn, syndrome=SYNDROME_ACK):
    kind = PacketKind.NACK if syndrome == SYNDROME_NACK_SEQ else PacketKind.ACK
    return Packet(
        kind,
        Eth(dst_mac, src_mac),
        Ip(src_ip, dst_ip),
        Udp(ROCE_PORT, ROCE_PORT),
        bth=Bth(OP_ACK, False, dst_qpn, psn),
        aeth=Aeth(syndrome),
    )


def make_nack(src_ip, dst_ip, src_mac, dst_mac, dst_qpn, expected_psn):
    return make_ack(src_ip, dst_ip, src_mac, dst_mac, dst_qpn, expected_psn, SYNDROME_NACK_SEQ)


def make_cnp(src_ip, dst_ip, src_mac, dst_mac, dst_qpn):
    return Packet(
        PacketKind.CNP,
        Eth(dst_mac, src_mac),
        Ip(src_ip, dst_ip),
        Udp(ROCE_PORT, ROCE_PORT),
        bth=Bth(OP_CNP, False, dst_qpn, 0),
    )


def make_envelope(src_ip, group_ip, src_mac, dst_mac, body: EnvelopeBody):
    return Packet(
        PacketKind.ENVELOPE,
        Eth(dst_mac, src_mac),
        Ip(src_ip, group_ip),
        Udp(ENVELOPE_PORT, ENVELOPE_PORT),
        envelope=body,
    )


# ---------------------------------------------------------------------------
# MR-update message payload: magic "MR", count[2], then per receiver
# ip[4] va[8] rkey[4].

_MR_ENTRY = struct.Struct("!IQI")


class MalformedMrListError(WireError):
    """MR-update payload does not parse as a receiver/MR list."""


def pack_mr_update(entries) -> bytes:
    parts = [MR_UPDATE_MAGIC, len(entries).to_bytes(2, "big")]
    for ip, mr in entries:
        parts.append(_MR_ENTRY.pack(ip & 0xFFFFFFFF, mr.va, mr.rkey))
    return b"".join(parts)


def unpack_mr_update(payload: bytes):
    if len(payload) < 4 or payload[:2] != MR_UPDATE_MAGIC:
        raise MalformedMrListError("missing MR-update magic")
    count = int.from_bytes(payload[2:4], "big")
    if len(payload) != 4 + count * _MR_ENTRY.size:
        raise MalformedMrListError("MR-update length disagrees with count")
    out = []
    off = 4
    for _ in range(count):
        ip, va, rkey = _MR_ENTRY.unpack_from(payload, off)
        out.append((ip, MrInfo(va, rkey)))
        off += _MR_ENTRY.size
    return out


def is_mr_update(p: Packet) -> bool:
    """WRITE-first opcode, no ack_req, zero dma_len, payload magic "MR"."""
    return (
        p.kind is PacketKind.DATA
        and p.bth is not None
        and p.bth.opcode == OP_WRITE_FIRST
        and not p.bth.ack_req
        and p.reth is not None
        and p.reth.dma_len == 0
        and p.payload[:2] == MR_UPDATE_MAGIC
    )
