"""IPv4/TCP/UDP wire parsing, serialization, checksums, and flow keys.

Everything here is a pure function over immutable-ish inputs; no I/O,
no global state. Byte layouts are the standard network-byte-order wire
formats. IPv4 only: version != 4 and fragments are rejected up front.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

PROTO_TCP = 6
PROTO_UDP = 17

DEFAULT_MTU = 1500
DEFAULT_TTL = 64

# IP flags live in the top 3 bits of the flags/fragment field.
IP_FLAG_DF = 0x4000
IP_FLAG_MF = 0x2000
IP_FRAG_OFFSET_MASK = 0x1FFF

# TCP flag bits
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10
URG = 0x20

_IPV4_FMT = "!BBHHHBBH4s4s"
_TCP_FMT = "!HHIIBBHHH"
_UDP_FMT = "!HHHH"


class PacketError(Exception):
    """Base class for packet parse/serialize failures."""


class Truncated(PacketError):
    """Input shorter than a declared or minimum length."""


class UnsupportedVersion(PacketError):
    """IP version field is not 4."""


class FragmentedPacket(PacketError):
    """IP fragment (MF set or nonzero offset); reassembly is not supported."""


class BadChecksum(PacketError):
    """Checksum mismatch. Carries the parsed packet so callers can decide
    whether to drop or process anyway (trace files often have offload-zeroed
    checksums)."""

    def __init__(self, message: str, packet: "Packet", layer: str):
        super().__init__(message)
        self.packet = packet
        self.layer = layer


class OversizedPacket(PacketError):
    """Serialized packet would exceed the configured MTU."""


class NoTransport(PacketError):
    """Packet carries no TCP or UDP transport."""


def internet_checksum(data: bytes) -> int:
    """One's-complement of the one's-complement 16-bit word sum.

    Odd-length input is padded with a zero octet. Returns a value in
    [0, 0xFFFF]; folding a buffer that already contains its own correct
    checksum yields 0.
    """
    if len(data) % 2:
        data = data + b"\x00"
    total = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pack_addr(addr: str) -> bytes:
    parts = addr.split(".")
    if len(parts) != 4:
        raise PacketError(f"bad IPv4 address {addr!r}")
    try:
        octets = bytes(int(p) for p in parts)
    except ValueError as exc:
        raise PacketError(f"bad IPv4 address {addr!r}") from exc
    return octets


def _unpack_addr(raw: bytes) -> str:
    return "%d.%d.%d.%d" % (raw[0], raw[1], raw[2], raw[3])


@dataclass
class Ipv4Header:
    src_addr: str
    dst_addr: str
    protocol: int
    version: int = 4
    header_length: int = 20
    dscp_ecn: int = 0
    total_length: int = 0
    identification: int = 0
    flags_fragment: int = IP_FLAG_DF
    ttl: int = DEFAULT_TTL
    header_checksum: int = 0
    options: bytes = b""  # carried opaquely, never interpreted


@dataclass
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    window: int
    data_offset: int = 20
    checksum: int = 0
    urgent_ptr: int = 0
    options: bytes = b""  # opaque except MSS extraction on SYN

    def has(self, flag_bits: int) -> bool:
        return bool(self.flags & flag_bits)


@dataclass
class UdpHeader:
    src_port: int
    dst_port: int
    length: int = 8
    checksum: int = 0


@dataclass
class Packet:
    ip: Ipv4Header
    transport: TcpHeader | UdpHeader | None
    payload: bytes = b""
    captured_at: int = field(default=0, compare=False)  # microseconds

    @property
    def is_tcp(self) -> bool:
        return isinstance(self.transport, TcpHeader)

    @property
    def is_udp(self) -> bool:
        return isinstance(self.transport, UdpHeader)


@dataclass(frozen=True, order=True)
class FlowKey:
    """Protocol five-tuple. Oriented app->network for packets read from
    the app-side conduit; invert() yields the reverse direction."""

    protocol: int
    src: tuple[str, int]
    dst: tuple[str, int]

    def invert(self) -> "FlowKey":
        return FlowKey(self.protocol, self.dst, self.src)

    @property
    def proto_name(self) -> str:
        return {PROTO_TCP: "TCP", PROTO_UDP: "UDP"}.get(self.protocol, str(self.protocol))

    def __str__(self) -> str:
        return "%s %s:%d>%s:%d" % (
            self.proto_name, self.src[0], self.src[1], self.dst[0], self.dst[1])


def flow_key_of(p: Packet) -> FlowKey:
    """Five-tuple of a TCP/UDP packet; raises NoTransport otherwise."""
    t = p.transport
    if t is None:
        raise NoTransport(f"protocol {p.ip.protocol} has no TCP/UDP transport")
    return FlowKey(
        protocol=p.ip.protocol,
        src=(p.ip.src_addr, t.src_port),
        dst=(p.ip.dst_addr, t.dst_port),
    )


def invert(k: FlowKey) -> FlowKey:
    return k.invert()


def _pseudo_header(ip: Ipv4Header, transport_len: int) -> bytes:
    return (
        _pack_addr(ip.src_addr)
        + _pack_addr(ip.dst_addr)
        + struct.pack("!BBH", 0, ip.protocol, transport_len)
    )


def parse_packet(data: bytes) -> Packet:
    """Parse raw IPv4 bytes into a Packet.

    Structural failures raise Truncated / UnsupportedVersion /
    FragmentedPacket. Checksum mismatches raise BadChecksum *after* the
    packet has been fully parsed; the exception carries the packet.
    """
    if len(data) < 20:
        raise Truncated(f"{len(data)} bytes is shorter than a minimal IPv4 header")
    version = data[0] >> 4
    if version != 4:
        raise UnsupportedVersion(f"IP version {version}")
    ihl = (data[0] & 0x0F) * 4
    if ihl < 20:
        raise Truncated(f"IPv4 header length {ihl} below minimum")
    (_, dscp_ecn, total_length, ident, flags_frag, ttl, proto, hdr_cksum,
     src_raw, dst_raw) = struct.unpack(_IPV4_FMT, data[:20])
    if total_length < ihl:
        raise Truncated(f"total length {total_length} smaller than header {ihl}")
    if len(data) < total_length:
        raise Truncated(f"{len(data)} bytes but total length declares {total_length}")
    data = data[:total_length]  # ignore link-layer padding
    if ihl > len(data):
        raise Truncated("IPv4 header extends past packet end")
    if (flags_frag & IP_FLAG_MF) or (flags_frag & IP_FRAG_OFFSET_MASK):
        raise FragmentedPacket("IP fragments are not supported")

    ip = Ipv4Header(
        src_addr=_unpack_addr(src_raw),
        dst_addr=_unpack_addr(dst_raw),
        protocol=proto,
        header_length=ihl,
        dscp_ecn=dscp_ecn,
        total_length=total_length,
        identification=ident,
        flags_fragment=flags_frag,
        ttl=ttl,
        header_checksum=hdr_cksum,
        options=bytes(data[20:ihl]),
    )
    rest = data[ihl:]

    transport: TcpHeader | UdpHeader | None = None
    payload: bytes
    checksum_error: str | None = None

    if proto == PROTO_TCP:
        if len(rest) < 20:
            raise Truncated("TCP header shorter than 20 bytes")
        (sport, dport, seq, ack, off_res, flags, window, cksum,
         urgent) = struct.unpack(_TCP_FMT, rest[:20])
        offset = (off_res >> 4) * 4
        if offset < 20 or offset > len(rest):
            raise Truncated(f"TCP data offset {offset} out of range")
        transport = TcpHeader(
            src_port=sport, dst_port=dport, seq=seq, ack=ack,
            flags=flags & 0x3F, window=window, data_offset=offset,
            checksum=cksum, urgent_ptr=urgent, options=bytes(rest[20:offset]),
        )
        payload = bytes(rest[offset:])
        if internet_checksum(_pseudo_header(ip, len(rest)) + rest) != 0:
            checksum_error = "TCP checksum mismatch"
    elif proto == PROTO_UDP:
        if len(rest) < 8:
            raise Truncated("UDP header shorter than 8 bytes")
        sport, dport, length, cksum = struct.unpack(_UDP_FMT, rest[:8])
        if length < 8 or length > len(rest):
            raise Truncated(f"UDP length {length} inconsistent with {len(rest)} bytes")
        transport = UdpHeader(src_port=sport, dst_port=dport, length=length, checksum=cksum)
        payload = bytes(rest[8:length])
        # checksum 0 means "not computed" and is accepted
        if cksum != 0 and internet_checksum(_pseudo_header(ip, length) + rest[:length]) != 0:
            checksum_error = "UDP checksum mismatch"
    else:
        payload = bytes(rest)

    pkt = Packet(ip=ip, transport=transport, payload=payload)

    if internet_checksum(data[:ihl]) != 0:
        raise BadChecksum("IP header checksum mismatch", pkt, layer="ip")
    if checksum_error is not None:
        raise BadChecksum(checksum_error, pkt, layer="transport")
    return pkt


def serialize_packet(p: Packet, mtu: int = DEFAULT_MTU) -> bytes:
    """Serialize a Packet to wire bytes with freshly computed lengths and
    checksums; stale checksum fields in the input are ignored."""
    ip = p.ip
    ip_options = ip.options
    if len(ip_options) % 4:
        ip_options = ip_options + b"\x00" * (4 - len(ip_options) % 4)
    ihl = 20 + len(ip_options)
    if ihl > 60:
        raise PacketError(f"IPv4 header length {ihl} exceeds 60")

    if isinstance(p.transport, TcpHeader):
        t = p.transport
        opts = t.options
        if len(opts) % 4:
            opts = opts + b"\x00" * (4 - len(opts) % 4)
        offset = 20 + len(opts)
        if offset > 60:
            raise PacketError(f"TCP data offset {offset} exceeds 60")
        seg = struct.pack(
            _TCP_FMT, t.src_port, t.dst_port, t.seq & 0xFFFFFFFF, t.ack & 0xFFFFFFFF,
            (offset // 4) << 4, t.flags & 0x3F, t.window, 0, t.urgent_ptr,
        ) + opts + p.payload
        total = ihl + len(seg)
        if total > mtu:
            raise OversizedPacket(f"{total} bytes exceeds MTU {mtu}")
        cksum = internet_checksum(_pseudo_header(ip, len(seg)) + seg)
        seg = seg[:16] + struct.pack("!H", cksum) + seg[18:]
    elif isinstance(p.transport, UdpHeader):
        t = p.transport
        length = 8 + len(p.payload)
        seg = struct.pack(_UDP_FMT, t.src_port, t.dst_port, length, 0) + p.payload
        total = ihl + len(seg)
        if total > mtu:
            raise OversizedPacket(f"{total} bytes exceeds MTU {mtu}")
        cksum = internet_checksum(_pseudo_header(ip, length) + seg)
        if cksum == 0:
            cksum = 0xFFFF  # transmitted zero means "no checksum"
        seg = seg[:6] + struct.pack("!H", cksum) + seg[8:]
    else:
        seg = p.payload
        total = ihl + len(seg)
        if total > mtu:
            raise OversizedPacket(f"{total} bytes exceeds MTU {mtu}")

    hdr = struct.pack(
        _IPV4_FMT, (4 << 4) | (ihl // 4), ip.dscp_ecn, total,
        ip.identification, ip.flags_fragment, ip.ttl, ip.protocol, 0,
        _pack_addr(ip.src_addr), _pack_addr(ip.dst_addr),
    ) + ip_options
    hdr = hdr[:10] + struct.pack("!H", internet_checksum(hdr)) + hdr[12:]
    return hdr + seg


def extract_mss(options: bytes) -> int | None:
    """MSS value from TCP options (kind 2), or None. Other options are
    skipped opaquely; a malformed option list yields None."""
    i = 0
    while i < len(options):
        kind = options[i]
        if kind == 0:  # end of options
            return None
        if kind == 1:  # NOP
            i += 1
            continue
        if i + 1 >= len(options):
            return None
        length = options[i + 1]
        if length < 2 or i + length > len(options):
            return None
        if kind == 2 and length == 4:
            return struct.unpack("!H", options[i + 2:i + 4])[0]
        i += length
    return None


def mss_option(mss: int) -> bytes:
    return struct.pack("!BBH", 2, 4, mss)


def make_tcp_packet(
    src: tuple[str, int],
    dst: tuple[str, int],
    seq: int,
    ack: int,
    flags: int,
    window: int = 65535,
    payload: bytes = b"",
    options: bytes = b"",
    ttl: int = DEFAULT_TTL,
    identification: int = 0,
) -> Packet:
    ip = Ipv4Header(src_addr=src[0], dst_addr=dst[0], protocol=PROTO_TCP,
                    identification=identification, ttl=ttl)
    tcp = TcpHeader(src_port=src[1], dst_port=dst[1], seq=seq & 0xFFFFFFFF,
                    ack=ack & 0xFFFFFFFF, flags=flags, window=window,
                    options=options)
    return Packet(ip=ip, transport=tcp, payload=payload)


def make_udp_packet(
    src: tuple[str, int],
    dst: tuple[str, int],
    payload: bytes = b"",
    ttl: int = DEFAULT_TTL,
    identification: int = 0,
) -> Packet:
    ip = Ipv4Header(src_addr=src[0], dst_addr=dst[0], protocol=PROTO_UDP,
                    identification=identification, ttl=ttl)
    udp = UdpHeader(src_port=src[1], dst_port=dst[1], length=8 + len(payload))
    return Packet(ip=ip, transport=udp, payload=payload)
