"""Just enough DNS-over-UDP wire handling for queries and A records.

Covers what the engine needs: building/parsing standard queries,
answering from a name table, and reading answer sections (with name
compression) to learn IP-to-domain mappings. Anything exotic parses to
None and is ignored by callers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

QTYPE_A = 1
QCLASS_IN = 1
RCODE_OK = 0
RCODE_NXDOMAIN = 3

_FLAG_RESPONSE = 0x8000


@dataclass
class DnsMessage:
    qid: int
    is_response: bool
    rcode: int
    qname: str
    qtype: int
    answers: list[tuple[str, int, str]] = field(default_factory=list)  # (name, type, A-record IP)


def encode_name(name: str) -> bytes:
    out = bytearray()
    for label in name.rstrip(".").split("."):
        raw = label.encode("ascii")
        if not raw or len(raw) > 63:
            raise ValueError(f"bad DNS label in {name!r}")
        out.append(len(raw))
        out.extend(raw)
    out.append(0)
    return bytes(out)


def _decode_name(data: bytes, offset: int) -> tuple[str, int]:
    """Decode a possibly-compressed name; returns (name, next offset)."""
    labels: list[str] = []
    jumped = False
    end = offset
    hops = 0
    while True:
        if offset >= len(data):
            raise ValueError("name runs past message end")
        length = data[offset]
        if length & 0xC0 == 0xC0:  # compression pointer
            if offset + 1 >= len(data):
                raise ValueError("dangling compression pointer")
            pointer = ((length & 0x3F) << 8) | data[offset + 1]
            if not jumped:
                end = offset + 2
                jumped = True
            offset = pointer
            hops += 1
            if hops > 64:
                raise ValueError("compression loop")
            continue
        if length == 0:
            if not jumped:
                end = offset + 1
            break
        offset += 1
        labels.append(data[offset:offset + length].decode("ascii", errors="replace"))
        offset += length
    return ".".join(labels), end


def build_query(qid: int, qname: str, qtype: int = QTYPE_A) -> bytes:
    header = struct.pack("!HHHHHH", qid & 0xFFFF, 0x0100, 1, 0, 0, 0)
    return header + encode_name(qname) + struct.pack("!HH", qtype, QCLASS_IN)


def build_response(qid: int, qname: str, qtype: int, ips: list[str],
                   rcode: int = RCODE_OK, ttl: int = 60) -> bytes:
    flags = _FLAG_RESPONSE | 0x0100 | 0x0080 | (rcode & 0x0F)  # QR, RD, RA
    header = struct.pack("!HHHHHH", qid & 0xFFFF, flags, 1, len(ips), 0, 0)
    question = encode_name(qname) + struct.pack("!HH", qtype, QCLASS_IN)
    answers = bytearray()
    for ip in ips:
        rdata = bytes(int(p) for p in ip.split("."))
        answers += struct.pack("!HHHIH", 0xC00C, QTYPE_A, QCLASS_IN, ttl, 4) + rdata
    return header + question + bytes(answers)


def parse_message(data: bytes) -> DnsMessage | None:
    """Parse a DNS message down to question + A-record answers; returns
    None when it is not parseable as DNS."""
    if len(data) < 12:
        return None
    try:
        qid, flags, qdcount, ancount, _, _ = struct.unpack("!HHHHHH", data[:12])
        if qdcount < 1:
            return None
        qname, offset = _decode_name(data, 12)
        if offset + 4 > len(data):
            return None
        qtype, _qclass = struct.unpack("!HH", data[offset:offset + 4])
        offset += 4
        msg = DnsMessage(
            qid=qid,
            is_response=bool(flags & _FLAG_RESPONSE),
            rcode=flags & 0x0F,
            qname=qname,
            qtype=qtype,
        )
        for _ in range(ancount):
            name, offset = _decode_name(data, offset)
            if offset + 10 > len(data):
                return None
            rtype, _rclass, _ttl, rdlength = struct.unpack(
                "!HHIH", data[offset:offset + 10])
            offset += 10
            rdata = data[offset:offset + rdlength]
            offset += rdlength
            if rtype == QTYPE_A and rdlength == 4:
                ip = "%d.%d.%d.%d" % (rdata[0], rdata[1], rdata[2], rdata[3])
                msg.answers.append((name, rtype, ip))
        return msg
    except (ValueError, struct.error):
        return None
