"""Reliable message delivery over lossy datagrams.

A sliding-window ARQ with cumulative acks, exponential-backoff
retransmission (200 ms base, 6 retries) and a 64-segment receive window
over 1152-byte segments. The engine is a pure state machine driven by
on_datagram()/poll() with an explicit clock, so the same code runs under
the deterministic test harness, the simulator and a real UDP socket pump.

Messages are length-prefixed on the internal byte stream; delivery is
ordered, exactly-once, and preserves message boundaries (a zero-length
send arrives as a zero-length message).
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

from .errors import PeerUnreachable

FLAG_DATA = 0x01
FLAG_ACK = 0x02
FLAG_FIN = 0x04

SEGMENT_SIZE = 1152
WINDOW_SEGMENTS = 64
BASE_RTO_MS = 200
MAX_RETRIES = 6

_SEG_HEADER = struct.Struct(">BII")  # flags, seq, ack


@dataclass
class _Pending:
    seq: int
    data: bytes
    flags: int
    last_sent: int
    retries: int


class ArqEndpoint:
    """One end of a reliable conversation over unreliable datagrams."""

    def __init__(
        self,
        segment_size: int = SEGMENT_SIZE,
        window: int = WINDOW_SEGMENTS,
        base_rto_ms: int = BASE_RTO_MS,
        max_retries: int = MAX_RETRIES,
    ):
        self.segment_size = segment_size
        self.window = window
        self.base_rto_ms = base_rto_ms
        self.max_retries = max_retries

        self._next_seq = 0
        self._unacked: dict[int, _Pending] = {}
        self._outbox: deque[tuple[int, bytes]] = deque()  # (flags, data) not yet sequenced
        self._ack_due = False

        self._expected = 0
        self._reorder: dict[int, tuple[int, bytes]] = {}
        self._stream = bytearray()
        self._messages: deque[bytes] = deque()

        self._dead = False
        self._remote_closed = False
        self._fin_sent = False

    # -- sending ------------------------------------------------------------

    def send_message(self, data: bytes) -> None:
        if self._dead or self._fin_sent:
            raise PeerUnreachable("connection closed")
        buf = len(data).to_bytes(4, "big") + data
        for off in range(0, max(len(buf), 1), self.segment_size):
            self._outbox.append((FLAG_DATA, buf[off:off + self.segment_size]))

    def close(self) -> None:
        if not self._fin_sent and not self._dead:
            self._outbox.append((FLAG_FIN, b""))
            self._fin_sent = True

    # -- receiving ------------------------------------------------------------

    def on_datagram(self, datagram: bytes, now: int) -> None:
        if len(datagram) < _SEG_HEADER.size:
            return
        flags, seq, ack = _SEG_HEADER.unpack_from(datagram)
        payload = datagram[_SEG_HEADER.size:]
        if flags & FLAG_ACK:
            for acked in [s for s in self._unacked if s < ack]:
                del self._unacked[acked]
        if flags & (FLAG_DATA | FLAG_FIN):
            if seq == self._expected or seq in self._reorder or seq < self._expected:
                self._ack_due = True
            if self._expected <= seq < self._expected + self.window:
                self._reorder.setdefault(seq, (flags, payload))
                self._ack_due = True
            self._drain_reorder()

    def _drain_reorder(self) -> None:
        while self._expected in self._reorder:
            flags, payload = self._reorder.pop(self._expected)
            self._expected += 1
            if flags & FLAG_FIN:
                self._remote_closed = True
            else:
                self._stream += payload
        while len(self._stream) >= 4:
            length = int.from_bytes(self._stream[:4], "big")
            if len(self._stream) < 4 + length:
                break
            self._messages.append(bytes(self._stream[4:4 + length]))
            del self._stream[:4 + length]

    def recv_message(self) -> bytes | None:
        if self._messages:
            return self._messages.popleft()
        if self._dead:
            raise PeerUnreachable("retransmit limit reached")
        return None

    # -- clock-driven output ---------------------------------------------------

    def poll(self, now: int) -> list[bytes]:
        """Datagrams to transmit at virtual time now."""
        if self._dead:
            return []
        out: list[bytes] = []
        # Retransmit expired segments.
        for pending in list(self._unacked.values()):
            rto = self.base_rto_ms * (1 << pending.retries)
            if now - pending.last_sent >= rto:
                if pending.retries >= self.max_retries:
                    self._dead = True
                    return []
                pending.retries += 1
                pending.last_sent = now
                out.append(self._encode(pending.flags, pending.seq, pending.data))
        # Fill the window with fresh segments.
        while self._outbox and len(self._unacked) < self.window:
            flags, data = self._outbox.popleft()
            seq = self._next_seq
            self._next_seq += 1
            self._unacked[seq] = _Pending(seq, data, flags, now, 0)
            out.append(self._encode(flags, seq, data))
        if self._ack_due and not out:
            out.append(self._encode(FLAG_ACK, 0, b""))
        self._ack_due = False
        return out

    def _encode(self, flags: int, seq: int, data: bytes) -> bytes:
        return _SEG_HEADER.pack(flags | FLAG_ACK, seq, self._expected) + data

    def next_timeout(self, now: int) -> int | None:
        """Earliest time poll() could have work; None when fully idle."""
        if self._dead:
            return None
        if self._outbox or self._ack_due:
            return now
        deadlines = [
            p.last_sent + self.base_rto_ms * (1 << p.retries) for p in self._unacked.values()
        ]
        return min(deadlines) if deadlines else None

    @property
    def dead(self) -> bool:
        return self._dead

    @property
    def remote_closed(self) -> bool:
        return self._remote_closed

    @property
    def idle(self) -> bool:
        return not self._outbox and not self._unacked and not self._ack_due


def pump(
    a: ArqEndpoint,
    b: ArqEndpoint,
    medium,
    start: int = 0,
    limit_ms: int = 600_000,
) -> int:
    """Drive two endpoints through a medium until both are idle.

    medium.transfer(datagram, now) -> list of (deliver_at, datagram) models
    loss/reordering/duplication; used by tests and the simulator's
    datagram-level checks. Returns the final virtual time.
    """
    now = start
    in_flight: list[tuple[int, int, bytes]] = []  # (deliver_at, dst_index, datagram)
    endpoints = (a, b)
    while now < start + limit_ms:
        for idx, ep in enumerate(endpoints):
            for datagram in ep.poll(now):
                for deliver_at, mutated in medium.transfer(datagram, now):
                    in_flight.append((deliver_at, 1 - idx, mutated))
        due = [item for item in in_flight if item[0] <= now]
        in_flight = [item for item in in_flight if item[0] > now]
        for _, dst, datagram in sorted(due, key=lambda item: item[0]):
            endpoints[dst].on_datagram(datagram, now)
        if a.dead or b.dead:
            break
        if not due and not in_flight and a.idle and b.idle:
            break
        # Jump straight to the next moment anything can happen.
        candidates = [item[0] for item in in_flight]
        for ep in endpoints:
            timeout = ep.next_timeout(now)
            if timeout is not None:
                candidates.append(timeout)
        now = max(now + 1, min(candidates)) if candidates else now + 1
    return now
