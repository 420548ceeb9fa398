"""Chord ring of rendezvous servers with dual identifiers per username.

Identifiers live on Z_{2^bits}; production uses bits=128 (MD5 as-is,
SHA-1 truncated to its top 128 bits so both map to the same space) and
tests may shrink the space behind the same interface. A node's id is the
hash of its "host:port" address. Key k belongs to successor(k): the first
node at or clockwise after k.

RingNode is a pure state machine over a pluggable transport, so the same
code runs against an in-process node table, the deterministic simulator,
or real sockets. Row storage is delegated to a RowStore; rows carry the
identifier they were registered under so join/leave moves exactly the
affected arc, and every row received from another server is verified
before it is stored or re-replicated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol

from .errors import JoinFailed, LookupFailed, MalformedRequest, PeerUnreachable

BITS_FULL = 128
SUCCESSOR_LIST_LEN = 4


def ident_md5(name: str, bits: int = BITS_FULL) -> int:
    value = int.from_bytes(hashlib.md5(name.encode("utf-8")).digest(), "big")
    return value >> (BITS_FULL - bits)


def ident_sha1(name: str, bits: int = BITS_FULL) -> int:
    # Top 128 bits of SHA-1 keep both hashes on one ring.
    value = int.from_bytes(hashlib.sha1(name.encode("utf-8")).digest()[:16], "big")
    return value >> (BITS_FULL - bits)


@dataclass(frozen=True)
class DualId:
    id_md5: int
    id_sha1: int

    def both(self) -> tuple[int, int]:
        return (self.id_md5, self.id_sha1)


def dual_hash(username: str, bits: int = BITS_FULL) -> DualId:
    if not username:
        raise MalformedRequest("empty username")
    return DualId(id_md5=ident_md5(username, bits), id_sha1=ident_sha1(username, bits))


def node_ident(addr: str, bits: int = BITS_FULL) -> int:
    return ident_md5(addr, bits)


def in_interval(x: int, lo: int, hi: int, inc_lo: bool = False, inc_hi: bool = False) -> bool:
    """Ring interval membership with wraparound.

    lo == hi denotes the full circle (a node that is its own successor owns
    every key); the shared endpoint itself is in only when inclusive.
    """
    if lo == hi:
        return True if x != lo else (inc_lo or inc_hi)
    if lo < hi:
        above = x > lo or (inc_lo and x == lo)
        below = x < hi or (inc_hi and x == hi)
        return above and below
    # Wrapped interval.
    above = x > lo or (inc_lo and x == lo)
    below = x < hi or (inc_hi and x == hi)
    return above or below


@dataclass
class RingRow:
    """One stored key: the identifier it registered under, a name, a blob."""

    ring_id: int
    key: str
    value: bytes
    replica: bool = False


class RowStore(Protocol):
    def put_row(self, row: RingRow) -> None: ...
    def rows(self) -> list[RingRow]: ...
    def remove_rows(self, keys: Iterable[tuple[int, str]]) -> None: ...


class DictRowStore:
    """Minimal in-memory RowStore used by tests and plain ring nodes."""

    def __init__(self) -> None:
        self._rows: dict[tuple[int, str], RingRow] = {}

    def put_row(self, row: RingRow) -> None:
        existing = self._rows.get((row.ring_id, row.key))
        if existing is not None and existing.replica is False and row.replica:
            # A primary row never silently downgrades to replica.
            return
        self._rows[(row.ring_id, row.key)] = row

    def rows(self) -> list[RingRow]:
        return list(self._rows.values())

    def remove_rows(self, keys: Iterable[tuple[int, str]]) -> None:
        for key in keys:
            self._rows.pop(key, None)


class RingTransport(Protocol):
    """Remote queries RingNode makes; every call counts as one message."""

    def get_state(self, addr: str) -> tuple[str | None, list[str]]: ...
    def query(self, addr: str, ident: int) -> tuple[str, str]: ...
    def notify(self, addr: str, candidate: str) -> None: ...
    def replicate(self, addr: str, row: RingRow) -> bool: ...
    def transfer(self, addr: str, rows: list[RingRow], departing: str | None) -> None: ...


@dataclass
class LookupResult:
    addr: str
    hops: int
    path: list[str] = field(default_factory=list)


class RingNode:
    """One chord participant: successor list, predecessor, finger table, rows."""

    def __init__(
        self,
        addr: str,
        transport: RingTransport,
        bits: int = BITS_FULL,
        store: RowStore | None = None,
        verify_row: Callable[[RingRow], bool] | None = None,
        successor_list_len: int = SUCCESSOR_LIST_LEN,
    ):
        self.addr = addr
        self.bits = bits
        self.ident = node_ident(addr, bits)
        self.transport = transport
        self.store = store if store is not None else DictRowStore()
        self.verify_row = verify_row or (lambda row: True)
        self.successor_list_len = successor_list_len
        self.successors: list[str] = [addr]
        self.predecessor: str | None = None
        self.fingers: list[str | None] = [None] * bits
        self.evicted: set[str] = set()
        self.alive = True

    # -- local views ---------------------------------------------------------

    def successor(self) -> str:
        for addr in self.successors:
            if addr not in self.evicted:
                return addr
        return self.addr

    def state(self) -> tuple[str | None, list[str]]:
        pred = self.predecessor
        if pred in self.evicted:
            pred = None
        return pred, [s for s in self.successors if s not in self.evicted]

    def owns(self, ident: int) -> bool:
        if self.predecessor is None or self.predecessor == self.addr:
            return True
        return in_interval(ident, node_ident(self.predecessor, self.bits), self.ident, inc_hi=True)

    def closest_preceding(self, ident: int) -> str:
        """Best local routing step strictly inside (self, ident)."""
        candidates: list[str] = [f for f in self.fingers if f] + list(self.successors)
        best = self.addr
        best_id = self.ident
        for addr in candidates:
            if addr in self.evicted or addr == self.addr:
                continue
            cand_id = node_ident(addr, self.bits)
            if in_interval(cand_id, self.ident, ident) and (
                best == self.addr or in_interval(cand_id, best_id, ident)
            ):
                best = addr
                best_id = cand_id
        return best

    def local_query(self, ident: int) -> tuple[str, str]:
        return self.closest_preceding(ident), self.successor()

    # -- lookup ---------------------------------------------------------------

    def find_successor(self, ident: int) -> LookupResult:
        """Iterative search. A remote node claiming itself as its own
        successor would own every key, so such answers are treated as
        unverifiable and routed around (bounded restarts)."""
        hops = 0
        excluded: set[str] = set()
        for _ in range(6):
            node, node_id = self.addr, self.ident
            closest, succ = self.local_query(ident)
            path = [node]
            seen: set[str] = set()
            stuck_at: str | None = None
            for _ in range(2 * self.bits + 8):
                succ_id = node_ident(succ, self.bits)
                if in_interval(ident, node_id, succ_id, inc_hi=True):
                    if succ == node and node != self.addr:
                        stuck_at = node
                        break
                    return LookupResult(succ, hops, path)
                nxt = closest if closest != node else succ
                if nxt == node or nxt in seen or nxt in excluded or nxt in self.evicted:
                    stuck_at = node if node != self.addr else None
                    break
                seen.add(node)
                node = nxt
                node_id = node_ident(node, self.bits)
                path.append(node)
                try:
                    closest, succ = self.transport.query(node, ident)
                    hops += 1
                except PeerUnreachable:
                    self.note_dead(node)
                    stuck_at = None
                    break
            if stuck_at is None and node == self.addr:
                break
            if stuck_at is not None:
                excluded.add(stuck_at)
        raise LookupFailed(f"no route to successor of {ident:x}")

    # -- membership -----------------------------------------------------------

    def join(self, bootstrap_addr: str) -> None:
        if bootstrap_addr == self.addr:
            return
        try:
            res_addr = self._resolve_via(bootstrap_addr, self.ident)
        except (PeerUnreachable, LookupFailed) as exc:
            raise JoinFailed(f"bootstrap {bootstrap_addr} unreachable") from exc
        self.predecessor = None
        self.successors = [res_addr if res_addr != self.addr else bootstrap_addr]
        self.stabilize()

    def _resolve_via(self, via: str, ident: int) -> str:
        node = via
        closest, succ = self.transport.query(node, ident)
        for _ in range(2 * self.bits + 8):
            if in_interval(ident, node_ident(node, self.bits), node_ident(succ, self.bits), inc_hi=True):
                return succ
            nxt = closest if closest != node else succ
            if nxt == node:
                return succ
            node = nxt
            closest, succ = self.transport.query(node, ident)
        raise LookupFailed("join lookup did not converge")

    def leave(self) -> None:
        """Graceful departure: hand every primary row to the successor."""
        succ = self.successor()
        if succ != self.addr:
            rows = [replace(r, replica=False) for r in self.store.rows() if not r.replica]
            try:
                self.transport.transfer(succ, rows, departing=self.addr)
            except PeerUnreachable:
                pass
        self.alive = False

    def stabilize(self) -> None:
        succ = self._first_live_successor()
        if succ is None:
            # Alone, or every successor died: close the ring through the
            # predecessor if one is known (two-node bootstrap case).
            pred = self.predecessor
            if pred and pred != self.addr and pred not in self.evicted:
                self.successors = [pred]
                succ = pred
            else:
                self.successors = [self.addr]
                return
        try:
            pred_of_succ, succ_list = self.transport.get_state(succ)
        except PeerUnreachable:
            self.note_dead(succ)
            return
        if (
            pred_of_succ
            and pred_of_succ != self.addr
            and pred_of_succ not in self.evicted
            and in_interval(node_ident(pred_of_succ, self.bits), self.ident, node_ident(succ, self.bits))
        ):
            try:
                _, probe_list = self.transport.get_state(pred_of_succ)
                succ, succ_list = pred_of_succ, probe_list
            except PeerUnreachable:
                self.note_dead(pred_of_succ)
        # Merge the claimed list with current backups: a successor reporting
        # a degenerate list (dead or lying) must not strip our fallbacks.
        chain = [succ] + [s for s in succ_list if s != self.addr and s not in self.evicted]
        chain += [s for s in self.successors if s not in self.evicted]
        deduped: list[str] = []
        for addr in chain:
            if addr not in deduped:
                deduped.append(addr)
        self.successors = deduped[: self.successor_list_len]
        try:
            self.transport.notify(succ, self.addr)
        except PeerUnreachable:
            self.note_dead(succ)

    def _first_live_successor(self) -> str | None:
        for addr in self.successors:
            if addr == self.addr:
                continue
            if addr in self.evicted:
                continue
            return addr
        return None

    def notified(self, candidate: str) -> None:
        """Handle a notify: adopt a closer predecessor, hand over its arc."""
        if candidate == self.addr or candidate in self.evicted:
            return
        cand_id = node_ident(candidate, self.bits)
        old_pred = self.predecessor
        if old_pred is None or old_pred in self.evicted or in_interval(
            cand_id, node_ident(old_pred, self.bits), self.ident
        ):
            self.predecessor = candidate
            self._handoff_to_predecessor(candidate, old_pred)

    def _handoff_to_predecessor(self, candidate: str, old_pred: str | None) -> None:
        cand_id = node_ident(candidate, self.bits)
        moving: list[RingRow] = []
        for row in self.store.rows():
            if row.replica:
                continue
            if not in_interval(row.ring_id, cand_id, self.ident, inc_hi=True):
                moving.append(replace(row, replica=False))
        if not moving:
            return
        try:
            self.transport.transfer(candidate, moving, departing=None)
        except PeerUnreachable:
            self.note_dead(candidate)
            return
        # This node stays the new owner's successor, so keep replica copies.
        self.store.remove_rows([(r.ring_id, r.key) for r in moving])
        for row in moving:
            self.store.put_row(replace(row, replica=True))

    def fix_fingers(self) -> None:
        prev_start: int | None = None
        prev_addr: str | None = None
        for i in range(self.bits):
            start = (self.ident + (1 << i)) % (1 << self.bits)
            if prev_addr is not None and prev_start is not None:
                prev_id = node_ident(prev_addr, self.bits)
                covered = (
                    start == prev_start
                    if prev_start == prev_id
                    else in_interval(start, prev_start, prev_id, inc_lo=True, inc_hi=True)
                )
                if covered:
                    self.fingers[i] = prev_addr
                    continue
            try:
                result = self.find_successor(start)
            except LookupFailed:
                continue
            self.fingers[i] = result.addr
            prev_start, prev_addr = start, result.addr

    def check_predecessor(self) -> None:
        if self.predecessor is None or self.predecessor == self.addr:
            return
        try:
            self.transport.get_state(self.predecessor)
        except PeerUnreachable:
            self.predecessor = None

    def note_dead(self, addr: str) -> None:
        self.successors = [s for s in self.successors if s != addr] or [self.addr]
        self.fingers = [None if f == addr else f for f in self.fingers]
        if self.predecessor == addr:
            self.predecessor = None

    def evict(self, addr: str) -> None:
        """Locally drop an adjudicated-malicious node from all structures."""
        if addr == self.addr:
            return
        self.evicted.add(addr)
        self.note_dead(addr)
        # Keys the evicted node held are taken over by its successor: this
        # node promotes any replicas it keeps for arcs it now owns.
        if self.predecessor is None:
            return
        pred_id = node_ident(self.predecessor, self.bits)
        for row in self.store.rows():
            if row.replica and in_interval(row.ring_id, pred_id, self.ident, inc_hi=True):
                self.store.put_row(replace(row, replica=False))

    # -- rows ------------------------------------------------------------------

    def put_primary(self, row: RingRow) -> bool:
        """Store a row this node owns and push a replica to the successor."""
        if not self.verify_row(row):
            return False
        self.store.put_row(replace(row, replica=False))
        self.replicate_out(row)
        return True

    def replicate_out(self, row: RingRow) -> None:
        succ = self.successor()
        if succ == self.addr:
            return
        try:
            self.transport.replicate(succ, replace(row, replica=True))
        except PeerUnreachable:
            self.note_dead(succ)

    def accept_replica(self, row: RingRow) -> bool:
        """Verify before replicating; invalid rows are never stored or forwarded."""
        if not self.verify_row(row):
            return False
        self.store.put_row(replace(row, replica=True))
        return True

    def accept_transfer(self, rows: list[RingRow], departing: str | None) -> int:
        accepted = 0
        for row in rows:
            if not self.verify_row(row):
                continue
            self.store.put_row(replace(row, replica=False))
            self.replicate_out(row)
            accepted += 1
        if departing is not None:
            self.note_dead(departing)
        return accepted


# ---------------------------------------------------------------------------
# In-process transport for tests and desk-scale oracles
# ---------------------------------------------------------------------------


class DirectTransport:
    """Routes ring calls straight to node objects; counts every message."""

    def __init__(self) -> None:
        self.nodes: dict[str, RingNode] = {}
        self.messages = 0

    def add(self, node: RingNode) -> None:
        self.nodes[node.addr] = node

    def _node(self, addr: str) -> RingNode:
        node = self.nodes.get(addr)
        if node is None or not node.alive:
            raise PeerUnreachable(addr)
        return node

    def get_state(self, addr: str) -> tuple[str | None, list[str]]:
        self.messages += 1
        return self._node(addr).state()

    def query(self, addr: str, ident: int) -> tuple[str, str]:
        self.messages += 1
        return self._node(addr).local_query(ident)

    def notify(self, addr: str, candidate: str) -> None:
        self.messages += 1
        self._node(addr).notified(candidate)

    def replicate(self, addr: str, row: RingRow) -> bool:
        self.messages += 1
        return self._node(addr).accept_replica(row)

    def transfer(self, addr: str, rows: list[RingRow], departing: str | None) -> None:
        self.messages += 1
        self._node(addr).accept_transfer(rows, departing)


def build_ring(
    addrs: list[str],
    bits: int = BITS_FULL,
    transport: DirectTransport | None = None,
    rounds: int | None = None,
    verify_row: Callable[[RingRow], bool] | None = None,
) -> tuple[dict[str, RingNode], DirectTransport]:
    """Sequentially join nodes and stabilize to convergence (tests/oracles)."""
    transport = transport or DirectTransport()
    nodes: dict[str, RingNode] = {}
    for addr in addrs:
        node = RingNode(addr, transport, bits=bits, verify_row=verify_row)
        transport.add(node)
        nodes[addr] = node
        if len(nodes) > 1:
            node.join(addrs[0])
        stabilize_all(nodes, rounds=2, fix=False)
    stabilize_all(nodes, rounds=rounds)
    return nodes, transport


def stabilize_all(nodes: dict[str, RingNode], rounds: int | None = None, fix: bool = True) -> None:
    count = rounds if rounds is not None else max(4, len(nodes))
    order = sorted(nodes)
    for _ in range(count):
        for addr in order:
            node = nodes[addr]
            if node.alive:
                node.check_predecessor()
                node.stabilize()
    if fix:
        for addr in order:
            if nodes[addr].alive:
                nodes[addr].fix_fingers()
