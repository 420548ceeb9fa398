"""Versioned profile trees, permissions, update logs, and reconciliation.

A profile is a tree of elements under five components: info, share_board,
events, groups, private_messages. Every component carries an integer
version incremented on each change, and the update log holds every
operation so that replay from an empty profile reproduces the tree
exactly. Synchronization pulls only entries beyond the requester's
version vector; a per-component prefix digest detects post-merge version
renumbering and falls back to a full component resync when it happens.

Permission tables have read/write/no-access member sets holding usernames
or group names; evaluation is deepest element first, individual entries
before group entries, no_access over grants, and default deny. The owner
is an implicit superuser. Private-message payloads are sealed under the
owner's public key by their authors, so mirrors only ever hold ciphertext.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

from .errors import AccessDenied, InvalidPath, MalformedRequest
from .wire import pack_fields, pack_int, pack_str, unpack_fields, unpack_int, unpack_str

COMPONENTS = ("info", "share_board", "events", "groups", "private_messages")

READ = "read"
WRITE = "write"


@dataclass
class PermissionTable:
    read: set[str] = field(default_factory=set)
    write: set[str] = field(default_factory=set)
    no_access: set[str] = field(default_factory=set)

    def mentions(self, name: str) -> bool:
        return name in self.read or name in self.write or name in self.no_access

    def grants(self, name: str, mode: str) -> bool:
        if mode == READ:
            return name in self.read or name in self.write
        return name in self.write

    def assign(self, set_name: str, members: set[str]) -> None:
        if set_name not in ("read", "write", "no_access"):
            raise MalformedRequest(f"unknown permission set {set_name}")
        # Keep the three sets pairwise disjoint: the newest assignment wins.
        for other in (self.read, self.write, self.no_access):
            other.difference_update(members)
        getattr(self, set_name).update(members)

    def encode(self) -> bytes:
        return pack_fields(
            pack_str(",".join(sorted(self.read))),
            pack_str(",".join(sorted(self.write))),
            pack_str(",".join(sorted(self.no_access))),
        )


@dataclass
class Element:
    name: str
    content: bytes = b""
    permissions: PermissionTable | None = None
    children: dict[str, "Element"] = field(default_factory=dict)


@dataclass(frozen=True)
class LogEntry:
    path: str
    version: int
    author: str
    op: bytes
    timestamp: int

    def content_key(self) -> tuple:
        return (self.timestamp, self.author, self.path, self.op)

    def digest(self) -> bytes:
        return hashlib.sha256(
            pack_fields(pack_str(self.path), pack_str(self.author), self.op, pack_int(self.timestamp))
        ).digest()

    def encode(self) -> bytes:
        return pack_fields(
            pack_str(self.path),
            pack_int(self.version),
            pack_str(self.author),
            self.op,
            pack_int(self.timestamp),
        )

    @classmethod
    def decode(cls, data: bytes) -> "LogEntry":
        path, version, author, op, ts = unpack_fields(data, expect=5)
        return cls(
            path=unpack_str(path),
            version=unpack_int(version),
            author=unpack_str(author),
            op=op,
            timestamp=unpack_int(ts),
        )


# -- operations ---------------------------------------------------------------


def op_set(value: bytes) -> bytes:
    return pack_fields(b"set", value)


def op_add(child_id: str, value: bytes = b"") -> bytes:
    return pack_fields(b"add", pack_str(child_id), value)


def op_remove(child_id: str) -> bytes:
    return pack_fields(b"remove", pack_str(child_id))


def op_perm(set_name: str, members: Iterable[str]) -> bytes:
    return pack_fields(b"perm", pack_str(set_name), pack_str(",".join(sorted(members))))


class Profile:
    def __init__(self, owner: str):
        self.owner = owner
        self.root: dict[str, Element] = {name: Element(name) for name in COMPONENTS}
        self.versions: dict[str, int] = {name: 0 for name in COMPONENTS}
        self.log: list[LogEntry] = []

    # -- tree access ------------------------------------------------------------

    @staticmethod
    def component_of(path: str) -> str:
        head = path.split("/", 1)[0]
        if head not in COMPONENTS:
            raise InvalidPath(path)
        return head

    def _walk(self, path: str, create: bool = False) -> Element:
        parts = path.split("/")
        if parts[0] not in self.root:
            raise InvalidPath(path)
        node = self.root[parts[0]]
        for part in parts[1:]:
            if not part:
                raise InvalidPath(path)
            child = node.children.get(part)
            if child is None:
                if not create:
                    raise InvalidPath(path)
                child = Element(part)
                node.children[part] = child
            node = child
        return node

    def element(self, path: str) -> Element:
        return self._walk(path)

    def has_element(self, path: str) -> bool:
        try:
            self._walk(path)
            return True
        except InvalidPath:
            return False

    def group_members(self, group_name: str) -> set[str]:
        group = self.root["groups"].children.get(group_name)
        if group is None or not group.content:
            return set()
        return {m for m in group.content.decode("utf-8", "replace").split(",") if m}

    # -- permissions ----------------------------------------------------------------

    def check_permission(self, user: str, element_path: str, mode: str) -> bool:
        """Deterministic evaluation; the owner is an implicit superuser."""
        if user == self.owner:
            return True
        try:
            chain = self._element_chain(element_path)
        except InvalidPath:
            return False
        for element in reversed(chain):  # deepest first
            table = element.permissions
            if table is None:
                continue
            if user in table.no_access:
                return False
            if table.grants(user, mode):
                return True
            if table.mentions(user):
                # Individually mentioned without a grant for this mode.
                return False
            group_no = False
            group_grant = False
            for group_name in table.no_access:
                if user in self.group_members(group_name):
                    group_no = True
            for mode_set in (table.write, table.read):
                for group_name in mode_set:
                    if user in self.group_members(group_name) and table.grants(group_name, mode):
                        group_grant = True
            if group_no:
                return False
            if group_grant:
                return True
        return False  # default deny

    def _element_chain(self, path: str) -> list[Element]:
        parts = path.split("/")
        if parts[0] not in self.root:
            raise InvalidPath(path)
        chain = [self.root[parts[0]]]
        node = chain[0]
        for part in parts[1:]:
            child = node.children.get(part)
            if child is None:
                raise InvalidPath(path)
            chain.append(child)
            node = child
        return chain

    # -- updates ------------------------------------------------------------------------

    def apply_update(self, author: str, element_path: str, op: bytes, timestamp: int = 0) -> int:
        """Permission-checked mutate + version bump + log append."""
        component = self.component_of(element_path)
        if author != self.owner and not self.check_permission(author, element_path, WRITE):
            raise AccessDenied(f"{author} may not write {element_path}")
        self._apply_op(element_path, op, create_missing=False)
        version = self.versions[component] + 1
        self.versions[component] = version
        self.log.append(
            LogEntry(path=element_path, version=version, author=author, op=op, timestamp=timestamp)
        )
        return version

    def _apply_op(self, path: str, op: bytes, create_missing: bool) -> None:
        fields = unpack_fields(op)
        if not fields:
            raise MalformedRequest("empty op")
        kind = fields[0]
        if kind == b"set":
            element = self._walk(path, create=create_missing)
            element.content = fields[1] if len(fields) > 1 else b""
        elif kind == b"add":
            child_id = unpack_str(fields[1])
            if not child_id or "/" in child_id:
                raise InvalidPath(child_id)
            parent = self._walk(path, create=create_missing)
            child = parent.children.get(child_id)
            if child is None:
                child = Element(child_id)
                parent.children[child_id] = child
            child.content = fields[2] if len(fields) > 2 else b""
        elif kind == b"remove":
            child_id = unpack_str(fields[1])
            parent = self._walk(path, create=create_missing)
            parent.children.pop(child_id, None)
        elif kind == b"perm":
            set_name = unpack_str(fields[1])
            members = {m for m in unpack_str(fields[2]).split(",") if m}
            element = self._walk(path, create=create_missing)
            if element.permissions is None:
                element.permissions = PermissionTable()
            element.permissions.assign(set_name, members)
        else:
            raise MalformedRequest(f"unknown op kind {kind!r}")

    # -- pull ------------------------------------------------------------------------------

    def vector(self) -> dict[str, int]:
        return dict(self.versions)

    # 16 bytes is plenty for renumber detection and keeps pull headers small.
    PREFIX_DIGEST_LEN = 16

    def prefix_digest(self, component: str, upto_version: int) -> bytes:
        hasher = hashlib.sha256()
        for entry in self.log:
            if self.component_of(entry.path) == component and entry.version <= upto_version:
                hasher.update(entry.digest())
        return hasher.digest()[: self.PREFIX_DIGEST_LEN]

    def pull_updates(
        self,
        requester: str,
        vector: dict[str, int],
        digests: dict[str, bytes] | None = None,
        filtered: bool = True,
    ) -> list[LogEntry]:
        """Exactly the entries beyond the requester's vector it may read.

        When the requester's prefix digest for a component disagrees (the
        host merged and renumbered), the whole component is resent.
        """
        out: list[LogEntry] = []
        for component in COMPONENTS:
            since = vector.get(component, 0)
            if digests is not None and since > 0:
                theirs = digests.get(component, b"")
                if theirs != self.prefix_digest(component, since):
                    since = 0
            for entry in self.log:
                if self.component_of(entry.path) != component or entry.version <= since:
                    continue
                if filtered and not self.check_permission(requester, entry.path, READ):
                    continue
                out.append(entry)
        return out

    # -- replay and merge ---------------------------------------------------------------------

    @classmethod
    def replay(cls, owner: str, log: Iterable[LogEntry]) -> "Profile":
        profile = cls(owner)
        for entry in sorted(log, key=lambda e: (COMPONENTS.index(cls.component_of(e.path)), e.version)):
            # Replay trusts the log (checks ran at append time); missing
            # parents from foreign merges become placeholders.
            profile._apply_op(entry.path, entry.op, create_missing=True)
            component = cls.component_of(entry.path)
            profile.versions[component] = max(profile.versions[component], entry.version)
            profile.log.append(entry)
        return profile

    def merge_entries(self, entries: Iterable[LogEntry]) -> bool:
        """Reconcile foreign entries into this profile; True when it changed."""
        merged = merge_logs(self.log, list(entries))
        if merged == self.log:
            return False
        rebuilt = Profile.replay(self.owner, merged)
        self.root = rebuilt.root
        self.versions = rebuilt.versions
        self.log = rebuilt.log
        return True

    def state_digest(self) -> bytes:
        return hashlib.sha256(self.canonical_encode()).digest()

    # -- canonical text encoding -------------------------------------------------------------------

    def canonical_encode(self) -> bytes:
        """Deterministic, field-order-normalized text form of the tree."""
        lines = [f"profile owner={self.owner}"]
        for component in COMPONENTS:
            lines.append(f"component {component} version={self.versions[component]}")
            lines.extend(self._encode_element(self.root[component], component))
        return ("\n".join(lines) + "\n").encode("utf-8")

    def _encode_element(self, element: Element, path: str) -> list[str]:
        lines = []
        parts = [f"element {path}"]
        if element.content:
            parts.append(f"content={element.content.hex()}")
        if element.permissions is not None:
            table = element.permissions
            parts.append(
                "perm=r:%s;w:%s;n:%s"
                % (
                    ",".join(sorted(table.read)),
                    ",".join(sorted(table.write)),
                    ",".join(sorted(table.no_access)),
                )
            )
        lines.append(" ".join(parts))
        for name in sorted(element.children):
            lines.extend(self._encode_element(element.children[name], f"{path}/{name}"))
        return lines

    def export_log(self) -> bytes:
        return pack_fields(pack_str(self.owner), *[e.encode() for e in self.log])

    @classmethod
    def import_log(cls, data: bytes) -> "Profile":
        fields = unpack_fields(data)
        if not fields:
            raise MalformedRequest("empty profile export")
        owner = unpack_str(fields[0])
        return cls.replay(owner, [LogEntry.decode(f) for f in fields[1:]])

    @classmethod
    def canonical_decode(cls, text: bytes) -> "Profile":
        """Rebuild a profile from its canonical text form.

        The tree is reconstructed through a synthesized log (history is not
        part of the text form), so the result replays and re-encodes to the
        same text.
        """
        lines = text.decode("utf-8").splitlines()
        if not lines or not lines[0].startswith("profile owner="):
            raise MalformedRequest("not a canonical profile encoding")
        owner = lines[0].split("owner=", 1)[1]
        profile = cls(owner)
        for line in lines[1:]:
            if line.startswith("component "):
                continue  # versions re-derive from the synthesized ops
            if not line.startswith("element "):
                raise MalformedRequest(f"unparseable line: {line!r}")
            body = line[len("element "):]
            path, _, rest = body.partition(" ")
            content = b""
            perms: list[tuple[str, set[str]]] = []
            for part in rest.split(" ") if rest else []:
                if part.startswith("content="):
                    content = bytes.fromhex(part[len("content="):])
                elif part.startswith("perm="):
                    for chunk in part[len("perm="):].split(";"):
                        tag, _, members = chunk.partition(":")
                        names = {"r": "read", "w": "write", "n": "no_access"}
                        perms.append((names[tag], {m for m in members.split(",") if m}))
            if "/" in path:
                parent, _, child = path.rpartition("/")
                profile.apply_update(owner, parent, op_add(child, content), timestamp=0)
            elif content:
                profile.apply_update(owner, path, op_set(content), timestamp=0)
            for set_name, members in perms:
                if members:
                    profile.apply_update(owner, path, op_perm(set_name, members), timestamp=0)
        return profile


def merge_logs(*logs: list[LogEntry]) -> list[LogEntry]:
    """Deterministic merge: content-dedup, order by (timestamp, author,
    digest) per component, versions renumbered densely. Commutative and
    idempotent; nothing is ever dropped."""
    by_component: dict[str, dict[tuple, LogEntry]] = {c: {} for c in COMPONENTS}
    for log in logs:
        for entry in log:
            component = Profile.component_of(entry.path)
            by_component[component].setdefault(entry.content_key(), entry)
    merged: list[LogEntry] = []
    for component in COMPONENTS:
        entries = sorted(
            by_component[component].values(),
            key=lambda e: (e.timestamp, e.author, e.digest()),
        )
        for i, entry in enumerate(entries, start=1):
            if entry.version != i:
                entry = LogEntry(
                    path=entry.path,
                    version=i,
                    author=entry.author,
                    op=entry.op,
                    timestamp=entry.timestamp,
                )
            merged.append(entry)
    return merged


def reconcile(owner: str, *logs: list[LogEntry]) -> Profile:
    """Merged, replay-equivalent profile from divergent replica logs."""
    return Profile.replay(owner, merge_logs(*logs))


# -- wire forms for sync ------------------------------------------------------------


def encode_vector(profile: Profile) -> bytes:
    fields: list[bytes] = []
    for component in COMPONENTS:
        version = profile.versions[component]
        fields.append(pack_str(component))
        fields.append(pack_int(version))
        fields.append(profile.prefix_digest(component, version) if version else b"")
    return pack_fields(*fields)


def decode_vector(data: bytes) -> tuple[dict[str, int], dict[str, bytes]]:
    fields = unpack_fields(data)
    if len(fields) % 3:
        raise MalformedRequest("bad vector encoding")
    vector: dict[str, int] = {}
    digests: dict[str, bytes] = {}
    for i in range(0, len(fields), 3):
        name = unpack_str(fields[i])
        vector[name] = unpack_int(fields[i + 1])
        digests[name] = fields[i + 2]
    return vector, digests


def encode_entries(entries: Iterable[LogEntry]) -> bytes:
    return pack_fields(*[e.encode() for e in entries])


def decode_entries(data: bytes) -> list[LogEntry]:
    return [LogEntry.decode(f) for f in unpack_fields(data)]


@dataclass
class MirrorReplica:
    """A friend's profile replica served while they are offline."""

    owner: str
    profile: Profile
    allowed_users: set[str] = field(default_factory=set)
    last_sync_vector: dict[str, int] = field(default_factory=dict)

    def may_access(self, username: str) -> bool:
        return username == self.owner or username in self.allowed_users
