"""Client-side calls against rendezvous and relay servers.

Each function drives one protocol exchange over an open channel; the
secure ones establish the certificate/session-key prelude first.
"""
from __future__ import annotations

from . import identity, wire
from .channel import Channel
from .errors import ProtocolError
from .identity import Certificate, KeyPair
from .records import FriendshipRequestRecord, RegistrationRecord
from .secure import SecureClient
from .wire import Frame


def open_secure(channel: Channel, cert: Certificate, keys: KeyPair) -> SecureClient:
    client = SecureClient(channel, cert, keys)
    client.establish()
    return client


def register_peer(
    client: SecureClient, record: RegistrationRecord
) -> list[FriendshipRequestRecord]:
    """Submit the signed registration payload; returns pending friendship requests."""
    payload = wire.pack_fields(
        wire.pack_str(record.ip),
        wire.pack_int(record.port),
        wire.pack_str(record.nat_kind),
        wire.pack_str(record.protocol),
        wire.pack_str(record.relay_address),
        wire.pack_int(record.relay_port),
        wire.pack_str(record.passphrase),
        record.encrypted_mirror_list,
        record.signed_digest.digest,
        record.signed_digest.signature,
    )
    fields = client.request(wire.REGISTRATION_PAYLOAD, payload)
    return [FriendshipRequestRecord.decode(f) for f in fields]


def locate_peer(
    client: SecureClient, passphrase: str
) -> tuple[RegistrationRecord, bytes]:
    """Exact-passphrase lookup; raises NotFound when no row matches."""
    fields = client.request(wire.LOCATE_PEER, wire.pack_fields(wire.pack_str(passphrase)))
    return RegistrationRecord.decode(fields[0]), fields[1]


def friend_request(client: SecureClient, target_username: str) -> Certificate:
    fields = client.request(
        wire.FRIEND_REQUEST, wire.pack_fields(wire.pack_str(target_username))
    )
    return Certificate.decode(fields[0])


def submit_passphrase_blob(client: SecureClient, sealed_blob: bytes) -> None:
    client.request(wire.PASSPHRASE_BLOB, wire.pack_fields(sealed_blob))


def seal_request_blob(target_cert: Certificate, requester_username: str, passphrase: str) -> bytes:
    """Bind the requester's name inside the sealed blob so nobody can reuse it."""
    body = wire.pack_fields(wire.pack_str(requester_username), wire.pack_str(passphrase))
    return identity.seal(target_cert.public_key, body, target_cert.algorithm_id)


def open_request_blob(
    keys: KeyPair, request: FriendshipRequestRecord
) -> str | None:
    """Open a delivered request; None when it fails to open or was re-used."""
    try:
        body = identity.open_sealed(keys.private_key, request.sealed_passphrase, keys.algorithm_id)
        name_b, passphrase_b = wire.unpack_fields(body, expect=2)
    except ProtocolError:
        return None
    if wire.unpack_str(name_b) != request.requester_username:
        return None
    return wire.unpack_str(passphrase_b)


def request_relay(channel: Channel) -> tuple[str, int] | None:
    reply = channel.request(Frame(wire.REQUEST_RELAY))
    if reply.msg_type == wire.NO_RELAY_AVAILABLE:
        return None
    addr_b, port_b = wire.open_reply(reply)
    return wire.unpack_str(addr_b), wire.unpack_int(port_b)


def relay_register(channel: Channel, port: int, capacity: int) -> int:
    reply = channel.request(
        Frame(wire.RELAY_REGISTER, wire.pack_fields(wire.pack_int(port), wire.pack_int(capacity)))
    )
    (interval_b,) = wire.open_reply(reply)
    return wire.unpack_int(interval_b)


def relay_update(channel: Channel, port: int, load: int, capacity: int) -> None:
    reply = channel.request(
        Frame(
            wire.RELAY_UPDATE,
            wire.pack_fields(wire.pack_int(port), wire.pack_int(load), wire.pack_int(capacity)),
        )
    )
    wire.open_reply(reply)


def chord_lookup(channel: Channel, ident: int) -> tuple[str, int]:
    reply = channel.request(
        Frame(wire.CHORD_LOOKUP, wire.pack_fields(format(ident, "x").encode("ascii")))
    )
    if reply.msg_type != wire.CHORD_REPLY:
        raise ProtocolError(f"unexpected reply {reply.msg_type}")
    fields = wire.open_reply(reply)
    return wire.unpack_str(fields[0]), wire.unpack_int(fields[1])


def submit_complaint(channel: Channel, complaint_bytes: bytes) -> None:
    reply = channel.request(Frame(wire.COMPLAINT, complaint_bytes))
    wire.open_reply(reply)
