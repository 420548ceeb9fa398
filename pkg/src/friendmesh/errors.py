"""Exception types shared across the service and application layers."""


class ProtocolError(Exception):
    """Base class for every protocol-level failure."""

    code = "protocol_error"


class MalformedRequest(ProtocolError):
    code = "malformed_request"


class IntegrityError(ProtocolError):
    """A covered byte changed: digest, signature or AEAD tag did not check out."""

    code = "integrity_error"


class AuthError(ProtocolError):
    code = "auth_error"


class HandshakeError(ProtocolError):
    code = "handshake_error"


class UsernameTaken(ProtocolError):
    code = "username_taken"


class NotFound(ProtocolError):
    code = "not_found"


class NetworkUnreachable(ProtocolError):
    code = "network_unreachable"


class PeerUnreachable(ProtocolError):
    code = "peer_unreachable"


class LookupFailed(ProtocolError):
    code = "lookup_failed"


class JoinFailed(ProtocolError):
    code = "join_failed"


class StorageAttack(ProtocolError):
    """A located record failed its owner-signed digest check."""

    code = "storage_attack"


class AccessDenied(ProtocolError):
    code = "access_denied"


class InvalidPath(ProtocolError):
    code = "invalid_path"


class Unavailable(ProtocolError):
    code = "unavailable"


class ConfigError(ProtocolError):
    code = "config_error"


_BY_CODE = {
    cls.code: cls
    for cls in [
        MalformedRequest,
        IntegrityError,
        AuthError,
        HandshakeError,
        UsernameTaken,
        NotFound,
        NetworkUnreachable,
        PeerUnreachable,
        LookupFailed,
        JoinFailed,
        StorageAttack,
        AccessDenied,
        InvalidPath,
        Unavailable,
        ConfigError,
    ]
}


def error_for_code(code: str, message: str = "") -> ProtocolError:
    """Rebuild the exception a remote endpoint reported in a status field."""
    cls = _BY_CODE.get(code, ProtocolError)
    return cls(message or code)
