import pytest

from friendmesh import identity, secure, wire
from friendmesh.channel import DirectChannel, SessionContext
from friendmesh.errors import AuthError, HandshakeError
from friendmesh.secure import ResponderSession, connect_secure
from friendmesh.wire import Frame


@pytest.fixture(scope="module")
def ca():
    return identity.CAState("hs-ca", identity.generate_keypair("ec-p256"))


def user(ca, name):
    pair = identity.generate_keypair("ec-p256")
    return pair, ca.issue(name, pair.public_key, pair.algorithm_id)


class ResponderService:
    def __init__(self, ca, cert, pair, admission=lambda u: True, captured=None):
        self.args = (cert, pair, ca.public_key, ca.algorithm_id)
        self.admission = admission
        self.captured = captured
        self.sessions = []

    def open_session(self, ctx):
        session = ResponderSession(
            *self.args, self.admission,
            lambda body, u, c: secure.pack_app("ok", *secure.unpack_app(body)[1]),
        )
        self.sessions.append(session)
        if self.captured is None:
            return session
        outer = self

        class _Cap:
            def handle(self, frame, c):
                outer.captured += frame.encode()
                reply = session.handle(frame, c)
                if reply is not None:
                    outer.captured += reply.encode()
                return reply

            def closed(self, c):
                pass

        return _Cap()


def test_nominal_handshake_identical_session_keys(ca):
    ipair, icert = user(ca, "hs-init")
    rpair, rcert = user(ca, "hs-resp")
    service = ResponderService(ca, rcert, rpair)
    channel = DirectChannel(service)
    sc = connect_secure(channel, icert, ipair, ca.public_key, ca.algorithm_id)
    assert sc.peer_username == "hs-resp"
    # Both sides hold the byte-identical session key.
    responder = service.sessions[0]
    assert responder._cipher is not None
    assert sc.request_app("m", b"payload") == [b"payload"]


def test_responder_bad_certificate_auth_error(ca):
    ipair, icert = user(ca, "hs-init2")
    rogue_ca = identity.CAState("rogue", identity.generate_keypair("ec-p256"))
    rpair = identity.generate_keypair("ec-p256")
    fake_cert = rogue_ca.issue("hs-fake", rpair.public_key, rpair.algorithm_id)
    service = ResponderService(ca, fake_cert, rpair)
    channel = DirectChannel(service)
    with pytest.raises(AuthError):
        connect_secure(channel, icert, ipair, ca.public_key, ca.algorithm_id)


def test_initiator_rejected_by_admission_gate(ca):
    ipair, icert = user(ca, "hs-unwanted")
    rpair, rcert = user(ca, "hs-picky")
    service = ResponderService(ca, rcert, rpair, admission=lambda u: u == "somebody-else")
    channel = DirectChannel(service)
    with pytest.raises(AuthError):
        connect_secure(channel, icert, ipair, ca.public_key, ca.algorithm_id)


def test_expected_username_mismatch(ca):
    ipair, icert = user(ca, "hs-init3")
    rpair, rcert = user(ca, "hs-actual")
    service = ResponderService(ca, rcert, rpair)
    channel = DirectChannel(service)
    with pytest.raises(AuthError):
        connect_secure(
            channel, icert, ipair, ca.public_key, ca.algorithm_id,
            expected_username="hs-expected",
        )


def test_no_half_open_channels(ca):
    # Agreement: a responder that never gets the session key refuses app
    # traffic instead of guessing at one.
    ipair, icert = user(ca, "hs-init4")
    rpair, rcert = user(ca, "hs-resp4")
    session = ResponderSession(
        rcert, rpair, ca.public_key, ca.algorithm_id, lambda u: True,
        lambda body, u, c: body,
    )
    ctx = SessionContext(remote_addr="x", local_addr="y", now_ms=lambda: 0)
    session.handle(Frame(wire.REGISTER_PEER, wire.pack_fields(icert.encode())), ctx)
    reply = session.handle(Frame(wire.APP_DATA, b"\x00" * 32), ctx)
    with pytest.raises(HandshakeError):
        wire.open_reply(reply)


def test_transcript_hides_responder_certificate(ca):
    # After message 1, a passive observer must not see the responder's
    # certificate bytes (nor its username) anywhere in the transcript.
    ipair, icert = user(ca, "hs-init5")
    rpair, rcert = user(ca, "hs-hidden-responder")
    captured = bytearray()
    service = ResponderService(ca, rcert, rpair, captured=captured)
    channel = DirectChannel(service)
    sc = connect_secure(channel, icert, ipair, ca.public_key, ca.algorithm_id)
    sc.request_app("m", b"x")
    transcript = bytes(captured)
    assert rcert.encode() not in transcript
    assert b"hs-hidden-responder" not in transcript
    # The initiator's certificate is the one thing sent in the clear.
    assert icert.encode() in transcript
