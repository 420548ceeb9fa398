import random

import pytest

from friendmesh import identity
from friendmesh.errors import (
    AuthError,
    HandshakeError,
    IntegrityError,
    MalformedRequest,
    UsernameTaken,
)


@pytest.fixture(scope="module")
def ca():
    pair = identity.generate_keypair("ec-p256")
    return identity.CAState("testca", pair)


def make_user(ca, username):
    pair = identity.generate_keypair("ec-p256")
    cert = ca.issue(username, pair.public_key, pair.algorithm_id)
    return pair, cert


# -- generate_keypair --------------------------------------------------------


@pytest.mark.parametrize("algo", ["rsa-2048", "ec-p256"])
def test_seal_open_roundtrip(algo):
    pair = identity.generate_keypair(algo)
    blob = identity.seal(pair.public_key, b"x", algo)
    assert identity.open_sealed(pair.private_key, blob, algo) == b"x"


def test_successive_keypairs_are_distinct():
    a = identity.generate_keypair("ec-p256")
    b = identity.generate_keypair("ec-p256")
    assert a.public_key != b.public_key


def test_unsupported_algorithm_rejected():
    with pytest.raises(MalformedRequest):
        identity.generate_keypair("no-such-alg")


def test_public_key_derivable_from_private():
    for algo in ("rsa-2048", "ec-p256"):
        pair = identity.generate_keypair(algo)
        assert identity.derive_public(pair.private_key, algo) == pair.public_key


def test_large_payload_hybrid_seal():
    pair = identity.generate_keypair("rsa-2048")
    data = bytes(range(256)) * 40  # far beyond one RSA block
    blob = identity.seal(pair.public_key, data, "rsa-2048")
    assert identity.open_sealed(pair.private_key, blob, "rsa-2048") == data


# -- ca_issue ----------------------------------------------------------------


def test_ca_issue_nominal(ca):
    pair = identity.generate_keypair("ec-p256")
    request = identity.build_cert_request(
        "alice", pair.public_key, pair.algorithm_id, ca.public_key, ca.algorithm_id
    )
    reply = identity.ca_issue(request, ca)
    cert = identity.open_cert_reply(reply, pair, ca.public_key, ca.algorithm_id)
    assert cert.username == "alice"
    assert identity.verify_certificate(cert, ca.public_key, ca.algorithm_id)


def test_ca_issue_duplicate_username(ca):
    pair = identity.generate_keypair("ec-p256")
    request = identity.build_cert_request(
        "bob", pair.public_key, pair.algorithm_id, ca.public_key, ca.algorithm_id
    )
    identity.ca_issue(request, ca)
    second = identity.build_cert_request(
        "bob", pair.public_key, pair.algorithm_id, ca.public_key, ca.algorithm_id
    )
    with pytest.raises(UsernameTaken):
        identity.ca_issue(second, ca)


def test_ca_issue_flipped_byte_detected(ca):
    # Mutation oracle: flipping any single payload byte must be rejected,
    # tamper-detected flips as integrity errors.
    rng = random.Random(7)
    pair = identity.generate_keypair("ec-p256")
    request = identity.build_cert_request(
        "carol", pair.public_key, pair.algorithm_id, ca.public_key, ca.algorithm_id
    )
    for _ in range(24):
        pos = rng.randrange(len(request))
        mutated = bytearray(request)
        mutated[pos] ^= 1 << rng.randrange(8)
        with pytest.raises((IntegrityError, MalformedRequest)):
            identity.ca_issue(bytes(mutated), ca)
    assert "carol" not in ca.usernames()


def test_ca_issue_digest_flip_is_integrity_error(ca):
    pair = identity.generate_keypair("ec-p256")
    request = identity.build_cert_request(
        "dave", pair.public_key, pair.algorithm_id, ca.public_key, ca.algorithm_id
    )
    mutated = bytearray(request)
    mutated[-1] ^= 0x01  # digest is the trailing field
    with pytest.raises(IntegrityError):
        identity.ca_issue(bytes(mutated), ca)


def test_certificate_uniqueness_invariant():
    pair = identity.generate_keypair("ec-p256")
    fresh = identity.CAState("uniq", pair)
    for i in range(20):
        user = identity.generate_keypair("ec-p256")
        fresh.issue(f"user{i}", user.public_key, user.algorithm_id)
    assert len(fresh.usernames()) == 20
    dup = identity.generate_keypair("ec-p256")
    with pytest.raises(UsernameTaken):
        fresh.issue("user3", dup.public_key, dup.algorithm_id)
    assert len(fresh.usernames()) == 20


def test_ca_log_survives_restart(tmp_path):
    log = str(tmp_path / "ca.log")
    pair = identity.generate_keypair("ec-p256")
    first = identity.CAState("persist", pair, log_path=log)
    user = identity.generate_keypair("ec-p256")
    first.issue("erin", user.public_key, user.algorithm_id)
    reloaded = identity.CAState("persist", pair, log_path=log)
    with pytest.raises(UsernameTaken):
        reloaded.issue("erin", user.public_key, user.algorithm_id)


# -- verify_certificate ------------------------------------------------------


def test_certificate_mutation_fails(ca):
    _, cert = make_user(ca, "frank")
    forged = identity.Certificate(
        username="frankk",
        public_key=cert.public_key,
        issuer=cert.issuer,
        algorithm_id=cert.algorithm_id,
        signature=cert.signature,
    )
    assert identity.verify_certificate(cert, ca.public_key, ca.algorithm_id)
    assert not identity.verify_certificate(forged, ca.public_key, ca.algorithm_id)


def test_certificate_wrong_ca_key(ca):
    _, cert = make_user(ca, "grace")
    other = identity.generate_keypair("ec-p256")
    assert not identity.verify_certificate(cert, other.public_key, "ec-p256")


# -- sign_record / verify_record ---------------------------------------------


def test_sign_verify_roundtrip():
    pair = identity.generate_keypair("ec-p256")
    sd = identity.sign_record(b"10.0.0.1|7000|udp", pair.private_key)
    assert identity.verify_record(b"10.0.0.1|7000|udp", sd, pair.public_key)


def test_single_byte_mutations_all_detected():
    # Exhaustive over positions at desk scale.
    pair = identity.generate_keypair("ec-p256")
    payload = b"10.0.0.1|7000|udp|relay:9|phrase"
    sd = identity.sign_record(payload, pair.private_key)
    for pos in range(len(payload)):
        mutated = bytearray(payload)
        mutated[pos] ^= 0x01
        assert not identity.verify_record(bytes(mutated), sd, pair.public_key)


def test_verify_with_substituted_key_fails():
    pair = identity.generate_keypair("ec-p256")
    attacker = identity.generate_keypair("ec-p256")
    sd = identity.sign_record(b"payload", pair.private_key)
    assert not identity.verify_record(b"payload", sd, attacker.public_key)


def test_sign_empty_payload_rejected():
    pair = identity.generate_keypair("ec-p256")
    with pytest.raises(MalformedRequest):
        identity.sign_record(b"", pair.private_key)


# -- seal_session_key / open_session_key --------------------------------------


def test_session_key_roundtrip():
    sender = identity.generate_keypair("ec-p256")
    receiver = identity.generate_keypair("ec-p256")
    sk = identity.generate_session_key()
    blob = identity.seal_session_key(sk, receiver.public_key, sender.private_key)
    opened = identity.open_session_key(blob, sender.public_key, receiver.private_key)
    assert opened == sk


def test_session_key_wrong_receiver_key():
    sender = identity.generate_keypair("ec-p256")
    receiver = identity.generate_keypair("ec-p256")
    wrong = identity.generate_keypair("ec-p256")
    sk = identity.generate_session_key()
    blob = identity.seal_session_key(sk, receiver.public_key, sender.private_key)
    with pytest.raises(HandshakeError):
        identity.open_session_key(blob, sender.public_key, wrong.private_key)


def test_session_key_adversary_strategies_fail():
    # Adversary harness: replay under the wrong sender identity, truncation,
    # and reseal-under-own-key must all fail at the opener.
    sender = identity.generate_keypair("ec-p256")
    receiver = identity.generate_keypair("ec-p256")
    mallory = identity.generate_keypair("ec-p256")
    sk = identity.generate_session_key()
    blob = identity.seal_session_key(sk, receiver.public_key, sender.private_key)

    # Replay presented as coming from mallory: signature check fails.
    with pytest.raises(HandshakeError):
        identity.open_session_key(blob, mallory.public_key, receiver.private_key)

    # Truncation: AEAD fails.
    with pytest.raises(HandshakeError):
        identity.open_session_key(blob[:-4], sender.public_key, receiver.private_key)

    # Reseal under mallory's own key while claiming to be the sender.
    resealed = identity.seal_session_key(sk, receiver.public_key, mallory.private_key)
    with pytest.raises(HandshakeError):
        identity.open_session_key(resealed, sender.public_key, receiver.private_key)


def test_session_cipher_directions():
    sk = identity.generate_session_key()
    initiator = identity.SessionCipher(sk, direction=0)
    responder = identity.SessionCipher(sk, direction=1)
    ct = initiator.encrypt(b"hello")
    assert ct != b"hello"
    assert responder.decrypt(ct) == b"hello"
    back = responder.encrypt(b"world")
    assert initiator.decrypt(back) == b"world"


def test_session_cipher_tamper_detected():
    sk = identity.generate_session_key()
    a = identity.SessionCipher(sk, direction=0)
    b = identity.SessionCipher(sk, direction=1)
    ct = bytearray(a.encrypt(b"payload"))
    ct[0] ^= 0xFF
    with pytest.raises(IntegrityError):
        b.decrypt(bytes(ct))


# -- passphrases and friend keys ----------------------------------------------


def test_passphrase_seeded_and_unlinkable():
    rng = random.Random(99)
    p1 = identity.generate_passphrase(rng)
    p2 = identity.generate_passphrase(random.Random(99))
    assert p1 == p2
    assert len(p1) >= 40
    assert "alice" not in p1.lower()


def test_friend_key_roundtrip_and_tamper():
    key = identity.generate_friend_key(random.Random(3))
    blob = identity.friend_key_encrypt(key, b"mirror-list")
    assert identity.friend_key_decrypt(key, blob) == b"mirror-list"
    bad = bytearray(blob)
    bad[-1] ^= 1
    with pytest.raises(IntegrityError):
        identity.friend_key_decrypt(key, bytes(bad))


def test_certificate_file_roundtrip(tmp_path, ca):
    _, cert = make_user(ca, "heidi")
    path = str(tmp_path / "heidi.cert")
    identity.save_certificate(cert, path)
    assert identity.load_certificate(path) == cert


def test_keypair_file_roundtrip(tmp_path):
    pair = identity.generate_keypair("ec-p256")
    path = str(tmp_path / "key.bin")
    identity.save_keypair(pair, path)
    assert identity.load_keypair(path) == pair
