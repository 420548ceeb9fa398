"""Key pairs, certificates, signed digests, sealed session keys and the CA.

Two key algorithms are supported behind one surface:

  rsa-2048  RSA with OAEP sealing and PSS signatures (DER-serialized keys)
  ec-p256   ECDH-based sealing (ephemeral key + HKDF + AES-GCM) and ECDSA
            signatures in fixed 64-byte raw form (raw-serialized keys)

Sealing is always hybrid: the payload goes under a fresh AES-256-GCM key and
only that key is wrapped asymmetrically, so payload size is unbounded.
ec-p256 is the default everywhere speed matters; sizes of every ciphertext
and signature are a pure function of the plaintext length for both.
"""
from __future__ import annotations

import base64
import hashlib
import os
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthError,
    HandshakeError,
    IntegrityError,
    MalformedRequest,
    UsernameTaken,
)
from .wire import pack_fields, pack_str, unpack_fields, unpack_str

MAX_USERNAME_BYTES = 64
DIGEST_LEN = 32

DEFAULT_ALGORITHM = "ec-p256"
DEFAULT_CIPHER = "aes-128-gcm"

_CIPHER_KEY_LEN = {"aes-128-gcm": 16, "aes-256-gcm": 32}


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# Algorithm backends
# ---------------------------------------------------------------------------


class _RsaAlgo:
    name = "rsa-2048"

    def generate(self) -> tuple[bytes, bytes]:
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        return self._ser_priv(key), self._ser_pub(key.public_key())

    @staticmethod
    def _ser_priv(key) -> bytes:
        return key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @staticmethod
    def _ser_pub(key) -> bytes:
        return key.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    def derive_public(self, priv: bytes) -> bytes:
        return self._ser_pub(self._load_priv(priv).public_key())

    @staticmethod
    def _load_priv(priv: bytes):
        return serialization.load_der_private_key(priv, password=None)

    @staticmethod
    def _load_pub(pub: bytes):
        return serialization.load_der_public_key(pub)

    def wrap_key(self, pub: bytes, key: bytes) -> bytes:
        return self._load_pub(pub).encrypt(
            key,
            padding.OAEP(
                mgf=padding.MGF1(algorithm=hashes.SHA256()),
                algorithm=hashes.SHA256(),
                label=None,
            ),
        )

    def unwrap_key(self, priv: bytes, wrapped: bytes) -> bytes:
        return self._load_priv(priv).decrypt(
            wrapped,
            padding.OAEP(
                mgf=padding.MGF1(algorithm=hashes.SHA256()),
                algorithm=hashes.SHA256(),
                label=None,
            ),
        )

    def sign(self, priv: bytes, data: bytes) -> bytes:
        return self._load_priv(priv).sign(
            data,
            padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32),
            hashes.SHA256(),
        )

    def verify(self, pub: bytes, data: bytes, sig: bytes) -> bool:
        try:
            self._load_pub(pub).verify(
                sig,
                data,
                padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32),
                hashes.SHA256(),
            )
            return True
        except Exception:
            return False


class _EcAlgo:
    name = "ec-p256"
    _curve = ec.SECP256R1()

    def generate(self) -> tuple[bytes, bytes]:
        key = ec.generate_private_key(self._curve)
        return self._ser_priv(key), self._ser_pub(key.public_key())

    @staticmethod
    def _ser_priv(key) -> bytes:
        return key.private_numbers().private_value.to_bytes(32, "big")

    @staticmethod
    def _ser_pub(key) -> bytes:
        return key.public_bytes(
            serialization.Encoding.X962,
            serialization.PublicFormat.UncompressedPoint,
        )

    def _load_priv(self, priv: bytes):
        return ec.derive_private_key(int.from_bytes(priv, "big"), self._curve)

    def _load_pub(self, pub: bytes):
        return ec.EllipticCurvePublicKey.from_encoded_point(self._curve, pub)

    def derive_public(self, priv: bytes) -> bytes:
        return self._ser_pub(self._load_priv(priv).public_key())

    def wrap_key(self, pub: bytes, key: bytes) -> bytes:
        eph = ec.generate_private_key(self._curve)
        shared = eph.exchange(ec.ECDH(), self._load_pub(pub))
        kek = HKDF(hashes.SHA256(), 32, None, b"seal-kek").derive(shared)
        nonce = os.urandom(12)
        ct = AESGCM(kek).encrypt(nonce, key, None)
        return self._ser_pub(eph.public_key()) + nonce + ct

    def unwrap_key(self, priv: bytes, wrapped: bytes) -> bytes:
        if len(wrapped) < 65 + 12 + 16:
            raise ValueError("short wrap")
        eph_pub, nonce, ct = wrapped[:65], wrapped[65:77], wrapped[77:]
        shared = self._load_priv(priv).exchange(ec.ECDH(), self._load_pub(eph_pub))
        kek = HKDF(hashes.SHA256(), 32, None, b"seal-kek").derive(shared)
        return AESGCM(kek).decrypt(nonce, ct, None)

    def sign(self, priv: bytes, data: bytes) -> bytes:
        der = self._load_priv(priv).sign(data, ec.ECDSA(hashes.SHA256()))
        r, s = decode_dss_signature(der)
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")

    def verify(self, pub: bytes, data: bytes, sig: bytes) -> bool:
        if len(sig) != 64:
            return False
        try:
            der = encode_dss_signature(
                int.from_bytes(sig[:32], "big"), int.from_bytes(sig[32:], "big")
            )
            self._load_pub(pub).verify(der, data, ec.ECDSA(hashes.SHA256()))
            return True
        except Exception:
            return False


_ALGORITHMS = {a.name: a for a in (_RsaAlgo(), _EcAlgo())}


def _algo(algorithm_id: str):
    try:
        return _ALGORITHMS[algorithm_id]
    except KeyError:
        raise MalformedRequest(f"unsupported algorithm: {algorithm_id}") from None


# ---------------------------------------------------------------------------
# Key pairs and primitive operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes
    algorithm_id: str


def generate_keypair(algorithm_id: str = DEFAULT_ALGORITHM) -> KeyPair:
    algo = _algo(algorithm_id)
    priv, pub = algo.generate()
    return KeyPair(public_key=pub, private_key=priv, algorithm_id=algorithm_id)


def derive_public(private_key: bytes, algorithm_id: str) -> bytes:
    return _algo(algorithm_id).derive_public(private_key)


def seal(pub: bytes, data: bytes, algorithm_id: str = DEFAULT_ALGORITHM) -> bytes:
    """Hybrid-seal data so only the holder of the private key can read it."""
    algo = _algo(algorithm_id)
    dek = os.urandom(32)
    wrapped = algo.wrap_key(pub, dek)
    nonce = os.urandom(12)
    ct = AESGCM(dek).encrypt(nonce, data, None)
    return pack_fields(wrapped, nonce, ct)


def open_sealed(priv: bytes, blob: bytes, algorithm_id: str = DEFAULT_ALGORITHM) -> bytes:
    algo = _algo(algorithm_id)
    wrapped, nonce, ct = unpack_fields(blob, expect=3)
    try:
        dek = algo.unwrap_key(priv, wrapped)
        return AESGCM(dek).decrypt(nonce, ct, None)
    except Exception as exc:
        raise IntegrityError("sealed payload failed to open") from exc


def sign(priv: bytes, data: bytes, algorithm_id: str = DEFAULT_ALGORITHM) -> bytes:
    return _algo(algorithm_id).sign(priv, data)


def verify(pub: bytes, data: bytes, sig: bytes, algorithm_id: str = DEFAULT_ALGORITHM) -> bool:
    return _algo(algorithm_id).verify(pub, data, sig)


# ---------------------------------------------------------------------------
# Signed digests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignedDigest:
    digest: bytes
    signature: bytes

    def encode(self) -> bytes:
        return pack_fields(self.digest, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "SignedDigest":
        digest, signature = unpack_fields(data, expect=2)
        return cls(digest=digest, signature=signature)


def sign_record(payload: bytes, priv: bytes, algorithm_id: str = DEFAULT_ALGORITHM) -> SignedDigest:
    if not payload:
        raise MalformedRequest("empty payload")
    digest = sha256(payload)
    return SignedDigest(digest=digest, signature=sign(priv, digest, algorithm_id))


def verify_record(
    payload: bytes, sd: SignedDigest, pub: bytes, algorithm_id: str = DEFAULT_ALGORITHM
) -> bool:
    if sha256(payload) != sd.digest:
        return False
    return verify(pub, sd.digest, sd.signature, algorithm_id)


# ---------------------------------------------------------------------------
# Session keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionKey:
    key: bytes
    cipher_id: str = DEFAULT_CIPHER

    def encode(self) -> bytes:
        return pack_fields(self.key, pack_str(self.cipher_id))

    @classmethod
    def decode(cls, data: bytes) -> "SessionKey":
        key, cipher = unpack_fields(data, expect=2)
        return cls(key=key, cipher_id=unpack_str(cipher))


def generate_session_key(cipher_id: str = DEFAULT_CIPHER, rng: random.Random | None = None) -> SessionKey:
    length = _CIPHER_KEY_LEN.get(cipher_id)
    if length is None:
        raise MalformedRequest(f"unsupported cipher: {cipher_id}")
    key = rng.randbytes(length) if rng is not None else os.urandom(length)
    return SessionKey(key=key, cipher_id=cipher_id)


def seal_session_key(
    sk: SessionKey,
    receiver_pub: bytes,
    sender_priv: bytes,
    algorithm_id: str = DEFAULT_ALGORITHM,
) -> bytes:
    """Sign the key with the sender's key, then seal it to the receiver.

    The double wrap means only the receiver can read it and only the real
    sender could have produced it.
    """
    inner = sk.encode()
    sig = sign(sender_priv, inner, algorithm_id)
    return seal(receiver_pub, pack_fields(inner, sig), algorithm_id)


def open_session_key(
    blob: bytes,
    sender_pub: bytes,
    receiver_priv: bytes,
    algorithm_id: str = DEFAULT_ALGORITHM,
) -> SessionKey:
    try:
        plain = open_sealed(receiver_priv, blob, algorithm_id)
        inner, sig = unpack_fields(plain, expect=2)
    except (IntegrityError, MalformedRequest) as exc:
        raise HandshakeError("session key blob failed to open") from exc
    if not verify(sender_pub, inner, sig, algorithm_id):
        raise HandshakeError("session key signature did not verify")
    return SessionKey.decode(inner)


class SessionCipher:
    """Per-direction AES-GCM stream with counter nonces.

    Each endpoint encrypts with its own direction tag so nonces never
    collide; sequence numbers double as replay protection within a channel.
    """

    def __init__(self, sk: SessionKey, direction: int):
        if sk.cipher_id not in _CIPHER_KEY_LEN:
            raise MalformedRequest(f"unsupported cipher: {sk.cipher_id}")
        self._aead = AESGCM(sk.key)
        self._send_dir = direction & 0xFF
        self._recv_dir = 1 - (direction & 0xFF)
        self._send_seq = 0
        self._recv_seq = 0

    @staticmethod
    def _nonce(direction: int, seq: int) -> bytes:
        return direction.to_bytes(4, "big") + seq.to_bytes(8, "big")

    def encrypt(self, data: bytes) -> bytes:
        nonce = self._nonce(self._send_dir, self._send_seq)
        self._send_seq += 1
        return self._aead.encrypt(nonce, data, None)

    def decrypt(self, data: bytes) -> bytes:
        nonce = self._nonce(self._recv_dir, self._recv_seq)
        try:
            plain = self._aead.decrypt(nonce, data, None)
        except InvalidTag as exc:
            raise IntegrityError("session frame failed authentication") from exc
        self._recv_seq += 1
        return plain


# ---------------------------------------------------------------------------
# Certificates and the certificate authority
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    username: str
    public_key: bytes
    issuer: str
    algorithm_id: str
    signature: bytes

    def signed_bytes(self) -> bytes:
        return pack_fields(
            pack_str(self.username),
            self.public_key,
            pack_str(self.issuer),
            pack_str(self.algorithm_id),
        )

    def encode(self) -> bytes:
        return pack_fields(
            pack_str(self.username),
            self.public_key,
            pack_str(self.issuer),
            pack_str(self.algorithm_id),
            self.signature,
        )

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        username, pub, issuer, algo, sig = unpack_fields(data, expect=5)
        return cls(
            username=unpack_str(username),
            public_key=pub,
            issuer=unpack_str(issuer),
            algorithm_id=unpack_str(algo),
            signature=sig,
        )


def verify_certificate(cert: Certificate, ca_public_key: bytes, ca_algorithm: str | None = None) -> bool:
    """True iff the signature covers the unmodified fields under the CA key."""
    try:
        if not cert.username or len(cert.username.encode("utf-8")) > MAX_USERNAME_BYTES:
            return False
        algo = ca_algorithm or cert.algorithm_id
        return verify(ca_public_key, cert.signed_bytes(), cert.signature, algo)
    except Exception:
        return False


def build_cert_request(username: str, pub: bytes, algorithm_id: str, ca_pub: bytes, ca_algorithm: str) -> bytes:
    """Assemble the sealed certificate request a new user sends the CA.

    Layout: sealed(username, public key, algorithm), plain length of the
    unsealed body, digest over the body. The body is hidden so an observer
    watching CA traffic cannot learn who is signing up.
    """
    body = pack_fields(pack_str(username), pub, pack_str(algorithm_id))
    sealed = seal(ca_pub, body, ca_algorithm)
    return pack_fields(sealed, str(len(body)).encode("ascii"), sha256(body))


class CAState:
    """Certificate authority: issues one certificate per unique username.

    The username log is append-only; with a path configured every issued
    certificate is persisted as one line-delimited record and reloaded on
    construction, so uniqueness survives restarts.
    """

    def __init__(self, name: str, keypair: KeyPair, log_path: str | None = None):
        self.name = name
        self.keypair = keypair
        self.log_path = log_path
        self._issued: dict[str, Certificate] = {}
        if log_path and os.path.exists(log_path):
            with open(log_path, "r", encoding="ascii") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    cert = Certificate.decode(base64.b64decode(line))
                    self._issued[cert.username] = cert

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    @property
    def algorithm_id(self) -> str:
        return self.keypair.algorithm_id

    def usernames(self) -> set[str]:
        return set(self._issued)

    def _record(self, cert: Certificate) -> None:
        self._issued[cert.username] = cert
        if self.log_path:
            with open(self.log_path, "a", encoding="ascii") as fh:
                fh.write(base64.b64encode(cert.encode()).decode("ascii") + "\n")

    def issue(self, username: str, public_key: bytes, algorithm_id: str) -> Certificate:
        """Uniqueness check and insert are one atomic step."""
        if not username or len(username.encode("utf-8")) > MAX_USERNAME_BYTES:
            raise MalformedRequest("username empty or too long")
        if username in self._issued:
            raise UsernameTaken(username)
        unsigned = Certificate(
            username=username,
            public_key=public_key,
            issuer=self.name,
            algorithm_id=algorithm_id,
            signature=b"",
        )
        cert = Certificate(
            username=username,
            public_key=public_key,
            issuer=self.name,
            algorithm_id=algorithm_id,
            signature=sign(
                self.keypair.private_key, unsigned.signed_bytes(), self.keypair.algorithm_id
            ),
        )
        self._record(cert)
        return cert

    def handle_request(self, request: bytes) -> bytes:
        """Process one sealed certificate request; reply sealed to the requester.

        Raises UsernameTaken / IntegrityError / MalformedRequest.
        """
        try:
            sealed, length_field, digest = unpack_fields(request, expect=3)
            claimed_len = int(length_field.decode("ascii"))
        except (MalformedRequest, ValueError, UnicodeDecodeError) as exc:
            raise MalformedRequest("unparseable certificate request") from exc
        body = open_sealed(self.keypair.private_key, sealed, self.keypair.algorithm_id)
        if len(body) != claimed_len or sha256(body) != digest:
            raise IntegrityError("certificate request digest mismatch")
        try:
            username_b, pub, algo_b = unpack_fields(body, expect=3)
            username = unpack_str(username_b)
            algorithm_id = unpack_str(algo_b)
        except MalformedRequest as exc:
            raise MalformedRequest("unparseable certificate request body") from exc
        cert = self.issue(username, pub, algorithm_id)
        return seal(pub, cert.encode(), algorithm_id)


def ca_issue(request: bytes, ca: CAState) -> bytes:
    """Request/reply form of the CA exchange; see CAState.handle_request."""
    return ca.handle_request(request)


def open_cert_reply(blob: bytes, keypair: KeyPair, ca_public_key: bytes, ca_algorithm: str) -> Certificate:
    plain = open_sealed(keypair.private_key, blob, keypair.algorithm_id)
    cert = Certificate.decode(plain)
    if not verify_certificate(cert, ca_public_key, ca_algorithm):
        raise AuthError("issued certificate failed verification")
    if cert.public_key != keypair.public_key:
        raise AuthError("issued certificate is for a different key")
    return cert


# ---------------------------------------------------------------------------
# Passphrases and symmetric friend keys
# ---------------------------------------------------------------------------


def generate_passphrase(rng: random.Random | None = None) -> str:
    """32 random bytes, base32, no padding; carries no trace of the username."""
    raw = rng.randbytes(32) if rng is not None else os.urandom(32)
    return base64.b32encode(raw).decode("ascii").rstrip("=")


def generate_friend_key(rng: random.Random | None = None) -> bytes:
    return rng.randbytes(16) if rng is not None else os.urandom(16)


def friend_key_encrypt(key: bytes, data: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(key).encrypt(nonce, data, None)


def friend_key_decrypt(key: bytes, blob: bytes) -> bytes:
    if len(blob) < 12 + 16:
        raise IntegrityError("short friend-key blob")
    try:
        return AESGCM(key).decrypt(blob[:12], blob[12:], None)
    except InvalidTag as exc:
        raise IntegrityError("friend-key blob failed authentication") from exc


def save_certificate(cert: Certificate, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(cert.encode())


def load_certificate(path: str) -> Certificate:
    with open(path, "rb") as fh:
        return Certificate.decode(fh.read())


def save_keypair(pair: KeyPair, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_fields(pair.public_key, pair.private_key, pack_str(pair.algorithm_id)))


def load_keypair(path: str) -> KeyPair:
    with open(path, "rb") as fh:
        pub, priv, algo = unpack_fields(fh.read(), expect=3)
    return KeyPair(public_key=pub, private_key=priv, algorithm_id=unpack_str(algo))
