"""Real-socket carriers: TCP and reliable-UDP with identical framing.

The same Channel/Service contracts the simulator provides, over actual
sockets. TCP maps one connection to one session; the UDP carrier runs the
ARQ engine per remote endpoint with a pump thread driving retransmission.
attach_reverse() flips a client connection into serving mode after the
next reply, which is how a relayed server-peer answers muxed frames on
the connection it keeps open.
"""
from __future__ import annotations

import random
import socket
import threading
import time

from .channel import Service, SessionContext
from .errors import PeerUnreachable
from .rudp import ArqEndpoint
from .wire import Frame, frame_from_stream


def now_ms() -> int:
    return int(time.monotonic() * 1000)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerUnreachable("connection closed")
        buf += chunk
    return buf


class TcpChannel:
    def __init__(self, addr: str, timeout: float = 5.0):
        host, _, port = addr.rpartition(":")
        self.remote_addr = addr
        try:
            self._sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as exc:
            raise PeerUnreachable(f"connect to {addr} failed: {exc}") from exc
        self._lock = threading.Lock()
        self._reverse: Service | None = None
        self._serving = False

    def request(self, frame: Frame) -> Frame:
        with self._lock:
            try:
                self._sock.sendall(frame.encode())
                reply = frame_from_stream(lambda n: _read_exact(self._sock, n))
            except OSError as exc:
                raise PeerUnreachable(str(exc)) from exc
        if self._reverse is not None and not self._serving:
            self._start_reverse()
        return reply

    def send(self, frame: Frame) -> None:
        with self._lock:
            try:
                self._sock.sendall(frame.encode())
            except OSError as exc:
                raise PeerUnreachable(str(exc)) from exc

    def attach_reverse(self, service: Service) -> None:
        self._reverse = service

    def _start_reverse(self) -> None:
        self._serving = True
        self._sock.settimeout(None)
        ctx = SessionContext(
            remote_addr=self.remote_addr, local_addr=self.remote_addr, now_ms=now_ms
        )
        session = self._reverse.open_session(ctx)

        def loop():
            try:
                while True:
                    frame = frame_from_stream(lambda n: _read_exact(self._sock, n))
                    reply = session.handle(frame, ctx)
                    if reply is not None:
                        self._sock.sendall(reply.encode())
            except (PeerUnreachable, OSError):
                pass

        threading.Thread(target=loop, daemon=True).start()

    def close(self) -> None:
        if self._serving:
            return  # the reverse loop owns the socket now
        try:
            self._sock.close()
        except OSError:
            pass


class TcpEndpoint:
    def __init__(self, local_addr: str = "127.0.0.1:0", rng: random.Random | None = None):
        self._local = local_addr
        self.rng = rng or random.Random()

    def connect(self, addr: str) -> TcpChannel:
        return TcpChannel(addr)

    def now_ms(self) -> int:
        return now_ms()

    def local_addr(self) -> str:
        return self._local


class TcpServer:
    """Thread-per-connection server sharing the sim's Service contract."""

    def __init__(self, service: Service, host: str = "127.0.0.1", port: int = 0, backlog: int = 16):
        self.service = service
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(backlog)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "TcpServer":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn, peer), daemon=True).start()

    def _serve_conn(self, conn: socket.socket, peer) -> None:
        ctx = SessionContext(
            remote_addr=f"{peer[0]}:{peer[1]}", local_addr=self.addr, now_ms=now_ms
        )

        def make_reverse() -> "_SocketReverse":
            # The connection flips: the remote starts answering requests we
            # write down the same socket (relayed server-peers).
            ctx.meta["_flipped"] = True
            return _SocketReverse(conn)

        ctx.meta["make_reverse"] = make_reverse
        session = self.service.open_session(ctx)
        flipped = False
        try:
            while not self._stop.is_set():
                frame = frame_from_stream(lambda n: _read_exact(conn, n))
                reply = session.handle(frame, ctx)
                if reply is not None:
                    conn.sendall(reply.encode())
                if ctx.meta.get("_flipped"):
                    flipped = True
                    break
        except (PeerUnreachable, OSError):
            pass
        finally:
            session.closed(ctx)
            if not flipped:
                conn.close()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


class _SocketReverse:
    """Service/Session facade writing requests down a flipped connection."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    def open_session(self, ctx: SessionContext) -> "_SocketReverse":
        return self

    def handle(self, frame: Frame, ctx: SessionContext) -> Frame | None:
        with self._lock:
            try:
                self._sock.sendall(frame.encode())
                return frame_from_stream(lambda n: _read_exact(self._sock, n))
            except (PeerUnreachable, OSError):
                return None

    def closed(self, ctx: SessionContext) -> None:
        pass


class RudpChannel:
    """Client channel over the ARQ engine on a UDP socket."""

    def __init__(self, addr: str, timeout_s: float = 8.0):
        host, _, port = addr.rpartition(":")
        self.remote_addr = addr
        self._peer = (host, int(port))
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(("127.0.0.1" if host.startswith("127.") else "0.0.0.0", 0))
        self._sock.settimeout(0.05)
        self._arq = ArqEndpoint()
        self._timeout_s = timeout_s

    def _pump_once(self) -> None:
        now = now_ms()
        for datagram in self._arq.poll(now):
            self._sock.sendto(datagram, self._peer)
        try:
            data, _ = self._sock.recvfrom(65535)
            self._arq.on_datagram(data, now_ms())
        except socket.timeout:
            pass

    def request(self, frame: Frame) -> Frame:
        self._arq.send_message(frame.encode())
        deadline = time.monotonic() + self._timeout_s
        while time.monotonic() < deadline:
            self._pump_once()
            message = self._arq.recv_message()
            if message is not None:
                return _decode_frame(message)
        raise PeerUnreachable(f"no reply from {self.remote_addr}")

    def send(self, frame: Frame) -> None:
        self._arq.send_message(frame.encode())
        for _ in range(4):
            self._pump_once()

    def attach_reverse(self, service: Service) -> None:
        raise PeerUnreachable("reverse serving unsupported over the UDP carrier")

    def close(self) -> None:
        self._arq.close()
        for _ in range(3):
            self._pump_once()
        self._sock.close()


def _decode_frame(message: bytes) -> Frame:
    from .wire import decode_frame

    return decode_frame(message)


class RudpServer:
    """Reliable-datagram server: one ARQ endpoint and session per remote."""

    def __init__(self, service: Service, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((host, port))
        self.host, self.port = self._sock.getsockname()
        self._sock.settimeout(0.05)
        self._conns: dict[tuple, tuple[ArqEndpoint, object, SessionContext]] = {}
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "RudpServer":
        self._thread.start()
        return self

    def _conn_for(self, peer) -> tuple[ArqEndpoint, object, SessionContext]:
        conn = self._conns.get(peer)
        if conn is None:
            ctx = SessionContext(
                remote_addr=f"{peer[0]}:{peer[1]}", local_addr=self.addr, now_ms=now_ms
            )
            conn = (ArqEndpoint(), self.service.open_session(ctx), ctx)
            self._conns[peer] = conn
        return conn

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, peer = self._sock.recvfrom(65535)
                arq, session, ctx = self._conn_for(peer)
                arq.on_datagram(data, now_ms())
                while (message := arq.recv_message()) is not None:
                    frame = _decode_frame(message)
                    reply = session.handle(frame, ctx)
                    if reply is not None:
                        arq.send_message(reply.encode())
            except socket.timeout:
                pass
            except OSError:
                break
            now = now_ms()
            for peer, (arq, _, _) in list(self._conns.items()):
                for datagram in arq.poll(now):
                    try:
                        self._sock.sendto(datagram, peer)
                    except OSError:
                        pass

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
