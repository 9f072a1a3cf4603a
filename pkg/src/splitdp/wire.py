"""Bit-exact framing of quantized batches and a framed request/response
protocol over a reliable byte stream.

Request frame (all little-endian):
  magic 'DELF' | version u8=1 | n u8 | flags u16=0 | d u32 | T u32 |
  A f64 | c f64 | payload ceil(T*d*n/8) bytes | crc32 u32
Payload bits are level indices written token-major, coordinate-minor,
LSB-first within each byte.  The CRC (IEEE polynomial) covers header plus
payload.

Reply frame:
  magic 'DELR' | version u8=1 | status u8 | L u32 | L token ids u32 | crc32 u32
Status: 0 ok, 1 protocol error, 2 corrupt payload, 3 internal error.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import InvalidParameterError, RngHandle, SplitdpError, TokenSequence
from .lm import SoftPrompt, ToyLm
from .mech import CorruptPayloadError, QuantizedBatch
from .pipeline import PipelineConfig, generate_greedy, privatize_tokens, reconstruct
from .proj import ProjectionPair

FRAME_MAGIC = b"DELF"
REPLY_MAGIC = b"DELR"
HEADER_FMT = "<4sBBHIIdd"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 32
REPLY_HEADER_FMT = "<4sBBI"
REPLY_HEADER_SIZE = struct.calcsize(REPLY_HEADER_FMT)  # 10
MAX_PAYLOAD = 16 * 1024 * 1024

STATUS_OK = 0
STATUS_PROTOCOL = 1
STATUS_CORRUPT = 2
STATUS_INTERNAL = 3


class ProtocolError(SplitdpError):
    pass


class IncompleteFrameError(ProtocolError):
    pass


class ServerReplyError(SplitdpError):
    def __init__(self, status: int):
        super().__init__(f"server replied with error status {status}")
        self.status = status


def payload_size(T: int, d: int, n: int) -> int:
    return (T * d * n + 7) // 8


def frame_size(T: int, d: int, n: int) -> int:
    return HEADER_SIZE + payload_size(T, d, n) + 4


def pack(q: QuantizedBatch) -> bytes:
    if not 1 <= q.n <= 8:
        raise InvalidParameterError("bit-width n must be in 1..8")
    header = struct.pack(HEADER_FMT, FRAME_MAGIC, 1, q.n, 0, q.d, q.T, q.A, q.c)
    payload = _kernels.pack_levels(q.levels, q.n).tobytes()
    crc = zlib.crc32(header + payload)
    return header + payload + struct.pack("<I", crc)


def unpack(data: bytes) -> QuantizedBatch:
    if len(data) < HEADER_SIZE:
        raise IncompleteFrameError("frame shorter than header")
    magic, version, n, flags, d, T, A, c = struct.unpack(HEADER_FMT, data[:HEADER_SIZE])
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != 1:
        raise ProtocolError(f"unsupported version {version}")
    if not 1 <= n <= 8 or d < 1 or T < 1:
        raise ProtocolError("invalid header fields")
    nbytes = payload_size(T, d, n)
    if nbytes > MAX_PAYLOAD:
        raise ProtocolError("payload exceeds 16 MiB limit")
    if len(data) < HEADER_SIZE + nbytes + 4:
        raise IncompleteFrameError("truncated frame")
    payload = data[HEADER_SIZE:HEADER_SIZE + nbytes]
    (crc,) = struct.unpack("<I", data[HEADER_SIZE + nbytes:HEADER_SIZE + nbytes + 4])
    if crc != zlib.crc32(data[:HEADER_SIZE + nbytes]):
        raise CorruptPayloadError("crc mismatch")
    levels = _kernels.unpack_levels(np.frombuffer(payload, dtype=np.uint8), T * d, n)
    return QuantizedBatch(levels=levels.reshape(T, d), n=n, A=A, c=c)


def pack_reply(status: int, ids: list[int]) -> bytes:
    body = struct.pack(REPLY_HEADER_FMT, REPLY_MAGIC, 1, status, len(ids))
    body += struct.pack(f"<{len(ids)}I", *ids) if ids else b""
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_reply(data: bytes) -> tuple[int, list[int]]:
    if len(data) < REPLY_HEADER_SIZE:
        raise IncompleteFrameError("reply shorter than header")
    magic, version, status, L = struct.unpack(REPLY_HEADER_FMT, data[:REPLY_HEADER_SIZE])
    if magic != REPLY_MAGIC or version != 1:
        raise ProtocolError("bad reply header")
    need = REPLY_HEADER_SIZE + 4 * L + 4
    if len(data) < need:
        raise IncompleteFrameError("truncated reply")
    ids = list(struct.unpack(f"<{L}I", data[REPLY_HEADER_SIZE:REPLY_HEADER_SIZE + 4 * L]))
    (crc,) = struct.unpack("<I", data[need - 4:need])
    if crc != zlib.crc32(data[:need - 4]):
        raise CorruptPayloadError("reply crc mismatch")
    return status, ids


@dataclass
class ServerArtifacts:
    """Immutable server-side state shared read-only across sessions."""

    proj: ProjectionPair
    model: ToyLm
    prompt: SoftPrompt
    gen_len: int = 8


def _recv_exact(sock_file, size: int) -> bytes:
    buf = b""
    while len(buf) < size:
        chunk = sock_file.read(size - len(buf))
        if not chunk:
            return buf
        buf += chunk
    return buf


class _SessionHandler(socketserver.StreamRequestHandler):
    def handle(self):
        art: ServerArtifacts = self.server.artifacts
        while True:
            header = _recv_exact(self.rfile, HEADER_SIZE)
            if not header:
                return  # clean EOF
            try:
                if len(header) < HEADER_SIZE:
                    raise IncompleteFrameError("truncated header")
                magic, version, n, flags, d, T, A, c = struct.unpack(HEADER_FMT, header)
                if magic != FRAME_MAGIC or version != 1 or not 1 <= n <= 8 or d < 1 or T < 1:
                    raise ProtocolError("bad header")
                nbytes = payload_size(T, d, n)
                if nbytes > MAX_PAYLOAD:
                    raise ProtocolError("payload exceeds 16 MiB limit")
                rest = _recv_exact(self.rfile, nbytes + 4)
                q = unpack(header + rest)
                xhat = reconstruct(q, art.proj)
                ids = generate_greedy(art.model, art.prompt, xhat, art.gen_len)
                self.wfile.write(pack_reply(STATUS_OK, ids))
                self.wfile.flush()
            except CorruptPayloadError:
                self._fail(STATUS_CORRUPT)
                return
            except ProtocolError:
                self._fail(STATUS_PROTOCOL)
                return
            except Exception:
                self._fail(STATUS_INTERNAL)
                return

    def _fail(self, status: int):
        try:
            self.wfile.write(pack_reply(status, []))
            self.wfile.flush()
        except OSError:
            pass


class SessionServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, artifacts: ServerArtifacts):
        super().__init__(addr, _SessionHandler)
        self.artifacts = artifacts


def start_server(host: str, port: int, artifacts: ServerArtifacts) -> SessionServer:
    """Start a background session server; call .shutdown() to stop it."""
    server = SessionServer((host, port), artifacts)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def serve_session(host: str, port: int, artifacts: ServerArtifacts) -> None:
    """Run the session server until interrupted."""
    with SessionServer((host, port), artifacts) as server:
        server.serve_forever()


def client_round_trip(tokens: TokenSequence, cfg: PipelineConfig, endpoint: tuple[str, int],
                      rng: RngHandle, timeout: float = 10.0) -> list[int]:
    """Privatize locally, send one frame, await the reply tokens.

    Only the frame bytes leave the client; raw token ids and embeddings are
    never serialized.
    """
    frame = pack(privatize_tokens(tokens, cfg, rng))
    with socket.create_connection(endpoint, timeout=timeout) as sock:
        sock.sendall(frame)
        data = _recv_all_reply(sock)
    status, ids = unpack_reply(data)
    if status != STATUS_OK:
        raise ServerReplyError(status)
    return ids


def _recv_all_reply(sock: socket.socket) -> bytes:
    buf = b""
    while len(buf) < REPLY_HEADER_SIZE:
        chunk = sock.recv(4096)
        if not chunk:
            raise IncompleteFrameError("connection closed before reply header")
        buf += chunk
    _, _, _, L = struct.unpack(REPLY_HEADER_FMT, buf[:REPLY_HEADER_SIZE])
    need = REPLY_HEADER_SIZE + 4 * L + 4
    while len(buf) < need:
        chunk = sock.recv(4096)
        if not chunk:
            raise IncompleteFrameError("connection closed mid-reply")
        buf += chunk
    return buf
