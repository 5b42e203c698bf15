"""Device-to-server channel for split inference.

Frame layout (little-endian, 34-byte header + payload + 4-byte trailer)::

    magic      4s   b"SLRF"
    version    u16
    model_id   16s
    block      u16
    position   u8   0 embedding, 1 attention_out, 2 ffn_out, 3 block_out
    T          u32
    d          u32
    dtype      u8   0 = float32
    payload    T*d*4 bytes, row-major float32
    crc32      u32  of payload
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .tinylm import (
    POSITIONS,
    ClientPart,
    RepresentationTrace,
    ServerPart,
    TapPoint,
    TinyLM,
    batch_taps,
    feed,
    stack_mask,
)

MAGIC = b"SLRF"
FRAME_VERSION = 1
HEADER = struct.Struct("<4sH16sHBIIB")
CRC = struct.Struct("<I")
DTYPE_F32 = 0


class FrameError(ValueError):
    pass


class KnowledgePolicyError(PermissionError):
    pass


class TransportError(ConnectionError):
    """Channel failure; the request may be retried on a fresh session."""

    retriable = True


class RemoteModelError(RuntimeError):
    """The server part raised while handling an otherwise valid request."""


@dataclass(frozen=True)
class RepresentationFrame:
    model_id: bytes
    tap: TapPoint
    states: np.ndarray
    version: int = FRAME_VERSION

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def trace(self, source_id: str = "") -> RepresentationTrace:
        return RepresentationTrace(self.tap, self.states, source_id)


def serialize_frame(trace: RepresentationTrace, model_id: bytes) -> bytes:
    states = np.asarray(trace.states)
    if not np.isfinite(states).all():
        raise FrameError("refusing to serialize non-finite states")
    if len(model_id) != 16:
        raise FrameError("model_id must be 16 bytes")
    T, d = states.shape
    payload = np.ascontiguousarray(states, dtype="<f4").tobytes()
    header = HEADER.pack(
        MAGIC, FRAME_VERSION, model_id, trace.tap.block_index,
        POSITIONS.index(trace.tap.position), T, d, DTYPE_F32,
    )
    return header + payload + CRC.pack(zlib.crc32(payload))


def deserialize_frame(data: bytes) -> RepresentationFrame:
    if len(data) < HEADER.size + CRC.size:
        raise FrameError("frame shorter than header and trailer")
    magic, version, model_id, block, pos, T, d, dtype = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if dtype != DTYPE_F32:
        raise FrameError(f"unsupported dtype code {dtype}")
    if pos >= len(POSITIONS):
        raise FrameError(f"bad position code {pos}")
    n = T * d * 4
    if len(data) != HEADER.size + n + CRC.size:
        raise FrameError(f"frame length {len(data)} does not match T={T}, d={d}")
    payload = data[HEADER.size : HEADER.size + n]
    (crc,) = CRC.unpack_from(data, HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise FrameError("crc mismatch: payload corrupted")
    try:
        tap = TapPoint(block, POSITIONS[pos])
    except ValueError as exc:
        raise FrameError(str(exc)) from exc
    states = np.frombuffer(payload, dtype="<f4").reshape(T, d).astype(np.float32)
    return RepresentationFrame(model_id, tap, states, version)


# --- attacker knowledge ----------------------------------------------------


@dataclass(frozen=True)
class AttackKnowledge:
    level: str = "black_box"
    server_arch_known: bool = False
    server_layer_traces: bool = False

    def __post_init__(self):
        if self.level not in ("black_box", "white_box"):
            raise ValueError("knowledge level must be black_box or white_box")
        if self.level == "white_box" and not self.server_arch_known:
            raise ValueError("white_box knowledge implies server_arch_known")


class ServerView:
    """What an attacker may learn about the server under a knowledge level."""

    def __init__(self, server: ServerPart, knowledge: AttackKnowledge):
        self._server = server
        self.knowledge = knowledge

    def architecture(self) -> dict:
        if not self.knowledge.server_arch_known:
            raise KnowledgePolicyError("server architecture is not known to this attacker")
        return self._server.architecture()

    def parameters(self) -> dict[str, np.ndarray]:
        if self.knowledge.level != "white_box":
            raise KnowledgePolicyError("server parameters are not visible to a black-box attacker")
        return {n: p.detach().numpy().copy() for n, p in self._server.named_parameters()}

    @torch.no_grad()
    def layer_traces(self, frame: RepresentationFrame) -> list[np.ndarray]:
        """States after each remaining server block, when the flag allows it."""
        if not self.knowledge.server_layer_traces:
            raise KnowledgePolicyError("server layer traces are not observable")
        srv = self._server
        h = torch.from_numpy(frame.states)[None]
        mask = stack_mask(srv.config.arch == "decoder_only", h.shape[1], None)
        out = []
        if srv.tap.position == "attention_out":
            h = h + feed(srv.ln2, srv.ffn, h)
            out.append(h[0].numpy().copy())
        for blk in srv.blocks:
            h = blk(h, mask)
            out.append(h[0].numpy().copy())
        return out


# --- capture ----------------------------------------------------------------


@dataclass
class CaptureSet:
    tap: TapPoint
    model_id: bytes
    frames: list[bytes] = field(default_factory=list)
    record_ids: list[str] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def traces(self) -> list[np.ndarray]:
        return [deserialize_frame(f).states for f in self.frames]

    def subset(self, split: str) -> "CaptureSet":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return CaptureSet(
            self.tap, self.model_id,
            [self.frames[i] for i in keep], [self.record_ids[i] for i in keep], [split] * len(keep),
        )

    def nbytes(self) -> int:
        return sum(len(f) for f in self.frames)

    def write(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (frame, rid, split) in enumerate(zip(self.frames, self.record_ids, self.splits)):
            name = f"frame_{i:06d}.slrf"
            (d / name).write_bytes(frame)
            entries.append({"file": name, "record_id": rid, "split": split})
        manifest = d / "manifest.json"
        manifest.write_text(
            json.dumps({"tap": str(self.tap), "model_id": self.model_id.hex(), "frames": entries}, indent=1)
        )
        return manifest

    @classmethod
    def read(cls, directory: str | Path) -> "CaptureSet":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        cs = cls(TapPoint.parse(m["tap"]), bytes.fromhex(m["model_id"]))
        for e in m["frames"]:
            cs.frames.append((d / e["file"]).read_bytes())
            cs.record_ids.append(e["record_id"])
            cs.splits.append(e["split"])
        return cs


def capture_dataset(
    victim: TinyLM,
    tap: TapPoint,
    records: Sequence,
    split_labels: dict[str, str] | None = None,
    pad_id: int = 1,
    batch_size: int = 256,
) -> CaptureSet:
    """Run ``records`` through the victim and serialize one frame per record.

    The split label travels only in the attacker-side manifest; frames carry
    no text.
    """
    victim.config.check_tap(tap)
    model_id = victim.model_id()
    cs = CaptureSet(tap, model_id)
    split_labels = split_labels or {}
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        states, _ = batch_taps(victim, [r.tokens for r in chunk], [tap], pad_id)
        for r, s in zip(chunk, states[tap]):
            cs.frames.append(serialize_frame(RepresentationTrace(tap, s, r.id), model_id))
            cs.record_ids.append(r.id)
            cs.splits.append(split_labels.get(r.id, ""))
    return cs


# --- sessions ---------------------------------------------------------------

_LEN = struct.Struct("<I")


def _send(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_LEN.pack(len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def _recv(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return _recv_exact(sock, n)


def _encode_request(frame: bytes, dec_tokens: Sequence[int] | None) -> bytes:
    dec = list(dec_tokens or [])
    return _LEN.pack(len(frame)) + frame + _LEN.pack(len(dec)) + struct.pack(f"<{len(dec)}i", *dec)


def _decode_request(msg: bytes) -> tuple[bytes, list[int] | None]:
    (n,) = _LEN.unpack_from(msg)
    frame = msg[4 : 4 + n]
    (m,) = _LEN.unpack_from(msg, 4 + n)
    dec = list(struct.unpack_from(f"<{m}i", msg, 8 + n))
    return frame, (dec or None)


def _encode_logits(logits: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(logits, dtype="<f4")
    shape = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return b"\x00" + shape + arr.tobytes()


def _decode_logits(msg: bytes) -> np.ndarray:
    if msg[:1] != b"\x00":
        raise RemoteModelError(msg[1:].decode("utf-8", "replace"))
    ndim = msg[1]
    shape = struct.unpack_from(f"<{ndim}I", msg, 2)
    return np.frombuffer(msg[2 + 4 * ndim :], dtype="<f4").reshape(shape).copy()


@torch.no_grad()
def _serve_frame(server: ServerPart, frame_bytes: bytes, dec_tokens) -> np.ndarray:
    frame = deserialize_frame(frame_bytes)
    states = torch.from_numpy(frame.states)[None]
    dec = torch.as_tensor(dec_tokens, dtype=torch.long)[None] if dec_tokens else None
    return server(states, dec_tokens=dec)[0].numpy()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                msg = _recv(self.request)
            except (TransportError, OSError):
                return
            frame, dec = _decode_request(msg)
            try:
                reply = _encode_logits(_serve_frame(self.server.split_server, frame, dec))
            except Exception as exc:  # reported to the client as a model error
                reply = b"\x01" + f"{type(exc).__name__}: {exc}".encode()
            _send(self.request, reply)


class _TCPServer(socketserver.TCPServer):
    allow_reuse_address = True


@dataclass
class SessionLogEntry:
    block_index: int
    position: str
    T: int
    d: int
    nbytes: int
    crc32: int


class SplitSession:
    """One client talking to one server part over a chosen transport."""

    def __init__(self, client: ClientPart, server: ServerPart, transport: str = "in_process", model_id: bytes | None = None):
        if client.tap != server.tap:
            raise ValueError("client and server come from different splits")
        if transport not in ("in_process", "local_socket"):
            raise ValueError(f"unknown transport {transport!r}")
        self.client, self.server, self.transport = client, server, transport
        self.model_id = model_id or b"\x00" * 16
        self.log: list[SessionLogEntry] = []
        self._tcp = self._thread = self._sock = None
        if transport == "local_socket":
            self._tcp = _TCPServer(("127.0.0.1", 0), _Handler)
            self._tcp.split_server = server
            self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
            self._thread.start()
            self._sock = socket.create_connection(self._tcp.server_address, timeout=30)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None

    def interrupt(self) -> None:
        """Drop the connection (used to exercise transport failure handling)."""
        if self._sock is not None:
            self._sock.shutdown(socket.SHUT_RDWR)
            self._sock.close()
            self._sock = None

    @torch.no_grad()
    def forward(self, tokens: Sequence[int]) -> np.ndarray:
        x = torch.as_tensor(list(tokens), dtype=torch.long)[None]
        states = self.client(x)[0].numpy()
        frame = serialize_frame(RepresentationTrace(self.client.tap, states), self.model_id)
        (crc,) = CRC.unpack(frame[-4:])
        self.log.append(SessionLogEntry(self.client.tap.block_index, self.client.tap.position, *states.shape, len(frame), crc))
        dec = list(tokens)[:-1] if self.client.config.arch == "encoder_decoder" else None
        if self.transport == "in_process":
            return _serve_frame(self.server, frame, dec)
        if self._sock is None:
            raise TransportError("session socket is closed")
        try:
            _send(self._sock, _encode_request(frame, dec))
            return _decode_logits(_recv(self._sock))
        except OSError as exc:
            raise TransportError(str(exc)) from exc


def run_session(client: ClientPart, server: ServerPart, tokens: Sequence[int], transport: str = "in_process") -> np.ndarray:
    with SplitSession(client, server, transport) as s:
        return s.forward(tokens)


def measure_throughput(session: SplitSession, seqs: Sequence[Sequence[int]]) -> float:
    """Sentences per second through ``session``."""
    t0 = time.perf_counter()
    for s in seqs:
        session.forward(s)
    return len(seqs) / (time.perf_counter() - t0)
