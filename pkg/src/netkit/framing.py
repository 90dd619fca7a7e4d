"""NETCONF message framing.

Two schemes share one incremental decoder interface (``feed`` bytes, then
``next_frame`` until it returns ``None``):

    EOM_1_0      payload ]]>]]>
    CHUNKED_1_1  \\n#<len>\\n<data> ... \\n##\\n
"""

from __future__ import annotations

import enum
import functools
import re

from .message import BASE_1_0, BASE_1_1

EOM = b"]]>]]>"
END_OF_CHUNKS = b"\n##\n"
MAX_CHUNK_LEN = 4294967295
DEFAULT_MAX_MESSAGE = 16 * 1024 * 1024
DEFAULT_MAX_CHUNK = 4096

_HEADER = re.compile(rb"\n#([1-9][0-9]{0,9})\n")
_RUN_LIMIT = 65535


_STRIDE_LIMIT = 64


def _interleave(header: bytes, data: bytes, size: int, count: int) -> bytes:
    """``count`` chunks of ``size`` bytes, each after ``header``, built with
    strided slice assignment (one C-level copy per byte column)."""
    stride = len(header) + size
    out = bytearray(count * stride)
    for j, b in enumerate(header):
        out[j::stride] = bytes([b]) * count
    for j in range(size):
        out[len(header) + j::stride] = data[j::size]
    return bytes(out)


@functools.lru_cache(maxsize=64)
def _run_pattern(length: int):
    return re.compile(rb"(?:\n#%d\n.{%d})+" % (length, length), re.DOTALL)


class FramingError(Exception):
    """Base class for framing failures. All of them are fatal to a session."""


class DelimiterInPayload(FramingError):
    pass


class StreamClosed(FramingError):
    pass


class MessageTooLarge(FramingError):
    pass


class BadChunkHeader(FramingError):
    pass


class ChunkTooLarge(FramingError):
    pass


class NoCommonBase(Exception):
    """Peers share no base protocol version."""


class FramingVersion(enum.Enum):
    EOM_1_0 = "1.0"
    CHUNKED_1_1 = "1.1"


def encode_eom(payload: bytes) -> bytes:
    if EOM in payload:
        raise DelimiterInPayload("payload contains the ]]>]]> delimiter")
    return payload + EOM


def encode_chunked(payload: bytes, max_chunk: int = DEFAULT_MAX_CHUNK) -> bytes:
    if not 1 <= max_chunk <= MAX_CHUNK_LEN:
        raise ValueError(f"max_chunk out of range: {max_chunk}")
    payload = bytes(payload)
    full, rest = divmod(len(payload), max_chunk)
    parts = []
    if full:
        header = b"\n#%d\n" % max_chunk
        parts.append(header)
        if max_chunk <= _STRIDE_LIMIT:
            parts[-1:] = [_interleave(header, payload[:full * max_chunk], max_chunk, full)]
        else:
            parts.append(header.join([payload[i:i + max_chunk] for i in range(0, full * max_chunk, max_chunk)]))
    if rest:
        parts.append(b"\n#%d\n" % rest)
        parts.append(payload[full * max_chunk:])
    parts.append(END_OF_CHUNKS)
    return b"".join(parts)


class EomDecoder:
    """Incremental end-of-message decoder."""

    version = FramingVersion.EOM_1_0

    def __init__(self, max_message: int = DEFAULT_MAX_MESSAGE):
        self.max_message = max_message
        self._buf = bytearray()
        self._scan_from = 0
        self._eof = False

    def feed(self, data: bytes) -> None:
        self._buf += data

    def feed_eof(self) -> None:
        self._eof = True

    def next_frame(self) -> bytes | None:
        idx = self._buf.find(EOM, self._scan_from)
        if idx < 0:
            # the delimiter may straddle the next feed
            self._scan_from = max(0, len(self._buf) - len(EOM) + 1)
            if self._scan_from > self.max_message:
                raise MessageTooLarge(f"no delimiter within {self.max_message} bytes")
            if self._eof:
                raise StreamClosed("stream ended before ]]>]]>")
            return None
        if idx > self.max_message:
            raise MessageTooLarge(f"message of {idx} bytes exceeds {self.max_message}")
        frame = bytes(self._buf[:idx])
        del self._buf[:idx + len(EOM)]
        self._scan_from = 0
        return frame

    def buffered(self) -> int:
        return len(self._buf)

    def take_buffer(self) -> bytes:
        """Hand over unconsumed bytes, e.g. when switching to chunked framing."""
        rest = bytes(self._buf)
        self._buf.clear()
        self._scan_from = 0
        return rest


class ChunkedDecoder:
    """Incremental RFC 6242 chunked-framing decoder."""

    version = FramingVersion.CHUNKED_1_1

    def __init__(self, max_message: int = DEFAULT_MAX_MESSAGE):
        self.max_message = max_message
        self._buf = bytearray()
        self._pos = 0
        self._parts: list[bytes] = []
        self._size = 0
        self._eof = False

    def feed(self, data: bytes) -> None:
        self._buf += data

    def feed_eof(self) -> None:
        self._eof = True

    def _need_more(self):
        if self._eof:
            raise StreamClosed("stream ended inside a chunked message")
        return None

    def next_frame(self) -> bytes | None:
        buf = self._buf
        while True:
            pos = self._pos
            m = _HEADER.match(buf, pos)
            if m is not None and len(m.group(1)) < 10:
                # fast path for well-formed headers; odd cases fall through
                length = int(m.group(1))
                start = m.end()
                if self._size + length > self.max_message:
                    raise ChunkTooLarge(f"chunk of {length} bytes exceeds limit")
                if len(buf) - start < length:
                    return self._need_more()
                self._parts.append(buf[start:start + length])
                self._size += length
                self._pos = start + length
                if length <= _RUN_LIMIT:
                    self._take_run(length, start - pos)
                continue
            if len(buf) - pos < 3:
                return self._need_more()
            if buf[pos] != 0x0A or buf[pos + 1] != 0x23:  # "\n#"
                raise BadChunkHeader(f"expected chunk header, got {bytes(buf[pos:pos + 2])!r}")
            if buf[pos + 2] == 0x23:  # "\n##"
                if len(buf) - pos < 4:
                    return self._need_more()
                if buf[pos + 3] != 0x0A:
                    raise BadChunkHeader("end-of-chunks marker not terminated by LF")
                frame = b"".join(self._parts)
                self._parts = []
                self._size = 0
                del buf[:pos + 4]
                self._pos = 0
                return frame
            # "\n#" 1*10DIGIT "\n"
            end = buf.find(b"\n", pos + 2, pos + 2 + 11)
            if end < 0:
                if len(buf) - pos - 2 > 10:
                    raise BadChunkHeader("chunk length has too many digits")
                return self._need_more()
            digits = bytes(buf[pos + 2:end])
            if not digits or not digits.isdigit():
                raise BadChunkHeader(f"bad chunk length {digits!r}")
            if digits[0:1] == b"0":
                raise BadChunkHeader(f"chunk length {digits!r} is zero or has a leading zero")
            length = int(digits)
            if length > MAX_CHUNK_LEN or self._size + length > self.max_message:
                raise ChunkTooLarge(f"chunk of {length} bytes exceeds limit")
            start = end + 1
            if len(buf) - start < length:
                return self._need_more()
            self._parts.append(buf[start:start + length])
            self._size += length
            self._pos = start + length
            # compact once the consumed prefix dominates the buffer
            if self._pos > 65536 and self._pos * 2 > len(buf):
                del buf[:self._pos]
                self._pos = 0

    def _take_run(self, length: int, header_len: int) -> None:
        """Swallow a run of further chunks that all have ``length`` bytes.

        Senders split messages into equal chunks, so one regex match over
        the run replaces a Python-level loop per chunk.
        """
        buf, pos = self._buf, self._pos
        m = _run_pattern(length).match(buf, pos)
        if m is None:
            return
        stride = header_len + length
        count = (m.end() - pos) // stride
        if self._size + count * length > self.max_message:
            raise ChunkTooLarge(f"message exceeds {self.max_message} bytes")
        first = pos + header_len
        if length <= _STRIDE_LIMIT:
            data = bytearray(count * length)
            for j in range(length):
                data[j::length] = buf[first + j:m.end():stride]
            self._parts.append(data)
        else:
            self._parts.extend([buf[i:i + length] for i in range(first, m.end(), stride)])
        self._size += count * length
        self._pos = m.end()

    def buffered(self) -> int:
        return len(self._buf) - self._pos + sum(map(len, self._parts))

    def take_buffer(self) -> bytes:
        rest = bytes(self._buf[self._pos:])
        self._buf.clear()
        self._pos = 0
        return rest


def decode_eom(data: bytes, max_message: int = DEFAULT_MAX_MESSAGE) -> bytes:
    """Decode one complete EOM-framed message from ``data``.

    A missing delimiter means the stream closed early.
    """
    dec = EomDecoder(max_message)
    dec.feed(data)
    dec.feed_eof()
    return dec.next_frame()


def decode_chunked(data: bytes, max_message: int = DEFAULT_MAX_MESSAGE) -> bytes:
    dec = ChunkedDecoder(max_message)
    dec.feed(data)
    dec.feed_eof()
    return dec.next_frame()


def make_decoder(version: FramingVersion, max_message: int = DEFAULT_MAX_MESSAGE):
    if version is FramingVersion.CHUNKED_1_1:
        return ChunkedDecoder(max_message)
    return EomDecoder(max_message)


def encode(version: FramingVersion, payload: bytes, max_chunk: int = DEFAULT_MAX_CHUNK) -> bytes:
    if version is FramingVersion.CHUNKED_1_1:
        return encode_chunked(payload, max_chunk)
    return encode_eom(payload)


def select_framing(local, remote) -> FramingVersion:
    """Pick the framing for a session from both hello capability sets."""
    bases = {BASE_1_0, BASE_1_1}
    local, remote = set(local), set(remote)
    if not local & bases or not remote & bases:
        raise NoCommonBase("a peer advertised no base capability")
    common = local & remote & bases
    if BASE_1_1 in common:
        return FramingVersion.CHUNKED_1_1
    if BASE_1_0 in common:
        return FramingVersion.EOM_1_0
    raise NoCommonBase(f"no shared base version: {sorted(local & bases)} vs {sorted(remote & bases)}")
