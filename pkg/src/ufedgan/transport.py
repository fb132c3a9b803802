"""Protocol messages, their binary wire format, links and eavesdrop taps.

Frame layout (all integers little-endian)::

    magic      4 bytes  b"UFGN"
    version    u8       1
    variant    u8       1 = DiscriminatorDown, 2 = ClientUpdateUp, 3 = RoundComplete
    user       u32
    round      u32
    step       u32
    length     u64      number of payload bytes that follow
    payload:
      seq      u64      per-link sequence number
      DiscriminatorDown:  TensorBlock(weights)
      ClientUpdateUp:     f64 loss, TensorBlock(gradient)
      RoundComplete:      f64 inception score

    TensorBlock: u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 dims, data

Transcript files (``.ufgt``) are a 24-byte header
(b"UFGT", u8 version, 3 zero bytes, u64 frame count, u64 experiment seed)
followed by the captured frames back to back.
"""
import json
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar

import numpy as np

from .errors import FrameError, LinkError, ParseError, ProtocolError, TranscriptError

MAGIC = b"UFGN"
VERSION = 1
HEADER = struct.Struct("<4sBBIIIQ")
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

TRANSCRIPT_MAGIC = b"UFGT"
TRANSCRIPT_HEADER = struct.Struct("<4sB3xQQ")


# messages --------------------------------------------------------------------

class _Message:
    tag: ClassVar[int] = 0
    direction: ClassVar[str] = ""

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray):
                if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
            elif a != b and not (isinstance(a, float) and np.isnan(a) and np.isnan(b)):
                return False
        return True

    __hash__ = None


@dataclass(eq=False)
class DiscriminatorDown(_Message):
    user: int
    round: int
    step: int
    weights: np.ndarray
    seq: int = 0
    tag: ClassVar[int] = 1
    direction: ClassVar[str] = "downlink"


@dataclass(eq=False)
class ClientUpdateUp(_Message):
    user: int
    round: int
    step: int
    gradient: np.ndarray
    loss: float
    seq: int = 0
    tag: ClassVar[int] = 2
    direction: ClassVar[str] = "uplink"


@dataclass(eq=False)
class RoundComplete(_Message):
    user: int
    round: int
    inception_score: float
    seq: int = 0
    step: int = 0
    tag: ClassVar[int] = 3
    direction: ClassVar[str] = "downlink"


MESSAGE_TYPES = {cls.tag: cls for cls in (DiscriminatorDown, ClientUpdateUp, RoundComplete)}


# encoding --------------------------------------------------------------------

def encode_tensor_block(array):
    array = np.asarray(array)
    tag = TAG_OF_DTYPE.get(array.dtype.newbyteorder("="))
    if tag is None:
        raise FrameError(f"unsupported tensor dtype {array.dtype}")
    if not np.all(np.isfinite(array)):
        raise FrameError("tensor block contains non-finite values")
    if array.ndim > 255:
        raise FrameError("tensor rank exceeds 255")
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return bytes([tag, array.ndim]) + dims + array.astype(DTYPE_TAGS[tag]).tobytes()


def decode_tensor_block(buf, offset, end):
    """Parse one TensorBlock at ``offset``; returns (array, next offset)."""
    if end - offset < 2:
        raise FrameError("truncated tensor block header", offset)
    tag, rank = buf[offset], buf[offset + 1]
    if tag not in DTYPE_TAGS:
        raise FrameError(f"unknown tensor dtype tag {tag}", offset)
    pos = offset + 2
    if end - pos < 8 * rank:
        raise FrameError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = DTYPE_TAGS[tag]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes != end - pos:
        raise FrameError(f"tensor block declares {nbytes} data bytes, {end - pos} present", pos)
    try:
        array = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype=dtype).reshape(dims)
    except ValueError:  # e.g. a zero-size block with a dimension numpy cannot index
        raise FrameError(f"tensor dims {dims} are not representable", offset + 2) from None
    array = array.astype(dtype.newbyteorder("="))
    if not np.all(np.isfinite(array)):
        raise FrameError("tensor block contains non-finite values", pos)
    return array, pos + nbytes


def encode(msg):
    """Serialize a protocol message into one wire frame."""
    payload = struct.pack("<Q", msg.seq)
    if isinstance(msg, DiscriminatorDown):
        payload += encode_tensor_block(msg.weights)
    elif isinstance(msg, ClientUpdateUp):
        payload += struct.pack("<d", float(msg.loss)) + encode_tensor_block(msg.gradient)
    elif isinstance(msg, RoundComplete):
        payload += struct.pack("<d", float(msg.inception_score))
    else:
        raise FrameError(f"cannot encode {type(msg).__name__}")
    return HEADER.pack(MAGIC, VERSION, msg.tag, msg.user, msg.round, msg.step, len(payload)) + payload


def frame_length(buf, offset=0):
    """Total byte length of the frame starting at ``offset`` (header checks only)."""
    if len(buf) - offset < HEADER.size:
        raise FrameError("truncated frame header", len(buf))
    magic, version, tag, _, _, _, length = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FrameError(f"bad magic {bytes(magic)!r}", offset)
    if version != VERSION:
        raise FrameError(f"unknown frame version {version}", offset + 4)
    if tag not in MESSAGE_TYPES:
        raise FrameError(f"unknown variant tag {tag}", offset + 5)
    return HEADER.size + length


def decode(buf):
    """Parse exactly one frame back into its protocol message."""
    buf = memoryview(bytes(buf))
    if len(buf) < HEADER.size:
        raise FrameError("truncated frame header", len(buf))
    total = frame_length(buf)
    if total != len(buf):
        raise FrameError(f"payload length field says {total - HEADER.size} bytes, "
                         f"{len(buf) - HEADER.size} present", HEADER.size - 8)
    _, _, tag, user, rnd, step, _ = HEADER.unpack_from(buf, 0)
    pos, end = HEADER.size, len(buf)
    if end - pos < 8:
        raise FrameError("truncated sequence number", pos)
    (seq,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if tag == DiscriminatorDown.tag:
        weights, _ = decode_tensor_block(buf, pos, end)
        return DiscriminatorDown(user, rnd, step, weights, seq)
    if end - pos < 8:
        raise FrameError("truncated scalar field", pos)
    (value,) = struct.unpack_from("<d", buf, pos)
    pos += 8
    if not np.isfinite(value):
        raise FrameError("non-finite scalar field", pos - 8)
    if tag == ClientUpdateUp.tag:
        grad, _ = decode_tensor_block(buf, pos, end)
        return ClientUpdateUp(user, rnd, step, grad, value, seq)
    if pos != end:
        raise FrameError("trailing bytes after round-complete payload", pos)
    return RoundComplete(user, rnd, value, seq, step)


# links and taps --------------------------------------------------------------

@dataclass
class EavesdropTap:
    """Passive recorder of frames crossing a link in the chosen direction."""

    direction: str = "uplink"
    transcript: list = field(default_factory=list)  # (logical time, frame bytes)

    def __post_init__(self):
        if self.direction not in ("uplink", "downlink", "both"):
            raise ValueError(f"tap direction must be uplink, downlink or both, not {self.direction!r}")

    def observe(self, direction, frame, clock):
        if self.direction in ("both", direction):
            self.transcript.append((clock, bytes(frame)))

    @property
    def frames(self):
        return [f for _, f in self.transcript]

    def messages(self):
        return [decode(f) for f in self.frames]


class _Channel:
    def __init__(self, direction, taps, clock):
        self.direction = direction
        self.taps = taps
        self.queue = deque()
        self.closed = False
        self.next_seq = 1
        self.last_received = 0
        self.clock = clock


class Endpoint:
    """One side of a link: sends on its outbound channel, receives on the other."""

    def __init__(self, name, outbound, inbound):
        self.name = name
        self._out = outbound
        self._in = inbound

    def send(self, msg):
        ch = self._out
        if ch.closed:
            raise LinkError(f"{self.name}: send on closed link")
        if msg.direction != ch.direction:
            raise ProtocolError(f"{type(msg).__name__} cannot travel {ch.direction}")
        frame = encode(replace(msg, seq=ch.next_seq))
        ch.next_seq += 1
        ch.clock[0] += 1
        for tap in ch.taps:
            tap.observe(ch.direction, frame, ch.clock[0])
        ch.queue.append(frame)

    def receive(self):
        ch = self._in
        if not ch.queue:
            raise LinkError(f"{self.name}: nothing to receive")
        msg = decode(ch.queue.popleft())
        if msg.seq <= ch.last_received:
            raise ProtocolError(f"{self.name}: sequence {msg.seq} after {ch.last_received}")
        ch.last_received = msg.seq
        return msg

    def pending(self):
        return len(self._in.queue)

    def close(self):
        self._out.closed = True
        self._in.closed = True


def in_process_link(taps=(), name="link"):
    """Reliable FIFO link; returns (server endpoint, client endpoint)."""
    clock = [0]
    down = _Channel("downlink", list(taps), clock)
    up = _Channel("uplink", list(taps), clock)
    return Endpoint(f"{name}/server", down, up), Endpoint(f"{name}/client", up, down)


# transcripts -----------------------------------------------------------------

@dataclass
class Transcript:
    frames: list
    seed: int = 0

    def messages(self):
        return [decode(f) for f in self.frames]

    def __len__(self):
        return len(self.frames)


def transcript_export(source, path, seed=0):
    """Write the frames of a tap (or a list of frames) to a ``.ufgt`` file."""
    frames = source.frames if hasattr(source, "frames") else list(source)
    with open(path, "wb") as fh:
        fh.write(TRANSCRIPT_HEADER.pack(TRANSCRIPT_MAGIC, VERSION, len(frames), int(seed)))
        for f in frames:
            fh.write(f)
    return Path(path)


def transcript_import(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TranscriptError(f"{path}: cannot read transcript: {exc.strerror}") from None
    if len(buf) < TRANSCRIPT_HEADER.size:
        raise TranscriptError(f"{path}: truncated transcript header", offset=len(buf))
    magic, version, count, seed = TRANSCRIPT_HEADER.unpack_from(buf, 0)
    if magic != TRANSCRIPT_MAGIC:
        raise TranscriptError(f"{path}: not a transcript file", offset=0)
    if version != VERSION:
        raise TranscriptError(f"{path}: unknown transcript version {version}", offset=4)
    frames, pos = [], TRANSCRIPT_HEADER.size
    for i in range(count):
        try:
            n = frame_length(buf, pos)
            if pos + n > len(buf):
                raise FrameError("frame runs past end of file", len(buf))
            decode(buf[pos:pos + n])
        except FrameError as exc:
            raise TranscriptError(f"{path}: {exc}", frame_index=i, offset=pos) from None
        frames.append(bytes(buf[pos:pos + n]))
        pos += n
    if pos != len(buf):
        raise TranscriptError(f"{path}: {len(buf) - pos} trailing bytes", frame_index=count, offset=pos)
    return Transcript(frames, seed)


# checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"UFGC"


def save_checkpoint(path, model, **meta):
    """ModelSpec header (JSON) followed by the flat parameter vector as a TensorBlock."""
    header = json.dumps({"spec": model.spec.to_dict(), "dtype": model.dtype.name, **meta},
                        sort_keys=True).encode()
    block = encode_tensor_block(model.get_flat())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + block)


def load_checkpoint(path):
    """Return (spec dict + metadata, flat parameter vector)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read checkpoint: {exc.strerror}") from None
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file", offset=0)
    if len(buf) < 8:
        raise ParseError(f"{path}: truncated checkpoint header", offset=len(buf))
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        meta = json.loads(buf[8:8 + n])
        vec, _ = decode_tensor_block(memoryview(buf), 8 + n, len(buf))
    except (ValueError, FrameError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint: {exc}", offset=8) from None
    return meta, vec
