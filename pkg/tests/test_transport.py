import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufedgan import data, nn, protocol, transport
from ufedgan.errors import FrameError, LinkError, ParseError, ProtocolError, TranscriptError
from ufedgan.transport import ClientUpdateUp, DiscriminatorDown, RoundComplete

u32 = st.integers(0, 2 ** 32 - 1)
seqs = st.integers(0, 2 ** 64 - 1)
finite = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def arrays(draw):
    dtype = draw(st.sampled_from([np.float32, np.float64]))
    shape = tuple(draw(st.lists(st.integers(0, 4), min_size=0, max_size=3)))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


messages = st.one_of(
    st.builds(DiscriminatorDown, u32, u32, u32, arrays(), seqs),
    st.builds(ClientUpdateUp, u32, u32, u32, arrays(), finite, seqs),
    st.builds(RoundComplete, u32, u32, finite, seqs, u32),
)


@settings(max_examples=10_000, deadline=None)
@given(messages)
def test_roundtrip_random_messages(msg):
    frame = transport.encode(msg)
    assert transport.decode(frame) == msg
    assert transport.encode(msg) == frame


def test_update_with_ten_element_gradient():
    msg = ClientUpdateUp(3, 7, 2, np.arange(10, dtype=np.float32) / 3, 0.6931, seq=4)
    again = transport.decode(transport.encode(msg))
    assert again == msg
    assert again.gradient.dtype == np.float32


def test_header_layout():
    frame = transport.encode(RoundComplete(5, 9, 2.5, seq=1, step=0))
    assert frame[:4] == b"UFGN"
    assert frame[4] == transport.VERSION and frame[5] == RoundComplete.tag
    assert struct.unpack_from("<IIIQ", frame, 6) == (5, 9, 0, 16)
    assert len(frame) == transport.HEADER.size + 16


def test_empty_bytes_is_frame_error():
    with pytest.raises(FrameError):
        transport.decode(b"")


def test_bad_magic_and_version():
    frame = bytearray(transport.encode(RoundComplete(0, 1, 1.0)))
    bad = bytes(b"XXXX" + frame[4:])
    with pytest.raises(FrameError) as exc:
        transport.decode(bad)
    assert exc.value.offset == 0
    frame[4] = 9
    with pytest.raises(FrameError, match="version"):
        transport.decode(bytes(frame))


def test_flipped_length_byte_is_mismatch():
    frame = bytearray(transport.encode(ClientUpdateUp(0, 1, 1, np.ones(10, np.float32), 0.5)))
    frame[transport.HEADER.size - 8] ^= 0x01
    with pytest.raises(FrameError, match="length") as exc:
        transport.decode(bytes(frame))
    assert exc.value.offset is not None


@settings(max_examples=2000, deadline=None)
@given(messages, st.data())
def test_fuzzed_frames_only_raise_frame_errors(msg, draw):
    frame = bytearray(transport.encode(msg))
    kind = draw.draw(st.sampled_from(["flip", "truncate", "extend"]))
    if kind == "flip":
        i = draw.draw(st.integers(0, len(frame) - 1))
        frame[i] ^= draw.draw(st.integers(1, 255))
    elif kind == "truncate":
        frame = frame[:draw.draw(st.integers(0, len(frame) - 1))]
    else:
        frame += draw.draw(st.binary(min_size=1, max_size=16))
    try:
        transport.decode(bytes(frame))
    except FrameError:
        pass


def test_zero_size_block_with_huge_dimension():
    frame = bytearray(transport.encode(DiscriminatorDown(0, 1, 1, np.zeros((0, 3), np.float32))))
    dims_at = transport.HEADER.size + 8 + 2
    frame[dims_at + 8:dims_at + 16] = struct.pack("<Q", 2 ** 62)
    with pytest.raises(FrameError, match="representable"):
        transport.decode(bytes(frame))


def test_non_finite_tensor_rejected():
    with pytest.raises(FrameError):
        transport.encode(ClientUpdateUp(0, 1, 1, np.array([np.nan], np.float32), 0.1))


# links and taps -------------------------------------------------------------------

def test_send_then_receive():
    server, client = transport.in_process_link()
    msg = DiscriminatorDown(0, 1, 1, np.arange(4, dtype=np.float32))
    server.send(msg)
    got = client.receive()
    assert got.user == 0 and np.array_equal(got.weights, msg.weights)


def test_fifo_and_increasing_sequence_numbers():
    server, client = transport.in_process_link()
    for step in range(1, 21):
        server.send(DiscriminatorDown(0, 1, step, np.zeros(2, np.float32)))
    got = [client.receive() for _ in range(20)]
    assert [m.step for m in got] == list(range(1, 21))
    assert all(b.seq > a.seq for a, b in zip(got, got[1:]))


def test_direction_is_enforced():
    server, client = transport.in_process_link()
    with pytest.raises(ProtocolError):
        server.send(ClientUpdateUp(0, 1, 1, np.zeros(2, np.float32), 0.0))
    with pytest.raises(ProtocolError):
        client.send(DiscriminatorDown(0, 1, 1, np.zeros(2, np.float32)))


def test_send_after_close_is_link_error():
    server, client = transport.in_process_link()
    client.close()
    with pytest.raises(LinkError):
        server.send(RoundComplete(0, 1, 1.0))
    with pytest.raises(LinkError):
        client.receive()


@pytest.mark.parametrize("direction,expected", [
    ("uplink", {ClientUpdateUp}),
    ("downlink", {DiscriminatorDown, RoundComplete}),
    ("both", {ClientUpdateUp, DiscriminatorDown, RoundComplete}),
])
def test_tap_direction_filter(direction, expected):
    tap = transport.EavesdropTap(direction)
    server, client = transport.in_process_link([tap])
    for step in range(1, 4):
        server.send(DiscriminatorDown(0, 1, step, np.zeros(3, np.float32)))
        client.receive()
        client.send(ClientUpdateUp(0, 1, step, np.ones(3, np.float32), 0.5))
        server.receive()
    server.send(RoundComplete(0, 1, 1.0))
    assert {type(m) for m in tap.messages()} == expected
    times = [t for t, _ in tap.transcript]
    assert times == sorted(times) and len(set(times)) == len(times)


def test_tap_rejects_unknown_direction():
    with pytest.raises(ValueError):
        transport.EavesdropTap("sideways")


def _toy_run(taps, rounds=3, steps=5):
    cfg = protocol.ProtocolConfig(profile="gaussian1d", steps_per_round=steps, batch_size=16,
                                  max_rounds=rounds, stop_on_plateau=False)
    ds = data.toy_dataset(data.gaussian1d(), 200, seed=0)
    server = protocol.server_init(1, cfg, seed=0)
    clients = {0: protocol.ClientState(0, ds.unlabeled(), cfg, seed=0)}
    network = protocol.Network([0], taps)
    protocol.run_until_converged(server, clients, network)
    return server


def test_tap_is_passive():
    untapped = _toy_run(None)
    taps = {0: [transport.EavesdropTap("uplink"), transport.EavesdropTap("both")]}
    tapped = _toy_run(taps)
    assert tapped.digest() == untapped.digest()
    assert len(taps[0][1].frames) > len(taps[0][0].frames) > 0


# transcripts -------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(messages, max_size=12), st.integers(0, 2 ** 63 - 1))
def test_transcript_roundtrip(tmp_path_factory, msgs, seed):
    frames = [transport.encode(m) for m in msgs]
    path = tmp_path_factory.mktemp("t") / "x.ufgt"
    transport.transcript_export(frames, path, seed)
    again = transport.transcript_import(path)
    assert again.frames == frames and again.seed == seed


def test_empty_transcript_is_header_only(tmp_path):
    path = transport.transcript_export(transport.EavesdropTap(), tmp_path / "e.ufgt", seed=3)
    assert path.stat().st_size == transport.TRANSCRIPT_HEADER.size
    assert len(transport.transcript_import(path)) == 0


def test_hundred_rounds_of_five_steps_give_500_uplink_frames(tmp_path):
    tap = transport.EavesdropTap("uplink")
    _toy_run({0: [tap]}, rounds=100, steps=5)
    path = transport.transcript_export(tap, tmp_path / "u.ufgt", seed=0)
    msgs = transport.transcript_import(path).messages()
    assert len(msgs) == 500
    assert all(isinstance(m, ClientUpdateUp) for m in msgs)
    assert [(m.round, m.step) for m in msgs[:6]] == [(1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (2, 1)]


def test_corrupt_transcript_reports_frame_index(tmp_path):
    frames = [transport.encode(RoundComplete(0, r, 1.0)) for r in range(1, 5)]
    path = transport.transcript_export(frames, tmp_path / "c.ufgt")
    raw = bytearray(path.read_bytes())
    third = transport.TRANSCRIPT_HEADER.size + 2 * len(frames[0])
    raw[third] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(TranscriptError) as exc:
        transport.transcript_import(path)
    assert exc.value.frame_index == 2
    path.write_bytes(bytes(raw[:transport.TRANSCRIPT_HEADER.size + 10]))
    with pytest.raises(TranscriptError) as exc:
        transport.transcript_import(path)
    assert exc.value.frame_index == 0


def test_transcript_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(TranscriptError):
        transport.transcript_import(tmp_path / "x")


# checkpoints ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    gen, _, _ = nn.toy_specs("gaussian-mixture-2d")
    model = nn.Model(gen, np.random.default_rng(1))
    transport.save_checkpoint(tmp_path / "g.ufgc", model, round=12)
    meta, vec = transport.load_checkpoint(tmp_path / "g.ufgc")
    assert meta["round"] == 12
    assert nn.ModelSpec.from_dict(meta["spec"]) == model.spec
    np.testing.assert_array_equal(vec, model.get_flat())
    (tmp_path / "bad.ufgc").write_bytes(b"UFGC" + bytes(3))
    with pytest.raises(ParseError):
        transport.load_checkpoint(tmp_path / "bad.ufgc")
