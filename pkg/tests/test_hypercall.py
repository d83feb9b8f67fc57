"""Hypercall ABI, default-deny dispatch, and canned handler validation."""

import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtine.backend.base import GuestMemory, VcpuExit
from virtine.hypercall import (
    FRAME_SIZE,
    HYPERCALL_PORT,
    MAX_NR,
    RET_OFFSET,
    STAT_RECORD_SIZE,
    Continue,
    ExecutionState,
    Exited,
    FdTable,
    Hypercall,
    HypercallPolicy,
    StreamResource,
    Violation,
    WireErrno,
    dispatch,
)

KB = 1024
FRAME_GPA = 0xC000


def make_state(policy=None, mem_size=64 * KB, **kwargs) -> ExecutionState:
    return ExecutionState(
        memory=GuestMemory(bytearray(mem_size)),
        policy=policy or HypercallPolicy.deny_all(),
        **kwargs,
    )


def write_frame(state, nr, *args, gpa=FRAME_GPA):
    padded = (list(args) + [0] * 6)[:6]
    state.memory.write(gpa, struct.pack("<Q6Qq", nr, *padded, 0))
    return VcpuExit.io_out(HYPERCALL_PORT, 4, gpa)


def ret_of(state, gpa=FRAME_GPA) -> int:
    return struct.unpack("<q", state.memory.read(gpa + RET_OFFSET, 8))[0]


def test_frame_layout_is_64_bytes():
    assert FRAME_SIZE == 64
    assert RET_OFFSET == 56


@given(
    nr=st.integers(0, (1 << 64) - 1),
    args=st.lists(st.integers(0, (1 << 64) - 1), min_size=6, max_size=6),
    gpa=st.integers(0, 64 * KB - FRAME_SIZE),
)
@settings(max_examples=200)
def test_frame_codec_round_trip(nr, args, gpa):
    from virtine.backend.base import GuestMemory
    from virtine.hypercall import HypercallFrame

    memory = GuestMemory(bytearray(64 * KB))
    memory.write(gpa, struct.pack("<Q6Qq", nr, *args, 0))
    frame = HypercallFrame.read_from(memory, gpa)
    assert frame.nr == nr
    assert frame.args == tuple(args)
    frame.write_ret(memory, -42)
    assert struct.unpack("<q", memory.read(gpa + RET_OFFSET, 8))[0] == -42


def test_empty_mask_denies_write():
    state = make_state()
    exit_ = write_frame(state, Hypercall.WRITE, 1, 0x1000, 4)
    result = dispatch(exit_, state)
    assert isinstance(result, Violation)
    assert result.nr == Hypercall.WRITE


def test_exit_always_permitted():
    state = make_state()
    result = dispatch(write_frame(state, Hypercall.EXIT, 42), state)
    assert result == Exited(code=42)
    assert state.exit_code == 42


def test_exit_code_is_signed():
    state = make_state()
    result = dispatch(write_frame(state, Hypercall.EXIT, (1 << 64) - 1), state)
    assert result == Exited(code=-1)


def test_all_non_exit_numbers_denied_under_empty_mask():
    for nr in range(1, MAX_NR + 1):
        state = make_state()
        result = dispatch(write_frame(state, nr), state)
        assert isinstance(result, Violation), f"hypercall {nr} slipped through"


def test_allowed_write_invokes_handler(tmp_path):
    class Sink:
        def __init__(self):
            self.data = b""

        def write(self, chunk):
            self.data += chunk
            return len(chunk)

    policy = HypercallPolicy(allow=[Hypercall.WRITE])
    state = make_state(policy)
    sink = Sink()
    state.fd_table.install(1, sink)
    state.memory.write(0x1000, b"ping")
    result = dispatch(write_frame(state, Hypercall.WRITE, 1, 0x1000, 4), state)
    assert isinstance(result, Continue)
    assert ret_of(state) == 4
    assert sink.data == b"ping"


def test_write_with_out_of_bounds_buffer_is_violation():
    seen = []

    class Recorder:
        def write(self, chunk):
            seen.append(chunk)
            return len(chunk)

    policy = HypercallPolicy(allow=[Hypercall.WRITE])
    state = make_state(policy)
    state.fd_table.install(1, Recorder())
    exit_ = write_frame(state, Hypercall.WRITE, 1, 64 * KB - 2, 16)
    result = dispatch(exit_, state)
    assert isinstance(result, Violation)
    assert seen == []  # validation preceded any host effect


def test_frame_gpa_out_of_bounds_is_violation():
    state = make_state()
    exit_ = VcpuExit.io_out(HYPERCALL_PORT, 4, 64 * KB - 8)
    assert isinstance(dispatch(exit_, state), Violation)


def test_unknown_number_is_violation():
    state = make_state(HypercallPolicy(allow=range(1, MAX_NR + 1)))
    exit_ = write_frame(state, 200)
    assert isinstance(dispatch(exit_, state), Violation)


def test_open_under_sandbox_root_returns_fd3(tmp_path):
    (tmp_path / "index.html").write_bytes(b"<b>hi</b>")
    policy = HypercallPolicy(allow=[Hypercall.OPEN], sandbox_root=tmp_path)
    state = make_state(policy)
    state.memory.write(0x2000, b"index.html")
    result = dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 10, 0), state)
    assert isinstance(result, Continue)
    assert ret_of(state) == 3


def test_open_escape_rejected_without_host_access(tmp_path, monkeypatch):
    policy = HypercallPolicy(allow=[Hypercall.OPEN], sandbox_root=tmp_path)
    state = make_state(policy)
    opened = []
    import builtins

    real_open = builtins.open

    def spy(*args, **kwargs):
        opened.append(args)
        return real_open(*args, **kwargs)

    monkeypatch.setattr(builtins, "open", spy)
    path = b"../../etc/passwd"
    state.memory.write(0x2000, path)
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, len(path), 0), state)
    assert ret_of(state) == -WireErrno.EACCES == -13
    assert opened == []


def test_open_absolute_path_rejected(tmp_path):
    policy = HypercallPolicy(allow=[Hypercall.OPEN], sandbox_root=tmp_path)
    state = make_state(policy)
    path = b"/etc/passwd"
    state.memory.write(0x2000, path)
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, len(path), 0), state)
    assert ret_of(state) == -WireErrno.EACCES


def test_open_missing_file_is_enoent(tmp_path):
    policy = HypercallPolicy(allow=[Hypercall.OPEN], sandbox_root=tmp_path)
    state = make_state(policy)
    state.memory.write(0x2000, b"nope.txt")
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 8, 0), state)
    assert ret_of(state) == -WireErrno.ENOENT


def test_fds_are_dense_and_local(tmp_path):
    for name in ("a", "b", "c"):
        (tmp_path / name).write_bytes(b"x")
    policy = HypercallPolicy(allow=[Hypercall.OPEN, Hypercall.CLOSE], sandbox_root=tmp_path)
    state = make_state(policy)
    fds = []
    for name in (b"a", b"b", b"c"):
        state.memory.write(0x2000, name)
        dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 1, 0), state)
        fds.append(ret_of(state))
    assert fds == [3, 4, 5]
    dispatch(write_frame(state, Hypercall.CLOSE, 4), state)
    state.memory.write(0x2000, b"a")
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 1, 0), state)
    assert ret_of(state) == 4  # lowest free slot reused


def test_read_file_through_bounce_buffer(tmp_path):
    (tmp_path / "f.txt").write_bytes(b"file-payload")
    policy = HypercallPolicy(allow=[Hypercall.OPEN, Hypercall.READ], sandbox_root=tmp_path)
    state = make_state(policy)
    state.memory.write(0x2000, b"f.txt")
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 5, 0), state)
    fd = ret_of(state)
    dispatch(write_frame(state, Hypercall.READ, fd, 0x3000, 64), state)
    assert ret_of(state) == 12
    assert state.memory.read(0x3000, 12) == b"file-payload"


def test_stat_fixed_record(tmp_path):
    (tmp_path / "f.txt").write_bytes(b"0123456789")
    policy = HypercallPolicy(allow=[Hypercall.STAT], sandbox_root=tmp_path)
    state = make_state(policy)
    state.memory.write(0x2000, b"f.txt")
    dispatch(write_frame(state, Hypercall.STAT, 0x2000, 5, 0x3000), state)
    assert ret_of(state) == 0
    size, mode, mtime = struct.unpack("<QQQ", state.memory.read(0x3000, 24))
    assert size == 10
    assert mode & 0o170000  # file-type bits present
    assert mtime > 0
    assert state.memory.read(0x3000 + 24, STAT_RECORD_SIZE - 24) == b"\x00" * 40


def test_get_data_zero_length_input():
    policy = HypercallPolicy(allow=[Hypercall.GET_DATA])
    state = make_state(policy, input_data=b"")
    state.memory.write(0x3000, b"\xaa" * 16)
    dispatch(write_frame(state, Hypercall.GET_DATA, 0x3000, 16), state)
    assert ret_of(state) == 0
    assert state.memory.read(0x3000, 16) == b"\xaa" * 16  # untouched


def test_get_data_then_return_data_round_trip():
    policy = HypercallPolicy(allow=[Hypercall.GET_DATA, Hypercall.RETURN_DATA])
    state = make_state(policy, input_data=b"payload")
    dispatch(write_frame(state, Hypercall.GET_DATA, 0x3000, 4096), state)
    assert ret_of(state) == 7
    dispatch(write_frame(state, Hypercall.RETURN_DATA, 0x3000, 7), state)
    assert state.return_data == b"payload"


def test_one_shot_get_data_second_call_rejected():
    policy = HypercallPolicy(allow=[Hypercall.GET_DATA])
    state = make_state(policy, input_data=b"x")
    assert isinstance(dispatch(write_frame(state, Hypercall.GET_DATA, 0x3000, 16), state), Continue)
    result = dispatch(write_frame(state, Hypercall.GET_DATA, 0x3000, 16), state)
    assert isinstance(result, Violation)


def test_return_data_over_4kb_is_violation():
    policy = HypercallPolicy(allow=[Hypercall.RETURN_DATA])
    state = make_state(policy)
    result = dispatch(write_frame(state, Hypercall.RETURN_DATA, 0x3000, 8192), state)
    assert isinstance(result, Violation)


def test_send_recv_over_socketpair():
    a, b = socket.socketpair()
    try:
        policy = HypercallPolicy(allow=[Hypercall.SEND, Hypercall.RECV])
        state = make_state(policy)
        state.fd_table.install(0, StreamResource(a))
        b.sendall(b"request!")
        dispatch(write_frame(state, Hypercall.RECV, 0, 0x3000, 64), state)
        assert ret_of(state) == 8
        assert state.memory.read(0x3000, 8) == b"request!"
        dispatch(write_frame(state, Hypercall.SEND, 0, 0x3000, 8), state)
        assert b.recv(64) == b"request!"
    finally:
        a.close()
        b.close()


def test_send_on_file_resource_is_enotsock(tmp_path):
    (tmp_path / "f").write_bytes(b"z")
    policy = HypercallPolicy(
        allow=[Hypercall.OPEN, Hypercall.SEND], sandbox_root=tmp_path
    )
    state = make_state(policy)
    state.memory.write(0x2000, b"f")
    dispatch(write_frame(state, Hypercall.OPEN, 0x2000, 1, 0), state)
    fd = ret_of(state)
    dispatch(write_frame(state, Hypercall.SEND, fd, 0x3000, 1), state)
    assert ret_of(state) == -WireErrno.ENOTSOCK


def test_guessed_host_descriptor_numbers_gain_nothing():
    """A guest probing typical host fd values only ever sees EBADF."""
    policy = HypercallPolicy(allow=[Hypercall.READ, Hypercall.WRITE, Hypercall.CLOSE])
    state = make_state(policy)
    for fd in (0, 1, 2, 3, 4, 63, 255, 1024):
        dispatch(write_frame(state, Hypercall.READ, fd, 0x3000, 16), state)
        assert ret_of(state) == -WireErrno.EBADF
        dispatch(write_frame(state, Hypercall.CLOSE, fd), state)
        assert ret_of(state) == -WireErrno.EBADF


def test_fd_table_cleared_on_close_all(tmp_path):
    (tmp_path / "f").write_bytes(b"z")
    table = FdTable()
    fileobj = open(tmp_path / "f", "rb")
    from virtine.hypercall import FileResource

    table.install(3, FileResource(fileobj))
    table.close_all()
    assert fileobj.closed
    assert table.get(3) is None


def test_policy_is_immutable_and_shareable():
    policy = HypercallPolicy(allow=[Hypercall.READ])
    assert policy.allows(Hypercall.READ)
    assert not policy.allows(Hypercall.WRITE)
    assert policy.allows(Hypercall.EXIT)
    with pytest.raises(AttributeError):
        policy.allow_mask = 0xFFFF  # type: ignore[misc]
