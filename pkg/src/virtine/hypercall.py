"""Guest/host hypercall ABI, policy enforcement, and canned handlers.

Wire contract (bit-exact, little-endian, stable once published):

* Hypercalls are vectored through a 32-bit OUT to port 0xFF whose value is
  the guest-physical address of a 64-byte frame.
* Frame layout: nr u64, args[6] u64, ret i64.
* `exit` (nr 0) is always permitted; every other number is denied unless
  set in the policy's allow mask.  A denied or malformed hypercall
  terminates the virtine.
* The stat record written by `stat` is 64 bytes: size u64, mode u64,
  mtime u64, then zero padding.
* Error returns are negative wire errno constants (fixed values, not
  host-native).

Handlers are reentrant across shells: any per-execution state lives on the
ExecutionState, never on the policy or module.
"""

import os
import struct
import time
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from virtine.backend.base import ExitKind, VcpuExit
from virtine.errors import MalformedFrame

HYPERCALL_PORT = 0xFF
FRAME_SIZE = 64
FRAME_STRUCT = struct.Struct("<Q6Qq")
RET_OFFSET = 56
MAX_NR = 63
STAT_RECORD_SIZE = 64
RETURN_DATA_MAX = 4096
FIRST_FILE_FD = 3
MAX_OPEN_FDS = 64


class Hypercall(IntEnum):
    EXIT = 0
    SNAPSHOT = 1
    GET_DATA = 2
    RETURN_DATA = 3
    READ = 4
    WRITE = 5
    OPEN = 6
    CLOSE = 7
    STAT = 8
    SEND = 9
    RECV = 10
    TIMESTAMP = 11  # benchmark milestone marker; args[0] = marker id


class WireErrno(IntEnum):
    """Fixed wire error magnitudes; guests are host-agnostic."""

    EPERM = 1
    ENOENT = 2
    EIO = 5
    EBADF = 9
    EACCES = 13
    EFAULT = 14
    EINVAL = 22
    EMFILE = 24
    ENOSYS = 38
    ENOTSOCK = 88


@dataclass(frozen=True)
class HypercallFrame:
    nr: int
    args: tuple[int, ...]
    gpa: int

    @staticmethod
    def read_from(memory, gpa: int) -> "HypercallFrame":
        try:
            raw = memory.read(gpa, FRAME_SIZE)
        except Exception as exc:
            raise MalformedFrame(f"frame at {gpa:#x} not within guest memory") from exc
        fields = FRAME_STRUCT.unpack(raw)
        return HypercallFrame(nr=fields[0], args=tuple(fields[1:7]), gpa=gpa)

    def write_ret(self, memory, value: int) -> None:
        memory.write(self.gpa + RET_OFFSET, struct.pack("<q", value))


# -- dispatch results --------------------------------------------------------

@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class Exited:
    code: int


@dataclass(frozen=True)
class Violation:
    nr: int
    reason: str


DispatchResult = Continue | Exited | Violation


# -- per-execution state ------------------------------------------------------

class FdTable:
    """Virtine-local descriptors; guests never see host descriptor numbers.

    Slots 0-2 are reserved for streams pre-installed by the client (for
    example the accepted connection at fd 0); descriptors returned by
    `open` are allocated densely from 3.
    """

    def __init__(self):
        self._slots: dict[int, object] = {}

    def install(self, fd: int, resource) -> None:
        self._slots[fd] = resource

    def allocate(self, resource) -> int:
        for fd in range(FIRST_FILE_FD, FIRST_FILE_FD + MAX_OPEN_FDS):
            if fd not in self._slots:
                self._slots[fd] = resource
                return fd
        return -1

    def get(self, fd: int):
        return self._slots.get(fd)

    def remove(self, fd: int):
        return self._slots.pop(fd, None)

    def close_all(self) -> None:
        for resource in self._slots.values():
            close = getattr(resource, "close", None)
            if close is not None:
                try:
                    close()
                except OSError:
                    pass
        self._slots.clear()


class FileResource:
    """Read-only sandboxed file."""

    def __init__(self, fileobj):
        self._f = fileobj

    def read(self, n: int) -> bytes:
        return self._f.read(n)

    def write(self, data: bytes) -> int:
        raise PermissionError("file opened read-only")

    def close(self) -> None:
        self._f.close()

    is_stream = False


class StreamResource:
    """Connected stream socket passed in by the client."""

    def __init__(self, sock):
        self._sock = sock

    def read(self, n: int) -> bytes:
        return self._sock.recv(n)

    def write(self, data: bytes) -> int:
        self._sock.sendall(data)
        return len(data)

    def close(self) -> None:
        # The client owns the connection lifetime.
        pass

    is_stream = True


@dataclass
class ExecutionState:
    """Everything one virtine invocation exposes to its handlers."""

    memory: object
    policy: "HypercallPolicy"
    input_data: bytes = b""
    fd_table: FdTable = field(default_factory=FdTable)
    image_name: str = ""
    return_data: bytes | None = None
    exit_code: int | None = None
    used_calls: set[int] = field(default_factory=set)
    trace: list[int] = field(default_factory=list)
    milestones: list[tuple[int, int]] = field(default_factory=list)
    snapshot_hook: Callable[[], int] | None = None
    snapshot_exists: Callable[[], bool] | None = None

    def check_buffer(self, gpa: int, length: int) -> None:
        if length < 0 or gpa < 0 or gpa + length > self.memory.size:
            raise MalformedFrame(f"buffer [{gpa:#x}, {gpa + length:#x}) out of bounds")


Handler = Callable[[HypercallFrame, ExecutionState], int]


# -- canned handlers ----------------------------------------------------------

def _resolve_sandboxed(state: ExecutionState, path_gpa: int, path_len: int) -> Path | int:
    """Validate and resolve a guest path under the sandbox root.

    Returns the resolved Path, or a negative wire errno.  No host
    filesystem call is made for a path that fails validation.
    """
    if path_len <= 0 or path_len > 4096:
        raise MalformedFrame("path length out of range")
    state.check_buffer(path_gpa, path_len)
    raw = state.memory.read(path_gpa, path_len)
    if b"\x00" in raw:
        return -WireErrno.EINVAL
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        return -WireErrno.EINVAL
    if text.startswith("/") or any(part == ".." for part in text.split("/")):
        return -WireErrno.EACCES
    root = state.policy.sandbox_root
    if root is None:
        return -WireErrno.EACCES
    root = Path(root).resolve()
    resolved = (root / text).resolve()
    if resolved != root and root not in resolved.parents:
        return -WireErrno.EACCES
    return resolved


def hc_open(frame: HypercallFrame, state: ExecutionState) -> int:
    path_gpa, path_len, flags = frame.args[0], frame.args[1], frame.args[2]
    if flags != 0:
        return -WireErrno.EINVAL  # read-only opens only
    resolved = _resolve_sandboxed(state, path_gpa, path_len)
    if isinstance(resolved, int):
        return resolved
    try:
        fileobj = open(resolved, "rb")
    except FileNotFoundError:
        return -WireErrno.ENOENT
    except IsADirectoryError:
        return -WireErrno.EACCES
    except OSError:
        return -WireErrno.EIO
    fd = state.fd_table.allocate(FileResource(fileobj))
    if fd < 0:
        fileobj.close()
        return -WireErrno.EMFILE
    return fd


def hc_close(frame: HypercallFrame, state: ExecutionState) -> int:
    resource = state.fd_table.remove(frame.args[0])
    if resource is None:
        return -WireErrno.EBADF
    resource.close()
    return 0


def _bounded_io_args(frame: HypercallFrame, state: ExecutionState) -> tuple[object, int, int]:
    fd, buf_gpa, length = frame.args[0], frame.args[1], frame.args[2]
    if length > state.memory.size:
        raise MalformedFrame("transfer longer than guest memory")
    state.check_buffer(buf_gpa, length)
    return state.fd_table.get(fd), buf_gpa, length


def hc_read(frame: HypercallFrame, state: ExecutionState) -> int:
    resource, buf_gpa, length = _bounded_io_args(frame, state)
    if resource is None:
        return -WireErrno.EBADF
    try:
        data = resource.read(length)
    except OSError:
        return -WireErrno.EIO
    state.memory.write(buf_gpa, data)
    return len(data)


def hc_write(frame: HypercallFrame, state: ExecutionState) -> int:
    resource, buf_gpa, length = _bounded_io_args(frame, state)
    if resource is None:
        return -WireErrno.EBADF
    data = state.memory.read(buf_gpa, length)
    try:
        return resource.write(data)
    except PermissionError:
        return -WireErrno.EPERM
    except OSError:
        return -WireErrno.EIO


def hc_send(frame: HypercallFrame, state: ExecutionState) -> int:
    resource, _, _ = _bounded_io_args(frame, state)
    if resource is None:
        return -WireErrno.EBADF
    if not getattr(resource, "is_stream", False):
        return -WireErrno.ENOTSOCK
    return hc_write(frame, state)


def hc_recv(frame: HypercallFrame, state: ExecutionState) -> int:
    resource, _, _ = _bounded_io_args(frame, state)
    if resource is None:
        return -WireErrno.EBADF
    if not getattr(resource, "is_stream", False):
        return -WireErrno.ENOTSOCK
    return hc_read(frame, state)


def hc_stat(frame: HypercallFrame, state: ExecutionState) -> int:
    path_gpa, path_len, out_gpa = frame.args[0], frame.args[1], frame.args[2]
    state.check_buffer(out_gpa, STAT_RECORD_SIZE)
    resolved = _resolve_sandboxed(state, path_gpa, path_len)
    if isinstance(resolved, int):
        return resolved
    try:
        st = os.stat(resolved)
    except FileNotFoundError:
        return -WireErrno.ENOENT
    except OSError:
        return -WireErrno.EIO
    record = struct.pack(
        "<QQQ", st.st_size, st.st_mode, int(st.st_mtime)
    ) + b"\x00" * (STAT_RECORD_SIZE - 24)
    state.memory.write(out_gpa, record)
    return 0


def hc_get_data(frame: HypercallFrame, state: ExecutionState) -> int:
    buf_gpa, buf_len = frame.args[0], frame.args[1]
    state.check_buffer(buf_gpa, buf_len)
    n = min(buf_len, len(state.input_data))
    if n:
        state.memory.write(buf_gpa, state.input_data[:n])
    return n


def hc_return_data(frame: HypercallFrame, state: ExecutionState) -> int:
    buf_gpa, length = frame.args[0], frame.args[1]
    if length > RETURN_DATA_MAX:
        raise MalformedFrame(f"return value of {length} bytes exceeds {RETURN_DATA_MAX}")
    state.check_buffer(buf_gpa, length)
    state.return_data = state.memory.read(buf_gpa, length)
    return length


def hc_snapshot(frame: HypercallFrame, state: ExecutionState) -> int:
    if state.snapshot_hook is None:
        return 0  # snapshotting disabled: succeed without capturing
    if Hypercall.GET_DATA in state.used_calls:
        # Snapshots must capture pre-input state only; per-invocation data
        # must never leak into the image shared by future invocations.
        raise MalformedFrame("snapshot requested after per-invocation data was delivered")
    # Success must be visible in the captured memory: a restored guest
    # resumes right after this call and reads ret from the same frame.
    frame.write_ret(state.memory, 0)
    return state.snapshot_hook()


def hc_timestamp(frame: HypercallFrame, state: ExecutionState) -> int:
    state.milestones.append((frame.args[0], time.perf_counter_ns()))
    return 0


CANNED_HANDLERS: Mapping[int, Handler] = {
    Hypercall.SNAPSHOT: hc_snapshot,
    Hypercall.GET_DATA: hc_get_data,
    Hypercall.RETURN_DATA: hc_return_data,
    Hypercall.READ: hc_read,
    Hypercall.WRITE: hc_write,
    Hypercall.OPEN: hc_open,
    Hypercall.CLOSE: hc_close,
    Hypercall.STAT: hc_stat,
    Hypercall.SEND: hc_send,
    Hypercall.RECV: hc_recv,
    Hypercall.TIMESTAMP: hc_timestamp,
}

DEFAULT_ONE_SHOT = frozenset({Hypercall.SNAPSHOT, Hypercall.GET_DATA, Hypercall.RETURN_DATA})


class HypercallPolicy:
    """Immutable allow-set over hypercall numbers plus handler bindings.

    The default policy denies everything except `exit`.
    """

    def __init__(self, allow: Iterable[int] = (), *,
                 sandbox_root: str | os.PathLike | None = None,
                 handlers: Mapping[int, Handler] | None = None,
                 one_shot: Iterable[int] | None = None):
        mask = 0
        for nr in allow:
            nr = int(nr)
            if not 0 <= nr <= MAX_NR:
                raise ValueError(f"hypercall number {nr} out of range")
            mask |= 1 << nr
        self._allow_mask = mask
        self._sandbox_root = Path(sandbox_root) if sandbox_root is not None else None
        bound = dict(CANNED_HANDLERS)
        if handlers:
            bound.update(handlers)
        self._handlers = bound
        self._one_shot = frozenset(one_shot) if one_shot is not None else DEFAULT_ONE_SHOT

    @property
    def allow_mask(self) -> int:
        return self._allow_mask

    @property
    def sandbox_root(self) -> Path | None:
        return self._sandbox_root

    @property
    def one_shot(self) -> frozenset:
        return self._one_shot

    def handler_for(self, nr: int) -> Handler | None:
        return self._handlers.get(nr)

    def allows(self, nr: int) -> bool:
        return nr == Hypercall.EXIT or bool(self._allow_mask & (1 << nr))

    @staticmethod
    def deny_all() -> "HypercallPolicy":
        return HypercallPolicy()


DENY_ALL = HypercallPolicy.deny_all()


def dispatch(exit_: VcpuExit, state: ExecutionState) -> DispatchResult:
    """Decode and run one hypercall exit under the policy.

    Validation precedes every effect: a malformed frame or buffer causes a
    Violation with zero host-side interactions.
    """
    if exit_.kind is not ExitKind.IO_OUT or exit_.port != HYPERCALL_PORT:
        return Violation(-1, f"unexpected I/O exit on port {exit_.port:#x}")
    if exit_.width != 4:
        return Violation(-1, f"hypercall OUT must be 32-bit, got width {exit_.width}")
    try:
        frame = HypercallFrame.read_from(state.memory, exit_.value)
    except MalformedFrame as exc:
        return Violation(-1, str(exc))

    nr = frame.nr
    if nr == Hypercall.EXIT:
        code = frame.args[0]
        if code >= 1 << 63:
            code -= 1 << 64
        state.exit_code = code
        state.trace.append(nr)
        return Exited(code=code)
    if nr > MAX_NR:
        return Violation(nr, "hypercall number out of range")
    if not state.policy.allows(nr):
        return Violation(nr, "denied by policy")
    if nr in state.policy.one_shot:
        already = nr in state.used_calls
        if nr == Hypercall.SNAPSHOT and state.snapshot_exists is not None:
            already = already or state.snapshot_exists()
        if already:
            return Violation(nr, "one-shot hypercall called more than once")
    handler = state.policy.handler_for(nr)
    if handler is None:
        return Violation(nr, "no handler bound")
    try:
        ret = handler(frame, state)
    except MalformedFrame as exc:
        return Violation(nr, str(exc))
    state.used_calls.add(nr)
    state.trace.append(nr)
    frame.write_ret(state.memory, ret)
    return Continue()
