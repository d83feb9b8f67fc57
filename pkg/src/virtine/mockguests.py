"""Scripted mock-backend guests.

Each factory returns the step list for one mock guest program.  Programs
follow one discipline: all state that must survive a snapshot/restore
lives in guest memory, never in Python closures, because a restored
program is re-instantiated and resumes at the persisted step cursor.

Layout used by these programs (all above the image base, below the
mock cursor scratch at the top of memory):

    0xC000  hypercall frame
    0xD000  primary transfer buffer (request / input data)
    0xE000  path scratch
    0xE800  stat record
    0xF000  response / output buffer
    0xFF00  one-byte status flag (http program)
"""

import struct

from virtine.backend.base import VcpuExit
from virtine.backend.mock import MockBackend, MockContext, mock_marker
from virtine.core import VirtineImage
from virtine.hypercall import HYPERCALL_PORT, Hypercall, RET_OFFSET
from virtine.platform import ProcessorMode

FRAME_GPA = 0xC000
DATA_GPA = 0xD000
PATH_GPA = 0xE000
STAT_GPA = 0xE800
OUT_GPA = 0xF000
FLAG_GPA = 0xFF00

ALLOC_MARKER = 0x40


def emit_call(ctx: MockContext, nr: int, *args: int, frame_gpa: int = FRAME_GPA) -> VcpuExit:
    """Write a hypercall frame and produce the vectoring port exit."""
    padded = (list(args) + [0] * 6)[:6]
    ctx.memory.write(frame_gpa, struct.pack("<Q6Qq", nr, *padded, 0))
    return VcpuExit.io_out(HYPERCALL_PORT, 4, frame_gpa)


def call_ret(ctx: MockContext, frame_gpa: int = FRAME_GPA) -> int:
    return struct.unpack("<q", ctx.memory.read(frame_gpa + RET_OFFSET, 8))[0]


def _fib_iterative(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


_B64_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


def _b64(data: bytes) -> bytes:
    out = []
    for i in range(0, len(data), 3):
        chunk = data[i:i + 3]
        v = int.from_bytes(chunk + b"\x00" * (3 - len(chunk)), "big")
        quad = [
            _B64_ALPHABET[(v >> 18) & 63],
            _B64_ALPHABET[(v >> 12) & 63],
            _B64_ALPHABET[(v >> 6) & 63],
            _B64_ALPHABET[v & 63],
        ]
        for pad in range(len(chunk) + 1, 4):
            quad[pad] = "="
        out.append("".join(quad))
    return "".join(out).encode("ascii")


# -- programs -------------------------------------------------------------------


def fib_program():
    """Reads n (i32 at gpa 0), returns fib(n) as i64 via return_data."""

    def compute(ctx: MockContext):
        n = struct.unpack("<i", ctx.memory.read(0, 4))[0]
        ctx.memory.write(OUT_GPA, struct.pack("<q", _fib_iterative(n)))
        return emit_call(ctx, Hypercall.RETURN_DATA, OUT_GPA, 8)

    return [compute, lambda ctx: emit_call(ctx, Hypercall.EXIT, 0)]


def fib_snapshot_program():
    """fib with a boot-time snapshot point before the argument is read."""

    steps = fib_program()
    return [lambda ctx: emit_call(ctx, Hypercall.SNAPSHOT)] + steps


def echo_program():
    """recv on the connection, send the same bytes back, exit."""

    def do_recv(ctx: MockContext):
        return emit_call(ctx, Hypercall.RECV, 0, DATA_GPA, 4096)

    def do_send(ctx: MockContext):
        n = max(call_ret(ctx), 0)
        return emit_call(ctx, Hypercall.SEND, 0, DATA_GPA, n)

    return [do_recv, do_send, lambda ctx: emit_call(ctx, Hypercall.EXIT, 0)]


_HTTP_OK = 0
_HTTP_DONE = 1  # error response already prepared; skip remaining file steps


def _write_response(ctx: MockContext, status: str, body: bytes) -> int:
    head = (
        f"HTTP/1.0 {status}\r\n"
        f"Content-Length: {len(body)}\r\n"
        f"Content-Type: text/plain\r\n\r\n"
    ).encode("ascii")
    ctx.memory.write(OUT_GPA, head + body)
    ctx.memory.write_u64(FLAG_GPA + 8, len(head) + len(body))
    return len(head) + len(body)


def http_program():
    """Static-file GET handler: read,stat,open,read,write,close,exit."""

    def read_request(ctx: MockContext):
        ctx.memory.write(FLAG_GPA, bytes([_HTTP_OK]))
        return emit_call(ctx, Hypercall.READ, 0, DATA_GPA, 2048)

    def parse_and_stat(ctx: MockContext):
        n = max(call_ret(ctx), 0)
        request = ctx.memory.read(DATA_GPA, n)
        line = request.split(b"\r\n", 1)[0]
        parts = line.split(b" ")
        if len(parts) < 2 or parts[0] != b"GET":
            _write_response(ctx, "400 Bad Request", b"bad request\n")
            ctx.memory.write(FLAG_GPA, bytes([_HTTP_DONE]))
            return None
        path = parts[1].lstrip(b"/") or b"index.html"
        ctx.memory.write_u64(PATH_GPA - 8, len(path))
        ctx.memory.write(PATH_GPA, path)
        return emit_call(ctx, Hypercall.STAT, PATH_GPA, len(path), STAT_GPA)

    def open_file(ctx: MockContext):
        if ctx.memory.read(FLAG_GPA, 1)[0] != _HTTP_OK:
            return None
        ret = call_ret(ctx)
        if ret < 0:
            status = "403 Forbidden" if ret == -13 else "404 Not Found"
            _write_response(ctx, status, b"no such file\n")
            ctx.memory.write(FLAG_GPA, bytes([_HTTP_DONE]))
            return None
        path_len = ctx.memory.read_u64(PATH_GPA - 8)
        return emit_call(ctx, Hypercall.OPEN, PATH_GPA, path_len, 0)

    def read_file(ctx: MockContext):
        if ctx.memory.read(FLAG_GPA, 1)[0] != _HTTP_OK:
            return None
        fd = call_ret(ctx)
        if fd < 0:
            _write_response(ctx, "404 Not Found", b"no such file\n")
            ctx.memory.write(FLAG_GPA, bytes([_HTTP_DONE]))
            return None
        ctx.memory.write_u64(FLAG_GPA + 16, fd)
        size = ctx.memory.read_u64(STAT_GPA)
        return emit_call(ctx, Hypercall.READ, fd, DATA_GPA, min(size, 8192))

    def write_response(ctx: MockContext):
        if ctx.memory.read(FLAG_GPA, 1)[0] != _HTTP_OK:
            total = ctx.memory.read_u64(FLAG_GPA + 8)
            return emit_call(ctx, Hypercall.WRITE, 0, OUT_GPA, total)
        n = max(call_ret(ctx), 0)
        body = ctx.memory.read(DATA_GPA, n)
        total = _write_response(ctx, "200 OK", body)
        return emit_call(ctx, Hypercall.WRITE, 0, OUT_GPA, total)

    def close_file(ctx: MockContext):
        if ctx.memory.read(FLAG_GPA, 1)[0] != _HTTP_OK:
            return None
        fd = ctx.memory.read_u64(FLAG_GPA + 16)
        return emit_call(ctx, Hypercall.CLOSE, fd)

    return [
        read_request,
        parse_and_stat,
        open_file,
        read_file,
        write_response,
        close_file,
        lambda ctx: emit_call(ctx, Hypercall.EXIT, 0),
    ]


def base64_init_heavy_program(alloc_markers: int = 16):
    """Synthetic init-heavy workload: many allocation markers, snapshot,
    get_data, encode, return_data, exit.

    With snapshotting enabled, only the first invocation emits the
    allocation markers; restored invocations resume after the snapshot.
    """

    def marker_step(ctx: MockContext):
        return emit_call(ctx, Hypercall.TIMESTAMP, ALLOC_MARKER)

    def get_input(ctx: MockContext):
        return emit_call(ctx, Hypercall.GET_DATA, DATA_GPA, 4096)

    def encode(ctx: MockContext):
        n = max(call_ret(ctx), 0)
        encoded = _b64(ctx.memory.read(DATA_GPA, n))
        ctx.memory.write(OUT_GPA, encoded)
        return emit_call(ctx, Hypercall.RETURN_DATA, OUT_GPA, len(encoded))

    return (
        [marker_step] * alloc_markers
        + [lambda ctx: emit_call(ctx, Hypercall.SNAPSHOT)]
        + [get_input, encode, lambda ctx: emit_call(ctx, Hypercall.EXIT, 0)]
    )


def hlt_program():
    return [VcpuExit.halt()]


def violator_program(nr: int, *args: int):
    """Issues one hypercall (presumably denied) and would then exit."""
    return [
        lambda ctx: emit_call(ctx, int(nr), *args),
        lambda ctx: emit_call(ctx, Hypercall.EXIT, 0),
    ]


def double_snapshot_program():
    """Issues snapshot twice; the second must terminate the virtine."""
    return [
        lambda ctx: emit_call(ctx, Hypercall.SNAPSHOT),
        lambda ctx: emit_call(ctx, Hypercall.SNAPSHOT),
        lambda ctx: emit_call(ctx, Hypercall.EXIT, 0),
    ]


STANDARD_PROGRAMS = {
    "hlt": hlt_program,
    "fib": fib_program,
    "fib-snapshot": fib_snapshot_program,
    "echo": echo_program,
    "http": http_program,
    "base64-init-heavy": base64_init_heavy_program,
    "double-snapshot": double_snapshot_program,
}


def register_standard_programs(backend: MockBackend) -> None:
    for name, factory in STANDARD_PROGRAMS.items():
        backend.register_program(name, factory)


def mock_image(name: str, mem_size: int = 64 * 1024,
               entry_mode: ProcessorMode = ProcessorMode.REAL16) -> VirtineImage:
    """Image whose payload is just the marker resolving a registered program."""
    return VirtineImage(name=name, code=mock_marker(name),
                        entry_mode=entry_mode, mem_size=mem_size)
