"""Backend-independent virtual hardware types.

A backend provides contexts (guest memory plus a register file) and a
single run-until-exit primitive.  Everything above this layer — pooling,
snapshots, hypercall policy — is written against these types only, so the
hardware backend and the scripted mock are interchangeable.
"""

import ctypes
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum

from virtine.errors import OutOfBounds

PAGE_SIZE = 4096
MIN_MEM_SIZE = 64 * 1024
MAX_MEM_SIZE = 1 << 30

# cr0 bits
CR0_PE = 1 << 0
CR0_ET = 1 << 4
CR0_NE = 1 << 5
CR0_WP = 1 << 16
CR0_PG = 1 << 31
# cr4 bits
CR4_PAE = 1 << 5
# EFER bits
EFER_LME = 1 << 8
EFER_LMA = 1 << 10

GPR_NAMES = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rbp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)


def validate_mem_size(size: int) -> None:
    """Guest memory must be a power of two in [64KB, 1GB]."""
    if size < MIN_MEM_SIZE or size > MAX_MEM_SIZE or size & (size - 1):
        raise ValueError(
            f"guest memory size {size:#x} must be a power of two between "
            f"{MIN_MEM_SIZE:#x} and {MAX_MEM_SIZE:#x}"
        )


def buffer_address(buf) -> int:
    """Host virtual address of a writable buffer (bytearray or mmap)."""
    view = (ctypes.c_ubyte * len(buf)).from_buffer(buf)
    try:
        return ctypes.addressof(view)
    finally:
        del view


class GuestMemory:
    """Flat, contiguous guest-physical memory starting at 0.

    Every access is bounds-checked here; nothing above or below this class
    touches the backing buffer directly.
    """

    def __init__(self, buf):
        self._buf = buf
        self.size = len(buf)
        self.base = buffer_address(buf)

    def _check(self, gpa: int, length: int) -> None:
        if gpa < 0 or length < 0 or gpa + length > self.size:
            raise OutOfBounds(gpa, length, self.size)

    def read(self, gpa: int, length: int) -> bytes:
        self._check(gpa, length)
        return bytes(self._buf[gpa:gpa + length])

    def write(self, gpa: int, data) -> None:
        self._check(gpa, len(data))
        self._buf[gpa:gpa + len(data)] = bytes(data)

    def read_u64(self, gpa: int) -> int:
        self._check(gpa, 8)
        return struct.unpack_from("<Q", self._buf, gpa)[0]

    def write_u64(self, gpa: int, value: int) -> None:
        self._check(gpa, 8)
        struct.pack_into("<Q", self._buf, gpa, value & 0xFFFFFFFFFFFFFFFF)

    def zero(self) -> None:
        ctypes.memset(self.base, 0, self.size)

    def is_zero(self) -> bool:
        return bytes(self._buf) == b"\x00" * self.size

    def host_range(self) -> tuple[int, int]:
        """Host address interval backing this region (disjointness checks)."""
        return (self.base, self.base + self.size)


@dataclass
class Segment:
    """Cached segment register state (selector plus hidden descriptor part)."""

    selector: int = 0
    base: int = 0
    limit: int = 0xFFFF
    type: int = 0
    s: int = 0
    dpl: int = 0
    present: int = 0
    db: int = 0
    l: int = 0
    g: int = 0
    avl: int = 0


def _seg() -> Segment:
    return Segment()


@dataclass
class RegisterFile:
    """Host-side copy of a context's architectural registers."""

    rax: int = 0
    rbx: int = 0
    rcx: int = 0
    rdx: int = 0
    rsi: int = 0
    rdi: int = 0
    rsp: int = 0
    rbp: int = 0
    r8: int = 0
    r9: int = 0
    r10: int = 0
    r11: int = 0
    r12: int = 0
    r13: int = 0
    r14: int = 0
    r15: int = 0
    rip: int = 0
    rflags: int = 0x2
    cr0: int = CR0_ET
    cr3: int = 0
    cr4: int = 0
    efer: int = 0
    cs: Segment = field(default_factory=_seg)
    ds: Segment = field(default_factory=_seg)
    es: Segment = field(default_factory=_seg)
    ss: Segment = field(default_factory=_seg)
    gdt_base: int = 0
    gdt_limit: int = 0

    def validate(self) -> None:
        """Mode consistency: long mode needs PE+PG+PAE+LME; real mode forbids PG."""
        if self.cr0 & CR0_PG:
            if not self.cr0 & CR0_PE:
                raise ValueError("cr0.PG set without cr0.PE (real mode cannot page)")
            if not self.cr4 & CR4_PAE:
                raise ValueError("paging enabled without cr4.PAE")
            if not self.efer & EFER_LME:
                raise ValueError("paging enabled without EFER.LME (32-bit paging unsupported)")

    def copy(self) -> "RegisterFile":
        return replace(
            self,
            cs=replace(self.cs),
            ds=replace(self.ds),
            es=replace(self.es),
            ss=replace(self.ss),
        )


def power_on_registers() -> RegisterFile:
    """The zeroed baseline every fresh or cleaned context starts from."""
    return RegisterFile()


class ExitKind(Enum):
    HALT = "halt"
    IO_OUT = "io_out"
    IO_IN = "io_in"
    SHUTDOWN = "shutdown"
    FAULT = "fault"


@dataclass(frozen=True)
class VcpuExit:
    """Reason a guest stopped; the backend <-> core contract."""

    kind: ExitKind
    port: int = 0
    width: int = 0
    value: int = 0
    detail: str = ""

    @staticmethod
    def halt() -> "VcpuExit":
        return VcpuExit(ExitKind.HALT)

    @staticmethod
    def io_out(port: int, width: int, value: int) -> "VcpuExit":
        return VcpuExit(ExitKind.IO_OUT, port=port, width=width, value=value)

    @staticmethod
    def io_in(port: int, width: int) -> "VcpuExit":
        return VcpuExit(ExitKind.IO_IN, port=port, width=width)

    @staticmethod
    def shutdown() -> "VcpuExit":
        return VcpuExit(ExitKind.SHUTDOWN)

    @staticmethod
    def fault(detail: str) -> "VcpuExit":
        return VcpuExit(ExitKind.FAULT, detail=detail)


class BackendContext(ABC):
    """One virtual hardware context: guest memory plus registers.

    Single-threaded use: exactly one thread may run/read/write a context at
    a time, though ownership may move between threads between operations.
    """

    memory: GuestMemory

    @abstractmethod
    def run(self, deadline: float | None = None) -> VcpuExit:
        """Execute the guest until the next exit.

        The register cache is pushed to the hardware before entry and
        refreshed after the exit.  `deadline` is a time.monotonic() value;
        exceeding it raises VirtineTimeout.
        """

    @abstractmethod
    def get_registers(self) -> RegisterFile:
        ...

    @abstractmethod
    def set_registers(self, regs: RegisterFile) -> None:
        ...

    def snapshot_registers(self) -> RegisterFile:
        """Register state a snapshot should capture.

        Backends whose exits leave the instruction pointer on the trapping
        instruction override this to return post-instruction state, so a
        restored guest resumes *after* the hypercall that took the snapshot.
        """
        return self.get_registers()

    @abstractmethod
    def reset(self) -> None:
        """Zero all guest memory and restore the power-on register file."""

    def close(self) -> None:
        """Release host resources; the context is unusable afterwards."""

    def read_guest(self, gpa: int, length: int) -> bytes:
        return self.memory.read(gpa, length)

    def write_guest(self, gpa: int, data) -> None:
        self.memory.write(gpa, data)


class Backend(ABC):
    """Factory for contexts on one virtualization facility."""

    name: str = "abstract"

    @abstractmethod
    def create_context(self, mem_size: int) -> BackendContext:
        ...

    def destroy_context(self, ctx: BackendContext) -> None:
        ctx.close()
