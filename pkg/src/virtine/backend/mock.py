"""Deterministic mock backend.

The mock does not emulate instructions.  A mock guest is a *scripted
program*: a list of steps, where each step is either a VcpuExit to hand to
the caller or a callable that may touch guest memory/registers and
optionally produce the next exit.  Scripts can be attached directly to a
context (`set_script`) or registered on the backend by name; in the latter
case the loaded image carries a `MOCK:<name>` marker at the fixed image
base and the context resolves the program from it.

The step cursor is persisted in the top 16 bytes of guest memory, so a
snapshot taken mid-program restores to the following step — the same
observable behavior a hardware snapshot gives a real guest.
"""

import mmap
import time
from typing import Callable, Iterable, Optional, Union

from virtine.backend.base import (
    Backend,
    BackendContext,
    GuestMemory,
    RegisterFile,
    VcpuExit,
    power_on_registers,
    validate_mem_size,
)
from virtine.errors import VirtineTimeout

MOCK_MAGIC = b"MOCK:"
MOCK_MARKER_GPA = 0x8000
_CURSOR_OFFSET = 16  # u64 step cursor lives at memory[size-16 : size-8]

Step = Union[VcpuExit, Callable[["MockContext"], Optional[VcpuExit]]]


def mock_marker(name: str) -> bytes:
    """Image payload that makes a context resolve a registered program."""
    return MOCK_MAGIC + name.encode("ascii") + b"\x00"


class MockContext(BackendContext):
    def __init__(self, backend: "MockBackend", mem_size: int):
        self._backend = backend
        # Anonymous mapping, same as the hardware backend's guest region.
        self._mem_mmap = mmap.mmap(-1, mem_size,
                                   prot=mmap.PROT_READ | mmap.PROT_WRITE,
                                   flags=mmap.MAP_SHARED | mmap.MAP_ANONYMOUS)
        self.memory = GuestMemory(self._mem_mmap)
        self._regs = power_on_registers()
        self._steps: list[Step] | None = None
        self._steps_from_marker = False

    # -- registers ---------------------------------------------------------

    def get_registers(self) -> RegisterFile:
        return self._regs.copy()

    def set_registers(self, regs: RegisterFile) -> None:
        regs.validate()
        self._regs = regs.copy()
        if regs.rip == MOCK_MARKER_GPA:
            # Entering at the image base restarts the program, exactly like
            # pointing a hardware context back at its entry point.  A
            # restore never does this: it carries the captured rip, so the
            # persisted cursor survives.
            self._store_cursor(0)
            if self._steps_from_marker:
                self._steps = None

    # -- scripting ---------------------------------------------------------

    def set_script(self, steps: Iterable[Step]) -> None:
        """Attach a program directly, bypassing the image marker."""
        self._steps = list(steps)
        self._steps_from_marker = False
        self._store_cursor(0)

    def _cursor_gpa(self) -> int:
        return self.memory.size - _CURSOR_OFFSET

    def _store_cursor(self, value: int) -> None:
        self.memory.write_u64(self._cursor_gpa(), value)

    def _load_cursor(self) -> int:
        return self.memory.read_u64(self._cursor_gpa())

    def _resolve_program(self) -> VcpuExit | None:
        """Look up the registered program named by the loaded image marker."""
        probe = self.memory.read(MOCK_MARKER_GPA, min(256, self.memory.size - MOCK_MARKER_GPA))
        if not probe.startswith(MOCK_MAGIC):
            return VcpuExit.fault("loaded image is not a mock program")
        end = probe.find(b"\x00", len(MOCK_MAGIC))
        if end < 0:
            return VcpuExit.fault("unterminated mock program name")
        name = probe[len(MOCK_MAGIC):end].decode("ascii", errors="replace")
        factory = self._backend.programs.get(name)
        if factory is None:
            return VcpuExit.fault(f"no mock program registered as {name!r}")
        self._steps = list(factory())
        self._steps_from_marker = True
        return None

    # -- execution ---------------------------------------------------------

    def run(self, deadline: float | None = None) -> VcpuExit:
        if deadline is not None and time.monotonic() > deadline:
            raise VirtineTimeout("mock guest exceeded its budget")
        if self._steps is None:
            fault = self._resolve_program()
            if fault is not None:
                return fault
        cursor = self._load_cursor()
        while cursor < len(self._steps):
            step = self._steps[cursor]
            cursor += 1
            # Persist before evaluating so a snapshot taken at this exit
            # resumes with the *next* step, like an advanced instruction
            # pointer would.  rip tracks the cursor for the same reason: a
            # snapshot must never look like a fresh entry at the image base.
            self._store_cursor(cursor)
            self._regs.rip = MOCK_MARKER_GPA + cursor
            if callable(step):
                exit_ = step(self)
                if exit_ is not None:
                    return exit_
            else:
                return step
            if deadline is not None and time.monotonic() > deadline:
                raise VirtineTimeout("mock guest exceeded its budget")
        return VcpuExit.fault("mock program exhausted")

    def reset(self) -> None:
        self.memory.zero()
        self._regs = power_on_registers()
        self._steps = None
        self._steps_from_marker = False

    def close(self) -> None:
        if self._mem_mmap is not None:
            self.memory = None
            self._mem_mmap.close()
            self._mem_mmap = None


class MockBackend(Backend):
    """Scripted exit generator plus plain memory; runs on any machine."""

    name = "mock"

    def __init__(self):
        self.programs: dict[str, Callable[[], Iterable[Step]]] = {}

    def register_program(self, name: str, factory: Callable[[], Iterable[Step]]) -> None:
        self.programs[name] = factory

    def create_context(self, mem_size: int) -> MockContext:
        validate_mem_size(mem_size)
        return MockContext(self, mem_size)
