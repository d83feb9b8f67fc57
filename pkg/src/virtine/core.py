"""Virtine lifecycle engine.

Owns the shell pool (reuse plus synchronous or background cleaning),
snapshot capture/restore, and the synchronous run loop that turns an image
plus argument bytes into a return value.

Cleaning is the no-leak barrier: a shell is handed out only after every
guest byte reads zero and the registers are back at power-on state, no
matter how the previous occupant ended.
"""

import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from virtine import platform
from virtine.backend.base import Backend, BackendContext, ExitKind, RegisterFile
from virtine.errors import (
    ArgumentTooLarge,
    GuestFault,
    PolicyViolation,
    SizeMismatch,
    SnapshotAlreadyTaken,
    StaleShell,
    VirtineTimeout,
)
from virtine.hypercall import (
    HYPERCALL_PORT,
    Continue,
    ExecutionState,
    Exited,
    FdTable,
    HypercallPolicy,
    Violation,
    dispatch,
)
from virtine.platform import ARG_REGION_SIZE, IMAGE_BASE, PlatformLayout, ProcessorMode

log = logging.getLogger(__name__)

NO_SNAPSHOT_ENV = "VIRTINE_NO_SNAPSHOT"
DEFAULT_TIMEOUT = 1.0
DEFAULT_POOL_CAPACITY = 8


def snapshots_disabled_by_env() -> bool:
    return os.environ.get(NO_SNAPSHOT_ENV, "") == "1"


@dataclass(frozen=True)
class VirtineImage:
    """Flat guest binary plus the state needed to enter it."""

    name: str
    code: bytes
    entry_mode: ProcessorMode
    mem_size: int
    load_gpa: int = IMAGE_BASE

    def __post_init__(self):
        from virtine.backend.base import validate_mem_size

        validate_mem_size(self.mem_size)
        if self.load_gpa != IMAGE_BASE:
            raise ValueError(f"images load at the fixed base {IMAGE_BASE:#x}")
        if self.load_gpa + len(self.code) > self.mem_size:
            raise ValueError("image does not fit in its declared memory size")

    @staticmethod
    def from_file(path, name: str | None = None, *,
                  entry_mode: ProcessorMode = ProcessorMode.LONG64,
                  mem_size: int = 1 << 20) -> "VirtineImage":
        from pathlib import Path

        data = Path(path).read_bytes()
        return VirtineImage(name=name or os.path.basename(str(path)), code=data,
                            entry_mode=entry_mode, mem_size=mem_size)


class ShellState(Enum):
    CLEAN = "clean"
    LOADED = "loaded"
    RUNNING = "running"
    DIRTY = "dirty"


class CleanMode(Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass
class VirtineShell:
    """One reusable virtual hardware context with lifecycle state."""

    ctx: BackendContext
    mem_size: int
    state: ShellState = ShellState.CLEAN
    generation: int = 0
    fd_table: FdTable = field(default_factory=FdTable)


class ShellLease:
    """Exclusive handle to an acquired shell.

    The pool bumps the shell's generation on release, so a stale lease can
    never reach the recycled shell.
    """

    def __init__(self, shell: VirtineShell):
        self._shell = shell
        self._generation = shell.generation

    @property
    def shell(self) -> VirtineShell:
        if self._generation != self._shell.generation:
            raise StaleShell("shell was released; this lease is no longer valid")
        return self._shell

    @property
    def mem_size(self) -> int:
        return self.shell.mem_size

    @property
    def state(self) -> ShellState:
        return self.shell.state

    def read_guest(self, gpa: int, length: int) -> bytes:
        return self.shell.ctx.read_guest(gpa, length)

    def write_guest(self, gpa: int, data) -> None:
        self.shell.ctx.write_guest(gpa, data)

    def get_registers(self) -> RegisterFile:
        return self.shell.ctx.get_registers()

    def set_registers(self, regs: RegisterFile) -> None:
        self.shell.ctx.set_registers(regs)

    def run(self, deadline: float | None = None):
        shell = self.shell
        shell.state = ShellState.RUNNING
        return shell.ctx.run(deadline)


@dataclass
class PoolStats:
    created: int = 0
    reused: int = 0
    cleaned_sync: int = 0
    cleaned_async: int = 0
    destroyed: int = 0
    acquires: int = 0


class ShellPool:
    """Thread-safe pool of clean shells, bucketed by exact memory size."""

    def __init__(self, backend: Backend, capacity: int = DEFAULT_POOL_CAPACITY,
                 release_mode: CleanMode = CleanMode.SYNC):
        self.backend = backend
        self.capacity = capacity
        self.release_mode = release_mode
        self.stats = PoolStats()
        self._lock = threading.Lock()
        self._clean: dict[int, deque[VirtineShell]] = {}
        self._dirty: dict[int, deque[VirtineShell]] = {}
        self._in_flight = 0
        self._cleaning = 0
        self._cleaner: threading.Thread | None = None
        self._cleaner_wake = threading.Condition(self._lock)
        self._closed = False

    # -- acquire / release ---------------------------------------------------

    def acquire(self, mem_size: int) -> ShellLease:
        """Return a Clean shell of exactly `mem_size` bytes.

        Prefers a pooled clean shell; steals and synchronously cleans a
        dirty one rather than ever skipping the clean barrier; creates
        fresh as a last resort.
        """
        shell = None
        needs_clean = False
        with self._lock:
            self.stats.acquires += 1
            bucket = self._clean.get(mem_size)
            if bucket:
                shell = bucket.popleft()
                self.stats.reused += 1
            else:
                dirty = self._dirty.get(mem_size)
                if dirty:
                    shell = dirty.popleft()
                    needs_clean = True
                    self.stats.reused += 1
                    self.stats.cleaned_sync += 1
            if shell is not None:
                self._in_flight += 1
        if shell is not None:
            if needs_clean:
                self._clean_shell(shell)
            return ShellLease(shell)

        ctx = self.backend.create_context(mem_size)
        shell = VirtineShell(ctx=ctx, mem_size=mem_size)
        with self._lock:
            self.stats.created += 1
            self._in_flight += 1
        return ShellLease(shell)

    def release(self, lease: ShellLease, mode: CleanMode | None = None) -> None:
        shell = lease.shell  # raises StaleShell on double release
        # Whatever the caller did with the shell, treat it as dirty; the
        # clean barrier is unconditional.
        shell.state = ShellState.DIRTY
        mode = mode or self.release_mode
        shell.generation += 1

        if mode is CleanMode.SYNC:
            self._clean_shell(shell)
            with self._lock:
                self._in_flight -= 1
                self.stats.cleaned_sync += 1
                self._enqueue(self._clean, shell)
        else:
            with self._lock:
                self._in_flight -= 1
                if not self._enqueue(self._dirty, shell):
                    return
                self._ensure_cleaner()
                self._cleaner_wake.notify()

    def _enqueue(self, table: dict[int, deque], shell: VirtineShell) -> bool:
        """Enqueue under capacity; destroy (and count) on overflow."""
        if self._pooled_count() >= self.capacity or self._closed:
            self.stats.destroyed += 1
            self.backend.destroy_context(shell.ctx)
            return False
        table.setdefault(shell.mem_size, deque()).append(shell)
        return True

    def _pooled_count(self) -> int:
        return (sum(len(q) for q in self._clean.values())
                + sum(len(q) for q in self._dirty.values())
                + self._cleaning)

    def _clean_shell(self, shell: VirtineShell) -> None:
        """Zero memory, reset registers, drop any host resources."""
        shell.fd_table.close_all()
        shell.ctx.reset()
        shell.state = ShellState.CLEAN

    # -- background cleaner ----------------------------------------------------

    def _ensure_cleaner(self) -> None:
        if self._cleaner is None or not self._cleaner.is_alive():
            self._cleaner = threading.Thread(target=self._cleaner_loop,
                                             name="virtine-shell-cleaner", daemon=True)
            self._cleaner.start()

    def _cleaner_loop(self) -> None:
        while True:
            with self._lock:
                shell = None
                for bucket in self._dirty.values():
                    if bucket:
                        shell = bucket.popleft()
                        break
                if shell is None:
                    if self._closed:
                        return
                    self._cleaner_wake.wait(timeout=0.1)
                    continue
                self._cleaning += 1
            self._clean_shell(shell)
            with self._lock:
                self._cleaning -= 1
                self.stats.cleaned_async += 1
                self._enqueue(self._clean, shell)

    # -- maintenance -----------------------------------------------------------

    def drain(self, timeout: float = 5.0) -> None:
        """Wait until no dirty shells remain queued or mid-clean."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                pending = sum(len(q) for q in self._dirty.values()) + self._cleaning
            if not pending:
                return
            time.sleep(0.001)
        raise TimeoutError("async cleaner did not drain in time")

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._cleaner_wake.notify_all()
            shells = [s for q in self._clean.values() for s in q]
            shells += [s for q in self._dirty.values() for s in q]
            self._clean.clear()
            self._dirty.clear()
        for shell in shells:
            self.backend.destroy_context(shell.ctx)
        if self._cleaner is not None:
            self._cleaner.join(timeout=2.0)

    def __enter__(self) -> "ShellPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def debug_counts(self) -> dict:
        with self._lock:
            return {
                "clean": sum(len(q) for q in self._clean.values()),
                "dirty": sum(len(q) for q in self._dirty.values()),
                "cleaning": self._cleaning,
                "in_flight": self._in_flight,
                "destroyed": self.stats.destroyed,
                "created": self.stats.created,
            }

    def assert_disjoint_backing(self) -> None:
        """No two pooled shells may share host memory."""
        with self._lock:
            shells = [s for q in self._clean.values() for s in q]
            shells += [s for q in self._dirty.values() for s in q]
        ranges = sorted(s.ctx.memory.host_range() for s in shells)
        for (a_start, a_end), (b_start, _) in zip(ranges, ranges[1:]):
            if a_end > b_start:
                raise AssertionError("pooled shells share backing memory")


# -- snapshots -----------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    """Deep copy of guest memory and registers at the capture point."""

    source_image: str
    memory_image: bytes
    regs: RegisterFile


class SnapshotStore:
    """One snapshot per image name; the second capture attempt fails."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_image: dict[str, Snapshot] = {}

    def has(self, name: str) -> bool:
        with self._lock:
            return name in self._by_image

    def get(self, name: str) -> Snapshot | None:
        with self._lock:
            return self._by_image.get(name)

    def put(self, snapshot: Snapshot) -> None:
        with self._lock:
            if snapshot.source_image in self._by_image:
                raise SnapshotAlreadyTaken(snapshot.source_image)
            self._by_image[snapshot.source_image] = snapshot

    def discard(self, name: str) -> None:
        with self._lock:
            self._by_image.pop(name, None)


def take_snapshot(lease: ShellLease, image_name: str) -> Snapshot:
    """Capture the running shell's full memory and register state."""
    shell = lease.shell
    if shell.state is not ShellState.RUNNING:
        raise GuestFault("snapshots are taken at a guest snapshot hypercall, while running")
    memory = lease.read_guest(0, shell.mem_size)
    return Snapshot(source_image=image_name, memory_image=memory,
                    regs=shell.ctx.snapshot_registers())


def restore(lease: ShellLease, snapshot: Snapshot) -> None:
    """Make the shell bit-identical to the snapshot; state becomes Loaded.

    Idempotent: re-restoring a just-restored (Loaded, never run) shell is
    permitted and equivalent to a single restore.
    """
    shell = lease.shell
    if shell.state not in (ShellState.CLEAN, ShellState.LOADED):
        raise GuestFault("restore requires a clean (or freshly loaded) shell")
    if len(snapshot.memory_image) != shell.mem_size:
        raise SizeMismatch(
            f"snapshot of {len(snapshot.memory_image):#x} bytes "
            f"does not fit shell of {shell.mem_size:#x}"
        )
    lease.write_guest(0, snapshot.memory_image)
    lease.set_registers(snapshot.regs.copy())
    shell.state = ShellState.LOADED


# -- image loading ----------------------------------------------------------------

def load_image(lease: ShellLease, image: VirtineImage, args_len: int = 0,
               layout: PlatformLayout | None = None) -> None:
    """Write the image and synthesize entry state for its mode."""
    shell = lease.shell
    layout = layout or PlatformLayout()
    lease.write_guest(image.load_gpa, image.code)
    regs = platform.synthesize(shell.ctx.memory, image.entry_mode, layout,
                               image_len=len(image.code), args_len=args_len)
    lease.set_registers(regs)
    shell.state = ShellState.LOADED


# -- run loop -----------------------------------------------------------------

@dataclass
class ReturnValue:
    """Bytes a virtine handed back, plus how the run ended."""

    data: bytes
    exit_code: int | None
    hypercalls: tuple[int, ...]
    milestones: tuple[tuple[int, int], ...] = ()

    def __bytes__(self) -> bytes:
        return self.data


def run_virtine(pool: ShellPool, image: VirtineImage, args: bytes = b"",
                policy: HypercallPolicy | None = None, *,
                snapshots: SnapshotStore | None = None,
                snapshot_enabled: bool = True,
                streams: dict[int, object] | None = None,
                timeout: float = DEFAULT_TIMEOUT,
                release_mode: CleanMode | None = None,
                layout: PlatformLayout | None = None) -> ReturnValue:
    """Run one function invocation in a fresh (or restored) virtine.

    Blocking and synchronous: acquires a shell, enters the guest, services
    hypercall exits under `policy`, and returns the bytes the guest passed
    to `return_data`.  The shell is always released and cleaned, including
    on violations, faults, and timeouts.
    """
    policy = policy or HypercallPolicy.deny_all()
    args = bytes(args)
    if len(args) > ARG_REGION_SIZE:
        raise ArgumentTooLarge(f"{len(args)} byte argument exceeds the {ARG_REGION_SIZE} byte region")
    layout = layout or PlatformLayout()
    layout.check_disjoint(image.entry_mode, len(image.code), len(args))

    use_snapshots = (snapshot_enabled and snapshots is not None
                     and not snapshots_disabled_by_env())
    deadline = time.monotonic() + timeout

    lease = pool.acquire(image.mem_size)
    state = ExecutionState(
        memory=lease.shell.ctx.memory,
        policy=policy,
        input_data=args,
        fd_table=lease.shell.fd_table,
        image_name=image.name,
    )
    if streams:
        for fd, resource in streams.items():
            state.fd_table.install(fd, resource)
    if use_snapshots:
        state.snapshot_exists = lambda: snapshots.has(image.name)
        state.snapshot_hook = lambda: _capture_snapshot(snapshots, lease, image.name)

    violation: Violation | None = None
    fault: str | None = None
    timed_out = False
    try:
        snap = snapshots.get(image.name) if use_snapshots else None
        if snap is not None and len(snap.memory_image) == image.mem_size:
            restore(lease, snap)
        else:
            load_image(lease, image, args_len=len(args), layout=layout)
        if args:
            lease.write_guest(layout.arg_base, args)

        while True:
            if time.monotonic() > deadline:
                timed_out = True
                break
            try:
                exit_ = lease.run(deadline)
            except VirtineTimeout:
                timed_out = True
                break
            kind = exit_.kind
            if kind is ExitKind.HALT:
                break
            if kind is ExitKind.IO_OUT and exit_.port == HYPERCALL_PORT:
                result = dispatch(exit_, state)
                if isinstance(result, Continue):
                    continue
                if isinstance(result, Exited):
                    break
                violation = result
                break
            if kind in (ExitKind.IO_OUT, ExitKind.IO_IN):
                fault = f"unhandled guest I/O on port {exit_.port:#x}"
                break
            if kind is ExitKind.SHUTDOWN:
                fault = "guest shut down (triple fault)"
                break
            fault = exit_.detail or "guest fault"
            break
    finally:
        pool.release(lease, mode=release_mode)

    if violation is not None:
        raise PolicyViolation(violation.nr, violation.reason)
    if timed_out:
        raise VirtineTimeout(f"virtine {image.name!r} exceeded its {timeout}s budget")
    if fault is not None:
        raise GuestFault(fault)
    return ReturnValue(
        data=state.return_data or b"",
        exit_code=state.exit_code,
        hypercalls=tuple(state.trace),
        milestones=tuple(state.milestones),
    )


def _capture_snapshot(store: SnapshotStore, lease: ShellLease, image_name: str) -> int:
    from virtine.errors import MalformedFrame

    snapshot = take_snapshot(lease, image_name)
    try:
        store.put(snapshot)
    except SnapshotAlreadyTaken as exc:
        # Lost a race with a concurrent first execution: same outcome as
        # any other duplicate snapshot call.
        raise MalformedFrame(f"snapshot already captured for {image_name!r}") from exc
    return 0
