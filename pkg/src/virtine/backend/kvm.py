"""Hardware backend over the Linux kernel virtualization device.

Talks to /dev/kvm directly with ioctls (API version 12): one VM fd plus
one vCPU fd per context, guest memory in a single anonymous mmap
registered as slot 0, and the vCPU run area mmapped from the vCPU fd.

Register discipline: the Python-side RegisterFile is authoritative
between exits.  set_registers marks the cache dirty; run() pushes a dirty
cache before entry and always refreshes both register sets after the
exit, so the core never observes stale hardware state.

Guest-runaway protection: KVM_RUN blocks until the next exit, so a
deadline is enforced by pulsing a no-op signal at the vCPU thread, which
makes the ioctl fail with EINTR.  Call install_timeout_support() from the
main thread once (the CLI does) to arm this; without it, deadlines are
still checked between exits.
"""

import ctypes
import errno
import fcntl
import mmap
import os
import signal
import struct
import threading
import time

from virtine.backend.base import (
    Backend,
    BackendContext,
    GuestMemory,
    RegisterFile,
    Segment,
    VcpuExit,
    power_on_registers,
    validate_mem_size,
)
from virtine.errors import (
    AllocationFailure,
    GuestFault,
    VirtineTimeout,
    VirtualizationUnavailable,
)

KVM_DEVICE = "/dev/kvm"
KVM_API_VERSION = 12

# -- ioctl plumbing -----------------------------------------------------------

_IOC_WRITE = 1
_IOC_READ = 2


def _ioc(direction: int, nr: int, size: int) -> int:
    return (direction << 30) | (size << 16) | (0xAE << 8) | nr


KVM_GET_API_VERSION = _ioc(0, 0x00, 0)
KVM_CREATE_VM = _ioc(0, 0x01, 0)
KVM_CHECK_EXTENSION = _ioc(0, 0x03, 0)
KVM_GET_VCPU_MMAP_SIZE = _ioc(0, 0x04, 0)
KVM_CREATE_VCPU = _ioc(0, 0x41, 0)
KVM_SET_USER_MEMORY_REGION = _ioc(_IOC_WRITE, 0x46, 32)
KVM_RUN = _ioc(0, 0x80, 0)
KVM_GET_REGS = _ioc(_IOC_READ, 0x81, 144)
KVM_SET_REGS = _ioc(_IOC_WRITE, 0x82, 144)
KVM_GET_SREGS = _ioc(_IOC_READ, 0x83, 312)
KVM_SET_SREGS = _ioc(_IOC_WRITE, 0x84, 312)
KVM_GET_MP_STATE = _ioc(_IOC_READ, 0x98, 4)
KVM_SET_MP_STATE = _ioc(_IOC_WRITE, 0x99, 4)

KVM_MP_STATE_RUNNABLE = 0

# kvm_run exit reasons
KVM_EXIT_IO = 2
KVM_EXIT_HLT = 5
KVM_EXIT_MMIO = 6
KVM_EXIT_SHUTDOWN = 8
KVM_EXIT_FAIL_ENTRY = 9
KVM_EXIT_INTR = 10
KVM_EXIT_INTERNAL_ERROR = 17

KVM_EXIT_IO_IN = 0
KVM_EXIT_IO_OUT = 1

_RUN_EXIT_REASON_OFF = 8
_RUN_UNION_OFF = 32

_libc = ctypes.CDLL(None, use_errno=True)

_GPR_ORDER = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rbp",
              "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
_REGS_STRUCT = struct.Struct("<18Q")  # GPRs + rip + rflags
_SEGMENT_STRUCT = struct.Struct("<QIH10B")  # 24 bytes
_DTABLE_STRUCT = struct.Struct("<QH6x")     # 16 bytes
_SREG_SEGMENTS = ("cs", "ds", "es", "fs", "gs", "ss", "tr", "ldt")
_MODELED_SEGMENTS = ("cs", "ds", "es", "ss")

_KICK_SIGNAL = signal.SIGURG
_timeout_support = False


def install_timeout_support() -> bool:
    """Arm the vCPU kick signal; must run on the main thread."""
    global _timeout_support
    if _timeout_support:
        return True
    if threading.current_thread() is not threading.main_thread():
        return False
    signal.signal(_KICK_SIGNAL, lambda *_: None)
    signal.siginterrupt(_KICK_SIGNAL, True)
    _timeout_support = True
    return True


def kvm_available() -> bool:
    if not os.path.exists(KVM_DEVICE) or not os.access(KVM_DEVICE, os.R_OK | os.W_OK):
        return False
    try:
        fd = os.open(KVM_DEVICE, os.O_RDWR | os.O_CLOEXEC)
    except OSError:
        return False
    try:
        return fcntl.ioctl(fd, KVM_GET_API_VERSION) == KVM_API_VERSION
    except OSError:
        return False
    finally:
        os.close(fd)


def decode_run_exit(run) -> VcpuExit:
    """Translate a vCPU run area (mmap or bytes) into a VcpuExit."""
    (reason,) = struct.unpack_from("<I", run, _RUN_EXIT_REASON_OFF)
    if reason == KVM_EXIT_HLT:
        return VcpuExit.halt()
    if reason == KVM_EXIT_IO:
        direction, size, port, count, data_offset = struct.unpack_from(
            "<BBHIQ", run, _RUN_UNION_OFF)
        if count != 1:
            return VcpuExit.fault(f"string I/O (count={count}) unsupported")
        if direction == KVM_EXIT_IO_OUT:
            data = bytes(run[data_offset:data_offset + size])
            value = int.from_bytes(data, "little")
            return VcpuExit.io_out(port, size, value)
        return VcpuExit.io_in(port, size)
    if reason == KVM_EXIT_SHUTDOWN:
        return VcpuExit.shutdown()
    if reason == KVM_EXIT_FAIL_ENTRY:
        (hw_reason,) = struct.unpack_from("<Q", run, _RUN_UNION_OFF)
        return VcpuExit.fault(f"entry failed (hardware reason {hw_reason:#x})")
    if reason == KVM_EXIT_INTERNAL_ERROR:
        (suberror,) = struct.unpack_from("<I", run, _RUN_UNION_OFF)
        return VcpuExit.fault(f"internal virtualization error (suberror {suberror})")
    if reason == KVM_EXIT_MMIO:
        return VcpuExit.fault("unexpected MMIO access")
    return VcpuExit.fault(f"unhandled exit reason {reason}")


def out_instruction_length(memory, regs: RegisterFile) -> int:
    """Length of the OUT instruction at the current instruction pointer.

    Only the forms guests use are decoded: E6/E7 (imm8 port) and EE/EF
    (dx port), with optional 66/67 prefixes.
    """
    linear = regs.cs.base + regs.rip
    code = memory.read(linear, min(4, max(memory.size - linear, 0)))
    length = 0
    while length < len(code) and code[length] in (0x66, 0x67):
        length += 1
    if length >= len(code):
        raise GuestFault("cannot decode instruction at snapshot point")
    opcode = code[length]
    if opcode in (0xE6, 0xE7):
        return length + 2  # opcode + imm8 port
    if opcode in (0xEE, 0xEF):
        return length + 1
    raise GuestFault(
        f"snapshot hypercall must use an OUT instruction (found {opcode:#x})"
    )


class _VcpuKicker:
    """Pulses a signal at the vCPU thread once its deadline passes."""

    def __init__(self, tid: int, deadline: float):
        self._tid = tid
        self._deadline = deadline
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="virtine-vcpu-kicker")
        self._thread.start()

    def _loop(self) -> None:
        delay = max(self._deadline - time.monotonic(), 0.0)
        if self._stop.wait(delay):
            return
        while not self._stop.is_set():
            try:
                signal.pthread_kill(self._tid, _KICK_SIGNAL)
            except (ProcessLookupError, ValueError):
                return
            self._stop.wait(0.005)

    def cancel(self) -> None:
        self._stop.set()


class KvmContext(BackendContext):
    def __init__(self, backend: "KvmBackend", mem_size: int):
        self._vm_fd = -1
        self._vcpu_fd = -1
        self._run_mmap = None
        self._mem_mmap = None

        try:
            self._vm_fd = fcntl.ioctl(backend.kvm_fd, KVM_CREATE_VM, 0)
        except OSError as exc:
            raise AllocationFailure(f"could not create a virtual context: {exc}") from exc
        try:
            self._mem_mmap = mmap.mmap(
                -1, mem_size,
                prot=mmap.PROT_READ | mmap.PROT_WRITE,
                flags=mmap.MAP_SHARED | mmap.MAP_ANONYMOUS,
            )
            self.memory = GuestMemory(self._mem_mmap)
            region = struct.pack("<IIQQQ", 0, 0, 0, mem_size, self.memory.base)
            fcntl.ioctl(self._vm_fd, KVM_SET_USER_MEMORY_REGION, region)

            self._vcpu_fd = fcntl.ioctl(self._vm_fd, KVM_CREATE_VCPU, 0)
            run_size = fcntl.ioctl(backend.kvm_fd, KVM_GET_VCPU_MMAP_SIZE)
            self._run_mmap = mmap.mmap(self._vcpu_fd, run_size,
                                       prot=mmap.PROT_READ | mmap.PROT_WRITE,
                                       flags=mmap.MAP_SHARED)
        except OSError as exc:
            self.close()
            raise AllocationFailure(f"could not set up vCPU state: {exc}") from exc

        self._regs = power_on_registers()
        self._dirty = True
        self._push_registers()

    # -- register translation ------------------------------------------------

    def get_registers(self) -> RegisterFile:
        return self._regs.copy()

    def set_registers(self, regs: RegisterFile) -> None:
        regs.validate()
        self._regs = regs.copy()
        self._dirty = True

    def _push_registers(self) -> None:
        regs = self._regs
        raw = _REGS_STRUCT.pack(*(getattr(regs, name) for name in _GPR_ORDER),
                                regs.rip, regs.rflags)
        fcntl.ioctl(self._vcpu_fd, KVM_SET_REGS, raw)

        # Only cs/ds/es/ss, the descriptor tables, control registers, and
        # EFER are modeled; fs/gs/tr/ldt and the rest pass through.
        sregs = bytearray(fcntl.ioctl(self._vcpu_fd, KVM_GET_SREGS, bytes(312)))
        for i, name in enumerate(_SREG_SEGMENTS):
            if name not in _MODELED_SEGMENTS:
                continue
            seg: Segment = getattr(regs, name)
            _SEGMENT_STRUCT.pack_into(
                sregs, i * 24,
                seg.base, seg.limit, seg.selector,
                seg.type, seg.present, seg.dpl, seg.db, seg.s, seg.l, seg.g,
                seg.avl, 0 if seg.present else 1, 0,
            )
        _DTABLE_STRUCT.pack_into(sregs, 192, regs.gdt_base, regs.gdt_limit)
        struct.pack_into("<4Q", sregs, 224, regs.cr0, 0, regs.cr3, regs.cr4)
        struct.pack_into("<Q", sregs, 264, regs.efer)
        fcntl.ioctl(self._vcpu_fd, KVM_SET_SREGS, bytes(sregs))
        self._dirty = False

    def _pull_registers(self) -> None:
        raw = fcntl.ioctl(self._vcpu_fd, KVM_GET_REGS, bytes(144))
        values = _REGS_STRUCT.unpack(raw)
        for name, value in zip(_GPR_ORDER, values):
            setattr(self._regs, name, value)
        self._regs.rip, self._regs.rflags = values[16], values[17]

        sregs = fcntl.ioctl(self._vcpu_fd, KVM_GET_SREGS, bytes(312))
        for i, name in enumerate(_SREG_SEGMENTS):
            if name not in _MODELED_SEGMENTS:
                continue
            fields = _SEGMENT_STRUCT.unpack_from(sregs, i * 24)
            setattr(self._regs, name, Segment(
                base=fields[0], limit=fields[1], selector=fields[2],
                type=fields[3], present=fields[4], dpl=fields[5], db=fields[6],
                s=fields[7], l=fields[8], g=fields[9], avl=fields[10],
            ))
        self._regs.gdt_base, self._regs.gdt_limit = _DTABLE_STRUCT.unpack_from(sregs, 192)
        cr0, _, cr3, cr4 = struct.unpack_from("<4Q", sregs, 224)
        (efer,) = struct.unpack_from("<Q", sregs, 264)
        self._regs.cr0, self._regs.cr3, self._regs.cr4 = cr0, cr3, cr4
        self._regs.efer = efer
        self._dirty = False

    # -- execution -------------------------------------------------------------

    def run(self, deadline: float | None = None) -> VcpuExit:
        if self._dirty:
            self._push_registers()
        kicker = None
        if deadline is not None and _timeout_support:
            kicker = _VcpuKicker(threading.get_ident(), deadline)
        try:
            while True:
                ret = _libc.ioctl(self._vcpu_fd, KVM_RUN, 0)
                if ret == 0:
                    break
                err = ctypes.get_errno()
                if err == errno.EINTR or err == errno.EAGAIN:
                    if deadline is not None and time.monotonic() > deadline:
                        raise VirtineTimeout("guest exceeded its wall-clock budget")
                    continue
                raise GuestFault(f"vCPU run failed: {os.strerror(err)}")
        finally:
            if kicker is not None:
                kicker.cancel()
        self._pull_registers()
        return self._decode_exit()

    def _decode_exit(self) -> VcpuExit:
        return decode_run_exit(self._run_mmap)

    def snapshot_registers(self) -> RegisterFile:
        """Post-instruction state for a snapshot taken at an OUT exit.

        The kernel leaves rip on the trapping OUT until the vCPU
        re-enters, so advance past it here.
        """
        regs = self._regs.copy()
        regs.rip += out_instruction_length(self.memory, regs)
        return regs

    def reset(self) -> None:
        self.memory.zero()
        self.set_registers(power_on_registers())
        try:
            fcntl.ioctl(self._vcpu_fd, KVM_SET_MP_STATE, struct.pack("<I", KVM_MP_STATE_RUNNABLE))
        except OSError:
            pass  # no in-kernel irqchip: mp_state is not tracked

    def close(self) -> None:
        if self._run_mmap is not None:
            self._run_mmap.close()
            self._run_mmap = None
        if self._vcpu_fd >= 0:
            os.close(self._vcpu_fd)
            self._vcpu_fd = -1
        if self._mem_mmap is not None:
            self.memory = None
            self._mem_mmap.close()
            self._mem_mmap = None
        if self._vm_fd >= 0:
            os.close(self._vm_fd)
            self._vm_fd = -1


class KvmBackend(Backend):
    """Hardware-virtualized contexts on the host kernel's VM interface."""

    name = "kvm"

    def __init__(self):
        if not os.path.exists(KVM_DEVICE):
            raise VirtualizationUnavailable(f"{KVM_DEVICE} does not exist")
        try:
            self.kvm_fd = os.open(KVM_DEVICE, os.O_RDWR | os.O_CLOEXEC)
        except OSError as exc:
            raise VirtualizationUnavailable(f"cannot open {KVM_DEVICE}: {exc}") from exc
        version = fcntl.ioctl(self.kvm_fd, KVM_GET_API_VERSION)
        if version != KVM_API_VERSION:
            os.close(self.kvm_fd)
            raise VirtualizationUnavailable(
                f"unsupported virtualization API version {version} (need {KVM_API_VERSION})"
            )

    def create_context(self, mem_size: int) -> KvmContext:
        validate_mem_size(mem_size)
        return KvmContext(self, mem_size)

    def close(self) -> None:
        if self.kvm_fd >= 0:
            os.close(self.kvm_fd)
            self.kvm_fd = -1

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass
