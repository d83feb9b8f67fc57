"""Serialized cycle counter with a calibrated nanosecond conversion.

On x86-64 the counter is the processor timestamp counter read through a
tiny executable code page (lfence; rdtsc; lfence), so measurements are in
real cycles.  Elsewhere (or when executable mappings are denied) it falls
back to the monotonic clock with a 1 cycle/ns rate, and says so.

Timer overhead is measured (minimum of back-to-back deltas) and exposed
so experiments can subtract it.
"""

import ctypes
import mmap
import platform as host_platform
import time

# lfence; rdtsc; lfence; shl rdx,32; or rax,rdx; ret
_RDTSC_CODE = bytes([
    0x0F, 0xAE, 0xE8,
    0x0F, 0x31,
    0x0F, 0xAE, 0xE8,
    0x48, 0xC1, 0xE2, 0x20,
    0x48, 0x09, 0xD0,
    0xC3,
])


class CycleClock:
    """now() in cycles; ns(cycles) via a rate calibrated at first use."""

    def __init__(self, calibration_time: float = 0.05):
        self._page = None
        self._fn = None
        self.is_tsc = False
        if host_platform.machine() == "x86_64":
            try:
                page = mmap.mmap(-1, mmap.PAGESIZE,
                                 prot=mmap.PROT_READ | mmap.PROT_WRITE | mmap.PROT_EXEC)
                page.write(_RDTSC_CODE)
                buf = (ctypes.c_char * len(_RDTSC_CODE)).from_buffer(page)
                fn_type = ctypes.CFUNCTYPE(ctypes.c_uint64)
                self._fn = fn_type(ctypes.addressof(buf))
                self._keepalive = (page, buf)
                self._fn()  # fail now, not mid-measurement
                self.is_tsc = True
            except (OSError, ValueError, PermissionError):
                self._fn = None
        self.cycles_per_ns = self._calibrate(calibration_time) if self.is_tsc else 1.0
        self.overhead_cycles = self._measure_overhead()

    def now(self) -> int:
        if self._fn is not None:
            return self._fn()
        return time.perf_counter_ns()

    def _calibrate(self, seconds: float) -> float:
        t0_ns = time.perf_counter_ns()
        c0 = self.now()
        time.sleep(seconds)
        c1 = self.now()
        t1_ns = time.perf_counter_ns()
        return (c1 - c0) / max(t1_ns - t0_ns, 1)

    def _measure_overhead(self) -> int:
        deltas = []
        for _ in range(1000):
            a = self.now()
            b = self.now()
            deltas.append(b - a)
        return min(deltas)

    def to_ns(self, cycles: float) -> float:
        return cycles / self.cycles_per_ns

    @property
    def unit(self) -> str:
        return "cycles" if self.is_tsc else "ns"


_default: CycleClock | None = None


def default_clock() -> CycleClock:
    global _default
    if _default is None:
        _default = CycleClock()
    return _default
