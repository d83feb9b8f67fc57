"""Benchmark experiments: context-creation ladder, boot breakdown, mode
latency, snapshot amortization, image-size sweep, and HTTP service cost.

Every experiment returns Measurement rows (one unit per experiment).
Hardware-specific variants run on whatever backend is passed in; when that
backend is not hardware, variant names carry a ":mock" suffix so desk
numbers are never mistaken for hardware numbers.

Cycle counts from any particular machine are not comparable across hosts;
downstream checks assert orderings and ratios only.
"""

import ctypes
import os
import shutil
import socket
import struct
import subprocess
import tempfile
import threading
import time
from pathlib import Path

from virtine.bench.clock import CycleClock, default_clock
from virtine.bench.stats import DEFAULT_TRIALS, Measurement
from virtine.client import (
    ServiceConfig,
    image_from_manifest,
    policy_from_manifest,
    serve_http,
)
from virtine.core import (
    CleanMode,
    ShellPool,
    SnapshotStore,
    VirtineImage,
    run_virtine,
)
from virtine.errors import VirtineError
from virtine.hypercall import Hypercall, HypercallPolicy
from virtine.platform import IMAGE_BASE, ProcessorMode

KB = 1024
MB = 1024 * KB

HLT_CODE = b"\xf4"

# Milestone ids shared with the guest boot shim.
MILESTONE_CALIBRATE = 0x00
MILESTONE_FIRST_INSTRUCTION = 0x01
MILESTONE_LGDT32 = 0x02
MILESTONE_PROTECTED_TRANSITION = 0x03
MILESTONE_LJMP32 = 0x04
MILESTONE_IDENT_MAP = 0x05
MILESTONE_LONG_TRANSITION = 0x06
MILESTONE_LJMP64 = 0x07
MILESTONE_ENTRY_C = 0x08
MILESTONE_RECV_DONE = 0x09
MILESTONE_SEND_DONE = 0x0A

MILESTONE_NAMES = {
    MILESTONE_FIRST_INSTRUCTION: "first-instruction",
    MILESTONE_LGDT32: "lgdt32",
    MILESTONE_PROTECTED_TRANSITION: "protected-transition",
    MILESTONE_LJMP32: "ljmp32",
    MILESTONE_IDENT_MAP: "ident-map",
    MILESTONE_LONG_TRANSITION: "long-transition",
    MILESTONE_LJMP64: "ljmp64",
}


def _label(variant: str, backend) -> str:
    return variant if backend.name == "kvm" else f"{variant}:{backend.name}"


def pin_measurement_thread() -> bool:
    """Pin the calling thread to its current CPU where the host allows it.

    Returns whether pinning took effect, so harnesses can record it.
    """
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
        return True
    except (AttributeError, OSError):
        return False


def hlt_image(backend, mem_size: int = 64 * KB) -> VirtineImage:
    """Minimal run-to-halt image for the backend in use."""
    if backend.name == "mock":
        from virtine.mockguests import mock_image

        return mock_image("hlt", mem_size=mem_size)
    return VirtineImage(name="hlt", code=HLT_CODE,
                        entry_mode=ProcessorMode.REAL16, mem_size=mem_size)


def _timeit(clock: CycleClock, fn) -> float:
    t0 = clock.now()
    fn()
    t1 = clock.now()
    return max(t1 - t0 - clock.overhead_cycles, 0)


# -- creation ladder ----------------------------------------------------------

def creation_ladder(backend, *, trials: int = DEFAULT_TRIALS,
                    clock: CycleClock | None = None, **_) -> list[Measurement]:
    """Latency to create/enter/exit each kind of execution context."""
    clock = clock or default_clock()
    rows: list[Measurement] = []
    experiment = "creation-ladder"

    def emit(variant, values):
        rows.extend(
            Measurement(experiment, variant, i, v, clock.unit)
            for i, v in enumerate(values)
        )

    def noop():
        pass

    emit("function", [_timeit(clock, noop) for _ in range(trials)])

    def thread_trial():
        t = threading.Thread(target=noop)
        t.start()
        t.join()

    emit("thread", [_timeit(clock, thread_trial) for _ in range(trials)])

    def fork_trial():
        pid = os.fork()
        if pid == 0:
            os._exit(0)
        os.waitpid(pid, 0)

    emit("process-fork", [_timeit(clock, fork_trial) for _ in range(trials)])

    true_bin = shutil.which("true") or "/bin/true"

    def spawn_trial():
        pid = os.posix_spawn(true_bin, [true_bin], {})
        os.waitpid(pid, 0)

    emit("process-spawn", [_timeit(clock, spawn_trial) for _ in range(trials)])

    from virtine import platform

    image = hlt_image(backend)

    def enter_and_halt(ctx, entry) -> None:
        ctx.write_guest(IMAGE_BASE, image.code)
        ctx.set_registers(entry.copy())
        exit_ = ctx.run()
        if exit_.kind.value != "halt":
            raise VirtineError(f"run-to-halt context stopped with {exit_}")

    def fresh_trial():
        ctx = backend.create_context(image.mem_size)
        entry = platform.synthesize(ctx.memory, image.entry_mode,
                                    image_len=len(image.code))
        enter_and_halt(ctx, entry)
        return ctx

    values = []
    for _ in range(trials):
        t0 = clock.now()
        ctx = fresh_trial()
        t1 = clock.now()
        values.append(max(t1 - t0 - clock.overhead_cycles, 0))
        ctx.close()
    emit(_label("fresh-create", backend), values)

    # Bare run-resume: an existing context re-entered at the image.
    ctx = backend.create_context(image.mem_size)
    entry = platform.synthesize(ctx.memory, image.entry_mode, image_len=len(image.code))
    enter_and_halt(ctx, entry)
    emit(_label("run-resume", backend),
         [_timeit(clock, lambda: enter_and_halt(ctx, entry)) for _ in range(trials)])
    ctx.close()

    # Pooled variants do the same enter-to-halt work; only shell
    # provisioning (and for the sync variant, cleaning) differs.
    with ShellPool(backend, capacity=4) as pool:
        def pooled_trial(mode: CleanMode):
            lease = pool.acquire(image.mem_size)
            try:
                entry = platform.synthesize(lease.shell.ctx.memory, image.entry_mode,
                                            image_len=len(image.code))
                enter_and_halt(lease.shell.ctx, entry)
            finally:
                pool.release(lease, mode)

        pooled_trial(CleanMode.SYNC)  # warm the pool
        emit(_label("pool-cached", backend),
             [_timeit(clock, lambda: pooled_trial(CleanMode.SYNC)) for _ in range(trials)])

        values = []
        for _ in range(trials):
            values.append(_timeit(clock, lambda: pooled_trial(CleanMode.ASYNC)))
            pool.drain()  # cleaning cost stays off the timed path
        emit(_label("pool-cached-async", backend), values)

    return rows


# -- boot breakdown ------------------------------------------------------------

def _milestone_policy(clock: CycleClock) -> HypercallPolicy:
    def stamp(frame, state):
        state.milestones.append((frame.args[0], clock.now()))
        return 0

    return HypercallPolicy(
        allow=[Hypercall.TIMESTAMP, Hypercall.RETURN_DATA],
        handlers={Hypercall.TIMESTAMP: stamp},
    )


def boot_breakdown(backend, *, trials: int = DEFAULT_TRIALS,
                   clock: CycleClock | None = None,
                   manifest=None, **_) -> list[Measurement]:
    """Per-component boot cost from guest milestone hypercalls.

    Requires the guest boot-shim image; components are the deltas between
    consecutive milestone arrivals minus the measured hypercall round-trip
    (calibrated from back-to-back markers), minimum over all trials.
    """
    if manifest is None:
        raise VirtineError("boot-breakdown requires a guest image manifest")
    clock = clock or default_clock()
    image = image_from_manifest(manifest, "bootbench")
    policy = _milestone_policy(clock)

    component_mins: dict[str, float] = {}
    end_to_end: list[float] = []
    with ShellPool(backend, capacity=2) as pool:
        for _ in range(trials):
            t0 = clock.now()
            result = run_virtine(pool, image, policy=policy, timeout=5.0)
            t1 = clock.now()
            stamps = result.milestones
            calib = [ts for marker, ts in stamps if marker == MILESTONE_CALIBRATE]
            overhead = (calib[1] - calib[0]) if len(calib) >= 2 else 0
            seq = [(marker, ts) for marker, ts in stamps if marker != MILESTONE_CALIBRATE]
            prev_ts = calib[-1] if calib else t0
            for marker, ts in seq:
                name = MILESTONE_NAMES.get(marker)
                if name is None:
                    continue
                cost = max(ts - prev_ts - overhead, 0)
                prev_ts = ts
                if name not in component_mins or cost < component_mins[name]:
                    component_mins[name] = cost
            end_to_end.append(t1 - t0)

    rows = [
        Measurement("boot-breakdown", name, 0, value, clock.unit)
        for name, value in component_mins.items()
    ]
    rows.append(Measurement("boot-breakdown", "end-to-end", 0, min(end_to_end), clock.unit))
    return rows


# -- processor mode latency ------------------------------------------------------

MODE_WORKLOADS = {
    "real16": "fib16",
    "protected32": "fib32",
    "long64": "fib64",
}


def mode_latency(backend, *, trials: int = DEFAULT_TRIALS,
                 clock: CycleClock | None = None,
                 manifest=None, n: int = 20, **_) -> list[Measurement]:
    """Entry + fib(n) + exit latency for each processor mode."""
    if manifest is None:
        raise VirtineError("mode-latency requires a guest image manifest")
    clock = clock or default_clock()
    rows: list[Measurement] = []
    arg = struct.pack("<I", n)
    for mode_name, workload in MODE_WORKLOADS.items():
        image = image_from_manifest(manifest, workload)
        policy = policy_from_manifest(manifest, workload)
        with ShellPool(backend, capacity=2) as pool:
            for trial in range(trials):
                t0 = clock.now()
                result = run_virtine(pool, image, arg, policy, timeout=5.0)
                t1 = clock.now()
                value = int.from_bytes(result.data, "little", signed=True)
                if value != _fib_value(n):
                    raise VirtineError(
                        f"{workload} returned {value}, expected fib({n})")
                rows.append(Measurement("mode-latency", mode_name, trial,
                                        max(t1 - t0 - clock.overhead_cycles, 0),
                                        clock.unit))
    return rows


def _fib_value(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


# -- amortization ------------------------------------------------------------------

_NATIVE_FIB_SRC = "long fib(long n){ return n < 2 ? n : fib(n-1) + fib(n-2); }\n"


def _native_fib():
    """Compiled recursive fib when a C compiler exists, else Python."""
    cc = shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")
    if cc:
        tmp = Path(tempfile.mkdtemp(prefix="virtine-bench-"))
        src = tmp / "fib.c"
        lib_path = tmp / "libfib.so"
        src.write_text(_NATIVE_FIB_SRC)
        try:
            subprocess.run([cc, "-O2", "-shared", "-fPIC", "-o", str(lib_path), str(src)],
                           check=True, capture_output=True)
            lib = ctypes.CDLL(str(lib_path))
            lib.fib.restype = ctypes.c_long
            lib.fib.argtypes = [ctypes.c_long]
            return lib.fib, "native"
        except (subprocess.CalledProcessError, OSError):
            pass

    def py_fib(n):
        return n if n < 2 else py_fib(n - 1) + py_fib(n - 2)

    return py_fib, "native-py"


def amortization(backend, *, trials: int = DEFAULT_TRIALS,
                 clock: CycleClock | None = None,
                 manifest=None, max_n: int = 30, **_) -> list[Measurement]:
    """native vs virtine vs virtine+snapshot latency as fib(n) grows."""
    clock = clock or default_clock()
    rows: list[Measurement] = []
    native_fib, native_name = _native_fib()

    if manifest is not None and backend.name == "kvm":
        image = image_from_manifest(manifest, "fib64")
        policy = policy_from_manifest(manifest, "fib64")
    else:
        from virtine.mockguests import mock_image

        image = mock_image("fib-snapshot")
        policy = HypercallPolicy(allow=[Hypercall.RETURN_DATA, Hypercall.SNAPSHOT])

    for n in range(0, max_n + 1, 5):
        arg = struct.pack("<I", n)
        expected = _fib_value(n)

        for trial in range(trials):
            rows.append(Measurement("amortization", f"{native_name}:n={n}", trial,
                                    _timeit(clock, lambda: native_fib(n)), clock.unit))

        with ShellPool(backend, capacity=2) as pool:
            def plain():
                run_virtine(pool, image, arg, policy, timeout=10.0)

            for trial in range(trials):
                rows.append(Measurement("amortization", _label(f"virtine:n={n}", backend),
                                        trial, _timeit(clock, plain), clock.unit))

        with ShellPool(backend, capacity=2) as pool:
            store = SnapshotStore()

            def snap():
                result = run_virtine(pool, image, arg, policy, snapshots=store,
                                     timeout=10.0)
                assert int.from_bytes(result.data, "little", signed=True) == expected

            for trial in range(trials):
                rows.append(Measurement("amortization",
                                        _label(f"virtine+snapshot:n={n}", backend),
                                        trial, _timeit(clock, snap), clock.unit))
    return rows


# -- image size sweep --------------------------------------------------------------

def _pow2_at_least(n: int) -> int:
    size = 64 * KB
    while size < n:
        size *= 2
    return size


def image_size(backend, *, trials: int = DEFAULT_TRIALS,
               clock: CycleClock | None = None, **_) -> list[Measurement]:
    """Start-up latency for zero-padded run-to-halt images, 16KB to 16MB."""
    clock = clock or default_clock()
    rows: list[Measurement] = []

    size = 16 * KB
    while size <= 16 * MB:
        mem_size = _pow2_at_least(size + IMAGE_BASE)
        base = hlt_image(backend, mem_size=mem_size)
        code = base.code + b"\x00" * (size - len(base.code))
        ctx = backend.create_context(mem_size)
        from virtine import platform

        entry = platform.synthesize(ctx.memory, base.entry_mode, image_len=len(code))

        def startup():
            ctx.write_guest(IMAGE_BASE, code)
            ctx.set_registers(entry.copy())
            ctx.run()

        for _ in range(3):
            startup()  # absorb first-touch costs outside the timed loop

        variant = _label(f"{size // KB}KB", backend)
        for trial in range(trials):
            rows.append(Measurement("image-size", variant, trial,
                                    _timeit(clock, startup), clock.unit))
        ctx.close()
        size *= 2

    # Independent host copy-bandwidth reference into the same kind of
    # destination as guest memory (anonymous mapping).
    import mmap as mmap_mod

    src = bytes(16 * MB)
    dst = mmap_mod.mmap(-1, 16 * MB)

    def copy16():
        dst[0:16 * MB] = src

    copy16()  # fault the destination in before timing
    for trial in range(max(trials // 4, 20)):
        rows.append(Measurement("memcpy", "copy-16MB", trial,
                                _timeit(clock, copy16), clock.unit))
    dst.close()
    return rows


# -- HTTP service costs --------------------------------------------------------------

_HTTP_DOC = b"x" * 1024


def _native_http_server(docroot: Path):
    """Host-side handler producing the same bytes as the guest handler."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(("127.0.0.1", 0))
    listener.listen(64)
    listener.settimeout(0.2)
    stop = threading.Event()

    def loop():
        while not stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                try:
                    request = conn.recv(2048)
                    line = request.split(b"\r\n", 1)[0].split(b" ")
                    path = (docroot / line[1].lstrip(b"/").decode()) if len(line) > 1 else None
                    if path is None or not path.is_file():
                        body = b"no such file\n"
                        head = (f"HTTP/1.0 404 Not Found\r\nContent-Length: {len(body)}"
                                f"\r\nContent-Type: text/plain\r\n\r\n").encode()
                    else:
                        body = path.read_bytes()
                        head = (f"HTTP/1.0 200 OK\r\nContent-Length: {len(body)}"
                                f"\r\nContent-Type: text/plain\r\n\r\n").encode()
                    conn.sendall(head + body)
                except OSError:
                    pass
        listener.close()

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()

    class Handle:
        address = listener.getsockname()[:2]

        @staticmethod
        def shutdown():
            stop.set()
            thread.join(timeout=2.0)

    return Handle


def _http_image_and_backend(backend, manifest):
    if manifest is not None and backend.name == "kvm":
        return image_from_manifest(manifest, "http")
    from virtine.mockguests import mock_image

    return mock_image("http")


def _drive_http(address, duration: float, concurrency: int,
                clock: CycleClock) -> tuple[list[float], int, bytes]:
    latencies: list[float] = []
    lock = threading.Lock()
    stop = time.monotonic() + duration
    sample = []

    def worker():
        while time.monotonic() < stop:
            t0 = clock.now()
            try:
                with socket.create_connection(address, timeout=5) as s:
                    s.sendall(b"GET /index.html HTTP/1.0\r\n\r\n")
                    chunks = []
                    while True:
                        chunk = s.recv(4096)
                        if not chunk:
                            break
                        chunks.append(chunk)
            except OSError:
                continue
            t1 = clock.now()
            with lock:
                latencies.append(t1 - t0)
                if not sample:
                    sample.append(b"".join(chunks))

    threads = [threading.Thread(target=worker) for _ in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return latencies, len(latencies), (sample[0] if sample else b"")


def http_bench(backend, *, trials: int = DEFAULT_TRIALS,
               clock: CycleClock | None = None, manifest=None,
               duration: float = 3.0, concurrency: int = 1, **_) -> list[Measurement]:
    """Loopback request latency/throughput: native vs virtine vs snapshot."""
    clock = clock or default_clock()
    rows: list[Measurement] = []
    docroot = Path(tempfile.mkdtemp(prefix="virtine-http-"))
    (docroot / "index.html").write_bytes(_HTTP_DOC)
    image = _http_image_and_backend(backend, manifest)
    bodies: dict[str, bytes] = {}

    native = _native_http_server(docroot)
    try:
        lat, count, body = _drive_http(native.address, duration, concurrency, clock)
    finally:
        native.shutdown()
    bodies["native"] = body
    rows += [Measurement("http-latency", "native", i, v, clock.unit)
             for i, v in enumerate(lat)]
    rows.append(Measurement("http-throughput", "native", 0, count / duration, "rps"))

    for variant, snapshot_enabled in (("virtine", False), ("virtine+snapshot", True)):
        config = ServiceConfig(port=0, document_root=docroot, pool_capacity=4,
                               workers=concurrency,
                               snapshot_enabled=snapshot_enabled)
        service = serve_http(config, image, backend)
        service.start()
        try:
            lat, count, body = _drive_http(service.address, duration, concurrency, clock)
        finally:
            service.shutdown()
        bodies[variant] = body
        label = _label(variant, backend)
        rows += [Measurement("http-latency", label, i, v, clock.unit)
                 for i, v in enumerate(lat)]
        rows.append(Measurement("http-throughput", label, 0, count / duration, "rps"))

    distinct = {body for body in bodies.values() if body}
    if len(distinct) > 1:
        raise VirtineError(f"variants returned different response bytes: {sorted(bodies)}")
    return rows


# -- registry -----------------------------------------------------------------------

class ExperimentSpec:
    def __init__(self, fn, needs_hw: bool, needs_guests: bool, summary: str):
        self.fn = fn
        self.needs_hw = needs_hw
        self.needs_guests = needs_guests
        self.summary = summary


EXPERIMENTS: dict[str, ExperimentSpec] = {
    "creation-ladder": ExperimentSpec(
        creation_ladder, needs_hw=False, needs_guests=False,
        summary="context creation/enter/exit latency ladder"),
    "boot-breakdown": ExperimentSpec(
        boot_breakdown, needs_hw=True, needs_guests=True,
        summary="per-component guest boot cost from milestone hypercalls"),
    "mode-latency": ExperimentSpec(
        mode_latency, needs_hw=True, needs_guests=True,
        summary="real/protected/long mode entry + fib(20) + exit"),
    "amortization": ExperimentSpec(
        amortization, needs_hw=False, needs_guests=False,
        summary="native vs virtine vs snapshot latency across fib sizes"),
    "image-size": ExperimentSpec(
        image_size, needs_hw=False, needs_guests=False,
        summary="start-up latency versus image size, plus copy bandwidth"),
    "http": ExperimentSpec(
        http_bench, needs_hw=False, needs_guests=False,
        summary="HTTP latency/throughput: native vs virtine vs snapshot"),
}
