"""Embeddable client API and reference services.

A VirtineFunction couples an image with the policy it runs under and the
argument codec used to marshal values in and out (copy-restore semantics:
arguments are snapshotted at encode time, results copied back out).

Two reference services run every request in a fresh virtine: a byte echo
server and a static-file HTTP server speaking an HTTP/1.0 subset (GET,
Content-Length, no keep-alive).  The guest drives the whole exchange
through hypercalls; the host never parses request bytes itself.
"""

import json
import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from virtine.backend.base import Backend
from virtine.core import (
    CleanMode,
    ReturnValue,
    ShellPool,
    SnapshotStore,
    VirtineImage,
    run_virtine,
)
from virtine.errors import DecodeError, VirtineError
from virtine.hypercall import Hypercall, HypercallPolicy, StreamResource
from virtine.platform import ProcessorMode

log = logging.getLogger(__name__)

_FIELD_FORMATS = {
    "i8": "b", "u8": "B", "i16": "h", "u16": "H",
    "i32": "i", "u32": "I", "i64": "q", "u64": "Q",
    "f32": "f", "f64": "d",
}

ECHO_HYPERCALLS = (Hypercall.SEND, Hypercall.RECV)
HTTP_HYPERCALLS = (
    Hypercall.READ, Hypercall.WRITE, Hypercall.OPEN,
    Hypercall.CLOSE, Hypercall.STAT,
)


class RawBytes:
    """Identity codec over byte strings."""

    def encode(self, args) -> bytes:
        return bytes(args)

    def decode(self, data: bytes):
        return data


class PackedStruct:
    """Fixed-width little-endian field layout, no padding.

    `fields` describes the argument record; `result` (optional) describes
    the return record.  A single-field record encodes from / decodes to a
    scalar.
    """

    def __init__(self, fields, result=None):
        self.fields = list(fields)
        self.result = list(result) if result else []
        self._arg_struct = self._compile(self.fields)
        self._ret_struct = self._compile(self.result) if self.result else None

    @staticmethod
    def _compile(fields) -> struct.Struct:
        try:
            return struct.Struct("<" + "".join(_FIELD_FORMATS[fmt] for _, fmt in fields))
        except KeyError as exc:
            raise ValueError(f"unknown field format {exc.args[0]!r}") from exc

    def encode(self, args) -> bytes:
        if len(self.fields) == 1 and not isinstance(args, (tuple, list, dict)):
            values = (args,)
        elif isinstance(args, dict):
            values = tuple(args[name] for name, _ in self.fields)
        else:
            values = tuple(args)
        return self._arg_struct.pack(*values)

    def decode(self, data: bytes):
        if self._ret_struct is None:
            return data
        if len(data) != self._ret_struct.size:
            raise DecodeError(
                f"expected a {self._ret_struct.size}-byte return record, got {len(data)}"
            )
        values = self._ret_struct.unpack(data)
        if len(values) == 1:
            return values[0]
        return dict(zip((name for name, _ in self.result), values))


@dataclass(frozen=True)
class VirtineFunction:
    """An image plus the policy and marshalling it is invoked with."""

    image: VirtineImage
    policy: HypercallPolicy
    snapshot_enabled: bool = True
    arg_codec: object = field(default_factory=RawBytes)


class VirtineClient:
    """Host-program entry point: owns the pool and the snapshot store."""

    def __init__(self, backend: Backend | None = None, *,
                 pool_capacity: int = 8,
                 release_mode: CleanMode = CleanMode.SYNC,
                 timeout: float = 1.0):
        if backend is None:
            backend = default_backend()
        self.backend = backend
        self.pool = ShellPool(backend, capacity=pool_capacity, release_mode=release_mode)
        self.snapshots = SnapshotStore()
        self.timeout = timeout

    def call(self, fn: VirtineFunction, args, *, streams=None, timeout: float | None = None):
        """Synchronous copy-restore invocation; decodes the return value."""
        encoded = fn.arg_codec.encode(args)
        result = self.run(fn, encoded, streams=streams, timeout=timeout)
        return fn.arg_codec.decode(result.data)

    def run(self, fn: VirtineFunction, encoded_args: bytes, *,
            streams=None, timeout: float | None = None) -> ReturnValue:
        return run_virtine(
            self.pool, fn.image, encoded_args, fn.policy,
            snapshots=self.snapshots,
            snapshot_enabled=fn.snapshot_enabled,
            streams=streams,
            timeout=timeout if timeout is not None else self.timeout,
        )

    def close(self) -> None:
        self.pool.close()

    def __enter__(self) -> "VirtineClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def default_backend() -> Backend:
    """Hardware when the host supports it, otherwise the mock."""
    from virtine.backend.kvm import KvmBackend, kvm_available

    if kvm_available():
        return KvmBackend()
    from virtine.backend.mock import MockBackend

    return MockBackend()


def echo_policy() -> HypercallPolicy:
    return HypercallPolicy(allow=ECHO_HYPERCALLS)


def http_policy(document_root) -> HypercallPolicy:
    return HypercallPolicy(allow=HTTP_HYPERCALLS, sandbox_root=document_root)


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    document_root: Path | None = None
    pool_capacity: int = 8
    release_mode: CleanMode = CleanMode.SYNC
    snapshot_enabled: bool = True
    workers: int = 1
    request_timeout: float = 5.0

    def __post_init__(self):
        if self.document_root is not None:
            self.document_root = Path(self.document_root)
            if not self.document_root.is_dir():
                raise ValueError(f"document root {self.document_root} is not a directory")


class VirtineService:
    """Accept loop running each connection in its own virtine."""

    def __init__(self, config: ServiceConfig, fn: VirtineFunction,
                 backend: Backend | None = None):
        self.config = config
        self.fn = fn
        self.client = VirtineClient(
            backend,
            pool_capacity=config.pool_capacity,
            release_mode=config.release_mode,
            timeout=config.request_timeout,
        )
        self._listener: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._shutdown = threading.Event()
        self.requests_served = 0
        self.last_trace: tuple[int, ...] = ()

    @property
    def address(self) -> tuple[str, int]:
        assert self._listener is not None, "service not started"
        return self._listener.getsockname()[:2]

    def start(self) -> "VirtineService":
        """Bind and serve on a background thread (tests, embedding)."""
        self._bind()
        self._thread = threading.Thread(target=self._serve_loop, daemon=True,
                                        name="virtine-service")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._bind()
        self._serve_loop()

    def _bind(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.config.host, self.config.port))
        listener.listen(16)
        listener.settimeout(0.2)
        self._listener = listener

    def _serve_loop(self) -> None:
        assert self._listener is not None
        while not self._shutdown.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            if self.config.workers > 1:
                threading.Thread(target=self._handle, args=(conn, peer), daemon=True).start()
            else:
                self._handle(conn, peer)
        self._listener.close()

    def _handle(self, conn: socket.socket, peer) -> None:
        try:
            conn.settimeout(self.config.request_timeout)
            result = self.client.run(self.fn, b"", streams={0: StreamResource(conn)})
            self.requests_served += 1
            self.last_trace = result.hypercalls
        except VirtineError as exc:
            # Per-connection failures are isolated; the service lives on.
            log.warning("request from %s failed: %s", peer, exc)
        finally:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()

    def shutdown(self) -> None:
        self._shutdown.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self.client.close()


def serve_echo(config: ServiceConfig, image: VirtineImage,
               backend: Backend | None = None) -> VirtineService:
    fn = VirtineFunction(image=image, policy=echo_policy(),
                         snapshot_enabled=config.snapshot_enabled)
    return VirtineService(config, fn, backend)


def serve_http(config: ServiceConfig, image: VirtineImage,
               backend: Backend | None = None) -> VirtineService:
    if config.document_root is None:
        raise ValueError("http service requires a document root")
    fn = VirtineFunction(image=image, policy=http_policy(config.document_root),
                         snapshot_enabled=config.snapshot_enabled)
    return VirtineService(config, fn, backend)


# -- guest image manifests -------------------------------------------------------

_MODE_NAMES = {m.value: m for m in ProcessorMode}


def load_manifest(path) -> dict[str, dict]:
    """Read a guest build manifest: name -> {binary, entry mode, memory, mask}.

    The manifest is JSON mapping workload names to entries with keys
    `binary` (path relative to the manifest), `entry_mode`, `mem_size`,
    and `hypercalls` (list of hypercall names the workload needs).
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    out = {}
    for name, entry in raw.items():
        binary = path.parent / entry["binary"]
        mode = _MODE_NAMES[entry["entry_mode"]]
        calls = [Hypercall[c.upper()] for c in entry.get("hypercalls", [])]
        out[name] = {
            "binary": binary,
            "entry_mode": mode,
            "mem_size": int(entry["mem_size"]),
            "hypercalls": calls,
        }
    return out


def image_from_manifest(manifest: dict, name: str) -> VirtineImage:
    entry = manifest[name]
    return VirtineImage(
        name=name,
        code=Path(entry["binary"]).read_bytes(),
        entry_mode=entry["entry_mode"],
        mem_size=entry["mem_size"],
    )


def policy_from_manifest(manifest: dict, name: str, *,
                         sandbox_root=None) -> HypercallPolicy:
    return HypercallPolicy(allow=manifest[name]["hypercalls"], sandbox_root=sandbox_root)
