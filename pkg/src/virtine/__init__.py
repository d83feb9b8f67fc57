"""virtine: run individual functions in minimal hardware-virtualized contexts.

The library provides a shell pool with reuse and asynchronous cleaning,
snapshot/restore start-up optimization, and a default-deny hypercall
interposition layer, behind a small embeddable API.
"""

from virtine.backend import MockBackend, VcpuExit
from virtine.client import (
    PackedStruct,
    RawBytes,
    ServiceConfig,
    VirtineClient,
    VirtineFunction,
    serve_echo,
    serve_http,
)
from virtine.core import (
    CleanMode,
    ReturnValue,
    ShellPool,
    Snapshot,
    SnapshotStore,
    VirtineImage,
    VirtineShell,
    restore,
    run_virtine,
    take_snapshot,
)
from virtine.errors import (
    GuestFault,
    PolicyViolation,
    VirtineError,
    VirtineTimeout,
    VirtualizationUnavailable,
)
from virtine.hypercall import Hypercall, HypercallPolicy, WireErrno
from virtine.platform import PlatformLayout, ProcessorMode

__version__ = "0.1.0"

__all__ = [
    "CleanMode",
    "GuestFault",
    "Hypercall",
    "HypercallPolicy",
    "MockBackend",
    "PackedStruct",
    "PlatformLayout",
    "PolicyViolation",
    "ProcessorMode",
    "RawBytes",
    "ReturnValue",
    "ServiceConfig",
    "ShellPool",
    "Snapshot",
    "SnapshotStore",
    "VcpuExit",
    "VirtineClient",
    "VirtineError",
    "VirtineFunction",
    "VirtineImage",
    "VirtineShell",
    "VirtineTimeout",
    "VirtualizationUnavailable",
    "WireErrno",
    "restore",
    "run_virtine",
    "serve_echo",
    "serve_http",
    "take_snapshot",
]
