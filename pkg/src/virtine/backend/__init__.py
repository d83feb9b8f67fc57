"""Virtualization backends: hardware (KVM) and a deterministic mock."""

from virtine.backend.base import (
    Backend,
    BackendContext,
    ExitKind,
    GuestMemory,
    RegisterFile,
    Segment,
    VcpuExit,
    power_on_registers,
    validate_mem_size,
)
from virtine.backend.mock import MockBackend, MockContext, mock_marker

__all__ = [
    "Backend",
    "BackendContext",
    "ExitKind",
    "GuestMemory",
    "MockBackend",
    "MockContext",
    "RegisterFile",
    "Segment",
    "VcpuExit",
    "mock_marker",
    "power_on_registers",
    "validate_mem_size",
]
