"""Exception hierarchy shared by all virtine modules."""


class VirtineError(Exception):
    """Base class for every error raised by this package."""


class VirtualizationUnavailable(VirtineError):
    """Hardware virtualization is not usable on this host."""


class AllocationFailure(VirtineError):
    """The backend could not allocate a context or its guest memory."""


class OutOfBounds(VirtineError):
    """A guest-physical access fell outside the guest memory region."""

    def __init__(self, gpa: int, length: int, size: int):
        super().__init__(f"access [{gpa:#x}, {gpa + length:#x}) outside guest memory of {size:#x} bytes")
        self.gpa = gpa
        self.length = length
        self.size = size


class LayoutOverlap(VirtineError):
    """Two platform regions (tables, GDT, image, args) collide."""


class MissingTables(VirtineError):
    """A processor mode was requested before its supporting structures were built."""


class SizeMismatch(VirtineError):
    """Snapshot and shell memory sizes differ."""


class SnapshotAlreadyTaken(VirtineError):
    """A second snapshot was requested for an image that already has one."""


class StaleShell(VirtineError):
    """Operation attempted through a lease whose shell was already released."""


class MalformedFrame(VirtineError):
    """A hypercall frame or one of its buffers failed validation."""


class PolicyViolation(VirtineError):
    """A guest issued a hypercall the policy does not permit."""

    def __init__(self, nr: int, reason: str = "denied by policy"):
        super().__init__(f"hypercall {nr}: {reason}")
        self.nr = nr
        self.reason = reason


class GuestFault(VirtineError):
    """The guest stopped in a way that is not a normal exit."""


class VirtineTimeout(VirtineError):
    """The guest exceeded its wall-clock budget."""


class DecodeError(VirtineError):
    """A return value could not be decoded by the configured codec."""


class ArgumentTooLarge(VirtineError):
    """Encoded arguments do not fit the guest argument region."""
