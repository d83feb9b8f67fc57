"""Host-side synthesis of guest machine state.

Builds identity page tables and a GDT inside guest memory and produces
register presets for real, protected, and long mode, so a virtine can be
entered directly in its target mode without running a guest-side boot
sequence.  All functions are pure over the GuestMemory handed in.
"""

import struct
from dataclasses import dataclass, replace
from enum import Enum

from virtine.backend.base import (
    CR0_ET,
    CR0_NE,
    CR0_PE,
    CR0_PG,
    CR4_PAE,
    EFER_LMA,
    EFER_LME,
    GuestMemory,
    RegisterFile,
    Segment,
)
from virtine.errors import LayoutOverlap, MissingTables

IMAGE_BASE = 0x8000
DEFAULT_PAGE_TABLE_BASE = 0x1000
DEFAULT_GDT_BASE = 0x0800
ARG_BASE = 0x0
ARG_REGION_SIZE = 0x1000

PAGE_TABLE_BYTES = 3 * 4096  # PML4 + PDPT + PD, one 4KB page each
GDT_BYTES = 3 * 8
IDENTITY_SPAN = 1 << 30      # 2MB large pages covering [0, 1GB)

PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_LARGE = 1 << 7

# Flat descriptors, encoded per the architecture manual.
GDT_NULL = 0x0000000000000000
GDT_CODE16 = 0x00009A000000FFFF
GDT_DATA16 = 0x000092000000FFFF
GDT_CODE32 = 0x00CF9A000000FFFF  # base 0, limit 0xFFFFF, G=1, D=1
GDT_DATA32 = 0x00CF92000000FFFF
GDT_CODE64 = 0x00AF9A000000FFFF  # L=1, D=0
GDT_DATA64 = 0x00CF92000000FFFF

CODE_SELECTOR = 0x08
DATA_SELECTOR = 0x10


class ProcessorMode(Enum):
    REAL16 = "real16"
    PROTECTED32 = "protected32"
    LONG64 = "long64"


@dataclass(frozen=True)
class PlatformLayout:
    """Where synthesized structures live in guest-physical space.

    Synthesized structures (GDT, page tables) must lie entirely below the
    fixed image base; the argument region starts at 0.
    """

    page_table_base: int = DEFAULT_PAGE_TABLE_BASE
    gdt_base: int = DEFAULT_GDT_BASE
    image_base: int = IMAGE_BASE
    stack_top: int | None = None  # default: top of guest memory
    arg_base: int = ARG_BASE

    def __post_init__(self):
        if self.image_base != IMAGE_BASE:
            raise ValueError(f"image base is fixed at {IMAGE_BASE:#x}")

    def resolve_stack_top(self, mem_size: int) -> int:
        return mem_size if self.stack_top is None else self.stack_top

    def regions(self, mode: ProcessorMode, image_len: int, args_len: int) -> list[tuple[str, int, int]]:
        """Occupied [start, end) intervals for the given configuration."""
        out = [("image", self.image_base, self.image_base + max(image_len, 1))]
        if args_len:
            out.append(("args", self.arg_base, self.arg_base + args_len))
        if mode is not ProcessorMode.REAL16:
            out.append(("gdt", self.gdt_base, self.gdt_base + GDT_BYTES))
        if mode is ProcessorMode.LONG64:
            out.append(("page-tables", self.page_table_base, self.page_table_base + PAGE_TABLE_BYTES))
        return out

    def check_disjoint(self, mode: ProcessorMode, image_len: int, args_len: int = 0) -> None:
        regions = sorted(self.regions(mode, image_len, args_len), key=lambda r: r[1])
        for (name_a, _, end_a), (name_b, start_b, _) in zip(regions, regions[1:]):
            if end_a > start_b:
                raise LayoutOverlap(f"{name_a} region overlaps {name_b} region")


def _check_below_image(name: str, start: int, length: int, layout: PlatformLayout) -> None:
    if start + length > layout.image_base:
        raise LayoutOverlap(
            f"{name} at [{start:#x}, {start + length:#x}) collides with the "
            f"image region at {layout.image_base:#x}"
        )


def build_identity_page_tables(mem: GuestMemory, layout: PlatformLayout | None = None) -> int:
    """Write a 3-level identity map of [0, 1GB) with 2MB pages.

    Exactly 12KB is written: one PML4 page, one PDPT page, one directory
    page of 512 large-page entries.  Returns the root (cr3 value).
    """
    layout = layout or PlatformLayout()
    base = layout.page_table_base
    _check_below_image("page tables", base, PAGE_TABLE_BYTES, layout)
    pml4_gpa, pdpt_gpa, pd_gpa = base, base + 0x1000, base + 0x2000

    pml4 = bytearray(4096)
    struct.pack_into("<Q", pml4, 0, pdpt_gpa | PTE_PRESENT | PTE_WRITABLE)
    pdpt = bytearray(4096)
    struct.pack_into("<Q", pdpt, 0, pd_gpa | PTE_PRESENT | PTE_WRITABLE)
    pd = struct.pack(
        "<512Q",
        *((i << 21) | PTE_PRESENT | PTE_WRITABLE | PTE_LARGE for i in range(512)),
    )

    mem.write(pml4_gpa, pml4)
    mem.write(pdpt_gpa, pdpt)
    mem.write(pd_gpa, pd)
    return pml4_gpa


def build_gdt(mem: GuestMemory, layout: PlatformLayout | None = None,
              mode: ProcessorMode = ProcessorMode.LONG64) -> tuple[int, int]:
    """Write null + flat code + flat data descriptors; returns (base, limit)."""
    layout = layout or PlatformLayout()
    base = layout.gdt_base
    _check_below_image("gdt", base, GDT_BYTES, layout)
    code, data = {
        ProcessorMode.REAL16: (GDT_CODE16, GDT_DATA16),
        ProcessorMode.PROTECTED32: (GDT_CODE32, GDT_DATA32),
        ProcessorMode.LONG64: (GDT_CODE64, GDT_DATA64),
    }[mode]
    mem.write(base, struct.pack("<3Q", GDT_NULL, code, data))
    return base, GDT_BYTES - 1


def _flat_code_segment(mode: ProcessorMode) -> Segment:
    if mode is ProcessorMode.REAL16:
        return Segment(selector=0, base=0, limit=0xFFFF, type=0xB, s=1, present=1)
    return Segment(
        selector=CODE_SELECTOR, base=0, limit=0xFFFFF, type=0xB, s=1, present=1,
        db=0 if mode is ProcessorMode.LONG64 else 1,
        l=1 if mode is ProcessorMode.LONG64 else 0,
        g=1,
    )


def _flat_data_segment(mode: ProcessorMode) -> Segment:
    if mode is ProcessorMode.REAL16:
        return Segment(selector=0, base=0, limit=0xFFFF, type=0x3, s=1, present=1)
    return Segment(selector=DATA_SELECTOR, base=0, limit=0xFFFFF, type=0x3, s=1, present=1, db=1, g=1)


def preset_registers(mode: ProcessorMode, layout: PlatformLayout | None = None, *,
                     mem_size: int,
                     page_table_root: int | None = None,
                     gdt: tuple[int, int] | None = None) -> RegisterFile:
    """Register file that enters the image directly in `mode`.

    Real mode needs neither tables nor a GDT; protected mode needs a GDT;
    long mode needs both (MissingTables otherwise).
    """
    layout = layout or PlatformLayout()
    regs = RegisterFile()
    regs.rip = layout.image_base
    regs.rsp = layout.resolve_stack_top(mem_size)
    regs.rflags = 0x2

    data = _flat_data_segment(mode)
    regs.cs = _flat_code_segment(mode)
    regs.ds, regs.es, regs.ss = data, replace(data), replace(data)

    if mode is ProcessorMode.REAL16:
        regs.cr0 = CR0_ET
        regs.cr3 = 0
    else:
        if gdt is None:
            raise MissingTables(f"{mode.value} entry requires a built GDT")
        regs.gdt_base, regs.gdt_limit = gdt
        if mode is ProcessorMode.PROTECTED32:
            # Protected mode runs without paging; only long mode needs tables.
            regs.cr0 = CR0_PE | CR0_ET | CR0_NE
        else:
            if page_table_root is None:
                raise MissingTables("long mode entry requires identity page tables")
            regs.cr0 = CR0_PG | CR0_PE | CR0_ET | CR0_NE
            regs.cr3 = page_table_root
            regs.cr4 = CR4_PAE
            regs.efer = EFER_LME | EFER_LMA
    regs.validate()
    return regs


def synthesize(mem: GuestMemory, mode: ProcessorMode,
               layout: PlatformLayout | None = None, *,
               image_len: int = 0, args_len: int = 0) -> RegisterFile:
    """Build whatever `mode` requires and return entry-ready registers."""
    layout = layout or PlatformLayout()
    layout.check_disjoint(mode, image_len, args_len)
    gdt = None
    root = None
    if mode is not ProcessorMode.REAL16:
        gdt = build_gdt(mem, layout, mode)
    if mode is ProcessorMode.LONG64:
        root = build_identity_page_tables(mem, layout)
    return preset_registers(mode, layout, mem_size=mem.size, page_table_root=root, gdt=gdt)
