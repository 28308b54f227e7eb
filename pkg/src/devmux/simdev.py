"""Bit-exact model of a small DMA-capable accelerator.

The device exposes a word-granular MMIO register file, a ring-buffer command
processor with a five-opcode instruction set, a built-in two-level IOMMU with
a FIFO TLB, memory-controller segmentation for device-local memory, a FIFO
write-back cache, a checksum-gated firmware store, a polling interrupt status
page, and a display scanout block.  Everything is deterministic: identical
register writes and step budgets produce identical state.

Register map (word offsets).  M-class registers are safe to hand to an
untrusted caller; S-class registers control isolation and stay privileged.

    0x000  RB_BASE       M   ring buffer base (device address)
    0x004  RB_SIZE       M   ring size in 32-bit words, power of two >= 16
    0x008  RB_HEAD       M   read pointer, byte offset (read-only to libs)
    0x00C  RB_TAIL       M   write pointer, byte offset; writing arms the CP
    0x010  FB_BASE       M   scanout base (device address)
    0x014  IH_PAGE_ADDR  M   interrupt status page (device address, 0=unset)
    0x018  CACHE_FLUSH   M   write: drain the write-back cache
    0x01C  TLB_FLUSH     M   write: empty the active TLB
    0x020  SCRATCH0..7   M   eight general scratch words (0x020-0x03C)
    0x100  MC_SEG_BASE   S   segment base added to every VRAM-window access
    0x104  MC_SEG_LIMIT  S   first out-of-bounds physical VRAM address
    0x108  IOMMU_ROOT    S   translation table id; write flushes the TLB
    0x10C  IOMMU_ENABLE  S   0 disables aperture translation entirely
    0x120  CP_RESET      S   write: clear head/tail and in-flight state
    0x124  IRQ_ENABLE    S   gates fence interrupt delivery
    0x200  DISP_PLL      S   display clock (stand-in: refresh rate)
    0x204  DISP_TIMING_H S   horizontal size in pixels
    0x208  DISP_TIMING_V S   vertical size in pixels
    0x20C  DISP_ENABLE   S   scanout enable
    0x300  FW_ADDR       S   firmware load index (auto-increments on data)
    0x304  FW_DATA       S   firmware word write port
    0x308  FW_CTRL       S   write 1: verify checksum; reads 2 when ready

Instruction set (32-bit words, first word is the opcode):

    NOP                                    1 word   1 cycle
    SET_REG   reg, value                   3 words  1 cycle   SCRATCH only
    COMPUTE   sub, dst, src1, src2, count  6 words  1+count   sub: ADD/MUL/DOT
    COPY      dst, src, count_words        4 words  1+count
    FENCE     seq_lo, seq_hi, flags        4 words  4 cycles  flags bit0: IRQ

Device addresses decode through two windows: [0, 0x1000_0000) is device-local
memory behind the memory controller (physical = MC_SEG_BASE + address, faults
at MC_SEG_LIMIT), [0x8000_0000, 0xC000_0000) is the system aperture behind
the active IOMMU.  Anything else is MC_FAULT.  Page table entries are 32-bit:
bit0 VALID, bit1 WRITABLE, bits 12-31 frame number; the walk splits the
aperture offset into a 10-bit level-1 index (bits 22-31), a 10-bit level-2
index (bits 12-21) and a 12-bit page offset.

Faults never have partial effects: an instruction either fully executes or
leaves all target memory untouched, and a fault consumes the remainder of the
batch.
"""

from __future__ import annotations

import struct

from devmux.errors import (CmdFault, HardwareFault, IommuFault, InvalError,
                           McFault, RegFault)

WORD = 4
PAGE_SIZE = 4096
MASK32 = 0xFFFFFFFF

VRAM_WINDOW_BASE = 0x0000_0000
VRAM_WINDOW_END = 0x1000_0000
APERTURE_BASE = 0x8000_0000
APERTURE_END = 0xC000_0000

# register offsets
REG_RB_BASE = 0x000
REG_RB_SIZE = 0x004
REG_RB_HEAD = 0x008
REG_RB_TAIL = 0x00C
REG_FB_BASE = 0x010
REG_IH_PAGE_ADDR = 0x014
REG_CACHE_FLUSH = 0x018
REG_TLB_FLUSH = 0x01C
REG_SCRATCH0 = 0x020  # .. 0x03C
REG_MC_SEG_BASE = 0x100
REG_MC_SEG_LIMIT = 0x104
REG_IOMMU_ROOT = 0x108
REG_IOMMU_ENABLE = 0x10C
REG_CP_RESET = 0x120
REG_IRQ_ENABLE = 0x124
REG_DISP_PLL = 0x200
REG_DISP_TIMING_H = 0x204
REG_DISP_TIMING_V = 0x208
REG_DISP_ENABLE = 0x20C
REG_FW_ADDR = 0x300
REG_FW_DATA = 0x304
REG_FW_CTRL = 0x308

SCRATCH_REGISTERS = tuple(REG_SCRATCH0 + 4 * i for i in range(8))

M_REGISTERS = (REG_RB_BASE, REG_RB_SIZE, REG_RB_HEAD, REG_RB_TAIL,
               REG_FB_BASE, REG_IH_PAGE_ADDR, REG_CACHE_FLUSH,
               REG_TLB_FLUSH) + SCRATCH_REGISTERS

S_REGISTERS = (REG_MC_SEG_BASE, REG_MC_SEG_LIMIT, REG_IOMMU_ROOT,
               REG_IOMMU_ENABLE, REG_CP_RESET, REG_IRQ_ENABLE,
               REG_DISP_PLL, REG_DISP_TIMING_H, REG_DISP_TIMING_V,
               REG_DISP_ENABLE, REG_FW_ADDR, REG_FW_DATA, REG_FW_CTRL)

ALL_REGISTERS = M_REGISTERS + S_REGISTERS

REGISTER_NAMES = {
    REG_RB_BASE: "RB_BASE", REG_RB_SIZE: "RB_SIZE", REG_RB_HEAD: "RB_HEAD",
    REG_RB_TAIL: "RB_TAIL", REG_FB_BASE: "FB_BASE",
    REG_IH_PAGE_ADDR: "IH_PAGE_ADDR", REG_CACHE_FLUSH: "CACHE_FLUSH",
    REG_TLB_FLUSH: "TLB_FLUSH", REG_MC_SEG_BASE: "MC_SEG_BASE",
    REG_MC_SEG_LIMIT: "MC_SEG_LIMIT", REG_IOMMU_ROOT: "IOMMU_ROOT",
    REG_IOMMU_ENABLE: "IOMMU_ENABLE", REG_CP_RESET: "CP_RESET",
    REG_IRQ_ENABLE: "IRQ_ENABLE", REG_DISP_PLL: "DISP_PLL",
    REG_DISP_TIMING_H: "DISP_TIMING_H", REG_DISP_TIMING_V: "DISP_TIMING_V",
    REG_DISP_ENABLE: "DISP_ENABLE", REG_FW_ADDR: "FW_ADDR",
    REG_FW_DATA: "FW_DATA", REG_FW_CTRL: "FW_CTRL",
}
REGISTER_NAMES.update({off: f"SCRATCH{i}" for i, off in enumerate(SCRATCH_REGISTERS)})

# interrupt status flags (pending_flags bits on the status page)
FLAG_FENCE = 0x1
FLAG_CMD_FAULT = 0x2
FLAG_IOMMU_FAULT = 0x4
FLAG_MC_FAULT = 0x8
FAULT_FLAGS = FLAG_CMD_FAULT | FLAG_IOMMU_FAULT | FLAG_MC_FAULT

FLAG_NAMES = {FLAG_FENCE: "FENCE", FLAG_CMD_FAULT: "CMD_FAULT",
              FLAG_IOMMU_FAULT: "IOMMU_FAULT", FLAG_MC_FAULT: "MC_FAULT"}

# opcodes
OP_NOP = 0x0
OP_SET_REG = 0x1
OP_COMPUTE = 0x2
OP_COPY = 0x3
OP_FENCE = 0x4

INSTR_WORDS = {OP_NOP: 1, OP_SET_REG: 3, OP_COMPUTE: 6, OP_COPY: 4, OP_FENCE: 4}

# COMPUTE sub-opcodes
CO_ADD = 0x0
CO_MUL = 0x1
CO_DOT = 0x2

FENCE_IRQ = 0x1  # FENCE flags bit0

# page table entry bits
PTE_VALID = 0x1
PTE_WRITABLE = 0x2
PTE_FRAME_SHIFT = 12

# firmware: arbitrary microcode image; FW_CTRL only reports READY when the
# loaded words sum to the expected checksum
FW_SIZE = 64
FIRMWARE_IMAGE = tuple((0xC0DE0000 + 0x101 * i) & MASK32 for i in range(16))
FW_CHECKSUM = sum(FIRMWARE_IMAGE) & MASK32
FW_CTRL_VERIFY = 1
FW_CTRL_READY = 2

VRAM_SIZE_DEFAULT = 16 << 20
TLB_ENTRIES_DEFAULT = 64
CACHE_WORDS_DEFAULT = 1024

# what the display hardware can actually drive: one head, two fixed modes
# (width, height, refresh); both driver stacks validate against this table
DISPLAY_MODES = (((64, 48, 60), (128, 96, 60)),)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over a bytes-like object (chainable via ``h``)."""
    prime = _FNV_PRIME
    mask = 0xFFFFFFFFFFFFFFFF
    for b in bytes(data):
        h = ((h ^ b) * prime) & mask
    return h


# -- instruction encoding ------------------------------------------------

class Nop:
    __slots__ = ()

    def encode(self):
        return [OP_NOP]


class SetReg:
    __slots__ = ("reg", "value")

    def __init__(self, reg: int, value: int):
        self.reg = reg
        self.value = value & MASK32

    def encode(self):
        return [OP_SET_REG, self.reg, self.value]


class Compute:
    __slots__ = ("sub", "dst", "src1", "src2", "count")

    def __init__(self, sub: int, dst: int, src1: int, src2: int, count: int):
        self.sub = sub
        self.dst = dst
        self.src1 = src1
        self.src2 = src2
        self.count = count

    def encode(self):
        return [OP_COMPUTE, self.sub, self.dst & MASK32, self.src1 & MASK32,
                self.src2 & MASK32, self.count & MASK32]


class Copy:
    __slots__ = ("dst", "src", "count")

    def __init__(self, dst: int, src: int, count: int):
        self.dst = dst
        self.src = src
        self.count = count

    def encode(self):
        return [OP_COPY, self.dst & MASK32, self.src & MASK32, self.count & MASK32]


class Fence:
    __slots__ = ("seq", "flags")

    def __init__(self, seq: int, flags: int = FENCE_IRQ):
        self.seq = seq
        self.flags = flags

    def encode(self):
        return [OP_FENCE, self.seq & MASK32, (self.seq >> 32) & MASK32, self.flags]


def encode_batch(instrs) -> list:
    words = []
    for instr in instrs:
        words.extend(instr.encode())
    return words


# -- translation ---------------------------------------------------------

class PageTable:
    """Two-level translation table with 32-bit entries.

    Level-1 entries name a level-2 table (frame field = index into ``l2s``);
    level-2 entries name a system memory frame.  Either level being !VALID
    makes the walk fault; writes through a !WRITABLE leaf fault.
    """

    ENTRIES = 1024

    def __init__(self):
        self.l1 = [0] * self.ENTRIES
        self.l2s = []

    @staticmethod
    def _split(off: int):
        return (off >> 22) & 0x3FF, (off >> 12) & 0x3FF

    def map(self, off: int, frame: int, writable: bool = True):
        if off % PAGE_SIZE:
            raise ValueError("offset must be page-aligned")
        i1, i2 = self._split(off)
        if not self.l1[i1] & PTE_VALID:
            self.l2s.append([0] * self.ENTRIES)
            self.l1[i1] = PTE_VALID | ((len(self.l2s) - 1) << PTE_FRAME_SHIFT)
        l2 = self.l2s[self.l1[i1] >> PTE_FRAME_SHIFT]
        if l2[i2] & PTE_VALID:
            raise ValueError("page already mapped")
        l2[i2] = (PTE_VALID | (PTE_WRITABLE if writable else 0)
                  | (frame << PTE_FRAME_SHIFT))

    def unmap(self, off: int):
        i1, i2 = self._split(off)
        if not self.l1[i1] & PTE_VALID:
            raise ValueError("not mapped")
        l2 = self.l2s[self.l1[i1] >> PTE_FRAME_SHIFT]
        if not l2[i2] & PTE_VALID:
            raise ValueError("not mapped")
        l2[i2] = 0

    def lookup(self, off: int):
        """Walk one page; returns (frame, writable) or raises IommuFault."""
        i1, i2 = self._split(off)
        e1 = self.l1[i1]
        if not e1 & PTE_VALID:
            raise IommuFault(f"level-1 entry invalid for offset 0x{off:x}")
        e2 = self.l2s[e1 >> PTE_FRAME_SHIFT][i2]
        if not e2 & PTE_VALID:
            raise IommuFault(f"level-2 entry invalid for offset 0x{off:x}")
        return e2 >> PTE_FRAME_SHIFT, bool(e2 & PTE_WRITABLE)


class IommuUnit:
    """Translation front-end: a root table id plus a FIFO TLB.

    ``flush_on_root_change`` exists so tests can demonstrate what stale TLB
    entries would do; every production path leaves it True.
    """

    def __init__(self, tables: dict, tlb_entries: int = TLB_ENTRIES_DEFAULT):
        self.tables = tables
        self.tlb_entries = tlb_entries
        self.root = 0
        self.enabled = True
        self.flush_on_root_change = True
        self.tlb = {}  # page number -> (frame, writable); insertion ordered

    def set_root(self, table_id: int):
        self.root = table_id
        if self.flush_on_root_change:
            self.tlb.clear()

    def tlb_flush(self):
        self.tlb.clear()

    def translate(self, off: int, is_write: bool):
        """Aperture offset -> (frame, page offset); faults raise IommuFault."""
        if not self.enabled:
            raise IommuFault("translation disabled")
        page = off >> 12
        hit = self.tlb.get(page)
        if hit is None:
            table = self.tables.get(self.root)
            if table is None:
                raise IommuFault(f"no table for root {self.root}")
            hit = table.lookup(off)
            if len(self.tlb) >= self.tlb_entries:
                self.tlb.pop(next(iter(self.tlb)))
            self.tlb[page] = hit
        frame, writable = hit
        if is_write and not writable:
            raise IommuFault(f"write to read-only page at offset 0x{off:x}")
        return frame, off & 0xFFF


# -- write-back cache -----------------------------------------------------

class WriteBackCache:
    """Word-granular FIFO write-back cache.

    Device-side reads observe pending words; the backing memory only sees
    them on drain or capacity eviction (oldest first).
    """

    def __init__(self, capacity: int, writeback):
        self.capacity = capacity
        self._writeback = writeback
        self.pending = {}  # (space, byte addr) -> word

    def put(self, key, word: int):
        pending = self.pending
        if key not in pending and len(pending) >= self.capacity:
            oldest = next(iter(pending))
            self._writeback(oldest, pending.pop(oldest))
        pending[key] = word

    def drop(self, key):
        self.pending.pop(key, None)

    def drain(self):
        for key, word in self.pending.items():
            self._writeback(key, word)
        self.pending.clear()


# -- results ---------------------------------------------------------------

class ExecReport:
    """What one step() call did: cycles consumed and interrupts raised."""

    __slots__ = ("cycles_used", "interrupts_raised")

    def __init__(self, cycles_used: int = 0, interrupts_raised=None):
        self.cycles_used = cycles_used
        self.interrupts_raised = interrupts_raised if interrupts_raised is not None else []

    def __repr__(self):
        return f"ExecReport(cycles_used={self.cycles_used}, interrupts_raised={self.interrupts_raised})"


class ScanoutResult:
    __slots__ = ("width", "height", "digest", "faulted", "pixels")

    def __init__(self, width, height, digest, faulted, pixels):
        self.width = width
        self.height = height
        self.digest = digest
        self.faulted = faulted
        self.pixels = pixels

    def to_ppm(self) -> bytes:
        """Binary portable pixmap; low 24 bits of each pixel word become RGB."""
        header = f"P6\n{self.width} {self.height}\n255\n".encode()
        rgb = bytearray()
        for i in range(0, len(self.pixels), 4):
            word = int.from_bytes(self.pixels[i:i + 4], "little")
            rgb += bytes(((word >> 16) & 0xFF, (word >> 8) & 0xFF, word & 0xFF))
        return header + bytes(rgb)


# -- the device -------------------------------------------------------------

_SPACE_VRAM = 0
_SPACE_SYS = 1


class SimDevice:
    """The accelerator.  ``sysmem`` is anything with a ``data`` bytearray
    covering frame*4096+offset addressing (DMA target); it may be None for
    device-memory-only use."""

    def __init__(self, sysmem=None, *, vram_size: int = VRAM_SIZE_DEFAULT,
                 tlb_entries: int = TLB_ENTRIES_DEFAULT,
                 cache_words: int = CACHE_WORDS_DEFAULT):
        self.regs = {off: 0 for off in ALL_REGISTERS}
        self.vram = bytearray(vram_size)
        self.sysmem = sysmem
        self.translation_tables = {}
        self.iommu = IommuUnit(self.translation_tables, tlb_entries)
        self.active_iommu = self.iommu
        self.cache = WriteBackCache(cache_words, self._write_word_raw)
        self.firmware = [0] * FW_SIZE
        self._fw_ready = False
        self._inflight = None  # [opcode, words, cycles_left]
        self._irq_seq = 0
        self._irq_count = 0
        self._irq_flags = 0
        self._report = None

    # -- MMIO ---------------------------------------------------------

    def mmio_read(self, offset: int) -> int:
        if offset not in self.regs:
            raise RegFault(f"read of unknown register offset 0x{offset:x}")
        return self.regs[offset]

    def mmio_write(self, offset: int, value: int):
        if offset not in self.regs:
            raise RegFault(f"write to unknown register offset 0x{offset:x}")
        value &= MASK32
        if offset == REG_RB_SIZE:
            if value < 16 or value & (value - 1):
                raise RegFault(f"RB_SIZE must be a power of two >= 16 words, got {value}")
            self.regs[offset] = value
        elif offset == REG_RB_TAIL:
            if not self._fw_ready or self.regs[REG_RB_SIZE] < 16:
                self._record_event(FLAG_CMD_FAULT)
                return
            self.regs[offset] = value
        elif offset == REG_CP_RESET:
            self.regs[offset] = value
            self._cp_reset()
        elif offset == REG_TLB_FLUSH:
            self.regs[offset] = value
            self.active_iommu.tlb_flush()
        elif offset == REG_CACHE_FLUSH:
            self.regs[offset] = value
            self.cache.drain()
        elif offset == REG_IOMMU_ROOT:
            self.regs[offset] = value
            self.iommu.set_root(value)
        elif offset == REG_IOMMU_ENABLE:
            self.regs[offset] = value
            self.iommu.enabled = bool(value)
        elif offset == REG_FW_ADDR:
            self.regs[offset] = value
        elif offset == REG_FW_DATA:
            index = self.regs[REG_FW_ADDR]
            if index >= FW_SIZE:
                raise RegFault(f"firmware index {index} out of range")
            self.firmware[index] = value
            self.regs[REG_FW_ADDR] = index + 1
            self._fw_ready = False
            self.regs[REG_FW_CTRL] = 0
        elif offset == REG_FW_CTRL:
            if value == FW_CTRL_VERIFY and sum(self.firmware) & MASK32 == FW_CHECKSUM:
                self._fw_ready = True
                self.regs[offset] = FW_CTRL_READY
            else:
                self._fw_ready = False
                self.regs[offset] = 0
        elif offset == REG_IH_PAGE_ADDR:
            self.regs[offset] = value
            self._sync_status_page()  # reveal anything recorded while unset
        else:
            self.regs[offset] = value

    def restore_registers(self, values):
        """Privileged raw restore of M-class registers; no side effects."""
        for offset, value in values.items():
            if offset not in M_REGISTERS:
                raise RegFault(f"restore of non-M register 0x{offset:x}")
            self.regs[offset] = value & MASK32

    # -- address decode -------------------------------------------------

    def decode_address(self, da: int, is_write: bool):
        """Decode one device address to (space, physical byte address)."""
        spans = self._decode_run(da, 1, is_write, width=1)
        space, addr, _ = spans[0]
        return space, addr

    def _decode_run(self, da: int, n_words: int, is_write: bool, width: int = WORD):
        """Decode ``n_words`` consecutive words at ``da`` into physical spans.

        Returns [(space, byte addr, word count), ...].  All translation
        happens here, so callers can decode every target before touching
        memory (whole-instruction atomicity).
        """
        if da % width:
            raise McFault(f"unaligned device address 0x{da:x}")
        spans = []
        remaining = n_words
        cur = da
        while remaining > 0:
            if VRAM_WINDOW_BASE <= cur < VRAM_WINDOW_END:
                take = min(remaining, (VRAM_WINDOW_END - cur) // WORD)
                base = self.regs[REG_MC_SEG_BASE]
                limit = self.regs[REG_MC_SEG_LIMIT]
                loc = base + cur
                end = loc + take * WORD
                if end > limit or end > len(self.vram):
                    raise McFault(f"VRAM access 0x{loc:x}..0x{end:x} outside segment")
                spans.append((_SPACE_VRAM, loc, take))
            elif APERTURE_BASE <= cur < APERTURE_END:
                off = cur - APERTURE_BASE
                in_page = PAGE_SIZE - (off & (PAGE_SIZE - 1))
                take = min(remaining, in_page // WORD)
                frame, page_off = self.active_iommu.translate(off, is_write)
                if self.sysmem is None:
                    raise IommuFault("no system memory attached")
                spans.append((_SPACE_SYS, frame * PAGE_SIZE + page_off, take))
            else:
                raise McFault(f"device address 0x{cur:x} outside any window")
            remaining -= take
            cur += take * WORD
        return spans

    # -- physical word access --------------------------------------------

    def _backing(self, space):
        return self.vram if space == _SPACE_VRAM else self.sysmem.data

    def _write_word_raw(self, key, word: int):
        space, addr = key
        struct.pack_into("<I", self._backing(space), addr, word)

    def _read_phys_words(self, space, addr: int, n: int, *, cached: bool = True):
        words = list(struct.unpack_from(f"<{n}I", self._backing(space), addr))
        if cached and self.cache.pending:
            pending = self.cache.pending
            for i in range(n):
                hit = pending.get((space, addr + i * WORD))
                if hit is not None:
                    words[i] = hit
        return words

    def _read_run(self, da: int, n_words: int):
        words = []
        for space, addr, count in self._decode_run(da, n_words, False):
            words.extend(self._read_phys_words(space, addr, count))
        return words

    def _write_run(self, da: int, words):
        spans = self._decode_run(da, len(words), True)  # translate before any write
        k = 0
        for space, addr, count in spans:
            for i in range(count):
                self.cache.put((space, addr + i * WORD), words[k + i])
            k += count

    def _write_run_direct(self, da: int, words):
        """Write-through path (status page): bypasses and invalidates the cache."""
        spans = self._decode_run(da, len(words), True)
        k = 0
        for space, addr, count in spans:
            for i in range(count):
                key = (space, addr + i * WORD)
                self.cache.drop(key)
                self._write_word_raw(key, words[k + i])
            k += count

    # -- interrupt status -------------------------------------------------

    def _status_words(self):
        return [self._irq_seq & MASK32, (self._irq_seq >> 32) & MASK32,
                self._irq_count & MASK32, self._irq_flags & MASK32]

    def _sync_status_page(self, strict: bool = False):
        ih = self.regs[REG_IH_PAGE_ADDR]
        if ih == 0:
            if strict:
                raise CmdFault("FENCE with no status page configured")
            return
        try:
            self._write_run_direct(ih, self._status_words())
        except HardwareFault:
            if strict:
                raise

    def _record_event(self, flag: int):
        self._irq_flags |= flag
        self._irq_count += 1
        if self._report is not None:
            self._report.interrupts_raised.append(FLAG_NAMES[flag])
        self._sync_status_page()

    # -- command processor -------------------------------------------------

    def _cp_reset(self):
        self.regs[REG_RB_HEAD] = 0
        self.regs[REG_RB_TAIL] = 0
        self._inflight = None
        self._irq_seq = 0
        self._irq_count = 0
        self._irq_flags = 0

    @property
    def cp_idle(self) -> bool:
        return (self._inflight is None
                and self.regs[REG_RB_HEAD] == self.regs[REG_RB_TAIL])

    @property
    def pending_flags(self) -> int:
        """Accumulated event flags since the last CP reset."""
        return self._irq_flags

    def _ring_bytes(self) -> int:
        return self.regs[REG_RB_SIZE] * WORD

    def _fetch_ring_word(self, byte_pos: int) -> int:
        da = self.regs[REG_RB_BASE] + byte_pos % self._ring_bytes()
        for space, addr, _ in self._decode_run(da, 1, False):
            return self._read_phys_words(space, addr, 1)[0]

    def _fetch_instruction(self):
        """Decode the instruction at RB_HEAD; returns [opcode, words, cost]."""
        head = self.regs[REG_RB_HEAD]
        tail = self.regs[REG_RB_TAIL]
        ring = self._ring_bytes()
        avail = (tail - head) % ring
        opcode = self._fetch_ring_word(head)
        length = INSTR_WORDS.get(opcode)
        if length is None:
            raise CmdFault(f"unknown opcode 0x{opcode:x}")
        if avail < length * WORD:
            raise CmdFault("truncated instruction at end of batch")
        words = [opcode]
        for i in range(1, length):
            words.append(self._fetch_ring_word(head + i * WORD))
        if opcode in (OP_COMPUTE, OP_COPY):
            cost = 1 + words[5 if opcode == OP_COMPUTE else 3]
        elif opcode == OP_FENCE:
            cost = 4
        else:
            cost = 1
        return [opcode, words, cost]

    def _fault(self, fault: HardwareFault):
        # a fault consumes the rest of the batch; nothing partial survives
        self.regs[REG_RB_HEAD] = self.regs[REG_RB_TAIL]
        self._inflight = None
        self._record_event(fault.flag)

    def _execute(self, opcode: int, words):
        if opcode == OP_NOP:
            return
        if opcode == OP_SET_REG:
            reg, value = words[1], words[2]
            if reg not in SCRATCH_REGISTERS:
                raise CmdFault(f"SET_REG may only target scratch registers, got 0x{reg:x}")
            self.regs[reg] = value
            return
        if opcode == OP_COMPUTE:
            sub, dst, src1, src2, count = words[1:6]
            if sub not in (CO_ADD, CO_MUL, CO_DOT):
                raise CmdFault(f"unknown COMPUTE sub-op 0x{sub:x}")
            a = self._read_run(src1, count) if count else []
            b = self._read_run(src2, count) if count else []
            if sub == CO_ADD:
                out = [(x + y) & MASK32 for x, y in zip(a, b)]
            elif sub == CO_MUL:
                out = [(x * y) & MASK32 for x, y in zip(a, b)]
            else:
                out = [sum(x * y for x, y in zip(a, b)) & MASK32]
            if out:
                self._write_run(dst, out)
            return
        if opcode == OP_COPY:
            dst, src, count = words[1:4]
            if count:
                self._write_run(dst, self._read_run(src, count))
            return
        if opcode == OP_FENCE:
            seq = words[1] | (words[2] << 32)
            self.cache.drain()
            self._irq_seq = seq
            self._sync_status_page(strict=True)
            if words[3] & FENCE_IRQ and self.regs[REG_IRQ_ENABLE]:
                self._record_event(FLAG_FENCE)
            return
        raise CmdFault(f"unknown opcode 0x{opcode:x}")

    def step(self, budget: int) -> ExecReport:
        """Run the CP for up to ``budget`` cycles; partial batches resume."""
        report = ExecReport()
        self._report = report
        try:
            while report.cycles_used < budget:
                if self._inflight is None:
                    if self.cp_idle or not self._fw_ready:
                        break
                    try:
                        self._inflight = self._fetch_instruction()
                    except HardwareFault as fault:
                        self._fault(fault)
                        continue
                take = min(budget - report.cycles_used, self._inflight[2])
                self._inflight[2] -= take
                report.cycles_used += take
                if self._inflight[2] > 0:
                    break  # out of budget mid-instruction; resume next call
                opcode, words, _ = self._inflight
                self._inflight = None
                try:
                    self._execute(opcode, words)
                except HardwareFault as fault:
                    self._fault(fault)
                else:
                    head = self.regs[REG_RB_HEAD]
                    self.regs[REG_RB_HEAD] = (head + INSTR_WORDS[opcode] * WORD) % self._ring_bytes()
        finally:
            self._report = None
        return report

    # -- display -----------------------------------------------------------

    def scanout(self) -> ScanoutResult:
        """Read one frame from FB_BASE.  Observes flushed data only."""
        width = self.regs[REG_DISP_TIMING_H]
        height = self.regs[REG_DISP_TIMING_V]
        if not self.regs[REG_DISP_ENABLE] or width == 0 or height == 0:
            raise InvalError("display not enabled or no mode programmed")
        n = width * height
        try:
            spans = self._decode_run(self.regs[REG_FB_BASE], n, False)
            chunks = []
            for space, addr, count in spans:
                chunks.append(bytes(self._backing(space)[addr:addr + count * WORD]))
            pixels = b"".join(chunks)
        except HardwareFault as fault:
            self._record_event(fault.flag)
            zeros = bytes(n * WORD)
            return ScanoutResult(width, height, fnv1a64(zeros), True, zeros)
        return ScanoutResult(width, height, fnv1a64(pixels), False, pixels)

    # -- state digest --------------------------------------------------------

    def device_digest(self) -> int:
        """FNV-1a over registers (offset order), device memory, and CP state."""
        h = _FNV_OFFSET
        reg_blob = b"".join(self.regs[off].to_bytes(4, "little")
                            for off in sorted(self.regs))
        h = fnv1a64(reg_blob, h)
        h = fnv1a64(self.vram, h)
        if self._inflight is None:
            cp = [0]
        else:
            cp = [1, self._inflight[0], self._inflight[2] & MASK32] + [
                w & MASK32 for w in self._inflight[1]]
        cp += self._status_words()
        h = fnv1a64(b"".join(w.to_bytes(4, "little") for w in cp), h)
        return h


# -- bring-up ---------------------------------------------------------------

def set_translation_root(device: SimDevice, root_id: int):
    """Point translation at ``root_id``'s table.

    The register write covers the built-in unit; when a platform unit is
    active instead, its root must be swapped in the same operation so the
    two deployments stay behaviorally identical.
    """
    device.mmio_write(REG_IOMMU_ROOT, root_id)
    if device.active_iommu is not device.iommu:
        device.active_iommu.set_root(root_id)


def install_firmware(device: SimDevice, image=FIRMWARE_IMAGE):
    device.mmio_write(REG_FW_ADDR, 0)
    for word in image:
        device.mmio_write(REG_FW_DATA, word)
    device.mmio_write(REG_FW_CTRL, FW_CTRL_VERIFY)
    return device.mmio_read(REG_FW_CTRL) == FW_CTRL_READY


def bring_up(device: SimDevice):
    """Common power-on sequence: firmware, interrupts, translation, clean CP."""
    if not install_firmware(device):
        raise RegFault("firmware checksum rejected")
    device.mmio_write(REG_IRQ_ENABLE, 1)
    device.mmio_write(REG_IOMMU_ENABLE, 1)
    device.mmio_write(REG_CP_RESET, 1)
    for off in (REG_DISP_PLL, REG_DISP_TIMING_H, REG_DISP_TIMING_V, REG_DISP_ENABLE):
        device.mmio_write(off, 0)
