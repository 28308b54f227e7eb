"""The trusted core: the only code that touches sensitive device state.

Everything an application library may do goes through the numbered entry
points below.  The core enforces isolation four ways: a register ACL that
admits only management registers, per-client translation tables it alone
edits, a private device-memory segment per client enforced by the memory
controller, and display mode setting kept entirely on this side.

Client-visible entry points (the whole attack surface):

    lib calls   init_device_lib, iommu_map_page, iommu_unmap_page,
                alloc_device_memory, release_device_memory,
                access_register, set_mode
    scheduler   bind_device_lib, revoke_device_lib

Builds for devices without dedicated memory drop the two device-memory
calls, leaving seven entry points.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from devmux import simdev
from devmux.alloc import FirstFitAllocator
from devmux.errors import (BusyError, DoubleInit, ExistsError, InvalError,
                           NotBoundError, NotFoundError, NotInitialized,
                           NotSupportedError, OutOfSegment, OutOfVram,
                           PermError)
from devmux.simdev import (APERTURE_BASE, APERTURE_END, DISPLAY_MODES,
                           M_REGISTERS, PAGE_SIZE, REG_CACHE_FLUSH,
                           REG_DISP_ENABLE, REG_DISP_PLL, REG_DISP_TIMING_H,
                           REG_DISP_TIMING_V, REG_IOMMU_ROOT, REG_MC_SEG_BASE,
                           REG_MC_SEG_LIMIT, REG_RB_HEAD, REG_CP_RESET,
                           REG_TLB_FLUSH, PageTable, SimDevice,
                           set_translation_root)

LIB_CALLS = ("init_device_lib", "iommu_map_page", "iommu_unmap_page",
             "alloc_device_memory", "release_device_memory",
             "access_register", "set_mode")
DEVICE_MEMORY_CALLS = ("alloc_device_memory", "release_device_memory")
SCHEDULER_CALLS = ("bind_device_lib", "revoke_device_lib")

SEGMENT_BYTES_DEFAULT = 1 << 20

# register ACL: every management register, with RB_HEAD read-only.  By
# construction this cannot name a sensitive register.
ACL_READ = frozenset(M_REGISTERS)
ACL_WRITE = frozenset(off for off in M_REGISTERS if off != REG_RB_HEAD)

ST_INITIALIZED = "INITIALIZED"
ST_BOUND = "BOUND"
ST_REVOKED_IDLE = "REVOKED-IDLE"

_REVOKE_STEP_CHUNK = 4096  # cycles per step call while draining


@dataclass(frozen=True)
class InfoPage:
    """Read-only per-client device description, identical for every client.

    Wire layout is little-endian u32s: version, vram_total, segment_size,
    n_displays, then per display a mode count followed by (width, height,
    refresh) triples.
    """

    version: int
    vram_total: int
    segment_size: int
    displays: tuple

    def to_bytes(self) -> bytes:
        words = [self.version, self.vram_total, self.segment_size,
                 len(self.displays)]
        for modes in self.displays:
            words.append(len(modes))
            for w, h, r in modes:
                words.extend((w, h, r))
        return struct.pack(f"<{len(words)}I", *words)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "InfoPage":
        words = list(struct.unpack_from(f"<{len(blob) // 4}I", blob))
        version, vram_total, segment_size, n_displays = words[:4]
        pos = 4
        displays = []
        for _ in range(n_displays):
            n_modes = words[pos]
            pos += 1
            modes = []
            for _ in range(n_modes):
                modes.append(tuple(words[pos:pos + 3]))
                pos += 3
            displays.append(tuple(modes))
        return cls(version, vram_total, segment_size, tuple(displays))


class LibContext:
    """Everything the core tracks about one client library."""

    def __init__(self, lib_id: int, owner, segment_base: int, segment_limit: int):
        self.id = lib_id
        self.owner = owner
        self.state = ST_INITIALIZED
        self.segment_base = segment_base
        self.segment_limit = segment_limit
        self.snapshot = {off: 0 for off in M_REGISTERS}
        self.table = PageTable()
        self.vaddr_map = {}  # vaddr -> (iaddr, frame)
        self.iaddr_map = {}  # iaddr -> vaddr
        self.pinned = set()
        self.segment_alloc = FirstFitAllocator(segment_limit - segment_base)


class DeviceCore:
    """Owns one device on behalf of many mutually distrusting clients."""

    def __init__(self, platform, device: SimDevice, *,
                 device_memory: bool = True,
                 segment_bytes: int = SEGMENT_BYTES_DEFAULT):
        if segment_bytes % PAGE_SIZE:
            raise InvalError("segment size must be page-aligned")
        self.platform = platform
        self.device = device
        self.device_memory = device_memory
        self.segment_bytes = segment_bytes
        self.contexts = {}
        self.bound = None
        self._initialized = False
        self._next_id = 1
        self._free_segments = []
        self.info = InfoPage(version=1, vram_total=len(device.vram),
                             segment_size=segment_bytes,
                             displays=DISPLAY_MODES)
        # audit counters; the flush ones exist to prove revocation hygiene
        self.tlb_flush_count = 0
        self.cache_flush_count = 0
        self.snapshot_count = 0
        self.restore_count = 0

    # -- surface inventory -------------------------------------------------

    def api_surface(self) -> tuple:
        lib = tuple(name for name in LIB_CALLS
                    if self.device_memory or name not in DEVICE_MEMORY_CALLS)
        return lib + SCHEDULER_CALLS

    # -- internals ---------------------------------------------------------

    def _charge_call(self):
        self.platform.ledger.core_calls += 1

    def _charge_crossing(self):
        self.platform.ledger.crossings += 1

    def _ctx(self, lib_id: int) -> LibContext:
        ctx = self.contexts.get(lib_id)
        if ctx is None:
            raise NotFoundError(f"no such lib {lib_id}")
        return ctx

    def _flush_tlb(self):
        self.device.mmio_write(REG_TLB_FLUSH, 1)
        self.tlb_flush_count += 1

    def _flush_cache(self):
        self.device.mmio_write(REG_CACHE_FLUSH, 1)
        self.cache_flush_count += 1

    # -- one-time setup ------------------------------------------------------

    def device_init(self):
        """Power-on: firmware load and verify, interrupts, translation, CP."""
        self._charge_call()
        if self._initialized:
            raise DoubleInit("device already initialized")
        simdev.bring_up(self.device)
        n = len(self.device.vram) // self.segment_bytes
        self._free_segments = list(range(n))
        self._initialized = True

    # -- lib calls -----------------------------------------------------------

    def init_device_lib(self, app):
        self._charge_call()
        if not self._initialized:
            raise NotInitialized("device_init has not run")
        if not self._free_segments:
            raise OutOfVram("no device-memory segment free")
        seg = self._free_segments.pop(0)
        base = seg * self.segment_bytes
        lib_id = self._next_id
        self._next_id += 1
        ctx = LibContext(lib_id, app, base, base + self.segment_bytes)
        self.contexts[lib_id] = ctx
        self.device.translation_tables[lib_id] = ctx.table
        return lib_id, self.info

    def iommu_map_page(self, lib_id: int, vaddr: int, iaddr: int):
        self._charge_call()
        self._charge_crossing()
        ctx = self._ctx(lib_id)
        if iaddr % PAGE_SIZE or not APERTURE_BASE <= iaddr < APERTURE_END:
            raise InvalError(f"bad aperture address 0x{iaddr:x}")
        frame = self.platform.page_map.get((ctx.owner, vaddr))
        if frame is None:
            raise PermError(f"page 0x{vaddr:x} not owned by {ctx.owner}")
        if iaddr in ctx.iaddr_map or vaddr in ctx.vaddr_map:
            raise ExistsError("page already mapped")
        ctx.table.map(iaddr - APERTURE_BASE, frame, writable=True)
        self.platform.sysmem.pin(frame)
        ctx.pinned.add(frame)
        ctx.vaddr_map[vaddr] = (iaddr, frame)
        ctx.iaddr_map[iaddr] = vaddr

    def iommu_unmap_page(self, lib_id: int, vaddr: int):
        self._charge_call()
        self._charge_crossing()
        ctx = self._ctx(lib_id)
        entry = ctx.vaddr_map.get(vaddr)
        if entry is None:
            raise NotFoundError(f"vaddr 0x{vaddr:x} not mapped")
        iaddr, frame = entry
        ctx.table.unmap(iaddr - APERTURE_BASE)
        self.platform.sysmem.unpin(frame)
        if self.platform.sysmem.pins[frame] == 0:
            ctx.pinned.discard(frame)
        del ctx.vaddr_map[vaddr]
        del ctx.iaddr_map[iaddr]
        if ctx.state == ST_BOUND:
            self._flush_tlb()  # the device may hold the dead translation

    def alloc_device_memory(self, lib_id: int, size: int) -> int:
        self._charge_call()
        if not self.device_memory:
            raise NotSupportedError("device has no dedicated memory")
        ctx = self._ctx(lib_id)
        if size <= 0:
            raise InvalError("size must be positive")
        off = ctx.segment_alloc.alloc(size)
        if off is None:
            raise OutOfSegment(f"no room for {size} bytes in segment")
        return off

    def release_device_memory(self, lib_id: int, addr: int, size: int):
        self._charge_call()
        if not self.device_memory:
            raise NotSupportedError("device has no dedicated memory")
        ctx = self._ctx(lib_id)
        if not ctx.segment_alloc.free(addr, size):
            raise InvalError(f"no allocation (0x{addr:x}, {size})")

    def access_register(self, lib_id: int, reg: int, value: int,
                        is_write: bool) -> int:
        self._charge_call()
        self._charge_crossing()
        ctx = self._ctx(lib_id)
        if ctx.state != ST_BOUND:
            raise NotBoundError(f"lib {lib_id} not bound")
        acl = ACL_WRITE if is_write else ACL_READ
        if reg not in acl:
            raise PermError(f"register 0x{reg:x} not authorized")
        if is_write:
            self.device.mmio_write(reg, value)
            return value & 0xFFFFFFFF
        return self.device.mmio_read(reg)

    def set_mode(self, lib_id: int, display: int, mode):
        self._charge_call()
        ctx = self._ctx(lib_id)
        if ctx.state != ST_BOUND:
            raise NotBoundError(f"lib {lib_id} not bound")
        if not 0 <= display < len(self.info.displays):
            raise InvalError(f"no display {display}")
        mode = tuple(mode)
        if mode not in self.info.displays[display]:
            raise InvalError(f"mode {mode} not offered")
        width, height, refresh = mode
        self.device.mmio_write(REG_DISP_PLL, refresh)
        self.device.mmio_write(REG_DISP_TIMING_H, width)
        self.device.mmio_write(REG_DISP_TIMING_V, height)
        self.device.mmio_write(REG_DISP_ENABLE, 1)

    # -- scheduler calls -------------------------------------------------------

    def bind_device_lib(self, lib_id: int):
        self._charge_call()
        ctx = self._ctx(lib_id)
        if self.bound is not None:
            raise BusyError(f"lib {self.bound} is bound")
        self.device.restore_registers(ctx.snapshot)
        self.restore_count += 1
        self.device.mmio_write(REG_MC_SEG_BASE, ctx.segment_base)
        self.device.mmio_write(REG_MC_SEG_LIMIT, ctx.segment_limit)
        set_translation_root(self.device, lib_id)
        self._flush_tlb()
        self._flush_cache()
        ctx.state = ST_BOUND
        self.bound = lib_id

    def revoke_device_lib(self, lib_id: int):
        self._charge_call()
        ctx = self._ctx(lib_id)
        if ctx.state != ST_BOUND:
            raise NotBoundError(f"lib {lib_id} not bound")
        device = self.device
        while not device.cp_idle:  # block until ongoing execution finishes
            report = device.step(_REVOKE_STEP_CHUNK)
            self.platform.ledger.device_cycles += report.cycles_used
        ctx.snapshot = {off: device.mmio_read(off) for off in M_REGISTERS}
        self.snapshot_count += 1
        device.mmio_write(REG_CP_RESET, 1)
        self._flush_cache()
        self._flush_tlb()
        ctx.state = ST_REVOKED_IDLE
        self.bound = None
