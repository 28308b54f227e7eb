"""Baseline monolithic driver: all management in the kernel.

Applications hold opaque buffer ids and call across the user/kernel boundary
for every operation; payloads and command streams are copied across that
boundary and every submitted instruction is software-validated (ownership,
bounds, no sensitive register targets) before being patched with real device
addresses and written into the kernel-owned ring.  This is the cost structure
the library driver removes, kept behaviorally identical so workload results
can be compared byte for byte.

Command streams are built from the Cs* instruction descriptions below, which
reference buffers as (id, byte offset) pairs; applications never see device
addresses.
"""

from __future__ import annotations

from dataclasses import dataclass
import struct

from devmux import simdev
from devmux.alloc import FirstFitAllocator, SlabPool
from devmux.errors import (BadHandle, DeviceFault, InvalError, NotFoundError,
                           NotSupportedError, OutOfPool, OutOfRange,
                           OutOfVram, PermError)
from devmux.simdev import (APERTURE_BASE, CO_ADD, CO_DOT, CO_MUL, DISPLAY_MODES,
                           FAULT_FLAGS, OP_COMPUTE, OP_COPY, OP_NOP,
                           OP_SET_REG, PAGE_SIZE, REG_DISP_ENABLE,
                           REG_DISP_PLL, REG_DISP_TIMING_H, REG_DISP_TIMING_V,
                           REG_FB_BASE, REG_IH_PAGE_ADDR, REG_RB_BASE,
                           REG_RB_SIZE, REG_RB_TAIL, SCRATCH_REGISTERS, WORD,
                           Fence, PageTable, SimDevice, set_translation_root)

LEGACY_API = ("legacy_open", "legacy_close", "legacy_alloc", "legacy_free",
              "legacy_write", "legacy_read", "legacy_map", "legacy_submit",
              "legacy_wait", "legacy_fence_status", "legacy_set_mode",
              "legacy_info")

KERNEL_TABLE_ID = 1
POOL_PAGES_DEFAULT = 64
RING_WORDS = 4096
RING_PAGES = RING_WORDS * WORD // PAGE_SIZE
STAGING_PAGE = 1 + RING_PAGES              # pool page index
SLAB_FIRST_PAGE = STAGING_PAGE + 1
WAIT_ROUND_CYCLES = 8192                   # device budget per wait syscall

VRAM = "VRAM"
GTT = "GTT"
SYS = "SYS"


# -- application-visible command stream ----------------------------------

class CsNop:
    __slots__ = ()


class CsSetReg:
    __slots__ = ("reg", "value")

    def __init__(self, reg: int, value: int):
        self.reg = reg
        self.value = value


class CsCompute:
    __slots__ = ("sub", "dst", "src1", "src2", "count")

    def __init__(self, sub: int, dst, src1, src2, count: int):
        self.sub = sub
        self.dst = dst      # (buffer id, byte offset)
        self.src1 = src1
        self.src2 = src2
        self.count = count


class CsCopy:
    __slots__ = ("dst", "src", "count")

    def __init__(self, dst, src, count: int):
        self.dst = dst
        self.src = src
        self.count = count


@dataclass
class KBuffer:
    id: int
    owner: int
    placement: str
    size: int
    device_addr: int | None = None
    pool_off: int | None = None
    host: bytearray | None = None


class LegacyDriver:
    """The whole driver, kernel-side; one instance owns the device."""

    def __init__(self, platform, device: SimDevice, *,
                 pool_pages: int = POOL_PAGES_DEFAULT):
        if pool_pages < SLAB_FIRST_PAGE + 1:
            raise InvalError(f"pool must exceed {SLAB_FIRST_PAGE} pages")
        self.platform = platform
        self.device = device
        if not simdev.install_firmware(device):
            raise InvalError("firmware rejected")
        device.mmio_write(simdev.REG_IRQ_ENABLE, 1)
        device.mmio_write(simdev.REG_IOMMU_ENABLE, 1)
        device.mmio_write(simdev.REG_CP_RESET, 1)
        # the monolithic driver owns all of device memory: segment wide open
        device.mmio_write(simdev.REG_MC_SEG_BASE, 0)
        device.mmio_write(simdev.REG_MC_SEG_LIMIT, len(device.vram))

        self._table = PageTable()
        device.translation_tables[KERNEL_TABLE_ID] = self._table
        set_translation_root(device, KERNEL_TABLE_ID)

        vaddrs = platform.alloc_pages("legacy-kernel", pool_pages)
        self._frames = []
        for i, vaddr in enumerate(vaddrs):
            frame = platform.resolve("legacy-kernel", vaddr)
            self._table.map(i * PAGE_SIZE, frame, writable=True)
            platform.sysmem.pin(frame)
            self._frames.append(frame)

        device.mmio_write(REG_RB_BASE, APERTURE_BASE + PAGE_SIZE)
        device.mmio_write(REG_RB_SIZE, RING_WORDS)
        device.mmio_write(REG_IH_PAGE_ADDR, APERTURE_BASE)

        self._vram_alloc = FirstFitAllocator(len(device.vram))
        self._slab = SlabPool((pool_pages - SLAB_FIRST_PAGE) * PAGE_SIZE)
        self.buffers = {}
        self.clients = {}
        self._next_client = 1
        self._next_buffer = 1
        self._next_seq = 1
        self._tail_words = 0
        self._inflight_seq = 0  # last seq written; 0 when known drained

    # -- kernel-side plumbing (no boundary crossings in here) ---------------

    def _charge(self, n_bytes: int = 0):
        self.platform.ledger.crossings += 1
        self.platform.ledger.bytes_copied += n_bytes

    def _pool_write(self, pool_off: int, data: bytes):
        mem = self.platform.sysmem
        done = 0
        while done < len(data):
            page, off = divmod(pool_off + done, PAGE_SIZE)
            take = min(len(data) - done, PAGE_SIZE - off)
            mem.write(self._frames[page], off, data[done:done + take])
            done += take

    def _pool_read(self, pool_off: int, n: int) -> bytes:
        mem = self.platform.sysmem
        out = []
        done = 0
        while done < n:
            page, off = divmod(pool_off + done, PAGE_SIZE)
            take = min(n - done, PAGE_SIZE - off)
            out.append(mem.read(self._frames[page], off, take))
            done += take
        return b"".join(out)

    def _read_status(self):
        return struct.unpack("<QII",
                             self.platform.sysmem.read(self._frames[0], 0, 16))

    def _check_fault(self):
        flags = self._read_status()[2]
        if flags & FAULT_FLAGS:
            raise DeviceFault(flags, "device reported a fault")

    def _step(self, budget: int) -> int:
        report = self.device.step(budget)
        self.platform.ledger.device_cycles += report.cycles_used
        return report.cycles_used

    def _drain(self):
        while not self.device.cp_idle:
            self._step(WAIT_ROUND_CYCLES)
        self._inflight_seq = 0

    def _push_ring(self, payload_words, drain: bool) -> int:
        """Write one fenced chunk into the ring and trigger it."""
        if self._inflight_seq:
            self._drain()  # reclaim the whole ring before reusing it
        seq = self._next_seq
        self._next_seq += 1
        words = list(payload_words) + Fence(seq).encode()
        ring_base = PAGE_SIZE
        start = self._tail_words
        first = min(len(words), RING_WORDS - start)
        self._pool_write(ring_base + start * WORD,
                         struct.pack(f"<{first}I", *words[:first]))
        if first < len(words):
            self._pool_write(ring_base,
                             struct.pack(f"<{len(words) - first}I", *words[first:]))
        self._tail_words = (start + len(words)) % RING_WORDS
        self.device.mmio_write(REG_RB_TAIL, self._tail_words * WORD)
        self._inflight_seq = seq
        if drain:
            self._drain()
            self._check_fault()
        return seq

    def _staging_addr(self) -> int:
        return APERTURE_BASE + STAGING_PAGE * PAGE_SIZE

    def _vram_write(self, device_addr: int, data: bytes):
        done = 0
        while done < len(data):
            chunk = data[done:done + PAGE_SIZE]
            self._pool_write(STAGING_PAGE * PAGE_SIZE, chunk)
            self._push_ring([OP_COPY, device_addr + done,
                             self._staging_addr(), len(chunk) // WORD],
                            drain=True)
            done += len(chunk)

    def _vram_read(self, device_addr: int, n: int) -> bytes:
        out = []
        done = 0
        while done < n:
            take = min(n - done, PAGE_SIZE)
            self._push_ring([OP_COPY, self._staging_addr(),
                             device_addr + done, take // WORD], drain=True)
            out.append(self._pool_read(STAGING_PAGE * PAGE_SIZE, take))
            done += take
        return b"".join(out)

    def _client(self, client: int) -> int:
        if client not in self.clients:
            raise BadHandle(f"no client {client}")
        return client

    def _buffer(self, client: int, buffer_id: int) -> KBuffer:
        buf = self.buffers.get(buffer_id)
        if buf is None:
            raise NotFoundError(f"no buffer {buffer_id}")
        if buf.owner != client:
            raise PermError(f"buffer {buffer_id} belongs to another client")
        return buf

    # -- the syscall surface ---------------------------------------------------

    def legacy_open(self, app) -> int:
        self._charge()
        client = self._next_client
        self._next_client += 1
        self.clients[client] = app
        return client

    def legacy_close(self, client: int):
        self._charge()
        self._client(client)
        for buffer_id in [b.id for b in self.buffers.values() if b.owner == client]:
            self._release(self.buffers.pop(buffer_id))
        del self.clients[client]

    def _release(self, buf: KBuffer):
        if buf.placement == VRAM:
            self._vram_alloc.free(buf.device_addr, buf.size)
        elif buf.placement == GTT:
            self._slab.free(buf.pool_off - SLAB_FIRST_PAGE * PAGE_SIZE, buf.size)

    def legacy_alloc(self, client: int, size: int, placement: str) -> int:
        self._charge()
        self._client(client)
        if size <= 0:
            raise InvalError("size must be positive")
        device_addr = pool_off = host = None
        if placement == VRAM:
            device_addr = self._vram_alloc.alloc(size)
            if device_addr is None:
                raise OutOfVram(f"no device memory for {size} bytes")
        elif placement == GTT:
            slab_off = self._slab.alloc(size)
            if slab_off is None:
                raise OutOfPool(f"no pool space for {size} bytes")
            pool_off = SLAB_FIRST_PAGE * PAGE_SIZE + slab_off
            device_addr = APERTURE_BASE + pool_off
        elif placement == SYS:
            host = bytearray(size)
        else:
            raise InvalError(f"unknown placement {placement!r}")
        buffer_id = self._next_buffer
        self._next_buffer += 1
        self.buffers[buffer_id] = KBuffer(buffer_id, client, placement, size,
                                          device_addr, pool_off, host)
        return buffer_id

    def legacy_free(self, client: int, buffer_id: int):
        self._charge()
        self._client(client)
        buf = self._buffer(client, buffer_id)
        self._release(buf)
        del self.buffers[buffer_id]

    @staticmethod
    def _check_range(buf: KBuffer, offset: int, n: int):
        if offset < 0 or n < 0 or offset + n > buf.size:
            raise OutOfRange(f"[{offset}, {offset + n}) outside {buf.size}-byte buffer")

    def legacy_write(self, client: int, buffer_id: int, offset: int, data: bytes):
        data = bytes(data)
        self._charge(len(data))
        self._client(client)
        buf = self._buffer(client, buffer_id)
        self._check_range(buf, offset, len(data))
        if buf.placement == SYS:
            buf.host[offset:offset + len(data)] = data
        elif buf.placement == GTT:
            self._pool_write(buf.pool_off + offset, data)
        else:
            if offset % WORD or len(data) % WORD:
                raise InvalError("device-memory access must be word-aligned")
            self._vram_write(buf.device_addr + offset, data)

    def legacy_read(self, client: int, buffer_id: int, offset: int, n: int) -> bytes:
        self._charge(n)
        self._client(client)
        buf = self._buffer(client, buffer_id)
        self._check_range(buf, offset, n)
        if buf.placement == SYS:
            return bytes(buf.host[offset:offset + n])
        if buf.placement == GTT:
            return self._pool_read(buf.pool_off + offset, n)
        if offset % WORD or n % WORD:
            raise InvalError("device-memory access must be word-aligned")
        return self._vram_read(buf.device_addr + offset, n)

    def legacy_map(self, client: int, buffer_id: int):
        self._charge()
        self._client(client)
        self._buffer(client, buffer_id)
        raise NotSupportedError("this driver offers no user mappings")

    def _resolve_ref(self, client: int, ref, n_words: int) -> int:
        """Ownership + bounds + device-visibility check; returns the address."""
        buffer_id, offset = ref
        buf = self._buffer(client, buffer_id)
        if buf.device_addr is None:
            raise InvalError(f"buffer {buffer_id} is not device-visible")
        if offset % WORD:
            raise InvalError("operand offsets must be word-aligned")
        self._check_range(buf, offset, n_words * WORD)
        return buf.device_addr + offset

    def legacy_submit(self, client: int, batch) -> int:
        """Copy, validate, patch, and enqueue an application batch."""
        self._client(client)
        patched = []
        total_words = 0
        for instr in batch:
            if isinstance(instr, CsNop):
                words = [OP_NOP]
            elif isinstance(instr, CsSetReg):
                if instr.reg not in SCRATCH_REGISTERS:
                    raise InvalError(f"SET_REG target 0x{instr.reg:x} is sensitive")
                words = [OP_SET_REG, instr.reg, instr.value & 0xFFFFFFFF]
            elif isinstance(instr, CsCompute):
                if instr.sub not in (CO_ADD, CO_MUL, CO_DOT):
                    raise InvalError(f"unknown compute sub-op {instr.sub}")
                if instr.count < 0:
                    raise InvalError("negative count")
                dst_words = 1 if instr.sub == CO_DOT else instr.count
                words = [OP_COMPUTE, instr.sub,
                         self._resolve_ref(client, instr.dst, dst_words),
                         self._resolve_ref(client, instr.src1, instr.count),
                         self._resolve_ref(client, instr.src2, instr.count),
                         instr.count]
            elif isinstance(instr, CsCopy):
                if instr.count < 0:
                    raise InvalError("negative count")
                words = [OP_COPY,
                         self._resolve_ref(client, instr.dst, instr.count),
                         self._resolve_ref(client, instr.src, instr.count),
                         instr.count]
            else:
                raise InvalError(f"unknown instruction {type(instr).__name__}")
            patched.append(words)
            total_words += len(words)
        # one syscall: the whole stream crosses the boundary and is inspected
        self._charge(total_words * WORD)
        self.platform.ledger.instructions_validated += total_words
        chunk = []
        chunk_words = 0
        for words in patched:
            if chunk_words + len(words) + 4 > RING_WORDS - 1:
                self._push_ring([w for ws in chunk for w in ws], drain=True)
                chunk, chunk_words = [], 0
            chunk.append(words)
            chunk_words += len(words)
        seq = self._push_ring([w for ws in chunk for w in ws], drain=False)
        return seq

    def legacy_wait(self, client: int, seq: int):
        """Syscall-based completion wait: one crossing per poll round."""
        self._client(client)
        rounds = 0
        while True:
            rounds += 1
            self._charge()
            self._check_fault()
            if self._read_status()[0] >= seq:
                if self.device.cp_idle:
                    self._inflight_seq = 0
                return
            if self._step(WAIT_ROUND_CYCLES) == 0:
                self._check_fault()
                if self._read_status()[0] >= seq:
                    self._inflight_seq = 0
                    return
                raise InvalError(f"fence {seq} can never complete (device idle)")

    def legacy_fence_status(self, client: int, seq: int) -> bool:
        self._charge()
        self._client(client)
        self._check_fault()
        return self._read_status()[0] >= seq

    def legacy_set_mode(self, client: int, display: int, mode, fb: int | None = None):
        self._charge()
        self._client(client)
        if not 0 <= display < len(DISPLAY_MODES):
            raise InvalError(f"no display {display}")
        mode = tuple(mode)
        if mode not in DISPLAY_MODES[display]:
            raise InvalError(f"mode {mode} not offered")
        width, height, refresh = mode
        self.device.mmio_write(REG_DISP_PLL, refresh)
        self.device.mmio_write(REG_DISP_TIMING_H, width)
        self.device.mmio_write(REG_DISP_TIMING_V, height)
        self.device.mmio_write(REG_DISP_ENABLE, 1)
        if fb is not None:
            buf = self._buffer(client, fb)
            if buf.device_addr is None:
                raise InvalError(f"buffer {fb} cannot be scanned out")
            self.device.mmio_write(REG_FB_BASE, buf.device_addr)

    def legacy_info(self, client: int) -> dict:
        self._charge()
        self._client(client)
        return {"vram_total": len(self.device.vram),
                "displays": DISPLAY_MODES,
                "api": LEGACY_API}
