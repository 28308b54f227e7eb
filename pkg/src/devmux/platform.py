"""Host-side substrate: system memory, address spaces, and the cost model.

Nothing here is device-specific.  System memory is a flat array of 4 KiB
frames with per-frame ownership and pin counts; an AddressSpace hands out
process-virtual page addresses (the numbers a user library sees before any
device translation); the CostLedger accumulates the abstract costs every
higher layer reports.
"""

from __future__ import annotations

from devmux.errors import InvalError, OutOfMemory, PermError
from devmux.simdev import PAGE_SIZE

# simulated cost weights (time units per event)
COST_CROSSING = 1000.0
COST_PER_BYTE = 0.25
COST_PER_VALIDATED = 2.0
COST_PER_CYCLE = 1.0
COST_PER_CORE_CALL = 10.0


class CostLedger:
    """Counts of everything the cost model charges for.

    crossings: protection-domain switches (user <-> kernel round trips)
    bytes_copied: payload bytes moved across a protection boundary
    instructions_validated: command words a trusted party inspected
    device_cycles: simulated device execution cycles
    core_calls: invocations of trusted-core entry points
    """

    FIELDS = ("crossings", "bytes_copied", "instructions_validated",
              "device_cycles", "core_calls")

    def __init__(self, *, crossing_cost: float = COST_CROSSING,
                 byte_cost: float = COST_PER_BYTE,
                 validated_cost: float = COST_PER_VALIDATED,
                 cycle_cost: float = COST_PER_CYCLE,
                 core_call_cost: float = COST_PER_CORE_CALL):
        self.crossings = 0
        self.bytes_copied = 0
        self.instructions_validated = 0
        self.device_cycles = 0
        self.core_calls = 0
        self.weights = (crossing_cost, byte_cost, validated_cost,
                        cycle_cost, core_call_cost)

    def simulated_time(self) -> float:
        wc, wb, wv, wy, wk = self.weights
        return (self.crossings * wc + self.bytes_copied * wb
                + self.instructions_validated * wv
                + self.device_cycles * wy + self.core_calls * wk)

    def snapshot(self) -> dict:
        d = {f: getattr(self, f) for f in self.FIELDS}
        d["simulated_time"] = self.simulated_time()
        return d

    def delta_since(self, before: dict) -> dict:
        now = self.snapshot()
        return {k: now[k] - before[k] for k in now}


class SystemMemory:
    """Flat frame pool.  ``data`` is addressable as frame * 4096 + offset."""

    def __init__(self, frames: int):
        self.frames = frames
        self.data = bytearray(frames * PAGE_SIZE)
        self.owner = [None] * frames
        self.pins = [0] * frames

    def alloc_frames(self, n: int, owner) -> list:
        out = []
        for frame in range(self.frames):
            if self.owner[frame] is None:
                out.append(frame)
                if len(out) == n:
                    break
        if len(out) < n:
            raise OutOfMemory(f"wanted {n} frames, {len(out)} free")
        for frame in out:
            self.owner[frame] = owner
        return out

    def free_frames(self, frames, owner):
        for frame in frames:
            if self.owner[frame] != owner:
                raise PermError(f"frame {frame} not owned by {owner}")
            if self.pins[frame]:
                raise PermError(f"frame {frame} still pinned")
            self.owner[frame] = None
            self.data[frame * PAGE_SIZE:(frame + 1) * PAGE_SIZE] = bytes(PAGE_SIZE)

    def pin(self, frame: int):
        self.pins[frame] += 1

    def unpin(self, frame: int):
        if self.pins[frame] <= 0:
            raise InvalError(f"frame {frame} not pinned")
        self.pins[frame] -= 1

    def read(self, frame: int, offset: int, n: int) -> bytes:
        base = frame * PAGE_SIZE + offset
        return bytes(self.data[base:base + n])

    def write(self, frame: int, offset: int, payload: bytes):
        base = frame * PAGE_SIZE + offset
        self.data[base:base + len(payload)] = payload


class AddressSpace:
    """Process-virtual page address allocator (bump, never reused)."""

    BASE = 0x1000_0000

    def __init__(self):
        self._next = self.BASE

    def reserve(self, n_pages: int) -> int:
        va = self._next
        self._next += n_pages * PAGE_SIZE
        return va


class Platform:
    """One simulated host: memory, per-process address spaces, one ledger.

    ``alloc_pages`` stands in for the mmap syscall, so it bills one crossing;
    frame bookkeeping afterwards is local.
    """

    def __init__(self, sysmem_frames: int = 4096, ledger: CostLedger | None = None):
        self.sysmem = SystemMemory(sysmem_frames)
        self.ledger = ledger if ledger is not None else CostLedger()
        self._spaces = {}
        self.page_map = {}  # (owner, vaddr) -> frame

    def space(self, owner) -> AddressSpace:
        if owner not in self._spaces:
            self._spaces[owner] = AddressSpace()
        return self._spaces[owner]

    def alloc_pages(self, owner, n_pages: int) -> list:
        """Map ``n_pages`` fresh zeroed pages; returns their vaddrs.

        Bills the crossing before trying to allocate: the trip into the
        kernel happens whether or not memory is available.
        """
        self.ledger.crossings += 1
        frames = self.sysmem.alloc_frames(n_pages, owner)
        va = self.space(owner).reserve(n_pages)
        out = []
        for i, frame in enumerate(frames):
            vaddr = va + i * PAGE_SIZE
            self.page_map[(owner, vaddr)] = frame
            out.append(vaddr)
        return out

    def free_pages(self, owner, vaddrs):
        self.ledger.crossings += 1
        frames = []
        for vaddr in vaddrs:
            frame = self.page_map.get((owner, vaddr))
            if frame is None:
                raise InvalError(f"vaddr 0x{vaddr:x} not mapped for {owner}")
            del self.page_map[(owner, vaddr)]
            frames.append(frame)
        self.sysmem.free_frames(frames, owner)

    def resolve(self, owner, vaddr: int) -> int:
        """Virtual page address -> frame (page-aligned lookups only)."""
        frame = self.page_map.get((owner, vaddr))
        if frame is None:
            raise InvalError(f"vaddr 0x{vaddr:x} not mapped for {owner}")
        return frame
