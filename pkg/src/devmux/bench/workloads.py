"""Benchmark workloads runnable on either driver stack.

Each workload is a small Program with a fixed life cycle:

    prepare()   create driver/client state and buffers (library: no device
                access yet, so it is legal before the first bind)
    start()     one-time uploads and mode setting (library: needs the bind)
    iterate()   run one full iteration, blocking until the device is done
    advance()   submit-or-poll step for cooperative scheduling (library only)
    finalize()  read results back, verify against a host oracle, and return
                result digests

The same instruction streams are generated on both stacks so results (and
their digests) must match bit for bit.
"""

from __future__ import annotations

import struct
import statistics

from .. import libdrv
from ..devcore import DeviceCore
from ..errors import InvalError, VerifyFail
from ..legacydrv import CsCompute, LegacyDriver
from ..libdrv import LibraryDriver
from ..simdev import CO_ADD, CO_DOT, MASK32, WORD, Compute, fnv1a64
from .config import BenchConfig, WorkloadSpec
from .report import RunReport
from .world import World, build_world

FB_WIDTH = 64
FB_HEIGHT = 48
FB_WORDS = FB_WIDTH * FB_HEIGHT
DISPLAY_MODE = (FB_WIDTH, FB_HEIGHT, 60)
GFX_BATCH_INSTRS = 32
VERTEX_WORDS_PER_SIZE = 64

# A chunk must fit the ring with its trailing fence (4 words).
MAX_DOTS_PER_SUBMIT = (libdrv.RING_WORDS - 1 - 4) // 6


def _pack(words) -> bytes:
    return struct.pack(f"<{len(words)}I", *words)


def _unpack(data: bytes) -> list:
    return list(struct.unpack(f"<{len(data) // 4}I", data))


# --- host oracles ---------------------------------------------------------

def matmul_fill_a(n: int) -> list:
    return [(i * 131 + j * 7 + 3) & 0xFFFF for i in range(n) for j in range(n)]


def matmul_fill_b(n: int) -> list:
    return [(i * 201 + j * 13 + 5) & 0xFFFF for i in range(n) for j in range(n)]


def matmul_oracle(n: int, a: list, b: list) -> list:
    """Reference product with 32-bit wrap-around, row-major operands."""
    out = [0] * (n * n)
    for r in range(n):
        for c in range(n):
            acc = 0
            for k in range(n):
                acc += a[r * n + k] * b[k * n + c]
            out[r * n + c] = acc & MASK32
    return out


def vertex_fill(n_words: int, salt: int) -> list:
    return [(j * 2654435761 + salt * 97) & MASK32 for j in range(n_words)]


def framebuffer_oracle(vertex_words: list) -> list:
    """The graphics pass doubles every vertex word into the framebuffer."""
    fb = [(2 * v) & MASK32 for v in vertex_words]
    fb.extend([0] * (FB_WORDS - len(fb)))
    return fb


def _transpose(mat: list, n: int) -> list:
    return [mat[r * n + c] for c in range(n) for r in range(n)]


def _chunked(items: list, size: int) -> list:
    return [items[i:i + size] for i in range(0, len(items), size)]


# --- programs -------------------------------------------------------------

class Program:
    """One workload instance bound to a world."""

    needs_bind = False

    def __init__(self, world: World, spec: WorkloadSpec):
        self.world = world
        self.spec = spec
        self.done = False
        self.started = False
        self._iter = 0

    def prepare(self):
        raise NotImplementedError

    def start(self):
        self.started = True

    def iterate(self):
        raise NotImplementedError

    def advance(self):
        raise NotImplementedError

    def finalize(self) -> dict:
        raise NotImplementedError


class _LibraryProgram(Program):
    needs_bind = True

    def __init__(self, world: World, spec: WorkloadSpec):
        super().__init__(world, spec)
        self.lib: LibraryDriver = None
        self._await = 0
        self._batches: list = []
        self._batch_idx = 0

    @property
    def lib_id(self) -> int:
        return self.lib.lib_id

    def _make_lib(self, name: str) -> LibraryDriver:
        pool = self.world.config.pool_pages
        return LibraryDriver(self.world.core, name, pool_pages=pool)

    def _iteration_batches(self) -> list:
        """Instruction chunks for one iteration, each one submit call."""
        raise NotImplementedError

    def _before_iteration(self, index: int):
        pass

    def iterate(self):
        self._iter += 1
        self._before_iteration(self._iter)
        seq = 0
        for batch in self._batches:
            seq = self.lib.submit(batch)
        self.lib.wait_fence(seq)
        if self._iter >= self.spec.iters:
            self.done = True

    def advance(self):
        """Non-blocking step: at most one submit, never a device wait."""
        if self.done:
            return
        if self._await and not self.lib.fence_completed(self._await):
            return
        self._await = 0
        if self._batch_idx == 0:
            if self._iter >= self.spec.iters:
                self.done = True
                return
            self._iter += 1
            self._before_iteration(self._iter)
        self._await = self.lib.submit(self._batches[self._batch_idx])
        self._batch_idx = (self._batch_idx + 1) % len(self._batches)
        if self._batch_idx == 0 and self._iter >= self.spec.iters:
            # All work submitted; done flips once the last fence retires.
            if self.lib.fence_completed(self._await):
                self.done = True

    def pending_fence(self) -> int:
        return self._await


class MatmulLibrary(_LibraryProgram):
    def prepare(self):
        n = self.spec.size
        self.lib = self._make_lib(f"matmul-{id(self):x}")
        nbytes = n * n * WORD
        self.h_a = self.lib.create_buffer(nbytes, libdrv.VRAM)
        self.h_bt = self.lib.create_buffer(nbytes, libdrv.VRAM)
        self.h_c = self.lib.create_buffer(nbytes, libdrv.VRAM)
        a_dev = self.lib.buffers[self.h_a].device_addr
        bt_dev = self.lib.buffers[self.h_bt].device_addr
        c_dev = self.lib.buffers[self.h_c].device_addr
        instrs = [Compute(CO_DOT,
                          c_dev + (r * n + c) * WORD,
                          a_dev + r * n * WORD,
                          bt_dev + c * n * WORD,
                          n)
                  for r in range(n) for c in range(n)]
        self._batches = _chunked(instrs, MAX_DOTS_PER_SUBMIT)

    def start(self):
        n = self.spec.size
        self.a = matmul_fill_a(n)
        self.b = matmul_fill_b(n)
        self.lib.write_buffer(self.h_a, 0, _pack(self.a))
        self.lib.write_buffer(self.h_bt, 0, _pack(_transpose(self.b, n)))
        self.started = True

    def finalize(self) -> dict:
        n = self.spec.size
        got = _unpack(self.lib.read_buffer(self.h_c, 0, n * n * WORD))
        want = matmul_oracle(n, self.a, self.b)
        if got != want:
            raise VerifyFail(f"matmul n={n}: device result differs from host oracle")
        return {"result": f"{fnv1a64(_pack(got)):016x}"}


class _GraphicsLibrary(_LibraryProgram):
    """Shared scaffold: vertex buffer in system pool, framebuffer in VRAM."""

    rewrite_vertices = True

    def prepare(self):
        n = self.spec.size
        if not 1 <= n <= FB_WORDS // VERTEX_WORDS_PER_SIZE:
            raise InvalError(f"graphics size {n} out of range")
        self.n_words = VERTEX_WORDS_PER_SIZE * n
        self.lib = self._make_lib(f"gfx-{id(self):x}")
        self.h_vb = self.lib.create_buffer(self.n_words * WORD, libdrv.GTT)
        self.h_fb = self.lib.create_buffer(FB_WORDS * WORD, libdrv.VRAM)
        vb_dev = self.lib.buffers[self.h_vb].device_addr
        fb_dev = self.lib.buffers[self.h_fb].device_addr
        count = self.n_words // GFX_BATCH_INSTRS
        instrs = [Compute(CO_ADD,
                          fb_dev + s * count * WORD,
                          vb_dev + s * count * WORD,
                          vb_dev + s * count * WORD,
                          count)
                  for s in range(GFX_BATCH_INSTRS)]
        self._batches = [instrs]
        self.last_salt = 0

    def start(self):
        self.lib.set_mode(0, DISPLAY_MODE)
        self.lib.present(self.h_fb)
        if not self.rewrite_vertices:
            self.lib.write_buffer(self.h_vb, 0, _pack(vertex_fill(self.n_words, 0)))
        self.started = True

    def _before_iteration(self, index: int):
        if self.rewrite_vertices:
            self.last_salt = index
            self.lib.write_buffer(self.h_vb, 0,
                                  _pack(vertex_fill(self.n_words, index)))

    def finalize(self) -> dict:
        shot = self.world.device.scanout()
        if shot.faulted:
            raise VerifyFail("scanout faulted")
        want = framebuffer_oracle(vertex_fill(self.n_words, self.last_salt))
        if shot.digest != fnv1a64(_pack(want)):
            raise VerifyFail("framebuffer differs from host oracle")
        return {"result": f"{shot.digest:016x}"}


class VertexArrayLibrary(_GraphicsLibrary):
    rewrite_vertices = True


class DisplayListLibrary(_GraphicsLibrary):
    rewrite_vertices = False


class _LegacyProgram(Program):
    needs_bind = False

    def __init__(self, world: World, spec: WorkloadSpec):
        super().__init__(world, spec)
        self.drv: LegacyDriver = world.legacy
        self.client = None

    def advance(self):
        raise InvalError("legacy programs cannot be scheduled")


class MatmulLegacy(_LegacyProgram):
    def prepare(self):
        n = self.spec.size
        self.client = self.drv.legacy_open(f"matmul-{id(self):x}")
        nbytes = n * n * WORD
        self.b_a = self.drv.legacy_alloc(self.client, nbytes, libdrv.VRAM)
        self.b_bt = self.drv.legacy_alloc(self.client, nbytes, libdrv.VRAM)
        self.b_c = self.drv.legacy_alloc(self.client, nbytes, libdrv.VRAM)
        self._batch = [CsCompute(CO_DOT,
                                 (self.b_c, (r * n + c) * WORD),
                                 (self.b_a, r * n * WORD),
                                 (self.b_bt, c * n * WORD),
                                 n)
                       for r in range(n) for c in range(n)]

    def start(self):
        n = self.spec.size
        self.a = matmul_fill_a(n)
        self.b = matmul_fill_b(n)
        self.drv.legacy_write(self.client, self.b_a, 0, _pack(self.a))
        self.drv.legacy_write(self.client, self.b_bt, 0,
                              _pack(_transpose(self.b, n)))
        self.started = True

    def iterate(self):
        self._iter += 1
        seq = self.drv.legacy_submit(self.client, self._batch)
        self.drv.legacy_wait(self.client, seq)
        if self._iter >= self.spec.iters:
            self.done = True

    def finalize(self) -> dict:
        n = self.spec.size
        got = _unpack(self.drv.legacy_read(self.client, self.b_c, 0, n * n * WORD))
        want = matmul_oracle(n, self.a, self.b)
        if got != want:
            raise VerifyFail(f"matmul n={n}: device result differs from host oracle")
        return {"result": f"{fnv1a64(_pack(got)):016x}"}


class _GraphicsLegacy(_LegacyProgram):
    rewrite_vertices = True

    def prepare(self):
        n = self.spec.size
        if not 1 <= n <= FB_WORDS // VERTEX_WORDS_PER_SIZE:
            raise InvalError(f"graphics size {n} out of range")
        self.n_words = VERTEX_WORDS_PER_SIZE * n
        self.client = self.drv.legacy_open(f"gfx-{id(self):x}")
        self.b_vb = self.drv.legacy_alloc(self.client, self.n_words * WORD,
                                          libdrv.GTT)
        self.b_fb = self.drv.legacy_alloc(self.client, FB_WORDS * WORD,
                                          libdrv.VRAM)
        count = self.n_words // GFX_BATCH_INSTRS
        self._batch = [CsCompute(CO_ADD,
                                 (self.b_fb, s * count * WORD),
                                 (self.b_vb, s * count * WORD),
                                 (self.b_vb, s * count * WORD),
                                 count)
                       for s in range(GFX_BATCH_INSTRS)]
        self.last_salt = 0

    def start(self):
        self.drv.legacy_set_mode(self.client, 0, DISPLAY_MODE, fb=self.b_fb)
        if not self.rewrite_vertices:
            self.drv.legacy_write(self.client, self.b_vb, 0,
                                  _pack(vertex_fill(self.n_words, 0)))
        self.started = True

    def iterate(self):
        self._iter += 1
        if self.rewrite_vertices:
            self.last_salt = self._iter
            self.drv.legacy_write(self.client, self.b_vb, 0,
                                  _pack(vertex_fill(self.n_words, self._iter)))
        seq = self.drv.legacy_submit(self.client, self._batch)
        self.drv.legacy_wait(self.client, seq)
        if self._iter >= self.spec.iters:
            self.done = True

    def finalize(self) -> dict:
        shot = self.world.device.scanout()
        if shot.faulted:
            raise VerifyFail("scanout faulted")
        want = framebuffer_oracle(vertex_fill(self.n_words, self.last_salt))
        if shot.digest != fnv1a64(_pack(want)):
            raise VerifyFail("framebuffer differs from host oracle")
        return {"result": f"{shot.digest:016x}"}


class VertexArrayLegacy(_GraphicsLegacy):
    rewrite_vertices = True


class DisplayListLegacy(_GraphicsLegacy):
    rewrite_vertices = False


_PROGRAMS = {
    ("matmul", "library"): MatmulLibrary,
    ("matmul", "legacy"): MatmulLegacy,
    ("vertex-array", "library"): VertexArrayLibrary,
    ("vertex-array", "legacy"): VertexArrayLegacy,
    ("display-list", "library"): DisplayListLibrary,
    ("display-list", "legacy"): DisplayListLegacy,
}


def make_program(world: World, spec: WorkloadSpec) -> Program:
    return _PROGRAMS[(spec.kind, spec.driver)](world, spec)


# --- the runner -----------------------------------------------------------

def run_workload(spec: WorkloadSpec, config: BenchConfig = None) -> RunReport:
    """Run one workload to completion and report per-iteration costs.

    Setup (driver init, first bind, uploads) is folded into the first
    iteration's window, so iteration 1 carries the launch overhead and
    iterations 2+ measure the steady state.
    """
    config = config or BenchConfig()
    world = build_world(config, spec.driver, spec.iommu)
    program = make_program(world, spec)
    core: DeviceCore = world.core

    per_iteration = []
    for i in range(1, spec.iters + 1):
        before = world.ledger.snapshot()
        if i == 1:
            program.prepare()
            if program.needs_bind:
                core.bind_device_lib(program.lib_id)
            program.start()
        program.iterate()
        per_iteration.append(world.ledger.delta_since(before))

    digests = program.finalize()
    if program.needs_bind:
        core.revoke_device_lib(program.lib_id)
    return RunReport(spec=spec.as_dict(), per_iteration=per_iteration,
                     ledger=world.ledger.snapshot(), digests=digests)


def speedup(spec_kind: str, size: int, iters: int, config: BenchConfig = None,
            iommu: str = "builtin") -> float:
    """Steady-state legacy/library time ratio for one workload shape."""
    times = {}
    for driver in ("library", "legacy"):
        spec = WorkloadSpec(kind=spec_kind, size=size, iters=iters,
                            driver=driver, iommu=iommu)
        times[driver] = run_workload(spec, config).steady_mean
    return times["legacy"] / times["library"]


def steady_stats(report: RunReport) -> tuple:
    steady = report.steady_times()
    mean = statistics.fmean(steady)
    stdev = statistics.pstdev(steady) if len(steady) > 1 else 0.0
    return mean, stdev
