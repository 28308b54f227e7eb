"""Monolithic driver: per-call crossings, kernel validation, compatibility."""

import struct

import pytest

from conftest import make_device, make_platform
from devmux.errors import (BadHandle, InvalError, NotFoundError,
                           NotSupportedError, OutOfRange, PermError)
from devmux.legacydrv import (LEGACY_API, CsCompute, CsCopy, CsNop, CsSetReg,
                              LegacyDriver)
from devmux.simdev import (CO_ADD, CO_DOT, REG_DISP_ENABLE, REG_DISP_PLL,
                           REG_DISP_TIMING_H, REG_FB_BASE, REG_RB_TAIL,
                           REG_SCRATCH0, WORD)


@pytest.fixture
def legacy():
    platform = make_platform(frames=512)
    device = make_device(platform)
    driver = LegacyDriver(platform, device, pool_pages=64)
    client = driver.legacy_open("app")
    return platform, device, driver, client


def test_api_lists_twelve_syscalls(legacy):
    _, _, driver, client = legacy
    assert len(LEGACY_API) == 12
    assert driver.legacy_info(client)["api"] == LEGACY_API
    for name in LEGACY_API:
        assert callable(getattr(driver, name))


def test_every_syscall_crosses_the_boundary(legacy):
    platform, _, driver, client = legacy
    ledger = platform.ledger

    def crossings_of(fn):
        before = ledger.crossings
        fn()
        return ledger.crossings - before

    buf = None

    def do_alloc():
        nonlocal buf
        buf = driver.legacy_alloc(client, 8192, "GTT")

    assert crossings_of(do_alloc) == 1
    before_bytes = ledger.bytes_copied
    assert crossings_of(lambda: driver.legacy_write(client, buf, 0, bytes(4096))) == 1
    assert ledger.bytes_copied - before_bytes == 4096
    before_bytes = ledger.bytes_copied
    assert crossings_of(lambda: driver.legacy_read(client, buf, 0, 100)) == 1
    assert ledger.bytes_copied - before_bytes == 100
    assert crossings_of(lambda: driver.legacy_fence_status(client, 0)) == 1
    assert crossings_of(lambda: driver.legacy_info(client)) == 1
    assert crossings_of(lambda: driver.legacy_free(client, buf)) == 1


def test_unknown_client_is_refused(legacy):
    _, _, driver, _ = legacy
    with pytest.raises(BadHandle):
        driver.legacy_alloc(99, 64, "SYS")


def test_foreign_buffer_is_unreachable(legacy):
    platform, device, driver, client = legacy
    other = driver.legacy_open("other")
    mine = driver.legacy_alloc(client, 256, "GTT")
    driver.legacy_write(client, mine, 0, b"\x5A" * 256)
    with pytest.raises(PermError):
        driver.legacy_read(other, mine, 0, 16)
    with pytest.raises(PermError):
        driver.legacy_write(other, mine, 0, b"zz")
    tail = device.mmio_read(REG_RB_TAIL)
    validated = platform.ledger.instructions_validated
    with pytest.raises(PermError):
        driver.legacy_submit(other, [CsCopy((mine, 0), (mine, 0), 4)])
    # validation rejected the stream before anything reached the device
    assert device.mmio_read(REG_RB_TAIL) == tail
    assert platform.ledger.instructions_validated == validated
    assert driver.legacy_read(client, mine, 0, 256) == b"\x5A" * 256


def test_freed_ids_are_invalidated(legacy):
    _, _, driver, client = legacy
    buf = driver.legacy_alloc(client, 64, "SYS")
    driver.legacy_free(client, buf)
    with pytest.raises(NotFoundError):
        driver.legacy_read(client, buf, 0, 8)
    with pytest.raises(NotFoundError):
        driver.legacy_free(client, buf)


def test_submit_validates_every_word(legacy):
    platform, _, driver, client = legacy
    buf = driver.legacy_alloc(client, 256, "VRAM")
    batch = [CsNop(), CsNop(), CsNop(),
             CsSetReg(REG_SCRATCH0, 7),
             CsCompute(CO_ADD, (buf, 0), (buf, 0), (buf, 0), 8),
             CsCopy((buf, 128), (buf, 0), 8)]
    total_words = 3 * 1 + 3 + 6 + 4
    ledger = platform.ledger
    validated = ledger.instructions_validated
    copied = ledger.bytes_copied
    crossings = ledger.crossings
    seq = driver.legacy_submit(client, batch)
    assert ledger.instructions_validated - validated == total_words
    assert ledger.bytes_copied - copied == total_words * WORD
    assert ledger.crossings - crossings == 1
    driver.legacy_wait(client, seq)


def test_2x2_matmul_known_answer(legacy):
    _, _, driver, client = legacy
    a = driver.legacy_alloc(client, 16, "VRAM")
    bt = driver.legacy_alloc(client, 16, "VRAM")
    c = driver.legacy_alloc(client, 16, "VRAM")
    driver.legacy_write(client, a, 0, struct.pack("<4I", 1, 2, 3, 4))
    driver.legacy_write(client, bt, 0, struct.pack("<4I", 5, 7, 6, 8))
    batch = [CsCompute(CO_DOT, (c, (2 * i + j) * WORD),
                       (a, 2 * i * WORD), (bt, 2 * j * WORD), 2)
             for i in range(2) for j in range(2)]
    driver.legacy_wait(client, driver.legacy_submit(client, batch))
    assert struct.unpack("<4I", driver.legacy_read(client, c, 0, 16)) == \
        (19, 22, 43, 50)


def test_sensitive_setreg_never_reaches_the_ring(legacy):
    platform, device, driver, client = legacy
    tail = device.mmio_read(REG_RB_TAIL)
    validated = platform.ledger.instructions_validated
    with pytest.raises(InvalError):
        driver.legacy_submit(client, [CsSetReg(REG_DISP_PLL, 90)])
    assert device.mmio_read(REG_RB_TAIL) == tail
    assert platform.ledger.instructions_validated == validated


def test_compute_operands_are_bounds_checked(legacy):
    _, _, driver, client = legacy
    buf = driver.legacy_alloc(client, 64, "VRAM")
    sysbuf = driver.legacy_alloc(client, 64, "SYS")
    with pytest.raises(OutOfRange):
        driver.legacy_submit(client, [CsCompute(CO_ADD, (buf, 0), (buf, 0),
                                                (buf, 32), 16)])
    with pytest.raises(InvalError):
        driver.legacy_submit(client, [CsCopy((sysbuf, 0), (buf, 0), 4)])
    with pytest.raises(InvalError):
        driver.legacy_submit(client, [CsCompute(CO_ADD, (buf, 2), (buf, 0),
                                                (buf, 0), 4)])


def test_wait_bills_one_crossing_per_poll_round(legacy):
    platform, _, driver, client = legacy
    buf = driver.legacy_alloc(client, 80000, "VRAM")
    seq = driver.legacy_submit(client, [CsCompute(CO_ADD, (buf, 0), (buf, 0),
                                                  (buf, 0), 20000)])
    before = platform.ledger.crossings
    driver.legacy_wait(client, seq)
    # ~20k cycles of work at 8192 cycles per round, plus the final check
    assert platform.ledger.crossings - before == 4


def test_set_mode_and_scanout_framebuffer(legacy):
    _, device, driver, client = legacy
    fb = driver.legacy_alloc(client, 64 * 48 * WORD, "VRAM")
    driver.legacy_set_mode(client, 0, (64, 48, 60), fb=fb)
    assert device.mmio_read(REG_DISP_ENABLE) == 1
    assert device.mmio_read(REG_DISP_TIMING_H) == 64
    assert device.mmio_read(REG_FB_BASE) == driver.buffers[fb].device_addr
    with pytest.raises(InvalError):
        driver.legacy_set_mode(client, 0, (640, 480, 60))
    sysbuf = driver.legacy_alloc(client, 64, "SYS")
    with pytest.raises(InvalError):
        driver.legacy_set_mode(client, 0, (64, 48, 60), fb=sysbuf)


def test_user_mappings_are_not_offered(legacy):
    _, _, driver, client = legacy
    buf = driver.legacy_alloc(client, 64, "GTT")
    with pytest.raises(NotSupportedError):
        driver.legacy_map(client, buf)


def test_close_releases_clients_and_buffers(legacy):
    _, device, driver, client = legacy
    driver.legacy_alloc(client, len(device.vram) // 2, "VRAM")
    kept = driver.legacy_alloc(client, 64, "VRAM")
    driver.legacy_close(client)
    with pytest.raises(BadHandle):
        driver.legacy_alloc(client, 64, "SYS")
    fresh = driver.legacy_open("next")
    with pytest.raises(NotFoundError):
        driver.legacy_read(fresh, kept, 0, 8)
    # the closed client's VRAM came back to the allocator
    whole = driver.legacy_alloc(fresh, len(device.vram), "VRAM")
    assert driver.buffers[whole].device_addr == 0


def test_oversized_batches_are_chunked_through_the_ring(legacy):
    platform, device, driver, client = legacy
    validated = platform.ledger.instructions_validated
    seq = driver.legacy_submit(client, [CsNop()] * 5000)
    driver.legacy_wait(client, seq)
    assert platform.ledger.instructions_validated - validated == 5000
    assert device.cp_idle
