"""Allocator correctness against brute-force reference models."""

import random

from devmux.alloc import FirstFitAllocator, SlabPool


def test_first_fit_starts_at_zero_and_reuses_exact_holes():
    a = FirstFitAllocator(1 << 20)
    first = a.alloc(4096)
    assert first == 0
    second = a.alloc(4096)
    assert a.free(first, 4096)
    assert a.alloc(4096) == first  # lowest hole wins
    assert second == 4096


def test_first_fit_alignment():
    a = FirstFitAllocator(1 << 16, align=256)
    a.alloc(100)
    b = a.alloc(100)
    assert b % 256 == 0


def test_first_fit_matches_bitmap_oracle():
    """Random alloc/free traffic; a byte-granular bitmap is the referee."""
    size = 1 << 16
    align = 256
    a = FirstFitAllocator(size, align=align)
    used = bytearray(size)  # 1 = allocated
    live = {}
    rng = random.Random(1234)
    for step in range(2000):
        if live and rng.random() < 0.45:
            off = rng.choice(sorted(live))
            want, rounded = live.pop(off)
            assert a.free(off, want)
            for i in range(off, off + rounded):
                used[i] = 0
        else:
            want = rng.choice([32, 100, 256, 500, 4096, 8000])
            got = a.alloc(want)
            rounded = -(-want // align) * align
            # oracle: the lowest aligned hole that fits, if any
            expect = None
            run = 0
            for i in range(0, size, align):
                if any(used[i:i + align]):
                    run = 0
                    continue
                run += align
                if run >= rounded:
                    expect = i + align - run
                    break
            assert got == expect, f"step {step}: got {got}, oracle {expect}"
            if got is not None:
                assert got % align == 0
                assert not any(used[got:got + rounded])
                for i in range(got, got + rounded):
                    used[i] = 1
                live[got] = (want, rounded)
        assert a.bytes_free() == size - sum(used)


def test_slab_classes_round_up():
    pool = SlabPool(16 * 4096)
    offs = [pool.alloc(s) for s in (1, 32, 33, 4096)]
    assert all(o is not None for o in offs)
    blocks = sorted(entry[1] for entry in pool.live.values())
    assert blocks == [32, 32, 64, 4096]


def test_slab_live_ranges_never_overlap_and_balance_holds():
    pool = SlabPool(32 * 4096)
    rng = random.Random(99)
    live = {}
    for _ in range(3000):
        if live and rng.random() < 0.45:
            off = rng.choice(sorted(live))
            assert pool.free(off, live.pop(off))
        else:
            size = rng.choice([16, 32, 48, 200, 1000, 4000, 5000, 12000])
            off = pool.alloc(size)
            if off is not None:
                live[off] = size
        spans = sorted((off, off + entry[1]) for off, entry in pool.live.items())
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            assert e1 <= s2, "live allocations overlap"
        assert pool.accounted_bytes() == 32 * 4096


def test_slab_exhaustion_returns_none_and_recovers():
    pool = SlabPool(2 * 4096)
    offs = []
    while True:
        off = pool.alloc(4096)
        if off is None:
            break
        offs.append(off)
    assert len(offs) == 2
    assert pool.free(offs[0], 4096)
    assert pool.alloc(4096) == offs[0]


def test_slab_page_runs_for_large_allocations():
    pool = SlabPool(8 * 4096)
    off = pool.alloc(3 * 4096 + 1)
    assert off is not None and off % 4096 == 0
    assert pool.free(off, 3 * 4096 + 1)
