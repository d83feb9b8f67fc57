"""Shell pool behavior: reuse, cleaning barrier, capacity, accounting."""

import random
import threading

import pytest

from virtine.backend.base import RegisterFile, power_on_registers
from virtine.core import CleanMode, ShellPool, ShellState
from virtine.errors import StaleShell

KB = 1024


def dirty_all(lease, rng):
    size = lease.mem_size
    for _ in range(8):
        off = rng.randrange(0, size - 64)
        lease.write_guest(off, rng.randbytes(64))


def test_cold_acquire_creates(pool):
    lease = pool.acquire(64 * KB)
    assert pool.stats.created == 1
    assert pool.stats.reused == 0
    assert lease.state is ShellState.CLEAN
    pool.release(lease)


def test_release_then_acquire_reuses_and_is_zero(pool):
    lease = pool.acquire(64 * KB)
    lease.write_guest(0, b"\xde\xad\xbe\xef")
    pool.release(lease)
    lease2 = pool.acquire(64 * KB)
    assert pool.stats.reused == 1
    assert lease2.read_guest(0, 64 * KB) == b"\x00" * (64 * KB)
    pool.release(lease2)


def test_sync_clean_zeroes_every_byte(pool):
    rng = random.Random(0)
    lease = pool.acquire(64 * KB)
    dirty_all(lease, rng)
    pool.release(lease, CleanMode.SYNC)
    lease2 = pool.acquire(64 * KB)
    assert lease2.read_guest(0, 64 * KB) == bytes(64 * KB)
    pool.release(lease2)


def test_clean_resets_registers(pool):
    lease = pool.acquire(64 * KB)
    regs = RegisterFile()
    regs.rax = 0x1234
    regs.rip = 0x8000
    lease.set_registers(regs)
    pool.release(lease)
    lease2 = pool.acquire(64 * KB)
    assert lease2.get_registers() == power_on_registers()
    pool.release(lease2)


def test_capacity_overflow_destroys(mock_backend):
    with ShellPool(mock_backend, capacity=2) as pool:
        leases = [pool.acquire(64 * KB) for _ in range(3)]
        for lease in leases:
            pool.release(lease)
        counts = pool.debug_counts()
        assert counts["clean"] == 2
        assert counts["destroyed"] == 1


def test_async_release_then_immediate_acquire_is_zero(pool):
    rng = random.Random(1)
    for _ in range(50):
        lease = pool.acquire(64 * KB)
        dirty_all(lease, rng)
        pool.release(lease, CleanMode.ASYNC)
        lease = pool.acquire(64 * KB)
        assert lease.read_guest(0, 64 * KB) == bytes(64 * KB)
        pool.release(lease)


def test_stale_lease_cannot_reach_recycled_shell(pool):
    lease = pool.acquire(64 * KB)
    pool.release(lease)
    with pytest.raises(StaleShell):
        lease.write_guest(0, b"x")
    with pytest.raises(StaleShell):
        lease.run()
    with pytest.raises(StaleShell):
        pool.release(lease)


def test_pool_accounting_invariants(mock_backend):
    rng = random.Random(2)
    with ShellPool(mock_backend, capacity=3) as pool:
        live = []
        for _ in range(200):
            if live and rng.random() < 0.5:
                pool.release(live.pop(), rng.choice(list(CleanMode)))
            else:
                live.append(pool.acquire(64 * KB))
        assert pool.stats.created + pool.stats.reused == pool.stats.acquires
        pool.drain()
        counts = pool.debug_counts()
        total = counts["clean"] + counts["dirty"] + counts["cleaning"] \
            + counts["in_flight"] + counts["destroyed"]
        assert total == counts["created"]
        for lease in live:
            pool.release(lease)


def test_mixed_sizes_bucketed_exactly(pool):
    small = pool.acquire(64 * KB)
    pool.release(small)
    big = pool.acquire(128 * KB)
    assert pool.stats.created == 2  # no cross-size reuse
    pool.release(big)
    again = pool.acquire(128 * KB)
    assert pool.stats.reused == 1
    pool.release(again)


def test_concurrent_acquire_release_no_leak(mock_backend):
    errors = []
    with ShellPool(mock_backend, capacity=4) as pool:
        def worker(seed):
            rng = random.Random(seed)
            try:
                for _ in range(30):
                    lease = pool.acquire(64 * KB)
                    data = lease.read_guest(0, 64 * KB)
                    if data != bytes(64 * KB):
                        errors.append("dirty shell handed out")
                    dirty_all(lease, rng)
                    pool.release(lease, rng.choice(list(CleanMode)))
            except Exception as exc:  # noqa: BLE001
                errors.append(repr(exc))

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert errors == []


def test_in_flight_shells_have_disjoint_backing(mock_backend):
    with ShellPool(mock_backend, capacity=8) as pool:
        leases = [pool.acquire(64 * KB) for _ in range(4)]
        ranges = sorted(l.shell.ctx.memory.host_range() for l in leases)
        for (a_start, a_end), (b_start, _) in zip(ranges, ranges[1:]):
            assert a_end <= b_start
        for lease in leases:
            pool.release(lease)
        pool.assert_disjoint_backing()
