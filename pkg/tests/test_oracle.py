"""Brute-force checker vs the incremental policy, driven by random event walks."""

import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule, run_state_machine_as_test

from memranger.address_space import PAGE_SIZE
from memranger.ept_model import RWX, Access, EptEntry
from memranger.policy_map import DEFAULT_EPT, init
from memranger.reference_oracle import (
    OracleChecker,
    check_against,
    rebuild,
    snapshot_from_map,
)

KERNEL = (0x1000_0000, 0x0010_0000)
STRUCTS = (0x2000_0000, 0x0001_0000)
OTHER = (0x2800_0000, 0x0002_0000)
IMAGE_SIZE = 0x2000
KERNEL_CODE = KERNEL[0] + 0x40


def fresh():
    return init(KERNEL, [STRUCTS], [OTHER])


def test_clean_state_agrees():
    state = fresh()
    assert OracleChecker().verify(state, state.epts) == []


def test_full_choreography_agrees():
    state = fresh()
    checker = OracleChecker()
    a = state.on_driver_load(0x3000_0000, IMAGE_SIZE)
    b = state.on_driver_load(0x3100_0000, IMAGE_SIZE)
    state.on_alloc(0x3000_0100, 0x5000_0000, 0x100)
    state.on_alloc(0x3100_0100, 0x5000_0100, 0x10)      # same page: lockdown
    state.on_alloc(KERNEL_CODE, 0x5000_2000, 0x80)      # kernel-owned, stays open
    state.on_process_create(4, [(STRUCTS[0] + 0x2000, 0x200)])
    assert checker.verify(state, state.epts) == []
    state.on_free(0x5000_0100)
    state.on_process_exit(4)
    state.on_driver_unload(b)
    assert checker.verify(state, state.epts) == []
    state.on_driver_unload(a)
    assert checker.verify(state, state.epts) == []


def test_corruption_is_caught():
    state = fresh()
    eid = state.on_driver_load(0x3000_0000, IMAGE_SIZE)
    checker = OracleChecker()
    assert checker.verify(state, state.epts) == []
    # sabotage one leaf behind the policy's back
    state.epts[DEFAULT_EPT].set_page_attrs(0x3000_0000 >> 12, RWX)
    found = checker.verify(state, state.epts)
    assert found, "hand-flipped leaf went unnoticed"
    assert found[0].page == 0x3000_0000 >> 12
    assert found[0].ept == DEFAULT_EPT


def test_wrong_frame_is_caught():
    state = fresh()
    state.on_driver_load(0x3000_0000, IMAGE_SIZE)
    page = KERNEL[0] >> 12
    entry = state.epts[DEFAULT_EPT].entry_for(page)
    state.epts[DEFAULT_EPT].set_page_entry(page, EptEntry(entry.pfn + 1, entry.attrs))
    found = OracleChecker().verify(state, state.epts)
    assert any(m.page == page and m.actual == "redirected-pfn" for m in found)


def test_missing_context_is_caught():
    state = fresh()
    eid = state.on_driver_load(0x3000_0000, IMAGE_SIZE)
    policy = rebuild(snapshot_from_map(state), extra_pages=state.tracked)
    epts = dict(state.epts)
    del epts[eid]
    found = check_against(policy, epts)
    assert any(m.ept == eid and m.actual == "missing" for m in found)


class TestLegality:
    """Ground-truth access verdicts, independent of any table state."""

    @pytest.fixture
    def view(self):
        from memranger.reference_oracle import SnapshotView

        state = fresh()
        self.a = state.on_driver_load(0x3000_0000, IMAGE_SIZE)
        self.b = state.on_driver_load(0x3100_0000, IMAGE_SIZE)
        state.on_alloc(0x3000_0100, 0x5000_0000, 0x100)
        state.on_alloc(KERNEL_CODE, 0x5000_2000, 0x80)
        state.on_process_create(4, [(STRUCTS[0] + 0x2000, 0x200)])
        return SnapshotView(snapshot_from_map(state))

    def test_owner_reads_own_pool(self, view):
        assert view.legal(0x3000_0100, 0x5000_0010, Access.READ)

    def test_neighbor_cannot(self, view):
        assert not view.legal(0x3100_0100, 0x5000_0010, Access.READ)
        assert not view.legal(KERNEL_CODE, 0x5000_0010, Access.READ)

    def test_unenclaved_pools_stay_open(self, view):
        # only enclave allocations are guarded; plain kernel heap is not
        assert view.legal(KERNEL_CODE, 0x5000_2010, Access.WRITE)
        assert view.legal(0x3000_0100, 0x5000_2010, Access.WRITE)

    def test_structures_are_kernel_only(self, view):
        assert view.legal(KERNEL_CODE, STRUCTS[0], Access.WRITE)
        assert not view.legal(0x3000_0100, STRUCTS[0], Access.WRITE)

    def test_process_memory_is_kernel_only(self, view):
        slot = STRUCTS[0] + 0x2000
        assert view.legal(KERNEL_CODE, slot + 8, Access.WRITE)
        assert not view.legal(0x3000_0100, slot + 8, Access.WRITE)

    def test_image_code_may_run_but_not_be_read(self, view):
        # calling into another driver is normal; peeking at its bytes is not
        assert view.legal(0x3000_0100, 0x3000_0200, Access.EXECUTE)
        assert view.legal(0x3100_0100, 0x3000_0200, Access.EXECUTE)
        assert not view.legal(0x3100_0100, 0x3000_0200, Access.READ)
        assert not view.legal(0x3100_0100, 0x3000_0200, Access.WRITE)

    def test_kernel_code_runs_for_everyone(self, view):
        assert view.legal(0x3000_0100, KERNEL_CODE, Access.EXECUTE)
        assert view.legal(KERNEL_CODE, KERNEL[0] + 0x80, Access.EXECUTE)

    def test_locked_page_bytes_stay_private(self):
        from memranger.reference_oracle import SnapshotView

        state = fresh()
        state.on_driver_load(0x3000_0000, IMAGE_SIZE)
        state.on_driver_load(0x3100_0000, IMAGE_SIZE)
        state.on_alloc(0x3000_0100, 0x5000_0000, 16)
        state.on_alloc(0x3100_0100, 0x5000_0010, 16)
        view = SnapshotView(snapshot_from_map(state))
        assert view.page_locked(0x5000_0000 >> 12)
        assert view.legal(0x3000_0100, 0x5000_0004, Access.READ)
        assert view.legal(0x3100_0100, 0x5000_0014, Access.READ)
        assert not view.legal(0x3000_0100, 0x5000_0014, Access.READ)
        assert not view.legal(0x3100_0100, 0x5000_0004, Access.READ)


class PolicyWalk(RuleBasedStateMachine):
    """Random event walks; the brute-force table must agree after every step."""

    def __init__(self):
        super().__init__()
        self.state = fresh()
        self.checker = OracleChecker()
        self.slots = [0x3000_0000 + i * 0x10_0000 for i in range(6)]
        self.loaded: dict[int, int] = {}    # slot index -> ept id
        self.cursor = 0x5000_0000
        self.pools: list[tuple[int, int]] = []   # (base, caller)
        self.pids: set[int] = set()

    @rule(slot=st.integers(0, 5))
    def load(self, slot):
        if slot in self.loaded:
            return
        self.loaded[slot] = self.state.on_driver_load(self.slots[slot], IMAGE_SIZE)

    @precondition(lambda self: self.loaded)
    @rule(pick=st.integers(0, 100))
    def unload(self, pick):
        slot = sorted(self.loaded)[pick % len(self.loaded)]
        self.state.on_driver_unload(self.loaded.pop(slot))
        self.pools = [p for p in self.pools if self.state._byte_pool(p[0]) is not None]

    @rule(pick=st.integers(0, 100), size=st.sampled_from([16, 0x40, 0x100, 0x1000]),
          from_kernel=st.booleans())
    def alloc(self, pick, size, from_kernel):
        if from_kernel:
            caller = KERNEL_CODE
        elif self.loaded:
            slot = sorted(self.loaded)[pick % len(self.loaded)]
            caller = self.slots[slot] + 0x100
        else:
            return
        base = self.cursor
        self.cursor += max(size, 16)
        self.state.on_alloc(caller, base, size)
        self.pools.append((base, caller))

    @precondition(lambda self: self.pools)
    @rule(pick=st.integers(0, 100))
    def free(self, pick):
        base, _ = self.pools.pop(pick % len(self.pools))
        self.state.on_free(base)

    @rule(pid=st.integers(1, 8))
    def process(self, pid):
        if pid in self.pids:
            self.state.on_process_exit(pid)
            self.pids.discard(pid)
        else:
            # page-disjoint slots: region pages carry a single overlay each
            region = (STRUCTS[0] + 0x2000 + pid * 0x1000, 0x200)
            self.state.on_process_create(pid, [region])
            self.pids.add(pid)

    @invariant()
    def tables_agree(self):
        assert self.checker.verify(self.state, self.state.epts) == []


def test_policy_walk():
    PolicyWalk.TestCase.settings = settings(max_examples=25, stateful_step_count=30, deadline=None)
    run_state_machine_as_test(PolicyWalk)
