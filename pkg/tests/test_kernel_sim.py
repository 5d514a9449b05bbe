"""Scenario replay: trace codec, allocator grain, mode behavior, determinism."""

import json

import pytest
from hypothesis import given, strategies as st

from memranger.errors import SimulationError, TraceParseError
from memranger.kernel_sim import (
    IMAGE_SIZE,
    IMAGE_SLOTS,
    OS_STRUCTURES,
    POOL_ARENA,
    PROCESS_SLOT_BASE,
    SECRET_FILL,
    AccessEvent,
    Alloc,
    BumpAllocator,
    CreateProcess,
    DstRef,
    ExitProcess,
    Free,
    LoadDriver,
    Schedule,
    Simulation,
    UnloadDriver,
    event_from_dict,
    event_to_dict,
    gen_benchmark_trace,
    gen_demo1_trace,
    gen_privesc_trace,
    gen_random_trace,
    parse_trace,
    run_trace,
    serialize_trace,
)

ALL_EVENTS = [
    LoadDriver("A", IMAGE_SLOTS[0]),
    UnloadDriver("A"),
    CreateProcess(4, ((PROCESS_SLOT_BASE, 0x200),)),
    ExitProcess(4),
    Alloc("A", 0x100, "page"),
    Alloc("A", 0x40, "natural"),
    Free("A", 0),
    Schedule("A"),
    AccessEvent("A", DstRef("own_pool", index=1, offset=8), "read", expect="legal"),
    AccessEvent("A", DstRef("pool_of", driver="B", index=0), "write",
                payload=b"\x01\x02", expect="illegal"),
    AccessEvent("os_kernel", DstRef("eprocess", pid=4, offset=0x10), "read"),
    AccessEvent("A", DstRef("image_of", driver="B", offset=0x80), "execute",
                expect="illegal"),
]


class TestCodec:
    @pytest.mark.parametrize("event", ALL_EVENTS, ids=lambda e: type(e).__name__)
    def test_round_trip(self, event):
        assert event_from_dict(event_to_dict(event)) == event

    def test_trace_round_trip(self):
        text = serialize_trace(ALL_EVENTS)
        assert parse_trace(text) == ALL_EVENTS

    def test_text_is_json_lines_with_hex_addresses(self):
        line = serialize_trace([LoadDriver("A", IMAGE_SLOTS[0])]).strip()
        obj = json.loads(line)
        assert obj["ev"] == "load_driver"
        assert obj["image_base"] == f"{IMAGE_SLOTS[0]:#x}"

    def test_comments_and_blanks_skipped(self):
        text = "# header\n\n" + serialize_trace([Schedule("A")]) + "\n# trailer\n"
        assert parse_trace(text) == [Schedule("A")]

    def test_parse_error_carries_line_number(self):
        text = serialize_trace([Schedule("A")]) + "{\"ev\": \"bogus\"}\n"
        with pytest.raises(TraceParseError) as info:
            parse_trace(text)
        assert info.value.line == 2

    def test_rejects_bad_access_kind(self):
        with pytest.raises(TraceParseError):
            event_from_dict({"ev": "access", "actor": "A", "access": "poke",
                             "dst": {"ref": "own_pool"}})

    def test_rejects_bad_expect_label(self):
        with pytest.raises(TraceParseError):
            event_from_dict({"ev": "access", "actor": "A", "access": "read",
                             "dst": {"ref": "own_pool"}, "expect": "sketchy"})

    @given(st.integers(0, IMAGE_SIZE - 1), st.binary(min_size=1, max_size=8))
    def test_payload_survives_hex_encoding(self, offset, payload):
        event = AccessEvent("A", DstRef("image_of", driver="A", offset=offset),
                            "write", payload=payload)
        assert event_from_dict(event_to_dict(event)) == event


class TestAllocator:
    def test_natural_grain_is_sixteen(self):
        alloc = BumpAllocator(*POOL_ARENA)
        assert alloc.take(1, "natural") == POOL_ARENA[0]
        assert alloc.take(1, "natural") == POOL_ARENA[0] + 16
        assert alloc.take(17, "natural") == POOL_ARENA[0] + 32
        assert alloc.take(1, "natural") == POOL_ARENA[0] + 64

    def test_page_allocations_never_share_a_page(self):
        alloc = BumpAllocator(*POOL_ARENA)
        first = alloc.take(0x100, "page")
        second = alloc.take(0x100, "page")
        assert first % 4096 == 0 and second % 4096 == 0
        assert second >= first + 4096

    def test_natural_after_page_lands_on_a_fresh_page(self):
        alloc = BumpAllocator(*POOL_ARENA)
        page_base = alloc.take(0x100, "page")
        follow = alloc.take(16, "natural")
        assert follow >> 12 != page_base >> 12

    def test_arena_exhaustion(self):
        alloc = BumpAllocator(0x5000_0000, 0x2000)
        alloc.take(0x1000, "page")
        alloc.take(0x1000, "page")
        with pytest.raises(SimulationError):
            alloc.take(1, "natural")


@pytest.fixture(scope="module")
def demo_report():
    return run_trace(gen_demo1_trace(), "multi-ept")


class TestDemoScenario:
    @pytest.fixture
    def report(self, demo_report):
        return demo_report

    def test_exactly_four_redirects(self, report):
        assert report.counters["redirects"] == 4

    def test_every_cross_access_redirected(self, report):
        for record in report.log:
            if record.get("expect") == "illegal":
                assert record["decision"] == "redirect_to_fake", record
            elif record.get("expect") == "legal":
                assert record["decision"] != "redirect_to_fake", record

    def test_stolen_reads_see_zeros(self, report):
        reads = [r for r in report.log
                 if r["access"] == "read" and r.get("expect") == "illegal"]
        assert reads and all(r["data"] == "00000000" for r in reads)

    def test_own_reads_see_real_bytes(self, report):
        own = [r for r in report.log
               if r["access"] == "read" and r.get("expect") == "legal"]
        # each driver reads back exactly the dword it wrote
        assert [r["data"] for r in own] == ["11223344", "55667788", "11223344"]


def test_same_trace_same_bytes():
    events = gen_random_trace(7, length=150)
    first = run_trace(events, "multi-ept").to_json()
    second = run_trace(events, "multi-ept").to_json()
    assert first == second


def test_generator_is_seed_deterministic():
    assert serialize_trace(gen_random_trace(3)) == serialize_trace(gen_random_trace(3))
    assert serialize_trace(gen_random_trace(3)) != serialize_trace(gen_random_trace(4))


def test_attack_probability_extremes():
    calm = run_trace(gen_random_trace(5, length=120, attack_probability=0.0), "multi-ept")
    assert calm.counters["redirects"] == 0
    hostile = run_trace(gen_random_trace(5, length=120, attack_probability=1.0), "multi-ept")
    labeled = [r for r in hostile.log if r.get("expect") == "illegal"]
    assert labeled
    assert all(r["decision"] == "redirect_to_fake" for r in labeled)


def test_off_mode_never_traps():
    report = run_trace(gen_privesc_trace(), "off")
    assert report.counters["ept_violations"] == 0
    assert report.counters["redirects"] == 0
    assert report.counters["ept_switches"] == 0


def test_off_mode_lets_the_overwrite_through():
    report = run_trace(gen_privesc_trace(), "off")
    writes = [r for r in report.log if r["access"] == "write"]
    reads = [r for r in report.log if r["access"] == "read"]
    assert writes[0].get("expect") == "illegal"
    # second read observes the clobbered token
    assert reads[0]["data"] == SECRET_FILL.hex()
    assert reads[1]["data"] == "00000000"


def test_multi_mode_blocks_the_overwrite():
    report = run_trace(gen_privesc_trace(), "multi-ept")
    reads = [r for r in report.log if r["access"] == "read"]
    assert reads[0]["data"] == SECRET_FILL.hex()
    assert reads[1]["data"] == SECRET_FILL.hex()
    writes = [r for r in report.log if r["access"] == "write"]
    assert writes[0]["decision"] == "redirect_to_fake"


def test_single_mode_guards_pools_but_not_images():
    events = [
        LoadDriver("A", IMAGE_SLOTS[0]),
        LoadDriver("B", IMAGE_SLOTS[1]),
        Schedule("A"),
        Alloc("A", 0x100, "page"),
        AccessEvent("B", DstRef("pool_of", driver="A", index=0), "read",
                    expect="illegal"),
        AccessEvent("B", DstRef("image_of", driver="A", offset=0x400), "read",
                    expect="illegal"),
    ]
    report = run_trace(events, "single-ept")
    pool_read, image_read = (r for r in report.log if r["access"] == "read")
    assert pool_read["data"] == "00000000"           # sealed and decoyed
    # a one-context scheme cannot seal code it must keep executable
    assert image_read["data"] != "00000000"


def test_unload_evicts_the_active_context():
    events = [
        LoadDriver("A", IMAGE_SLOTS[0]),
        Schedule("A"),
        Alloc("A", 0x40, "natural"),
        UnloadDriver("A"),
    ]
    report = run_trace(events, "multi-ept")
    assert report.counters["forced_switches"] == 1


def test_double_free_rejected():
    events = [
        LoadDriver("A", IMAGE_SLOTS[0]),
        Schedule("A"),
        Alloc("A", 0x40, "natural"),
        Free("A", 0),
        Free("A", 0),
    ]
    with pytest.raises(SimulationError):
        run_trace(events, "multi-ept")


def test_access_to_freed_pool_rejected():
    events = [
        LoadDriver("A", IMAGE_SLOTS[0]),
        Schedule("A"),
        Alloc("A", 0x40, "natural"),
        Free("A", 0),
        AccessEvent("A", DstRef("own_pool", index=0), "read"),
    ]
    with pytest.raises(SimulationError):
        run_trace(events, "multi-ept")


def test_unknown_mode_rejected():
    with pytest.raises(Exception):
        Simulation("paranoid")


def test_benchmark_trace_shape():
    events = gen_benchmark_trace(n_accesses=200, align="page", quantum=64)
    kinds = [type(e).__name__ for e in events]
    assert kinds.count("AccessEvent") == 200
    # periodic rescheduling forces context churn for the trap-cost story
    assert kinds.count("Schedule") > 2


def test_report_shape():
    report = run_trace(gen_demo1_trace(), "multi-ept")
    payload = json.loads(report.to_json())
    assert payload["schema"] == "ranger-report/1"
    assert payload["mode"] == "multi-ept"
    assert payload["counters"]["accesses"] == len(payload["log"])
    assert set(payload["digests"]) >= {"os_kernel_code", "os_structures"}
    assert payload["modeled_total_ticks"] > 0
