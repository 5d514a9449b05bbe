"""Deterministic kernel-memory simulator.

Replays a trace of driver lifecycle, allocation, scheduling and access events
against one of three protection modes:

* ``off``        - plain memory, no policy, every access lands;
* ``single-ept`` - one translation context that seals protected data and
  single-steps every touch of it, legal or not;
* ``multi-ept``  - per-driver contexts with fake-page redirection and
  identity-checked grants.

Also provides the trace JSON-lines codec and the trace generators (demo,
privilege-escalation, benchmark, seeded random).
"""

import random
import string
import hashlib
import json
from dataclasses import dataclass
from enum import Enum

from .address_space import PAGE_SIZE, FrameStore, pages_covering
from .dispatcher import VcpuState, execute_access
from .ept_model import NONE, RW, RWX, Access, create_ept
from .errors import SimulationError, TraceParseError
from .policy_map import (
    GRANT,
    REDIRECT,
    AllocatedPool,
    EnclaveRecord,
    ProcessRecord,
    StaticConfig,
    deny,
)
from .policy_map import init as policy_init
from .report_cli import CostModel, RunReport, access_ticks

# Static fixture: one synthetic machine shared by every trace.
OS_KERNEL_CODE = (0x1000_0000, 0x0010_0000)
OS_STRUCTURES = (0x2000_0000, 0x0001_0000)
OTHER_DRIVER = (0x2800_0000, 0x0002_0000)
POOL_ARENA = (0x5000_0000, 0x0100_0000)
IMAGE_SLOTS = (0x3000_0000, 0x4000_0000)
IMAGE_SIZE = 0x2000

CODE_ENTRY_OFFSET = 0x100
SCHEDULER_STUB = OS_KERNEL_CODE[0] + 0x40

# Planted content, one recognizable pattern per region family.
SECRET_FILL = b"\xde\xad\xbe\xef"
OS_KERNEL_FILL = b"\x90"
OS_STRUCT_FILL = b"\x55"
OTHER_DRIVER_FILL = b"\xcc"
FOREIGN_POOL_FILL = b"\x11"
DEFAULT_WRITE = b"\xab\xab\xab\xab"

# Process regions live inside the kernel-structures range, one page apart.
PROCESS_SLOT_BASE = OS_STRUCTURES[0] + 0x2000
PROCESS_SLOT_STRIDE = 0x1000
PROCESS_REGION_SIZE = 0x200
PROCESS_SLOT_COUNT = (OS_STRUCTURES[1] - 0x2000) // PROCESS_SLOT_STRIDE


def image_fill(name: str) -> bytes:
    """Deterministic one-byte fill pattern for a driver image."""
    return bytes([0x41 + sum(name.encode()) % 26])


class Mode(Enum):
    OFF = "off"
    SINGLE_EPT = "single-ept"
    MULTI_EPT = "multi-ept"


@dataclass
class SimConfig:
    force_page_aligned: bool = False
    cost_model: CostModel | None = None

    def resolved_cost_model(self) -> CostModel:
        return self.cost_model if self.cost_model is not None else CostModel()


# -- trace events -----------------------------------------------------------

@dataclass(frozen=True)
class LoadDriver:
    name: str
    image_base: int
    image_size: int = IMAGE_SIZE


@dataclass(frozen=True)
class UnloadDriver:
    name: str


@dataclass(frozen=True)
class CreateProcess:
    pid: int
    regions: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ExitProcess:
    pid: int


@dataclass(frozen=True)
class Alloc:
    actor: str
    size: int
    align: str = "natural"      # "natural" packs at 16 bytes, "page" at 4 KiB


@dataclass(frozen=True)
class Free:
    actor: str
    pool: int                   # ordinal among the actor's allocations, frees included


@dataclass(frozen=True)
class Schedule:
    actor: str


@dataclass(frozen=True)
class DstRef:
    """Symbolic access target, resolved against live regions at replay time."""
    kind: str
    driver: str | None = None
    index: int = 0
    pid: int | None = None
    offset: int = 0


@dataclass(frozen=True)
class AccessEvent:
    actor: str
    dst: DstRef
    access: str                 # "read" | "write" | "execute"
    payload: bytes | None = None
    expect: str | None = None   # generator's own legality label, carried for audits


TraceEvent = (
    LoadDriver | UnloadDriver | CreateProcess | ExitProcess
    | Alloc | Free | Schedule | AccessEvent
)

_DST_KINDS = (
    "own_pool", "pool_of", "image_of", "eprocess",
    "os_kernel_code", "os_structures", "other_driver",
)
_INDEXED_KINDS = ("own_pool", "pool_of", "other_driver")


def _hex(value: int) -> str:
    return f"{value:#x}"


# -- JSON-lines codec --------------------------------------------------------

def event_to_dict(event: TraceEvent) -> dict:
    if isinstance(event, LoadDriver):
        return {
            "ev": "load_driver",
            "name": event.name,
            "image_base": _hex(event.image_base),
            "image_size": _hex(event.image_size),
        }
    if isinstance(event, UnloadDriver):
        return {"ev": "unload_driver", "name": event.name}
    if isinstance(event, CreateProcess):
        return {
            "ev": "create_process",
            "pid": event.pid,
            "regions": [[_hex(base), _hex(size)] for base, size in event.regions],
        }
    if isinstance(event, ExitProcess):
        return {"ev": "exit_process", "pid": event.pid}
    if isinstance(event, Alloc):
        return {"ev": "alloc", "actor": event.actor, "size": _hex(event.size), "align": event.align}
    if isinstance(event, Free):
        return {"ev": "free", "actor": event.actor, "pool": event.pool}
    if isinstance(event, Schedule):
        return {"ev": "schedule", "actor": event.actor}
    if isinstance(event, AccessEvent):
        dst: dict = {"ref": event.dst.kind}
        if event.dst.driver is not None:
            dst["driver"] = event.dst.driver
        if event.dst.pid is not None:
            dst["pid"] = event.dst.pid
        if event.dst.kind in _INDEXED_KINDS:
            dst["index"] = event.dst.index
        dst["offset"] = _hex(event.dst.offset)
        out: dict = {"ev": "access", "actor": event.actor, "dst": dst, "access": event.access}
        if event.payload is not None:
            out["payload"] = event.payload.hex()
        if event.expect is not None:
            out["expect"] = event.expect
        return out
    raise TypeError(f"not a trace event: {event!r}")


def _need(obj: dict, key: str, line: int):
    if key not in obj:
        raise TraceParseError(f"missing field {key!r}", line)
    return obj[key]


def _int_field(obj: dict, key: str, line: int, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise TraceParseError(f"missing field {key!r}", line)
    value = obj[key]
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise TraceParseError(f"field {key!r} is not an integer: {value!r}", line)


def _str_field(obj: dict, key: str, line: int) -> str:
    value = _need(obj, key, line)
    if not isinstance(value, str):
        raise TraceParseError(f"field {key!r} is not a string: {value!r}", line)
    return value


def event_from_dict(obj: dict, line: int = 0) -> TraceEvent:
    kind = _str_field(obj, "ev", line)
    if kind == "load_driver":
        return LoadDriver(
            _str_field(obj, "name", line),
            _int_field(obj, "image_base", line),
            _int_field(obj, "image_size", line),
        )
    if kind == "unload_driver":
        return UnloadDriver(_str_field(obj, "name", line))
    if kind == "create_process":
        raw = _need(obj, "regions", line)
        if not isinstance(raw, list) or not raw:
            raise TraceParseError("regions must be a non-empty list", line)
        regions = []
        for pair in raw:
            if not isinstance(pair, list) or len(pair) != 2:
                raise TraceParseError(f"region must be [base, size]: {pair!r}", line)
            regions.append((
                _int_field({"v": pair[0]}, "v", line),
                _int_field({"v": pair[1]}, "v", line),
            ))
        return CreateProcess(_int_field(obj, "pid", line), tuple(regions))
    if kind == "exit_process":
        return ExitProcess(_int_field(obj, "pid", line))
    if kind == "alloc":
        align = obj.get("align", "natural")
        if align not in ("natural", "page"):
            raise TraceParseError(f"unknown align {align!r}", line)
        return Alloc(_str_field(obj, "actor", line), _int_field(obj, "size", line), align)
    if kind == "free":
        return Free(_str_field(obj, "actor", line), _int_field(obj, "pool", line))
    if kind == "schedule":
        return Schedule(_str_field(obj, "actor", line))
    if kind == "access":
        raw_dst = _need(obj, "dst", line)
        if not isinstance(raw_dst, dict):
            raise TraceParseError("dst must be an object", line)
        dkind = _str_field(raw_dst, "ref", line)
        if dkind not in _DST_KINDS:
            raise TraceParseError(f"unknown target kind {dkind!r}", line)
        dst = DstRef(
            kind=dkind,
            driver=raw_dst.get("driver"),
            index=_int_field(raw_dst, "index", line, default=0),
            pid=raw_dst.get("pid"),
            offset=_int_field(raw_dst, "offset", line, default=0),
        )
        access = _str_field(obj, "access", line)
        if access not in ("read", "write", "execute"):
            raise TraceParseError(f"unknown access kind {access!r}", line)
        payload = None
        if "payload" in obj:
            try:
                payload = bytes.fromhex(obj["payload"])
            except (TypeError, ValueError):
                raise TraceParseError(f"payload is not hex: {obj['payload']!r}", line) from None
        expect = obj.get("expect")
        if expect not in (None, "legal", "illegal"):
            raise TraceParseError(f"unknown expect label {expect!r}", line)
        return AccessEvent(_str_field(obj, "actor", line), dst, access, payload, expect)
    raise TraceParseError(f"unknown event kind {kind!r}", line)


def serialize_trace(events) -> str:
    return "".join(json.dumps(event_to_dict(event)) + "\n" for event in events)


def parse_trace(text: str) -> list[TraceEvent]:
    events = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"bad json: {exc.msg}", line_no) from exc
        if not isinstance(obj, dict):
            raise TraceParseError("event must be a json object", line_no)
        events.append(event_from_dict(obj, line_no))
    return events


# -- allocator ---------------------------------------------------------------

class BumpAllocator:
    """Monotonic pool arena: natural packs at 16 bytes, page never shares."""

    def __init__(self, base: int, size: int):
        self.base = base
        self.end = base + size
        self.cursor = base

    def take(self, size: int, align: str) -> int:
        if size <= 0:
            raise SimulationError("allocation size must be positive")
        grain = PAGE_SIZE if align == "page" else 16
        start = (self.cursor + grain - 1) // grain * grain
        new_cursor = start + size
        if align == "page":
            # round the cursor past the tail page so nothing shares it
            new_cursor = (new_cursor + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE
        if new_cursor > self.end:
            raise SimulationError("pool arena exhausted")
        self.cursor = new_cursor
        return start


# -- single-context baseline --------------------------------------------------

class SingleEptPolicy:
    """Competitor baseline: one context for everyone.

    Protected data (enclave pools, process regions, kernel structures) is
    sealed outright, so every touch of it, legal or not, costs a trap plus a
    single-stepped window. Code is never sealed and the context never changes.
    """

    def __init__(self, config: StaticConfig):
        self.config = config
        self.default_ept = 0
        self.current_ept = 0
        self.epts = {0: create_ept(0)}
        self.enclaves: dict[int, EnclaveRecord] = {}
        self.processes: dict[int, ProcessRecord] = {}
        self.foreign_pools: list[AllocatedPool] = []
        self.pool_pages: dict[int, list[AllocatedPool]] = {}
        self._next_ept_id = 1
        self._next_pool_id = 0
        ept = self.epts[0]
        for base, size in config.os_kernel_ranges + config.other_driver_ranges:
            ept.set_region_attrs(base, size, RWX)
        for base, size in config.os_structure_ranges:
            ept.set_region_attrs(base, size, NONE)

    def _enclave_of_code(self, gpa: int) -> int | None:
        for rec in self.enclaves.values():
            if rec.image_base <= gpa < rec.image_end:
                return rec.ept_id
        pool = self._byte_pool(gpa)
        return pool.owner if pool is not None else None

    def _byte_pool(self, gpa: int) -> AllocatedPool | None:
        for pool in self.pool_pages.get(gpa >> 12, ()):
            if pool.base <= gpa < pool.end:
                return pool
        return None

    def _kernel_side_code(self, gpa: int) -> bool:
        for base, size in self.config.os_kernel_ranges + self.config.other_driver_ranges:
            if base <= gpa < base + size:
                return True
        return False

    def _in_structures(self, gpa: int) -> bool:
        return any(base <= gpa < base + size for base, size in self.config.os_structure_ranges)

    def _reseal(self, pages) -> None:
        ept = self.epts[0]
        for page in pages:
            pools = self.pool_pages.get(page, ())
            sealed = any(p.owner is not None for p in pools)
            ept.set_page_attrs(page, NONE if sealed else RW)

    def on_driver_load(self, image_base: int, image_size: int) -> int:
        eid = self._next_ept_id
        self._next_ept_id += 1
        self.enclaves[eid] = EnclaveRecord(eid, image_base, image_base + image_size)
        self.epts[0].set_region_attrs(image_base, image_size, RWX)
        return eid

    def on_driver_unload(self, eid: int) -> None:
        rec = self.enclaves.pop(eid)
        self.epts[0].set_region_attrs(rec.image_base, rec.image_end - rec.image_base, RW)
        released: list[int] = []
        for pool in rec.drv_allocs:
            for page in pages_covering(pool.base, pool.size):
                remaining = self.pool_pages[page]
                remaining.remove(pool)
                if not remaining:
                    del self.pool_pages[page]
                if page not in released:
                    released.append(page)
        self._reseal(released)

    def on_alloc(self, caller_addr: int, base: int, size: int) -> int | None:
        owner = self._enclave_of_code(caller_addr)
        pool = AllocatedPool(base, size, owner, pool_id=self._next_pool_id)
        self._next_pool_id += 1
        if owner is None:
            self.foreign_pools.append(pool)
        else:
            self.enclaves[owner].drv_allocs.append(pool)
        pages = pages_covering(base, size)
        for page in pages:
            self.pool_pages.setdefault(page, []).append(pool)
        self._reseal(pages)
        return pool.pool_id if owner is not None else None

    def on_free(self, base: int) -> None:
        pool = None
        for rec in self.enclaves.values():
            for candidate in rec.drv_allocs:
                if candidate.base == base:
                    pool = candidate
                    rec.drv_allocs.remove(candidate)
                    break
            if pool is not None:
                break
        if pool is None:
            for candidate in self.foreign_pools:
                if candidate.base == base:
                    pool = candidate
                    self.foreign_pools.remove(candidate)
                    break
        if pool is None:
            raise SimulationError(f"free of unknown pool base {base:#x}")
        pages = pages_covering(pool.base, pool.size)
        for page in pages:
            remaining = self.pool_pages[page]
            remaining.remove(pool)
            if not remaining:
                del self.pool_pages[page]
        self._reseal(pages)

    def on_process_create(self, pid: int, regions) -> None:
        self.processes[pid] = ProcessRecord(pid, [tuple(r) for r in regions])
        for base, size in regions:
            self.epts[0].set_region_attrs(base, size, NONE)

    def on_process_exit(self, pid: int) -> None:
        rec = self.processes.pop(pid)
        for base, size in rec.regions:
            attrs = NONE if self._in_structures(base) else RW
            self.epts[0].set_region_attrs(base, size, attrs)

    def classify_access(self, current_ept: int, src: int, dst: int, access: Access):
        if not (0 <= src < 1 << 48 and 0 <= dst < 1 << 48):
            return deny("address outside modeled space")
        if access is Access.EXECUTE:
            return REDIRECT
        actor = self._enclave_of_code(src)
        pools = self.pool_pages.get(dst >> 12, ())
        if pools:
            identities = {p.owner for p in pools}
            if len(identities) == 1:
                return GRANT if actor == next(iter(identities)) else REDIRECT
            pool = self._byte_pool(dst)
            if pool is not None and pool.owner == actor:
                return GRANT
            return REDIRECT
        if actor is None and self._kernel_side_code(src):
            return GRANT
        return REDIRECT


# -- simulation ----------------------------------------------------------------

@dataclass
class PoolInfo:
    base: int
    size: int
    align: str
    live: bool = True


@dataclass
class ActorInfo:
    name: str
    kind: str                   # "driver" | "os" | "other"
    code: int
    enclave_id: int | None = None


def _static_config() -> StaticConfig:
    return StaticConfig((OS_KERNEL_CODE,), (OS_STRUCTURES,), (OTHER_DRIVER,))


class Simulation:
    """One trace replay: regions, frames, policy, vcpu, and the access log."""

    def __init__(self, mode, config: SimConfig | None = None):
        self.mode = mode if isinstance(mode, Mode) else Mode(mode)
        self.config = config or SimConfig()
        self.cost_model = self.config.resolved_cost_model()
        self.store = FrameStore()
        if self.mode is Mode.SINGLE_EPT:
            self.policy = SingleEptPolicy(_static_config())
        else:
            # mode off keeps the same bookkeeping but never consults it
            self.policy = policy_init(OS_KERNEL_CODE, (OS_STRUCTURES,), (OTHER_DRIVER,))
        self.vcpu = VcpuState(current_ept=self.policy.default_ept)
        for (base, size), fill in (
            (OS_KERNEL_CODE, OS_KERNEL_FILL),
            (OS_STRUCTURES, OS_STRUCT_FILL),
            (OTHER_DRIVER, OTHER_DRIVER_FILL),
        ):
            self.store.fill_gpa_range(base, size, fill)
        self.allocator = BumpAllocator(*POOL_ARENA)
        self.actors: dict[str, ActorInfo] = {
            "os_kernel": ActorInfo("os_kernel", "os", OS_KERNEL_CODE[0] + CODE_ENTRY_OFFSET),
            "other_driver_0": ActorInfo("other_driver_0", "other", OTHER_DRIVER[0] + CODE_ENTRY_OFFSET),
        }
        self.images: dict[str, tuple[int, int]] = {}
        self.pools: dict[str, list[PoolInfo]] = {}
        self.processes: dict[int, tuple[tuple[int, int], ...]] = {}
        self.scheduled = "os_kernel"
        self.log: list[dict] = []
        self.allocations: list[dict] = []
        self.seq = 0
        self.event_index = -1
        self.ticks = 0

    # -- plumbing ---------------------------------------------------------

    def _actor(self, name: str) -> ActorInfo:
        info = self.actors.get(name)
        if info is None:
            raise SimulationError(f"unknown actor {name!r}")
        return info

    def _record(self, record: dict, expect: str | None = None) -> None:
        record["seq"] = self.seq
        record["event"] = self.event_index
        record["expect"] = expect
        self.seq += 1
        self.ticks += access_ticks(record, self.cost_model)
        self.log.append(record)

    def _direct_record(self, actor: str, src: int, dst: int, access: Access, data) -> dict:
        return {
            "actor": actor,
            "src": _hex(src),
            "dst": _hex(dst),
            "access": access.value,
            "ept_before": self.vcpu.current_ept,
            "ept_after": self.vcpu.current_ept,
            "decision": "allow",
            "trapped": False,
            "traps": 0,
            "switches": 0,
            "redirected": False,
            "granted": False,
            "data": data.hex() if data is not None else None,
        }

    def _direct_access(self, actor: str, src: int, dst: int, access: Access, payload) -> dict:
        length = len(payload) if access is Access.WRITE else (1 if access is Access.EXECUTE else 4)
        if (dst & (PAGE_SIZE - 1)) + length > PAGE_SIZE:
            raise SimulationError(f"access at {dst:#x} length {length} crosses a page")
        self.vcpu.counters["accesses"] += 1
        pfn = dst >> 12
        offset = dst & (PAGE_SIZE - 1)
        self.store.ensure(pfn)
        data = None
        if access is Access.READ:
            data = self.store.read_bytes(pfn, offset, length)
        elif access is Access.WRITE:
            self.store.write_bytes(pfn, offset, payload)
        return self._direct_record(actor, src, dst, access, data)

    def _fetch(self, target: str, expect: str | None = None) -> None:
        """Scheduler stub fetches the target's entry point; in multi-ept mode
        this is the moment contexts actually change."""
        info = self._actor(target)
        if self.mode is Mode.OFF:
            record = self._direct_access(target, SCHEDULER_STUB, info.code, Access.EXECUTE, None)
        else:
            # dispatching the os restores its home context; drivers reach
            # theirs through the fetch fault, their code runs nowhere else
            home = self.policy.default_ept if info.kind == "os" else None
            _, record = execute_access(
                self.vcpu, self.policy, self.store,
                SCHEDULER_STUB, info.code, Access.EXECUTE, actor=target, home_ept=home,
            )
        self._record(record, expect)
        self.scheduled = target

    def _ensure_running(self, name: str) -> None:
        if self.scheduled != name:
            self._fetch(name)

    def _pool_addr(self, owner: str, index: int, offset: int) -> int:
        pools = self.pools.get(owner)
        if not pools:
            raise SimulationError(f"actor {owner!r} has no allocations")
        if not 0 <= index < len(pools):
            raise SimulationError(f"no pool ordinal {index} for actor {owner!r}")
        pool = pools[index]
        if not pool.live:
            raise SimulationError(f"pool {owner}:{index} already freed")
        if not 0 <= offset < pool.size:
            raise SimulationError(f"offset {offset:#x} outside pool {owner}:{index}")
        return pool.base + offset

    def _resolve(self, info: ActorInfo, ref: DstRef) -> int:
        def bounded(base: int, size: int) -> int:
            if not 0 <= ref.offset < size:
                raise SimulationError(f"offset {ref.offset:#x} outside {ref.kind}")
            return base + ref.offset

        if ref.kind == "own_pool":
            return self._pool_addr(info.name, ref.index, ref.offset)
        if ref.kind == "pool_of":
            if ref.driver is None:
                raise SimulationError("pool_of needs a driver name")
            return self._pool_addr(ref.driver, ref.index, ref.offset)
        if ref.kind == "image_of":
            image = self.images.get(ref.driver)
            if image is None:
                raise SimulationError(f"no loaded image for {ref.driver!r}")
            return bounded(*image)
        if ref.kind == "eprocess":
            regions = self.processes.get(ref.pid)
            if regions is None:
                raise SimulationError(f"no live process {ref.pid}")
            return bounded(*regions[0])
        if ref.kind == "os_kernel_code":
            return bounded(*OS_KERNEL_CODE)
        if ref.kind == "os_structures":
            return bounded(*OS_STRUCTURES)
        if ref.kind == "other_driver":
            if ref.index != 0:
                raise SimulationError(f"no pre-existing driver {ref.index}")
            return bounded(*OTHER_DRIVER)
        raise SimulationError(f"unknown target kind {ref.kind!r}")

    # -- event handlers -----------------------------------------------------

    def step(self, event: TraceEvent) -> None:
        self.event_index += 1
        if isinstance(event, LoadDriver):
            self._on_load(event)
        elif isinstance(event, UnloadDriver):
            self._on_unload(event)
        elif isinstance(event, CreateProcess):
            self._on_process_create(event)
        elif isinstance(event, ExitProcess):
            self._on_process_exit(event)
        elif isinstance(event, Alloc):
            self._on_alloc(event)
        elif isinstance(event, Free):
            self._on_free(event)
        elif isinstance(event, Schedule):
            self._fetch(event.actor)
        elif isinstance(event, AccessEvent):
            self._on_access(event)
        else:
            raise SimulationError(f"unknown event {event!r}")

    def _on_load(self, event: LoadDriver) -> None:
        if event.name in self.actors:
            raise SimulationError(f"driver {event.name!r} already loaded")
        eid = self.policy.on_driver_load(event.image_base, event.image_size)
        self.store.fill_gpa_range(event.image_base, event.image_size, image_fill(event.name))
        self.actors[event.name] = ActorInfo(
            event.name, "driver", event.image_base + CODE_ENTRY_OFFSET, eid,
        )
        self.images[event.name] = (event.image_base, event.image_size)
        self.pools.setdefault(event.name, [])

    def _on_unload(self, event: UnloadDriver) -> None:
        info = self._actor(event.name)
        if info.kind != "driver":
            raise SimulationError(f"{event.name!r} is not an unloadable driver")
        self.policy.on_driver_unload(info.enclave_id)
        if self.vcpu.current_ept not in self.policy.epts:
            # the departed context cannot stay active; fall back, counted
            self.vcpu.current_ept = self.policy.default_ept
            self.policy.current_ept = self.policy.default_ept
            self.vcpu.counters["ept_switches"] += 1
            self.vcpu.counters["tlb_flushes"] += 1
            self.vcpu.counters["forced_switches"] += 1
        del self.actors[event.name]
        del self.images[event.name]
        for pool in self.pools.get(event.name, ()):
            pool.live = False
        if self.scheduled == event.name:
            self.scheduled = "os_kernel"

    def _on_process_create(self, event: CreateProcess) -> None:
        regions = tuple((int(base), int(size)) for base, size in event.regions)
        self.policy.on_process_create(event.pid, regions)
        for base, size in regions:
            self.store.fill_gpa_range(base, size, SECRET_FILL)
        self.processes[event.pid] = regions

    def _on_process_exit(self, event: ExitProcess) -> None:
        if event.pid not in self.processes:
            raise SimulationError(f"exit of unknown process {event.pid}")
        self.policy.on_process_exit(event.pid)
        del self.processes[event.pid]

    def _on_alloc(self, event: Alloc) -> None:
        info = self._actor(event.actor)
        self._ensure_running(event.actor)
        align = "page" if self.config.force_page_aligned else event.align
        base = self.allocator.take(event.size, align)
        fill = SECRET_FILL if info.kind == "driver" else FOREIGN_POOL_FILL
        self.store.fill_gpa_range(base, event.size, fill)
        self.policy.on_alloc(info.code, base, event.size)
        ordinals = self.pools.setdefault(event.actor, [])
        self.allocations.append({
            "event": self.event_index,
            "actor": event.actor,
            "ordinal": len(ordinals),
            "base": _hex(base),
            "size": _hex(event.size),
            "align": align,
        })
        ordinals.append(PoolInfo(base, event.size, align))

    def _on_free(self, event: Free) -> None:
        self._actor(event.actor)
        self._ensure_running(event.actor)
        pools = self.pools.get(event.actor, [])
        if not 0 <= event.pool < len(pools):
            raise SimulationError(f"free of unknown pool ordinal {event.pool}")
        info = pools[event.pool]
        if not info.live:
            raise SimulationError(f"double free of pool {event.actor}:{event.pool}")
        self.policy.on_free(info.base)
        info.live = False

    def _on_access(self, event: AccessEvent) -> None:
        info = self._actor(event.actor)
        self._ensure_running(event.actor)
        dst = self._resolve(info, event.dst)
        access = Access(event.access)
        payload = event.payload
        if access is Access.WRITE and payload is None:
            payload = DEFAULT_WRITE
        if self.mode is Mode.OFF:
            record = self._direct_access(event.actor, info.code, dst, access, payload)
        else:
            _, record = execute_access(
                self.vcpu, self.policy, self.store,
                info.code, dst, access, payload=payload, actor=event.actor,
            )
        self._record(record, event.expect)

    # -- results ------------------------------------------------------------

    def digests(self) -> dict[str, str]:
        """sha256 of every region alive at end of trace, keyed by stable label."""
        out = {
            "os_kernel_code": self.store.digest_gpa_range(*OS_KERNEL_CODE),
            "os_structures": self.store.digest_gpa_range(*OS_STRUCTURES),
            "other_driver:0": self.store.digest_gpa_range(*OTHER_DRIVER),
        }
        for name, (base, size) in self.images.items():
            out[f"image:{name}"] = self.store.digest_gpa_range(base, size)
        for name, pools in self.pools.items():
            for ordinal, pool in enumerate(pools):
                if pool.live:
                    out[f"pool:{name}:{ordinal}"] = self.store.digest_gpa_range(pool.base, pool.size)
        for pid, regions in self.processes.items():
            digest = hashlib.sha256()
            for base, size in regions:
                digest.update(self.store.read_gpa_range(base, size))
            out[f"eprocess:{pid}"] = digest.hexdigest()
        return out

    def report(self) -> RunReport:
        counters = dict(self.vcpu.counters)
        counters["rw_trapped_accesses"] = sum(
            1 for r in self.log if r["trapped"] and r["access"] != "execute"
        )
        counters["exec_trapped_accesses"] = sum(
            1 for r in self.log if r["trapped"] and r["access"] == "execute"
        )
        return RunReport(
            mode=self.mode.value,
            config={
                "force_page_aligned": self.config.force_page_aligned,
                "cost_model": self.cost_model.as_dict(),
            },
            counters=counters,
            log=list(self.log),
            allocations=list(self.allocations),
            digests=self.digests(),
            modeled_total_ticks=self.ticks,
        )


def run_trace(events, mode, config: SimConfig | None = None, after_event=None) -> RunReport:
    """Replay events under the given mode; after_event(sim, index, event) runs
    after each step (the equivalence harness hangs its oracle there)."""
    sim = Simulation(mode, config)
    for index, event in enumerate(events):
        sim.step(event)
        if after_event is not None:
            after_event(sim, index, event)
    return sim.report()


# -- trace generators ----------------------------------------------------------

def gen_demo1_trace() -> list[TraceEvent]:
    """Two drivers, two secrets, four cross-enclave attempts, four redirects."""
    a_pool = DstRef("own_pool", index=0)
    b_pool = DstRef("own_pool", index=0)
    return [
        LoadDriver("A", IMAGE_SLOTS[0]),
        LoadDriver("B", IMAGE_SLOTS[1]),
        Schedule("A"),
        Alloc("A", 0x100, "page"),
        Schedule("B"),
        Alloc("B", 0x100, "page"),
        Schedule("A"),
        AccessEvent("A", a_pool, "write", payload=bytes.fromhex("11223344"), expect="legal"),
        AccessEvent("A", a_pool, "read", expect="legal"),
        AccessEvent("A", DstRef("pool_of", driver="B", index=0), "read", expect="illegal"),
        AccessEvent("A", DstRef("pool_of", driver="B", index=0), "write",
                    payload=DEFAULT_WRITE, expect="illegal"),
        Schedule("B"),
        AccessEvent("B", b_pool, "write", payload=bytes.fromhex("55667788"), expect="legal"),
        AccessEvent("B", b_pool, "read", expect="legal"),
        AccessEvent("B", DstRef("pool_of", driver="A", index=0), "read", expect="illegal"),
        AccessEvent("B", DstRef("pool_of", driver="A", index=0), "write",
                    payload=DEFAULT_WRITE, expect="illegal"),
        Schedule("A"),
        AccessEvent("A", a_pool, "read", expect="legal"),
    ]


def gen_privesc_trace() -> list[TraceEvent]:
    """A rootkit-style driver tries to overwrite a process token field."""
    token = DstRef("eprocess", pid=4)
    return [
        LoadDriver("A", IMAGE_SLOTS[0]),
        CreateProcess(4, ((PROCESS_SLOT_BASE, PROCESS_REGION_SIZE),)),
        Schedule("os_kernel"),
        AccessEvent("os_kernel", token, "read", expect="legal"),
        Schedule("A"),
        AccessEvent("A", token, "write", payload=bytes(4), expect="illegal"),
        Schedule("os_kernel"),
        AccessEvent("os_kernel", token, "read", expect="legal"),
    ]


def gen_benchmark_trace(n_accesses: int = 10_000, align: str = "page",
                        quantum: int = 64) -> list[TraceEvent]:
    """One driver reading its own pool, preempted every quantum accesses."""
    events: list[TraceEvent] = [
        LoadDriver("X", IMAGE_SLOTS[0]),
        Schedule("X"),
        Alloc("X", 0x1000, align),
    ]
    slots = 0x1000 // 4
    for i in range(n_accesses):
        if i and i % quantum == 0:
            events.append(Schedule("other_driver_0"))
            events.append(Schedule("X"))
        events.append(AccessEvent(
            "X", DstRef("own_pool", index=0, offset=(i % slots) * 4), "read", expect="legal",
        ))
    return events


class _RandomTraceState:
    """Generator-side mirror of liveness, enough to label legality."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.events: list[TraceEvent] = []
        self.drivers: dict[str, int] = {}          # name -> image slot index
        self.free_slots = [0, 1]
        self.names = iter(string.ascii_uppercase)
        self.pools: dict[str, list[dict]] = {}     # actor -> [{size, live}]
        self.pids: list[int] = []
        self.free_pid_slots = list(range(PROCESS_SLOT_COUNT))
        self.pid_slot: dict[int, int] = {}
        self.next_pid = 4

    def live_pool_ordinals(self, actor: str) -> list[int]:
        return [i for i, p in enumerate(self.pools.get(actor, [])) if p["live"]]

    def load_driver(self):
        if not self.free_slots:
            return False
        name = next(self.names)
        slot = self.free_slots.pop(0)
        self.drivers[name] = slot
        self.pools.setdefault(name, [])
        self.events.append(LoadDriver(name, IMAGE_SLOTS[slot]))
        return True

    def unload_driver(self, name: str):
        slot = self.drivers.pop(name)
        self.free_slots.append(slot)
        self.free_slots.sort()
        for pool in self.pools.get(name, []):
            pool["live"] = False
        self.events.append(UnloadDriver(name))

    def create_process(self):
        if not self.free_pid_slots:
            return False
        pid = self.next_pid
        self.next_pid += 4
        slot = self.free_pid_slots.pop(0)
        self.pid_slot[pid] = slot
        self.pids.append(pid)
        base = PROCESS_SLOT_BASE + slot * PROCESS_SLOT_STRIDE
        self.events.append(CreateProcess(pid, ((base, PROCESS_REGION_SIZE),)))
        return True

    def exit_process(self, pid: int):
        self.pids.remove(pid)
        self.free_pid_slots.append(self.pid_slot.pop(pid))
        self.free_pid_slots.sort()
        self.events.append(ExitProcess(pid))

    def alloc(self, actor: str):
        rng = self.rng
        size = rng.choice((0x80, 0x100, 0x200, 0x1000))
        align = rng.choice(("page", "natural"))
        self.pools.setdefault(actor, []).append({"size": size, "live": True})
        self.events.append(Alloc(actor, size, align))


def gen_random_trace(seed: int, length: int = 200,
                     attack_probability: float = 0.3) -> list[TraceEvent]:
    """Seeded random trace: driver churn, allocation churn, scheduling noise,
    and a mix of legal accesses and cross-boundary attacks. Labels are correct
    by construction: attacks always target bytes the actor does not own."""
    rng = random.Random(seed)
    st = _RandomTraceState(rng)

    def offset_in(size: int) -> int:
        return rng.randrange(max(size - 3, 1) // 4 or 1) * 4

    # fixed opening so every trace has victims from the start
    st.load_driver()                      # A
    st.load_driver()                      # B
    st.create_process()                   # pid 4
    first, second = sorted(st.drivers)
    st.events.append(Schedule(first))
    st.alloc(first)
    st.events.append(Schedule(second))
    st.alloc(second)

    def driver_names() -> list[str]:
        return sorted(st.drivers)

    def weighted_actor() -> str:
        choices: list[str] = []
        for name in driver_names():
            choices.extend([name] * 3)
        choices.extend(["os_kernel", "os_kernel", "other_driver_0"])
        return rng.choice(choices)

    def legal_access(actor: str) -> AccessEvent | None:
        menu: list[tuple] = []
        if actor in st.drivers:
            for ordinal in st.live_pool_ordinals(actor):
                size = st.pools[actor][ordinal]["size"]
                menu.append(("own_pool", ordinal, size, "read"))
                menu.append(("own_pool", ordinal, size, "write"))
            menu.append(("image_of", actor, IMAGE_SIZE, "read"))
            menu.append(("other_driver", None, OTHER_DRIVER[1], "read"))
            menu.append(("os_kernel_code", None, OS_KERNEL_CODE[1], "read"))
        else:
            menu.append(("os_structures", None, 0x2000, "read"))
            menu.append(("os_structures", None, 0x2000, "write"))
            for pid in st.pids:
                menu.append(("eprocess", pid, PROCESS_REGION_SIZE, "read"))
                menu.append(("eprocess", pid, PROCESS_REGION_SIZE, "write"))
            for ordinal in st.live_pool_ordinals(actor):
                size = st.pools[actor][ordinal]["size"]
                menu.append(("own_pool", ordinal, size, "read"))
                menu.append(("own_pool", ordinal, size, "write"))
            menu.append(("os_kernel_code", None, OS_KERNEL_CODE[1], "read"))
        kind, which, size, access = rng.choice(menu)
        offset = offset_in(size)
        if kind == "own_pool":
            dst = DstRef("own_pool", index=which, offset=offset)
        elif kind == "image_of":
            dst = DstRef("image_of", driver=which, offset=offset)
        elif kind == "eprocess":
            dst = DstRef("eprocess", pid=which, offset=offset)
        elif kind == "other_driver":
            dst = DstRef("other_driver", index=0, offset=offset)
        else:
            dst = DstRef(kind, offset=offset)
        payload = bytes([0xA0 + rng.randrange(16)]) * 4 if access == "write" else None
        return AccessEvent(actor, dst, access, payload, "legal")

    def attack_access(actor: str) -> AccessEvent | None:
        menu: list[tuple] = []
        if actor in st.drivers:
            for victim in driver_names():
                if victim == actor:
                    continue
                for ordinal in st.live_pool_ordinals(victim):
                    size = st.pools[victim][ordinal]["size"]
                    menu.append(("pool_of", (victim, ordinal), size, "read"))
                    menu.append(("pool_of", (victim, ordinal), size, "write"))
                menu.append(("image_of", victim, IMAGE_SIZE, "read"))
                menu.append(("image_of", victim, IMAGE_SIZE, "write"))
            for pid in st.pids:
                menu.append(("eprocess", pid, PROCESS_REGION_SIZE, "read"))
                menu.append(("eprocess", pid, PROCESS_REGION_SIZE, "write"))
            menu.append(("os_structures", None, 0x2000, "read"))
            menu.append(("os_structures", None, 0x2000, "write"))
            menu.append(("os_structures", None, 0x2000, "execute"))
        else:
            for victim in driver_names():
                for ordinal in st.live_pool_ordinals(victim):
                    size = st.pools[victim][ordinal]["size"]
                    menu.append(("pool_of", (victim, ordinal), size, "read"))
                    menu.append(("pool_of", (victim, ordinal), size, "write"))
                menu.append(("image_of", victim, IMAGE_SIZE, "write"))
        if not menu:
            return None
        kind, which, size, access = rng.choice(menu)
        offset = offset_in(size)
        if kind == "pool_of":
            victim, ordinal = which
            dst = DstRef("pool_of", driver=victim, index=ordinal, offset=offset)
        elif kind == "image_of":
            dst = DstRef("image_of", driver=which, offset=offset)
        elif kind == "eprocess":
            dst = DstRef("eprocess", pid=which, offset=offset)
        else:
            dst = DstRef("os_structures", offset=offset)
        payload = DEFAULT_WRITE if access == "write" else None
        return AccessEvent(actor, dst, access, payload, "illegal")

    def all_actors() -> list[str]:
        return driver_names() + ["os_kernel", "other_driver_0"]

    while len(st.events) < length:
        roll = rng.random()
        if roll < 0.62:
            actor = weighted_actor()
            event = None
            if rng.random() < attack_probability:
                event = attack_access(actor)
            if event is None:
                event = legal_access(actor)
            st.events.append(event)
        elif roll < 0.72:
            st.events.append(Schedule(rng.choice(all_actors())))
        elif roll < 0.82:
            st.alloc(weighted_actor())
        elif roll < 0.87:
            victims = [
                (actor, ordinal)
                for actor in sorted(st.pools)
                for ordinal in st.live_pool_ordinals(actor)
            ]
            if victims:
                actor, ordinal = rng.choice(victims)
                st.pools[actor][ordinal]["live"] = False
                st.events.append(Free(actor, ordinal))
            else:
                st.alloc(weighted_actor())
        elif roll < 0.92:
            if len(st.pids) >= 2 and rng.random() < 0.5:
                st.exit_process(rng.choice(sorted(st.pids)))
            elif not st.create_process():
                st.events.append(Schedule(rng.choice(all_actors())))
        else:
            if len(st.drivers) >= 2 and rng.random() < 0.5:
                st.unload_driver(rng.choice(driver_names()))
            elif not st.load_driver():
                st.events.append(Schedule(rng.choice(all_actors())))

    return st.events[:length]
