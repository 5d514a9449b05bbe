"""Memory access policy: who may touch what, and through which context.

Holds the region bookkeeping (enclaves, pools, processes) and applies the
permission choreography to the translation contexts as events arrive:

* the default context opens the kernel's world and seals every enclave's
  image and pools;
* each driver context opens its own image and pools plus kernel code, seals
  kernel structures and every other enclave, and leaves pre-existing drivers
  readable but not executable;
* a page carrying bytes of two different owners is sealed in every context,
  and only single-stepped grants let the owners through;
* allocation ownership is attributed by the caller's code address.

classify_access is the violation brain: for a refused translation it picks
switch / redirect / grant / deny.
"""

from dataclasses import dataclass, field
from enum import Enum

from .address_space import GPA_LIMIT, PAGE_SHIFT, pages_covering
from .ept_model import NONE, RW, RWX, Access, Ept, Rwx, create_ept
from .errors import ConfigError, SimulationError

DEFAULT_EPT = 0


@dataclass
class AllocatedPool:
    base: int
    size: int
    owner: int | None            # enclave id; None for kernel-side callers
    pool_id: int = -1
    page_shared: bool = False

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class EnclaveRecord:
    ept_id: int
    image_base: int
    image_end: int
    drv_allocs: list[AllocatedPool] = field(default_factory=list)


@dataclass
class ProcessRecord:
    pid: int
    regions: list[tuple[int, int]]


@dataclass(frozen=True)
class StaticConfig:
    os_kernel_ranges: tuple[tuple[int, int], ...]
    os_structure_ranges: tuple[tuple[int, int], ...]
    other_driver_ranges: tuple[tuple[int, int], ...]


class DecisionKind(Enum):
    ALLOW = "allow"
    SWITCH_EPT = "switch_ept"
    REDIRECT_TO_FAKE = "redirect_to_fake"
    TEMPORARY_GRANT = "temporary_grant"
    DENY = "deny"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    target_ept: int | None = None
    reason: str = ""


ALLOW = Decision(DecisionKind.ALLOW)
REDIRECT = Decision(DecisionKind.REDIRECT_TO_FAKE)
GRANT = Decision(DecisionKind.TEMPORARY_GRANT)


def switch_to(ept_id: int) -> Decision:
    return Decision(DecisionKind.SWITCH_EPT, target_ept=ept_id)


def deny(reason: str) -> Decision:
    return Decision(DecisionKind.DENY, reason=reason)


def _check_range(base: int, size: int, what: str) -> None:
    if size <= 0:
        raise ConfigError(f"{what}: size must be positive")
    if base < 0 or base + size > GPA_LIMIT:
        raise ConfigError(f"{what}: outside 48-bit space")


class MapState:
    """Live policy state: one default context plus one context per enclave."""

    def __init__(self, config: StaticConfig):
        self.config = config
        self.default_ept = DEFAULT_EPT
        self.current_ept = DEFAULT_EPT
        self.epts: dict[int, Ept] = {DEFAULT_EPT: create_ept(DEFAULT_EPT)}
        self.enclaves: dict[int, EnclaveRecord] = {}
        self.processes: dict[int, ProcessRecord] = {}
        self.foreign_pools: list[AllocatedPool] = []
        self.pool_pages: dict[int, list[AllocatedPool]] = {}
        self.tracked: set[int] = set()
        self.layout_version = 0
        self._next_ept_id = DEFAULT_EPT + 1
        self._next_pool_id = 0
        self._static_kind: dict[int, str] = {}
        self._overlay: dict[int, tuple] = {}   # page -> ("image", eid) | ("process", pid)

        named = (
            ("os kernel code", "kernel", config.os_kernel_ranges),
            ("os structures", "structure", config.os_structure_ranges),
            ("other driver", "other", config.other_driver_ranges),
        )
        for what, kind, ranges in named:
            for base, size in ranges:
                _check_range(base, size, what)
                for page in pages_covering(base, size):
                    if page in self._static_kind:
                        raise ConfigError(f"{what}: page {page:#x} claimed twice")
                    self._static_kind[page] = kind
                    self.tracked.add(page)
        # the kernel's world is fully open in the default context
        default = self.epts[DEFAULT_EPT]
        for _, _, ranges in named:
            for base, size in ranges:
                default.set_region_attrs(base, size, RWX)
        self.layout_version += 1

    # -- queries -----------------------------------------------------------

    def _byte_pool(self, gpa: int) -> AllocatedPool | None:
        for pool in self.pool_pages.get(gpa >> PAGE_SHIFT, ()):
            if pool.base <= gpa < pool.end:
                return pool
        return None

    def _enclave_of_code(self, gpa: int) -> int | None:
        """Enclave whose image or pool bytes contain gpa, if any."""
        overlay = self._overlay.get(gpa >> PAGE_SHIFT)
        if overlay is not None and overlay[0] == "image":
            eid = overlay[1]
            rec = self.enclaves[eid]
            if rec.image_base <= gpa < rec.image_end:
                return eid
        pool = self._byte_pool(gpa)
        if pool is not None:
            return pool.owner
        return None

    def _kernel_side_code(self, gpa: int) -> bool:
        for base, size in self.config.os_kernel_ranges + self.config.other_driver_ranges:
            if base <= gpa < base + size:
                return True
        return False

    def _page_identities(self, page: int) -> set:
        return {pool.owner for pool in self.pool_pages.get(page, ())}

    def _page_locked(self, page: int) -> bool:
        identities = self._page_identities(page)
        return len(identities) >= 2 and any(i is not None for i in identities)

    # -- attribute choreography --------------------------------------------

    def _static_attrs(self, page: int, ept_id: int) -> Rwx:
        kind = self._static_kind.get(page)
        if kind == "kernel":
            return RWX
        if kind == "structure":
            return RWX if ept_id == self.default_ept else NONE
        if kind == "other":
            return RWX if ept_id == self.default_ept else RW
        return RW

    def _revert_page(self, page: int) -> None:
        for ept_id, ept in self.epts.items():
            ept.set_page_attrs(page, self._static_attrs(page, ept_id))

    def _reseal_pool_pages(self, pages) -> None:
        """Recompute attrs for pool pages after ownership changed."""
        touched: list[AllocatedPool] = []
        for page in pages:
            pools = self.pool_pages.get(page, [])
            touched.extend(p for p in pools if p not in touched)
            identities = {p.owner for p in pools}
            if not pools:
                self._revert_page(page)
            elif len(identities) >= 2 and any(i is not None for i in identities):
                for ept in self.epts.values():
                    ept.set_page_attrs(page, NONE)    # sealed for every owner
            elif identities == {None}:
                for ept in self.epts.values():
                    ept.set_page_attrs(page, RW)      # kernel-side data stays open
            else:
                owner = next(iter(identities))
                for ept_id, ept in self.epts.items():
                    ept.set_page_attrs(page, RWX if ept_id == owner else NONE)
        for pool in touched:
            self._refresh_shared_flag(pool)

    def _refresh_shared_flag(self, pool: AllocatedPool) -> None:
        pool.page_shared = False
        for page in pages_covering(pool.base, pool.size):
            others = {p.owner for p in self.pool_pages.get(page, ()) if p is not pool}
            others.discard(pool.owner)
            if others:
                pool.page_shared = True
                return

    # -- events --------------------------------------------------------------

    def on_driver_load(self, image_base: int, image_size: int) -> int:
        _check_range(image_base, image_size, "driver image")
        pages = pages_covering(image_base, image_size)
        for page in pages:
            if page in self._static_kind or page in self._overlay or page in self.pool_pages:
                raise ConfigError(f"driver image overlaps page {page:#x}")
        eid = self._next_ept_id
        self._next_ept_id += 1
        ept = create_ept(eid)
        ept.set_region_attrs(image_base, image_size, RWX)
        for base, size in self.config.os_kernel_ranges:
            ept.set_region_attrs(base, size, RWX)
        for base, size in self.config.os_structure_ranges:
            ept.set_region_attrs(base, size, NONE)
        for base, size in self.config.other_driver_ranges:
            ept.set_region_attrs(base, size, RW)
        for other in self.enclaves.values():
            ept.set_region_attrs(other.image_base, other.image_end - other.image_base, NONE)
            for pool in other.drv_allocs:
                for page in pages_covering(pool.base, pool.size):
                    ept.set_page_attrs(page, NONE)
        for proc in self.processes.values():
            for base, size in proc.regions:
                ept.set_region_attrs(base, size, NONE)
        # hide the newcomer's image from every pre-existing context
        for other_ept in self.epts.values():
            other_ept.set_region_attrs(image_base, image_size, NONE)
        self.epts[eid] = ept
        self.enclaves[eid] = EnclaveRecord(eid, image_base, image_base + image_size)
        for page in pages:
            self._overlay[page] = ("image", eid)
            self.tracked.add(page)
        self.layout_version += 1
        return eid

    def on_driver_unload(self, eid: int) -> None:
        rec = self.enclaves.pop(eid, None)
        if rec is None:
            raise ConfigError(f"unload of unknown enclave {eid}")
        del self.epts[eid]
        for page in pages_covering(rec.image_base, rec.image_end - rec.image_base):
            del self._overlay[page]
            self._revert_page(page)
        released: list[int] = []
        for pool in rec.drv_allocs:
            for page in pages_covering(pool.base, pool.size):
                remaining = self.pool_pages[page]
                remaining.remove(pool)
                if not remaining:
                    del self.pool_pages[page]
                if page not in released:
                    released.append(page)
        self._reseal_pool_pages(released)
        if self.current_ept == eid:
            self.current_ept = self.default_ept
        self.layout_version += 1

    def on_alloc(self, caller_addr: int, base: int, size: int) -> int | None:
        """Record an allocation; returns the pool id, or None when the caller
        is not enclaved (the pool is then tracked for layout only)."""
        if size <= 0 or base < 0 or base + size > GPA_LIMIT:
            raise SimulationError(f"allocation [{base:#x}, +{size:#x}) out of range")
        pages = pages_covering(base, size)
        end = base + size
        for page in pages:
            if page in self._static_kind or page in self._overlay:
                raise SimulationError(f"allocation overlaps configured region at page {page:#x}")
            for pool in self.pool_pages.get(page, ()):
                if pool.base < end and base < pool.end:
                    raise SimulationError(f"allocation overlaps live pool at {pool.base:#x}")
        owner = self._enclave_of_code(caller_addr)
        pool = AllocatedPool(base, size, owner, pool_id=self._next_pool_id)
        self._next_pool_id += 1
        if owner is None:
            self.foreign_pools.append(pool)
        else:
            self.enclaves[owner].drv_allocs.append(pool)
        for page in pages:
            self.pool_pages.setdefault(page, []).append(pool)
            self.tracked.add(page)
        self._reseal_pool_pages(pages)
        self.layout_version += 1
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
        self._reseal_pool_pages(pages)
        self.layout_version += 1

    def on_process_create(self, pid: int, regions) -> None:
        if pid in self.processes:
            raise ConfigError(f"process {pid} already exists")
        regions = [(int(base), int(size)) for base, size in regions]
        if not regions:
            raise ConfigError("process needs at least one region")
        for base, size in regions:
            _check_range(base, size, f"process {pid} region")
            for page in pages_covering(base, size):
                if page in self._overlay or page in self.pool_pages:
                    raise ConfigError(f"process region overlaps page {page:#x}")
                if self._static_kind.get(page) in ("kernel", "other"):
                    raise ConfigError(f"process region overlaps code at page {page:#x}")
        for base, size in regions:
            self.epts[self.default_ept].set_region_attrs(base, size, RWX)
            for ept_id, ept in self.epts.items():
                if ept_id != self.default_ept:
                    ept.set_region_attrs(base, size, NONE)
            for page in pages_covering(base, size):
                self._overlay[page] = ("process", pid)
                self.tracked.add(page)
        self.processes[pid] = ProcessRecord(pid, regions)
        self.layout_version += 1

    def on_process_exit(self, pid: int) -> None:
        rec = self.processes.pop(pid, None)
        if rec is None:
            raise SimulationError(f"exit of unknown process {pid}")
        for base, size in rec.regions:
            for page in pages_covering(base, size):
                del self._overlay[page]
                self._revert_page(page)
        self.layout_version += 1

    # -- violation brain -----------------------------------------------------

    def classify_access(self, current_ept: int, src: int, dst: int, access: Access) -> Decision:
        """Decide what a refused translation means. Called on violations only."""
        if not (0 <= src < GPA_LIMIT and 0 <= dst < GPA_LIMIT):
            return deny("address outside modeled space")
        page = dst >> PAGE_SHIFT
        overlay = self._overlay.get(page)
        pools = self.pool_pages.get(page, ())
        identities = {pool.owner for pool in pools}
        locked = len(identities) >= 2 and any(i is not None for i in identities)

        if access is Access.EXECUTE:
            if overlay is not None and overlay[0] == "image":
                eid = overlay[1]
                if current_ept != eid:
                    return switch_to(eid)
                return REDIRECT
            if pools and not locked:
                sole = next(iter(identities)) if len(identities) == 1 else None
                if sole is not None:
                    # an enclave's pool runs only in its owner's context
                    if current_ept != sole:
                        return switch_to(sole)
                    return REDIRECT
            if locked:
                pool = self._byte_pool(dst)
                if (
                    pool is not None
                    and pool.owner is not None
                    and pool.owner == self._enclave_of_code(src)
                ):
                    if current_ept != pool.owner:
                        return switch_to(pool.owner)
                    return GRANT
                return REDIRECT
            static = self._static_kind.get(page)
            if static in ("kernel", "other") or (static is None and overlay is None and not pools):
                if current_ept != self.default_ept:
                    return switch_to(self.default_ept)
            return REDIRECT

        # data access
        if (overlay is not None and overlay[0] == "process") or self._static_kind.get(page) == "structure":
            if self._kernel_side_code(src) and current_ept != self.default_ept:
                return switch_to(self.default_ept)
            return REDIRECT
        if pools:
            if locked:
                pool = self._byte_pool(dst)
                if pool is not None:
                    actor = self._enclave_of_code(src)
                    if actor == pool.owner:
                        # grants happen only in the owner identity's home context
                        home = pool.owner if pool.owner is not None else self.default_ept
                        if current_ept != home:
                            return switch_to(home)
                        return GRANT
            return REDIRECT
        return REDIRECT


def init(os_kernel_range, os_structure_ranges, other_driver_ranges) -> MapState:
    """Build the initial policy state from the static region map."""
    config = StaticConfig(
        os_kernel_ranges=(tuple(os_kernel_range),),
        os_structure_ranges=tuple(tuple(r) for r in os_structure_ranges),
        other_driver_ranges=tuple(tuple(r) for r in other_driver_ranges),
    )
    return MapState(config)
