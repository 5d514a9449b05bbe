"""Second-level translation model: per-context page tables with R/W/X bits.

Each translation context is a 4-level radix of tables (512 slots per level)
mapping guest page frames to host page frames. Permissions live on leaf
entries only; intermediate tables are always permissive. Tables materialize
lazily: an untouched page translates identity with the context's default
attributes. A refused translation is reported as a value, not an exception.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple

from .address_space import GPA_LIMIT, PAGE_SHIFT, split_gpa


class Access(Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


class Rwx(NamedTuple):
    r: bool
    w: bool
    x: bool

    def permits(self, access: Access) -> bool:
        if access is Access.READ:
            return self.r
        if access is Access.WRITE:
            return self.w
        return self.x

    def bits(self) -> int:
        return self.r | self.w << 1 | self.x << 2


RWX = Rwx(True, True, True)
RW = Rwx(True, True, False)
NONE = Rwx(False, False, False)


class EptEntry(NamedTuple):
    pfn: int
    attrs: Rwx


@dataclass(frozen=True)
class EptViolation:
    """A refused translation attempt, with the leaf entry as it stood."""

    ept: int
    gpa: int
    access: Access
    entry: EptEntry


class Ept:
    """One translation hierarchy, identity-mapped over a gpa range."""

    def __init__(self, ept_id: int, identity_range: tuple[int, int] = (0, GPA_LIMIT), default_attrs: Rwx = RW):
        base, end = identity_range
        if not (0 <= base < end <= GPA_LIMIT):
            raise ValueError("bad identity range")
        self.id = ept_id
        self.default_attrs = default_attrs
        self.identity_pages = (base >> PAGE_SHIFT, (end - 1 >> PAGE_SHIFT) + 1)
        self._root: dict[int, dict] = {}
        # flat mirror of materialized leaves; keeps oracle sweeps off the radix
        self._flat: dict[int, EptEntry] = {}
        self.mutations = 0

    def _default_entry(self, page: int) -> EptEntry:
        lo, hi = self.identity_pages
        if lo <= page < hi:
            return EptEntry(page, self.default_attrs)
        return EptEntry(page, NONE)

    def entry_for(self, page: int) -> EptEntry:
        """Effective leaf entry governing a page (materialized or default)."""
        hit = self._flat.get(page)
        return hit if hit is not None else self._default_entry(page)

    def set_page_entry(self, page: int, entry: EptEntry) -> None:
        gpa = page << PAGE_SHIFT
        pml4, pdpt, pd, pt, _ = split_gpa(gpa)
        table = self._root.setdefault(pml4, {}).setdefault(pdpt, {}).setdefault(pd, {})
        table[pt] = entry
        self._flat[page] = entry
        self.mutations += 1

    def set_page_attrs(self, page: int, attrs: Rwx) -> None:
        self.set_page_entry(page, EptEntry(self.entry_for(page).pfn, attrs))

    def set_region_attrs(self, base: int, size: int, attrs: Rwx) -> None:
        """Apply attrs to every page touched by [base, base+size). Page granular."""
        if size <= 0:
            raise ValueError("size must be positive")
        if base + size > GPA_LIMIT:
            raise ValueError("region extends beyond 48-bit space")
        for page in range(base >> PAGE_SHIFT, (base + size - 1 >> PAGE_SHIFT) + 1):
            self.set_page_attrs(page, attrs)

    def set_page_pfn(self, page: int, target_pfn: int) -> EptEntry:
        """Repoint a leaf at another frame; returns the prior entry for restore."""
        prior = self.entry_for(page)
        self.set_page_entry(page, EptEntry(target_pfn, prior.attrs))
        return prior

    def translate(self, gpa: int, access: Access) -> int | EptViolation:
        """Pure lookup: host address on success, violation value on refusal."""
        pml4, pdpt, pd, pt, offset = split_gpa(gpa)
        entry = None
        level = self._root.get(pml4)
        if level is not None:
            level = level.get(pdpt)
            if level is not None:
                level = level.get(pd)
                if level is not None:
                    entry = level.get(pt)
        if entry is None:
            entry = self._default_entry(gpa >> PAGE_SHIFT)
        if entry.attrs.permits(access):
            return (entry.pfn << PAGE_SHIFT) | offset
        return EptViolation(self.id, gpa, access, entry)

    def materialized_leaves(self) -> Iterator[tuple[int, EptEntry]]:
        return iter(self._flat.items())


def create_ept(ept_id: int, identity_range: tuple[int, int] = (0, GPA_LIMIT)) -> Ept:
    """Fresh context: identity map, readable and writable, not executable."""
    return Ept(ept_id, identity_range)
