"""Run reports, the modeled cost account, trace verification, and the CLI.

The verifier replays the trace with its own bookkeeping (shadow memory plus
the brute-force legality predicate) and audits the report against it: illegal
reads must observe zeros, legal reads must observe true bytes, and final
region digests must equal a replay in which illegal writes never happened.

Exit codes: 0 clean, 1 malformed input, 2 property violation.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .address_space import FrameStore
from .ept_model import Access
from .errors import ConfigError, SimulationError, TraceParseError
from .reference_oracle import EnclaveFacts, RegionSnapshot, SnapshotView

REPORT_SCHEMA = "ranger-report/1"
COMPARE_SCHEMA = "ranger-compare/1"
MODES = ("off", "single-ept", "multi-ept")

_COST_FIELDS = (
    "base_access",
    "vmexit_cost",
    "ept_switch_cost",
    "mtf_roundtrip_cost",
    "page_walk_after_flush",
)


@dataclass(frozen=True)
class CostModel:
    """Tick prices for the modeled cost account. Defaults follow the rough
    magnitude ordering of the real hardware events they stand in for."""

    base_access: int = 1
    vmexit_cost: int = 2000
    ept_switch_cost: int = 500
    mtf_roundtrip_cost: int = 4000
    page_walk_after_flush: int = 50

    @classmethod
    def from_dict(cls, raw: dict) -> "CostModel":
        unknown = set(raw) - set(_COST_FIELDS)
        if unknown:
            raise ValueError(f"unknown cost model fields: {sorted(unknown)}")
        for key, value in raw.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"cost model field {key!r} must be a non-negative integer")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "CostModel":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError("cost model file must hold a json object")
        return cls.from_dict(raw)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in _COST_FIELDS}


def access_ticks(record: dict, cost_model: CostModel) -> int:
    """Modeled price of one logged access; totals are sums of these."""
    ticks = cost_model.base_access
    ticks += cost_model.vmexit_cost * record["traps"]
    ticks += (cost_model.ept_switch_cost + cost_model.page_walk_after_flush) * record["switches"]
    if record["redirected"] or record["granted"]:
        ticks += cost_model.mtf_roundtrip_cost
    return ticks


@dataclass
class RunReport:
    mode: str
    config: dict
    counters: dict
    log: list
    allocations: list
    digests: dict
    modeled_total_ticks: int

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "config": self.config,
            "counters": self.counters,
            "allocations": self.allocations,
            "digests": self.digests,
            "modeled_total_ticks": self.modeled_total_ticks,
            "log": self.log,
        }

    def to_json(self, extra: dict | None = None) -> str:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# -- shadow replay -------------------------------------------------------------

@dataclass
class VerifyResult:
    ok: bool
    checked_reads: int
    leaks: list = field(default_factory=list)
    wrong_data: list = field(default_factory=list)
    digest_mismatches: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "ok": self.ok,
            "checked_reads": self.checked_reads,
            "leaks": len(self.leaks),
            "wrong_data": len(self.wrong_data),
            "digest_mismatches": len(self.digest_mismatches),
            "samples": {
                "leaks": self.leaks[:5],
                "wrong_data": self.wrong_data[:5],
                "digest_mismatches": self.digest_mismatches[:5],
            },
        }


class _Shadow:
    """Trace replay with independent bookkeeping: shadow memory in which only
    legal writes land, plus the raw facts the legality predicate needs."""

    def __init__(self):
        from . import kernel_sim as ks
        self.ks = ks
        self.store = FrameStore()
        for (base, size), fill in (
            (ks.OS_KERNEL_CODE, ks.OS_KERNEL_FILL),
            (ks.OS_STRUCTURES, ks.OS_STRUCT_FILL),
            (ks.OTHER_DRIVER, ks.OTHER_DRIVER_FILL),
        ):
            self.store.fill_gpa_range(base, size, fill)
        self.actor_code = {
            "os_kernel": ks.OS_KERNEL_CODE[0] + ks.CODE_ENTRY_OFFSET,
            "other_driver_0": ks.OTHER_DRIVER[0] + ks.CODE_ENTRY_OFFSET,
        }
        self.images: dict[str, tuple[int, int]] = {}
        self.identity: dict[str, int] = {}
        self.pools: dict[str, list[dict]] = {}
        self.processes: dict[int, tuple] = {}
        self._next_identity = 1
        self._view: SnapshotView | None = None

    def _invalidate(self):
        self._view = None

    def view(self) -> SnapshotView:
        if self._view is None:
            enclaves = []
            for name, ident in self.identity.items():
                base, size = self.images[name]
                live = tuple(
                    (p["base"], p["size"]) for p in self.pools.get(name, []) if p["live"]
                )
                enclaves.append(EnclaveFacts(ident, base, base + size, live))
            foreign = []
            for name, pools in self.pools.items():
                if name in self.identity:
                    continue
                foreign.extend((p["base"], p["size"]) for p in pools if p["live"])
            snap = RegionSnapshot(
                os_kernel_ranges=(self.ks.OS_KERNEL_CODE,),
                os_structure_ranges=(self.ks.OS_STRUCTURES,),
                other_driver_ranges=(self.ks.OTHER_DRIVER,),
                enclaves=tuple(enclaves),
                foreign_pools=tuple(foreign),
                processes=tuple((pid, regions) for pid, regions in self.processes.items()),
            )
            self._view = SnapshotView(snap)
        return self._view

    def resolve(self, actor: str, ref) -> int:
        ks = self.ks
        if ref.kind in ("own_pool", "pool_of"):
            owner = actor if ref.kind == "own_pool" else ref.driver
            pool = self.pools[owner][ref.index]
            return pool["base"] + ref.offset
        if ref.kind == "image_of":
            base, _ = self.images[ref.driver]
            return base + ref.offset
        if ref.kind == "eprocess":
            base, _ = self.processes[ref.pid][0]
            return base + ref.offset
        if ref.kind == "os_kernel_code":
            return ks.OS_KERNEL_CODE[0] + ref.offset
        if ref.kind == "os_structures":
            return ks.OS_STRUCTURES[0] + ref.offset
        if ref.kind == "other_driver":
            return ks.OTHER_DRIVER[0] + ref.offset
        raise SimulationError(f"unknown target kind {ref.kind!r}")

    def digests(self) -> dict[str, str]:
        import hashlib
        ks = self.ks
        out = {
            "os_kernel_code": self.store.digest_gpa_range(*ks.OS_KERNEL_CODE),
            "os_structures": self.store.digest_gpa_range(*ks.OS_STRUCTURES),
            "other_driver:0": self.store.digest_gpa_range(*ks.OTHER_DRIVER),
        }
        for name, (base, size) in self.images.items():
            out[f"image:{name}"] = self.store.digest_gpa_range(base, size)
        for name, pools in self.pools.items():
            for ordinal, pool in enumerate(pools):
                if pool["live"]:
                    out[f"pool:{name}:{ordinal}"] = self.store.digest_gpa_range(
                        pool["base"], pool["size"]
                    )
        for pid, regions in self.processes.items():
            digest = hashlib.sha256()
            for base, size in regions:
                digest.update(self.store.read_gpa_range(base, size))
            out[f"eprocess:{pid}"] = digest.hexdigest()
        return out


def shadow_replay(events, allocations) -> tuple[dict, dict]:
    """Replay events independently of the simulator. Returns per-event access
    expectations {index: {legal, data}} and the final shadow digests."""
    shadow = _Shadow()
    ks = shadow.ks
    alloc_rows = iter(allocations)
    expectations: dict[int, dict] = {}

    for index, event in enumerate(events):
        if isinstance(event, ks.LoadDriver):
            shadow.identity[event.name] = shadow._next_identity
            shadow._next_identity += 1
            shadow.images[event.name] = (event.image_base, event.image_size)
            shadow.pools.setdefault(event.name, [])
            shadow.actor_code[event.name] = event.image_base + ks.CODE_ENTRY_OFFSET
            shadow.store.fill_gpa_range(event.image_base, event.image_size,
                                        ks.image_fill(event.name))
            shadow._invalidate()
        elif isinstance(event, ks.UnloadDriver):
            del shadow.identity[event.name]
            del shadow.images[event.name]
            del shadow.actor_code[event.name]
            for pool in shadow.pools.get(event.name, []):
                pool["live"] = False
            shadow._invalidate()
        elif isinstance(event, ks.CreateProcess):
            regions = tuple((int(b), int(s)) for b, s in event.regions)
            shadow.processes[event.pid] = regions
            for base, size in regions:
                shadow.store.fill_gpa_range(base, size, ks.SECRET_FILL)
            shadow._invalidate()
        elif isinstance(event, ks.ExitProcess):
            del shadow.processes[event.pid]
            shadow._invalidate()
        elif isinstance(event, ks.Alloc):
            row = next(alloc_rows, None)
            if row is None or row["actor"] != event.actor or row["event"] != index:
                raise RuntimeError(f"allocation table out of step at event {index}")
            base = int(row["base"], 0)
            size = int(row["size"], 0)
            fill = ks.SECRET_FILL if event.actor in shadow.identity else ks.FOREIGN_POOL_FILL
            shadow.store.fill_gpa_range(base, size, fill)
            shadow.pools.setdefault(event.actor, []).append(
                {"base": base, "size": size, "live": True}
            )
            shadow._invalidate()
        elif isinstance(event, ks.Free):
            shadow.pools[event.actor][event.pool]["live"] = False
            shadow._invalidate()
        elif isinstance(event, ks.Schedule):
            pass
        elif isinstance(event, ks.AccessEvent):
            src = shadow.actor_code[event.actor]
            dst = shadow.resolve(event.actor, event.dst)
            access = Access(event.access)
            legal = shadow.view().legal(src, dst, access)
            data = None
            if access is Access.READ:
                data = shadow.store.read_gpa_range(dst, 4) if legal else bytes(4)
            elif access is Access.WRITE and legal:
                payload = event.payload if event.payload is not None else ks.DEFAULT_WRITE
                shadow.store.fill_gpa_range(dst, len(payload), payload)
            expectations[index] = {"legal": legal, "data": data}
    return expectations, shadow.digests()


def verify_run(events, report: RunReport) -> VerifyResult:
    """Audit a run report against the independent shadow replay."""
    expectations, shadow_digests = shadow_replay(events, report.allocations)
    result = VerifyResult(ok=True, checked_reads=0)
    for record in report.log:
        if record["access"] != "read":
            continue
        expected = expectations.get(record["event"])
        if expected is None:
            continue
        data = bytes.fromhex(record["data"]) if record["data"] else b""
        result.checked_reads += 1
        entry = {
            "seq": record["seq"],
            "event": record["event"],
            "actor": record["actor"],
            "dst": record["dst"],
            "got": record["data"],
        }
        if expected["legal"]:
            if data != expected["data"]:
                entry["want"] = expected["data"].hex()
                result.wrong_data.append(entry)
        elif any(data):
            entry["want"] = "00" * len(data)
            result.leaks.append(entry)
    labels = sorted(set(shadow_digests) | set(report.digests))
    for label in labels:
        want = shadow_digests.get(label)
        got = report.digests.get(label)
        if want != got:
            result.digest_mismatches.append({"region": label, "want": want, "got": got})
    result.ok = not (result.leaks or result.wrong_data or result.digest_mismatches)
    return result


# -- command line ----------------------------------------------------------------

def _render_text(report: RunReport, verdict: VerifyResult) -> str:
    c = report.counters
    state = "ok" if verdict.ok else "VIOLATION"
    return "\n".join([
        f"mode: {report.mode}",
        f"accesses: {c['accesses']}"
        f" (rw trapped {c['rw_trapped_accesses']},"
        f" exec trapped {c['exec_trapped_accesses']})",
        f"violations: {c['ept_violations']}"
        f"  switches: {c['ept_switches']}"
        f"  tlb flushes: {c['tlb_flushes']}",
        f"redirects: {c['redirects']}"
        f"  grants: {c['grants']}"
        f"  mtf windows: {c['mtf_windows']}",
        f"modeled ticks: {report.modeled_total_ticks}",
        f"digests: {len(report.digests)} regions",
        f"verification: {state}"
        f" ({len(verdict.leaks)} leaks, {len(verdict.wrong_data)} wrong reads,"
        f" {len(verdict.digest_mismatches)} digest mismatches,"
        f" {verdict.checked_reads} reads checked)",
    ]) + "\n"


def _load_events(path: str):
    from . import kernel_sim as ks
    try:
        text = Path(path).read_text()
    except OSError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return None
    try:
        return ks.parse_trace(text)
    except TraceParseError as exc:
        print(f"{path}:{exc.line}: {exc}", file=sys.stderr)
        return None


def _load_cost_model(path: str | None) -> CostModel | None:
    if path is None:
        return CostModel()
    try:
        return CostModel.from_file(path)
    except (OSError, ValueError) as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return None


def cli_run(args) -> int:
    from . import kernel_sim as ks
    events = _load_events(args.trace)
    if events is None:
        return 1
    cost_model = _load_cost_model(args.cost_model)
    if cost_model is None:
        return 1
    config = ks.SimConfig(force_page_aligned=args.page_aligned, cost_model=cost_model)
    try:
        report = ks.run_trace(events, args.mode, config)
    except (ConfigError, SimulationError) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return 1
    verdict = verify_run(events, report)
    if args.report == "json":
        sys.stdout.write(report.to_json(extra={"verification": verdict.summary()}))
    else:
        sys.stdout.write(_render_text(report, verdict))
    return 0 if verdict.ok else 2


def cli_compare(args) -> int:
    from . import kernel_sim as ks
    events = _load_events(args.trace)
    if events is None:
        return 1
    cost_model = _load_cost_model(args.cost_model)
    if cost_model is None:
        return 1
    reports: dict[str, RunReport] = {}
    for mode in MODES:
        config = ks.SimConfig(force_page_aligned=args.page_aligned, cost_model=cost_model)
        try:
            reports[mode] = ks.run_trace(events, mode, config)
        except (ConfigError, SimulationError) as exc:
            print(f"simulation failed under {mode}: {exc}", file=sys.stderr)
            return 1
    ticks = {mode: reports[mode].modeled_total_ticks for mode in MODES}
    problems = []
    if not ticks["off"] < ticks["multi-ept"]:
        problems.append(f"off={ticks['off']} >= multi-ept={ticks['multi-ept']}")
    if not ticks["multi-ept"] < ticks["single-ept"]:
        problems.append(f"multi-ept={ticks['multi-ept']} >= single-ept={ticks['single-ept']}")
    if problems:
        verdict_line = "ORDERING VERDICT: FAIL (" + "; ".join(problems) + ")"
    else:
        verdict_line = (
            "ORDERING VERDICT: PASS ("
            f"off={ticks['off']} < multi-ept={ticks['multi-ept']}"
            f" < single-ept={ticks['single-ept']})"
        )
    if args.report == "json":
        payload = {
            "schema": COMPARE_SCHEMA,
            "modes": {
                mode: {
                    "counters": reports[mode].counters,
                    "modeled_total_ticks": ticks[mode],
                }
                for mode in MODES
            },
            "verdict": {
                "ordering": "FAIL" if problems else "PASS",
                "detail": "; ".join(problems) if problems else verdict_line,
            },
        }
        sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        header = f"{'mode':<12}{'ticks':>14}{'violations':>12}{'switches':>10}{'redirects':>11}{'grants':>8}"
        lines = [header]
        for mode in MODES:
            c = reports[mode].counters
            lines.append(
                f"{mode:<12}{ticks[mode]:>14}{c['ept_violations']:>12}"
                f"{c['ept_switches']:>10}{c['redirects']:>11}{c['grants']:>8}"
            )
        lines.append(verdict_line)
        sys.stdout.write("\n".join(lines) + "\n")
    return 0 if not problems else 2


def cli_gen(args) -> int:
    from . import kernel_sim as ks
    seed = args.seed
    env_seed = os.environ.get("RANGER_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed, 0)
        except ValueError:
            print(f"RANGER_SEED is not an integer: {env_seed!r}", file=sys.stderr)
            return 1
    if args.kind == "demo1":
        events = ks.gen_demo1_trace()
    elif args.kind == "privesc":
        events = ks.gen_privesc_trace()
    elif args.kind == "bench":
        events = ks.gen_benchmark_trace(
            n_accesses=args.n if args.n is not None else 10_000,
            align=args.align,
        )
    else:
        events = ks.gen_random_trace(
            seed,
            length=args.n if args.n is not None else 200,
            attack_probability=args.attack_probability,
        )
    try:
        Path(args.output).write_text(ks.serialize_trace(events))
    except OSError as exc:
        print(f"{args.output}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(events)} events to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memranger",
        description="Deterministic driver-isolation simulator and report tool.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="replay a trace under one protection mode")
    run_p.add_argument("trace", help="trace file, one json event per line")
    run_p.add_argument("--mode", choices=MODES, default="multi-ept")
    run_p.add_argument("--page-aligned", action="store_true",
                       help="force every allocation onto its own pages")
    run_p.add_argument("--report", choices=("text", "json"), default="text")
    run_p.add_argument("--cost-model", default=None, help="json file with tick prices")
    run_p.set_defaults(func=cli_run)

    cmp_p = sub.add_parser("compare", help="replay a trace under all three modes")
    cmp_p.add_argument("trace")
    cmp_p.add_argument("--page-aligned", action="store_true")
    cmp_p.add_argument("--report", choices=("text", "json"), default="text")
    cmp_p.add_argument("--cost-model", default=None)
    cmp_p.set_defaults(func=cli_compare)

    gen_p = sub.add_parser("gen", help="emit a generated trace")
    gen_p.add_argument("kind", choices=("demo1", "privesc", "bench", "random"))
    gen_p.add_argument("--seed", type=int, default=0,
                       help="random trace seed (RANGER_SEED overrides)")
    gen_p.add_argument("--n", type=int, default=None,
                       help="accesses for bench, events for random")
    gen_p.add_argument("--align", choices=("page", "natural"), default="page")
    gen_p.add_argument("--attack-probability", type=float, default=0.3)
    gen_p.add_argument("-o", "--output", required=True)
    gen_p.set_defaults(func=cli_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
