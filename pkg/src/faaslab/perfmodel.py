"""Analytic latency and cost model for both data exchange strategies.

The phase formulas capture the two forces that decide whether all-to-all
exchange through object storage beats a gather-sort VM: aggregate
bandwidth scales with worker count until the store-wide cap binds
(effective per-worker bandwidth e(w) = min(b, A/w)), while the w*w
partition objects of a shuffle push against the store's
operations-per-second cap (a w^2/R floor on the partition phases).

All operations are pure; breakdown totals are computed from the phase
fields in one fixed order, so total always equals the component sum
exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, dataclass, fields
from importlib import resources

from faaslab.blobstore import StoreMetrics, StoreProfile
from faaslab.errors import DomainError, SchemaError

DEFAULT_COMPRESSION_RATIO = 10.0

CALIBRATED_PROFILE = "calibrated-v1"
DESK_PROFILE = "desk-v1"


@dataclass(frozen=True)
class ComputeProfile:
    """Function and VM execution parameters.

    Rates are bytes/s of input processed; startup and provision times are
    charged once per stage wave, since workers launch concurrently.
    """

    fn_startup: float
    fn_mem_gb: float
    fn_sort_rate: float
    fn_encode_rate: float
    vm_provision: float
    vm_bandwidth: float
    vm_sort_rate: float

    def __post_init__(self):
        for name in ("fn_mem_gb", "fn_sort_rate", "fn_encode_rate", "vm_bandwidth", "vm_sort_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.fn_startup < 0 or self.vm_provision < 0:
            raise ValueError("startup and provision times must be >= 0")


@dataclass(frozen=True)
class PriceSheet:
    """Unit prices; GB means 1e9 bytes throughout."""

    price_gb_s: float
    price_invocation: float
    price_put: float
    price_get: float
    price_vm_s: float
    price_vol_gb_s: float

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")


_PHASES = (
    "startup",
    "input_read",
    "sort_compute",
    "partition_write",
    "partition_read",
    "output_write",
    "encode",
)


@dataclass(frozen=True)
class LatencyBreakdown:
    startup: float = 0.0
    input_read: float = 0.0
    sort_compute: float = 0.0
    partition_write: float = 0.0
    partition_read: float = 0.0
    output_write: float = 0.0
    encode: float = 0.0

    @property
    def total(self) -> float:
        # fixed summation order keeps total == sum of phases bit-exact
        return (
            self.startup
            + self.input_read
            + self.sort_compute
            + self.partition_write
            + self.partition_read
            + self.output_write
            + self.encode
        )

    def as_dict(self) -> dict[str, float]:
        d = {name: getattr(self, name) for name in _PHASES}
        d["total"] = self.total
        return d


_COST_COMPONENTS = ("fn_compute", "storage_requests", "vm_time", "vm_volume", "invocations")


@dataclass(frozen=True)
class CostBreakdown:
    fn_compute: float = 0.0
    storage_requests: float = 0.0
    vm_time: float = 0.0
    vm_volume: float = 0.0
    invocations: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.fn_compute
            + self.storage_requests
            + self.vm_time
            + self.vm_volume
            + self.invocations
        )

    def as_dict(self) -> dict[str, float]:
        d = {name: getattr(self, name) for name in _COST_COMPONENTS}
        d["total"] = self.total
        return d


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise DomainError(f"{name} must be > 0, got {value}")


def effective_bandwidth(w: int, store: StoreProfile) -> float:
    """Per-worker store bandwidth when w workers stream concurrently."""
    return min(store.conn_bandwidth, store.aggregate_bandwidth / w)


def shuffle_latency_model(
    S: float, w: int, n_in: int, store: StoreProfile, compute: ComputeProfile
) -> LatencyBreakdown:
    """Sort stage via object-storage all-to-all exchange with w workers."""
    _require_positive(S=S, w=w, n_in=n_in)
    e = effective_bandwidth(w, store)
    share = S / w
    L = store.req_latency
    partition_phase = max(share / e + w * L, w * w / store.ops_rate_cap)
    return LatencyBreakdown(
        startup=compute.fn_startup,
        input_read=share / e + math.ceil(n_in / w) * L,
        sort_compute=share / compute.fn_sort_rate,
        partition_write=partition_phase,
        partition_read=partition_phase,
        output_write=share / e + L,
    )


def vm_exchange_latency_model(
    S: float, n_in: int, w_out: int, store: StoreProfile, compute: ComputeProfile
) -> LatencyBreakdown:
    """Sort stage gathered into a single VM, scattered to w_out objects."""
    _require_positive(S=S, n_in=n_in, w_out=w_out)
    pipe = min(compute.vm_bandwidth, store.aggregate_bandwidth)
    L = store.req_latency
    return LatencyBreakdown(
        startup=compute.vm_provision,
        input_read=S / pipe + n_in * L,
        sort_compute=S / compute.vm_sort_rate,
        output_write=S / pipe + w_out * L,
    )


def encode_latency_model(
    S: float,
    w: int,
    ratio: float,
    store: StoreProfile,
    compute: ComputeProfile,
) -> LatencyBreakdown:
    """Embarrassingly parallel encode stage shrinking data by `ratio`."""
    _require_positive(S=S, w=w)
    if not ratio >= 1:
        raise DomainError(f"compression ratio must be >= 1, got {ratio}")
    e = effective_bandwidth(w, store)
    share = S / w
    L = store.req_latency
    return LatencyBreakdown(
        startup=compute.fn_startup,
        input_read=share / e + L,
        encode=share / compute.fn_encode_rate,
        output_write=(S / ratio) / w / e + L,
    )


def optimal_worker_count(
    S: float,
    n_in: int,
    store: StoreProfile,
    compute: ComputeProfile,
    w_max: int,
    ratio: float = DEFAULT_COMPRESSION_RATIO,
) -> int:
    """Worker count minimizing modeled sort+encode latency.

    Scans w in [1, w_max]; ties go to the smallest w, which is the
    cheaper configuration at equal latency.
    """
    if w_max < 1:
        raise DomainError(f"w_max must be >= 1, got {w_max}")
    _require_positive(S=S, n_in=n_in)
    best_w = 1
    best_total = math.inf
    for w in range(1, w_max + 1):
        total = (
            shuffle_latency_model(S, w, n_in, store, compute).total
            + encode_latency_model(S, w, ratio, store, compute).total
        )
        if total < best_total:
            best_total = total
            best_w = w
    return best_w


def compute_cost(
    busy_times: list[float],
    workers: list[int],
    metrics: StoreMetrics,
    vm_seconds: float,
    vol_gb: float,
    prices: PriceSheet,
    compute: ComputeProfile,
) -> CostBreakdown:
    """Dollar cost of a run.

    `busy_times` and `workers` are aligned per function stage; billable
    time excludes the startup wave, which providers do not charge for.
    """
    if len(busy_times) != len(workers):
        raise DomainError("busy_times and workers must align per stage")
    if vm_seconds < 0 or vol_gb < 0:
        raise DomainError("vm_seconds and vol_gb must be >= 0")
    fn_compute = 0.0
    calls = 0
    for busy, w in zip(busy_times, workers):
        if busy < 0 or w < 0:
            raise DomainError("per-stage busy time and workers must be >= 0")
        fn_compute += w * busy * compute.fn_mem_gb * prices.price_gb_s
        calls += w
    return CostBreakdown(
        fn_compute=fn_compute,
        storage_requests=metrics.put_count * prices.price_put
        + metrics.get_count * prices.price_get,
        vm_time=vm_seconds * prices.price_vm_s,
        vm_volume=vol_gb * vm_seconds * prices.price_vol_gb_s,
        invocations=calls * prices.price_invocation,
    )


# --- profile files ---------------------------------------------------------

@dataclass(frozen=True)
class Profiles:
    """The three parameter sheets a run needs, as one unit."""

    store: StoreProfile
    compute: ComputeProfile
    prices: PriceSheet


_PROFILE_SECTIONS = {
    "store": StoreProfile,
    "compute": ComputeProfile,
    "prices": PriceSheet,
}


def _parse_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise SchemaError(name, f"expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SchemaError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    required = {
        f.name
        for f in fields(cls)
        if f.default is MISSING and f.default_factory is MISSING
    }
    missing = required - set(data)
    if missing:
        raise SchemaError(f"{name}.{sorted(missing)[0]}", "missing field")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise SchemaError(name, str(exc)) from exc


def parse_profiles(data: dict) -> Profiles:
    """Build Profiles from a {store, compute, prices} mapping."""
    unknown = set(data) - set(_PROFILE_SECTIONS)
    if unknown:
        raise SchemaError(sorted(unknown)[0], "unknown profile section")
    sections = {}
    for name, cls in _PROFILE_SECTIONS.items():
        if name not in data:
            raise SchemaError(name, "missing profile section")
        sections[name] = _parse_section(name, cls, data[name])
    return Profiles(**sections)


def profiles_to_dict(profiles: Profiles) -> dict:
    out: dict[str, dict] = {}
    for name, cls in _PROFILE_SECTIONS.items():
        section = getattr(profiles, name)
        out[name] = {f.name: getattr(section, f.name) for f in fields(cls)}
    return out


def load_profiles(path: str) -> Profiles:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(path, f"profile file is not valid JSON: {exc}") from exc
    return parse_profiles(data)


def builtin_profiles(name: str = CALIBRATED_PROFILE) -> Profiles:
    """Load a profile sheet shipped with the package."""
    text = resources.files("faaslab").joinpath(f"profiles/{name}.json").read_text("utf-8")
    return parse_profiles(json.loads(text))
