"""Workflow execution in emulated and modeled modes.

Emulated mode moves real bytes through the shaped store. Each stage runs
as a sequence of phases with a full barrier between them (read, compute,
write, ...), mirroring the breakdown the analytic model produces. With a
wall clock, phase tasks run on a bounded thread pool and durations are
measured; with a virtual clock, tasks run sequentially, every store
operation advances simulated time, and compute is charged at the
profile's processing rates, so the accounting assumes w-wide concurrency
regardless of host cores and timings are bit-for-bit reproducible.

Modeled mode skips data movement entirely and evaluates the closed-form
phase formulas, synthesizing request counts from the exchange's exact
count laws.

Cold start (or VM provisioning) is injected as a delay once per stage
wave in both modes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

from faaslab import shuffle
from faaslab.blobstore import Blobstore, StoreMetrics
from faaslab.errors import (
    ExecutionError,
    MemoryBudgetError,
    TaskError,
    ValidationError,
)
from faaslab.methpipe.codec import decode_block, encode_block, is_encoded_block
from faaslab.methpipe.records import records_to_tsv, tsv_to_records
from faaslab.perfmodel import (
    DEFAULT_COMPRESSION_RATIO,
    CostBreakdown,
    LatencyBreakdown,
    compute_cost,
    encode_latency_model,
    optimal_worker_count,
    shuffle_latency_model,
    vm_exchange_latency_model,
)
from faaslab.workflow import (
    DataRef,
    ExchangeStrategy,
    StageKind,
    StageSpec,
    WorkflowSpec,
    validate_workflow,
)

GB = 1e9

ENCODED_TEMPLATE = "encoded/{stage}/{index}"


class Mode(str, Enum):
    EMULATED = "emulate"
    MODELED = "model"


ProgressFn = Callable[[dict], None]


@dataclass
class ExecHooks:
    """Test and observability hooks; all optional.

    `on_task_start` runs at the top of every phase task and may raise to
    simulate worker failure; `on_buffer` observes the byte size of each
    payload a task materializes.
    """

    on_task_start: Callable[[str, str, int], None] | None = None
    on_buffer: Callable[[str, int, int], None] | None = None


@dataclass
class EngineOptions:
    vm_mem_gb: float = 32.0
    vm_volume_gb: float = 100.0
    external_sort: bool = False
    host_parallelism: int | None = None
    progress: ProgressFn | None = None
    hooks: ExecHooks | None = None


@dataclass(frozen=True)
class TaskSpec:
    """One worker's assignment within a stage.

    The memory budget is what the executing unit may materialize at
    once; function tasks get the configured function memory, the VM task
    its machine memory.
    """

    stage_id: str
    worker: int
    input_keys: tuple[str, ...]
    output_prefix: str
    memory_budget: int


@dataclass(frozen=True)
class StageReport:
    stage_id: str
    kind: str
    workers: int
    latency: LatencyBreakdown
    requests: StoreMetrics
    busy_seconds: float
    vm_seconds: float


@dataclass(frozen=True)
class RunReport:
    mode: str
    workflow: str
    exchange: str
    seed: int
    parallelism: int
    stages: tuple[StageReport, ...]
    cost: CostBreakdown
    store_metrics: StoreMetrics

    @property
    def end_to_end_s(self) -> float:
        total = 0.0
        for stage in self.stages:
            total += stage.latency.total
        return total


class WorkerPool:
    """Bounded pool with barrier semantics per phase.

    Under a virtual clock, tasks run sequentially in index order, each
    starting from the phase's start cursor; the phase ends at the latest
    task finish, which is what w-wide concurrency would observe. Under a
    wall clock they run concurrently on a bounded thread pool. Either
    way the first failure is raised as a TaskError with the worker index.
    """

    def __init__(self, parallelism: int):
        self.parallelism = max(1, parallelism)

    def run_phase(self, tasks: list[Callable[[], None]], clock) -> None:
        if clock.virtual:
            t0 = clock.now()
            finishes = [t0]
            for index, task in enumerate(tasks):
                clock.seek(t0)
                try:
                    task()
                except TaskError:
                    raise
                except BaseException as exc:
                    raise TaskError(index, exc) from exc
                finishes.append(clock.now())
            clock.seek(max(finishes))
            return
        if len(tasks) <= 1 or self.parallelism == 1:
            for index, task in enumerate(tasks):
                try:
                    task()
                except TaskError:
                    raise
                except BaseException as exc:
                    raise TaskError(index, exc) from exc
            return
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            futures = [pool.submit(task) for task in tasks]
            failure: TaskError | None = None
            for index, future in enumerate(futures):
                try:
                    future.result()
                except TaskError as exc:
                    failure = failure or exc
                except BaseException as exc:
                    failure = failure or TaskError(index, exc)
            if failure is not None:
                raise failure


class _StageClock:
    """Phase timing over either clock kind."""

    def __init__(self, store: Blobstore):
        self.store = store
        self.clock = store.clock
        self.virtual = store.clock.virtual

    def now(self) -> float:
        return self.clock.now()

    def phase_start(self) -> float:
        """Open a new shaping window and return the phase start time."""
        self.store.reset_shaping_window()
        return self.clock.now()

    def charge(self, seconds: float) -> None:
        """Advance virtual time; a no-op on a wall clock (real work ran)."""
        if self.virtual and seconds > 0:
            self.clock.sleep(seconds)

    def delay(self, seconds: float) -> None:
        """Injected delay (cold start, provisioning) in both modes."""
        self.clock.sleep(seconds)


def _resolve_input(spec: WorkflowSpec, store: Blobstore) -> DataRef:
    objects = store.peek_prefix(spec.input.prefix)
    if not objects:
        raise ValidationError(
            [f"input prefix {spec.input.prefix!r} resolves to no objects"]
        )
    return replace(spec.input, objects=tuple(objects))


def _ref_size(ref: DataRef) -> int:
    return sum(size for _, size in ref.objects or ())


def _round_robin(items: tuple, w: int) -> list[list]:
    return [list(items[i::w]) for i in range(w)]


def _stage_ratio(stage: StageSpec) -> float:
    return float(stage.options.get("ratio", DEFAULT_COMPRESSION_RATIO))


class _Run:
    def __init__(
        self,
        spec: WorkflowSpec,
        mode: Mode,
        seed: int,
        store: Blobstore | None,
        options: EngineOptions,
    ):
        self.spec = spec
        self.mode = mode
        self.seed = seed
        self.store = store
        self.options = options
        self.profiles = spec.profiles
        self.busy_times: list[float] = []
        self.busy_workers: list[int] = []
        self.vm_seconds = 0.0
        self.vm_used = False
        self.metrics_so_far = StoreMetrics()
        self.stage_reports: list[StageReport] = []

    # -- shared plumbing ---------------------------------------------------

    def _emit(self, stage: str, phase: str, fraction: float) -> None:
        if self.options.progress is None:
            return
        self.options.progress(
            {
                "stage": stage,
                "phase": phase,
                "fraction": round(fraction, 6),
                "cost_so_far": self._cost_so_far().total,
            }
        )

    def _cost_so_far(self) -> CostBreakdown:
        return compute_cost(
            self.busy_times,
            self.busy_workers,
            self.metrics_so_far,
            self.vm_seconds,
            self.options.vm_volume_gb if self.vm_used else 0.0,
            self.profiles.prices,
            self.profiles.compute,
        )

    def _record_stage(
        self,
        stage: StageSpec,
        workers: int,
        latency: LatencyBreakdown,
        requests: StoreMetrics,
        vm_stage: bool,
    ) -> None:
        busy = latency.total - latency.startup
        if vm_stage:
            self.vm_seconds += latency.total
            self.vm_used = True
        else:
            self.busy_times.append(busy)
            self.busy_workers.append(workers)
        self.metrics_so_far = self.metrics_so_far + requests
        self.stage_reports.append(
            StageReport(
                stage_id=stage.id,
                kind=stage.kind.value,
                workers=workers,
                latency=latency,
                requests=requests,
                busy_seconds=0.0 if vm_stage else busy,
                vm_seconds=latency.total if vm_stage else 0.0,
            )
        )
        self._emit(stage.id, "stage-complete", 1.0)

    def _finish(self) -> RunReport:
        cost = self._cost_so_far()
        report = RunReport(
            mode=self.mode.value,
            workflow=self.spec.name,
            exchange=self.spec.exchange.value,
            seed=self.seed,
            parallelism=self.resolved_w,
            stages=tuple(self.stage_reports),
            cost=cost,
            store_metrics=self.metrics_so_far,
        )
        self._emit("-", "done", 1.0)
        return report

    # -- modeled mode --------------------------------------------------------

    def run_modeled(self) -> RunReport:
        spec = self.spec
        store_profile = self.profiles.store
        compute = self.profiles.compute
        if spec.input.size_bytes is None:
            raise ValidationError(["modeled runs need input.size_bytes"])
        size = float(spec.input.size_bytes)
        n_in = spec.input.object_count or 1
        if spec.parallelism is not None:
            w = spec.parallelism
        elif size > 0:
            ratio = next(
                (
                    _stage_ratio(s)
                    for s in spec.stages
                    if s.kind is StageKind.ENCODE
                ),
                DEFAULT_COMPRESSION_RATIO,
            )
            w = optimal_worker_count(size, n_in, store_profile, compute, spec.w_max, ratio)
        else:
            w = 1
        self.resolved_w = w

        current_size = size
        current_count = n_in
        for stage in spec.stages:
            if stage.kind is StageKind.SORT_EXCHANGE:
                if spec.exchange is ExchangeStrategy.SERVERLESS:
                    latency = (
                        shuffle_latency_model(current_size, w, current_count, store_profile, compute)
                        if current_size > 0
                        else LatencyBreakdown(startup=compute.fn_startup)
                    )
                    sample = current_count * min(
                        shuffle.DEFAULT_SAMPLE_BYTES, current_size / max(current_count, 1)
                    )
                    requests = StoreMetrics(
                        put_count=w * w + w,
                        get_count=2 * current_count + w * w,
                        bytes_in=int(2 * current_size),
                        bytes_out=int(2 * current_size + sample),
                    )
                    self._record_stage(stage, w, latency, requests, vm_stage=False)
                else:
                    latency = (
                        vm_exchange_latency_model(current_size, current_count, w, store_profile, compute)
                        if current_size > 0
                        else LatencyBreakdown(startup=compute.vm_provision)
                    )
                    requests = StoreMetrics(
                        put_count=w,
                        get_count=current_count,
                        bytes_in=int(current_size),
                        bytes_out=int(current_size),
                    )
                    self._record_stage(stage, w, latency, requests, vm_stage=True)
                current_count = w
            else:
                ratio = _stage_ratio(stage)
                latency = (
                    encode_latency_model(current_size, w, ratio, store_profile, compute)
                    if current_size > 0
                    else LatencyBreakdown(startup=compute.fn_startup)
                )
                requests = StoreMetrics(
                    put_count=current_count,
                    get_count=current_count,
                    bytes_in=int(current_size / ratio),
                    bytes_out=int(current_size),
                )
                self._record_stage(stage, w, latency, requests, vm_stage=False)
                current_size = current_size / ratio
        return self._finish()

    # -- emulated mode ---------------------------------------------------------

    def run_emulated(self) -> RunReport:
        spec = self.spec
        store = self.store
        if store is None:
            raise ValidationError(["emulated runs need a store with the input objects"])
        inputs = _resolve_input(spec, store)
        size = _ref_size(inputs)
        n_in = len(inputs.objects)
        compute = self.profiles.compute
        if spec.parallelism is not None:
            w = spec.parallelism
        elif size > 0:
            ratio = next(
                (_stage_ratio(s) for s in spec.stages if s.kind is StageKind.ENCODE),
                DEFAULT_COMPRESSION_RATIO,
            )
            w = optimal_worker_count(size, n_in, store.profile, compute, spec.w_max, ratio)
        else:
            w = 1
        self.resolved_w = w

        host = self.options.host_parallelism or os.cpu_count() or 4
        pool = WorkerPool(min(w, host))

        current = inputs
        for stage in spec.stages:
            try:
                current, latency, requests, vm_stage = self._run_stage_emulated(
                    stage, current, w, pool, store
                )
            except TaskError as exc:
                if isinstance(exc.cause, MemoryBudgetError):
                    raise ExecutionError(stage.id, exc.cause) from exc.cause
                raise ExecutionError(stage.id, exc) from exc
            except MemoryBudgetError as exc:
                raise ExecutionError(stage.id, exc) from exc
            self._record_stage(stage, w, latency, requests, vm_stage)
        return self._finish()

    def _run_stage_emulated(
        self,
        stage: StageSpec,
        inputs: DataRef,
        w: int,
        pool: WorkerPool,
        store: Blobstore,
    ):
        before = store.store_metrics()
        try:
            if stage.kind is StageKind.SORT_EXCHANGE:
                if self.spec.exchange is ExchangeStrategy.SERVERLESS:
                    outputs, latency = _sort_serverless(
                        stage, inputs, w, pool, store, self.profiles, self.options, self._emit
                    )
                    vm_stage = False
                else:
                    outputs, latency = _sort_vm(
                        stage, inputs, w, store, self.profiles, self.options, self._emit
                    )
                    vm_stage = True
            else:
                outputs, latency = _encode_stage(
                    stage, inputs, w, pool, store, self.profiles, self.options, self._emit
                )
                vm_stage = False
        except BaseException:
            _cleanup_stage_outputs(store, stage)
            raise
        requests = store.store_metrics() - before
        return outputs, latency, requests, vm_stage


def _cleanup_stage_outputs(store: Blobstore, stage: StageSpec) -> None:
    """Failed stages leave no outputs behind."""
    prefixes = (
        [f"part/{stage.id}/", f"sorted/{stage.id}/"]
        if stage.kind is StageKind.SORT_EXCHANGE
        else [f"encoded/{stage.id}/"]
    )
    for prefix in prefixes:
        for key, _ in store.peek_prefix(prefix):
            store.delete_object(key)


def _hook_task(options: EngineOptions, stage: str, phase: str, worker: int) -> None:
    hooks = options.hooks
    if hooks and hooks.on_task_start:
        hooks.on_task_start(stage, phase, worker)


def _tracker(options: EngineOptions, stage: str, worker: int):
    hooks = options.hooks
    if hooks and hooks.on_buffer:
        return lambda nbytes: hooks.on_buffer(stage, worker, nbytes)
    return None


def _fn_budget(profiles) -> int:
    return int(profiles.compute.fn_mem_gb * GB)


def _sort_serverless(
    stage: StageSpec,
    inputs: DataRef,
    w: int,
    pool: WorkerPool,
    store: Blobstore,
    profiles,
    options: EngineOptions,
    emit,
):
    sclock = _StageClock(store)
    compute = profiles.compute
    budget = _fn_budget(profiles)
    sample_bytes = int(stage.options.get("sample_bytes", shuffle.DEFAULT_SAMPLE_BYTES))
    objects = inputs.objects
    assigned = _round_robin(objects, w)
    tasks = [
        TaskSpec(stage.id, worker, tuple(k for k, _ in objs), f"part/{stage.id}/", budget)
        for worker, objs in enumerate(assigned)
    ]
    for task, objs in zip(tasks, assigned):
        total = sum(size for _, size in objs)
        if total > task.memory_budget:
            raise MemoryBudgetError(
                f"mapper {task.worker} assigned {total} bytes, budget {task.memory_budget}"
            )

    sessions = [store.session() for _ in range(w)]
    sampler_sessions = [store.session() for _ in objects]

    t0 = sclock.now()
    sclock.delay(compute.fn_startup)
    startup = sclock.now() - t0
    emit(stage.id, "startup", 0.0)

    # map reads and the sampler's range GETs run concurrently in one
    # input_read phase; the plan is built at the phase barrier, before
    # any record is partitioned
    t0 = sclock.phase_start()
    payloads: list[list[bytes]] = [[] for _ in range(w)]
    sample_payloads: list = [None] * len(objects)

    def read_task(worker: int):
        def run():
            _hook_task(options, stage.id, "input_read", worker)
            track = _tracker(options, stage.id, worker)
            for key in tasks[worker].input_keys:
                payload = sessions[worker].get_object(key)
                if track:
                    track(len(payload))
                payloads[worker].append(payload)

        return run

    def sample_task(index: int):
        def run():
            _hook_task(options, stage.id, "sample", w + index)
            key, size = objects[index]
            head = sampler_sessions[index].get_object(key, (0, min(sample_bytes, size)))
            sample_payloads[index] = (head, size)

        return run

    pool.run_phase(
        [read_task(i) for i in range(w)] + [sample_task(i) for i in range(len(objects))],
        sclock.clock,
    )
    samples: list = []
    for head, size in sample_payloads:
        complete = head if len(head) >= size else head[: head.rfind(b"\n") + 1]
        samples.extend(shuffle.SORT_KEY(r) for r in tsv_to_records(complete))
    plan = shuffle.plan_partitions(samples, w) if samples or w == 1 else shuffle.ShufflePlan(w, ())
    input_read = sclock.now() - t0
    emit(stage.id, "input_read", 0.3)

    t0 = sclock.phase_start()
    fragments: list[list] = [None] * w

    def map_compute_task(worker: int):
        def run():
            _hook_task(options, stage.id, "sort_compute", worker)
            nbytes = sum(len(p) for p in payloads[worker])
            records = []
            for payload in payloads[worker]:
                records.extend(tsv_to_records(payload))
            payloads[worker] = []
            fragments[worker] = shuffle.partition_records(records, plan)
            sclock.charge(nbytes / compute.fn_sort_rate)

        return run

    pool.run_phase([map_compute_task(i) for i in range(w)], sclock.clock)
    sort_compute = sclock.now() - t0
    emit(stage.id, "sort_compute", 0.5)

    t0 = sclock.phase_start()

    def map_write_task(worker: int):
        def run():
            _hook_task(options, stage.id, "partition_write", worker)
            track = _tracker(options, stage.id, worker)
            shuffle.write_fragments(
                fragments[worker], plan, stage.id, worker, sessions[worker], track
            )
            fragments[worker] = None

        return run

    pool.run_phase([map_write_task(i) for i in range(w)], sclock.clock)
    partition_write = sclock.now() - t0
    emit(stage.id, "partition_write", 0.65)

    t0 = sclock.phase_start()
    reducer_payloads: list[list[bytes]] = [None] * w

    def reduce_read_task(worker: int):
        def run():
            _hook_task(options, stage.id, "partition_read", worker)
            got = shuffle.read_fragments(worker, w, sessions[worker], stage.id)
            total = sum(len(p) for p in got)
            if total > budget:
                raise MemoryBudgetError(
                    f"reducer {worker} holds {total} bytes, budget {budget}"
                )
            reducer_payloads[worker] = got

        return run

    pool.run_phase([reduce_read_task(i) for i in range(w)], sclock.clock)
    partition_read = sclock.now() - t0
    emit(stage.id, "partition_read", 0.85)

    t0 = sclock.phase_start()
    out_entries: list = [None] * w

    def reduce_write_task(worker: int):
        def run():
            _hook_task(options, stage.id, "output_write", worker)
            track = _tracker(options, stage.id, worker)
            records = shuffle.merge_fragments(reducer_payloads[worker])
            reducer_payloads[worker] = None
            payload = records_to_tsv(records)
            if track:
                track(len(payload))
            key = shuffle.output_key(stage.id, worker)
            sessions[worker].put_object(key, payload)
            out_entries[worker] = (key, len(payload))

        return run

    pool.run_phase([reduce_write_task(i) for i in range(w)], sclock.clock)
    output_write = sclock.now() - t0
    emit(stage.id, "output_write", 1.0)

    latency = LatencyBreakdown(
        startup=startup,
        input_read=input_read,
        sort_compute=sort_compute,
        partition_write=partition_write,
        partition_read=partition_read,
        output_write=output_write,
    )
    outputs = DataRef(inputs.bucket, f"sorted/{stage.id}/", objects=tuple(out_entries))
    return outputs, latency


def _sort_vm(
    stage: StageSpec,
    inputs: DataRef,
    w_out: int,
    store: Blobstore,
    profiles,
    options: EngineOptions,
    emit,
):
    sclock = _StageClock(store)
    compute = profiles.compute
    task = TaskSpec(
        stage.id,
        0,
        tuple(k for k, _ in inputs.objects),
        f"sorted/{stage.id}/",
        int(options.vm_mem_gb * GB),
    )
    budget = task.memory_budget
    size = _ref_size(inputs)
    if size > budget and not options.external_sort:
        raise MemoryBudgetError(
            f"input of {size} bytes exceeds VM memory budget of {budget}"
        )
    session = store.session(conn_bandwidth=compute.vm_bandwidth)
    track = _tracker(options, stage.id, 0)

    t0 = sclock.now()
    sclock.delay(compute.vm_provision)
    startup = sclock.now() - t0
    emit(stage.id, "startup", 0.0)

    if size > budget:
        # external fallback interleaves reads and spills; its whole
        # duration is reported under sort_compute
        t0 = sclock.phase_start()
        _hook_task(options, stage.id, "sort_compute", 0)
        entries = shuffle.vm_sort_exchange(
            inputs.objects, w_out, session, stage.id, budget, external_sort=True, track=track
        )
        sclock.charge(size / compute.vm_sort_rate)
        sort_compute = sclock.now() - t0
        emit(stage.id, "sort_compute", 1.0)
        latency = LatencyBreakdown(startup=startup, sort_compute=sort_compute)
        outputs = DataRef(
            inputs.bucket,
            f"sorted/{stage.id}/",
            objects=tuple((e.key, e.byte_size) for e in entries),
        )
        return outputs, latency

    t0 = sclock.phase_start()
    _hook_task(options, stage.id, "input_read", 0)
    payloads = []
    for key in task.input_keys:
        payload = session.get_object(key)
        if track:
            track(len(payload))
        payloads.append(payload)
    input_read = sclock.now() - t0
    emit(stage.id, "input_read", 0.35)

    t0 = sclock.phase_start()
    _hook_task(options, stage.id, "sort_compute", 0)
    records = []
    for payload in payloads:
        records.extend(tsv_to_records(payload))
    payloads = None
    records.sort()
    sclock.charge(size / compute.vm_sort_rate)
    sort_compute = sclock.now() - t0
    emit(stage.id, "sort_compute", 0.7)

    t0 = sclock.phase_start()
    _hook_task(options, stage.id, "output_write", 0)
    out_entries = []
    for reducer, chunk in enumerate(shuffle.split_sorted(records, w_out)):
        payload = records_to_tsv(chunk)
        if track:
            track(len(payload))
        key = shuffle.output_key(stage.id, reducer)
        session.put_object(key, payload)
        out_entries.append((key, len(payload)))
    output_write = sclock.now() - t0
    emit(stage.id, "output_write", 1.0)

    latency = LatencyBreakdown(
        startup=startup,
        input_read=input_read,
        sort_compute=sort_compute,
        output_write=output_write,
    )
    outputs = DataRef(inputs.bucket, f"sorted/{stage.id}/", objects=tuple(out_entries))
    return outputs, latency


def _encode_stage(
    stage: StageSpec,
    inputs: DataRef,
    w: int,
    pool: WorkerPool,
    store: Blobstore,
    profiles,
    options: EngineOptions,
    emit,
):
    sclock = _StageClock(store)
    compute = profiles.compute
    budget = _fn_budget(profiles)
    objects = inputs.objects
    assigned = _round_robin(tuple(enumerate(objects)), w)
    tasks = [
        TaskSpec(
            stage.id,
            worker,
            tuple(key for _, (key, _) in objs),
            f"encoded/{stage.id}/",
            budget,
        )
        for worker, objs in enumerate(assigned)
    ]
    for task, objs in zip(tasks, assigned):
        total = sum(size for _, (_, size) in objs)
        if total > task.memory_budget:
            raise MemoryBudgetError(
                f"encoder {task.worker} assigned {total} bytes, budget {task.memory_budget}"
            )
    sessions = [store.session() for _ in range(w)]

    t0 = sclock.now()
    sclock.delay(compute.fn_startup)
    startup = sclock.now() - t0
    emit(stage.id, "startup", 0.0)

    t0 = sclock.phase_start()
    payloads: list[list[tuple[int, bytes]]] = [[] for _ in range(w)]

    def read_task(worker: int):
        def run():
            _hook_task(options, stage.id, "input_read", worker)
            track = _tracker(options, stage.id, worker)
            for index, (key, _) in assigned[worker]:
                payload = sessions[worker].get_object(key)
                if track:
                    track(len(payload))
                payloads[worker].append((index, payload))

        return run

    pool.run_phase([read_task(i) for i in range(w)], sclock.clock)
    input_read = sclock.now() - t0
    emit(stage.id, "input_read", 0.35)

    t0 = sclock.phase_start()
    encoded: list[list[tuple[int, bytes]]] = [[] for _ in range(w)]

    def encode_task(worker: int):
        def run():
            _hook_task(options, stage.id, "encode", worker)
            track = _tracker(options, stage.id, worker)
            nbytes = 0
            for index, payload in payloads[worker]:
                nbytes += len(payload)
                records = (
                    decode_block(payload)
                    if is_encoded_block(payload)
                    else tsv_to_records(payload)
                )
                block = encode_block(records)
                if track:
                    track(len(block))
                encoded[worker].append((index, block))
            payloads[worker] = []
            sclock.charge(nbytes / compute.fn_encode_rate)

        return run

    pool.run_phase([encode_task(i) for i in range(w)], sclock.clock)
    encode_s = sclock.now() - t0
    emit(stage.id, "encode", 0.7)

    t0 = sclock.phase_start()
    out_entries: dict[int, tuple[str, int]] = {}

    def write_task(worker: int):
        def run():
            _hook_task(options, stage.id, "output_write", worker)
            for index, block in encoded[worker]:
                key = ENCODED_TEMPLATE.format(stage=stage.id, index=index)
                sessions[worker].put_object(key, block)
                out_entries[index] = (key, len(block))
            encoded[worker] = []

        return run

    pool.run_phase([write_task(i) for i in range(w)], sclock.clock)
    output_write = sclock.now() - t0
    emit(stage.id, "output_write", 1.0)

    latency = LatencyBreakdown(
        startup=startup,
        input_read=input_read,
        encode=encode_s,
        output_write=output_write,
    )
    ordered = tuple(out_entries[i] for i in sorted(out_entries))
    outputs = DataRef(inputs.bucket, f"encoded/{stage.id}/", objects=ordered)
    return outputs, latency


def run_stage(
    stage: StageSpec,
    inputs: DataRef,
    w: int,
    pool: WorkerPool,
    store: Blobstore,
    profiles,
    exchange: ExchangeStrategy = ExchangeStrategy.SERVERLESS,
    options: EngineOptions | None = None,
) -> tuple[DataRef, StageReport]:
    """Run one stage against a store; fails atomically.

    On any task failure the stage's output objects are deleted before the
    error propagates (TaskError with the worker index, or
    MemoryBudgetError when a task would exceed its budget).
    """
    options = options or EngineOptions()
    if inputs.objects is None:
        inputs = replace(
            inputs, objects=tuple(store.peek_prefix(inputs.prefix))
        )
    before = store.store_metrics()
    emit = lambda *a: None  # noqa: E731 - progress handled by run_workflow
    try:
        if stage.kind is StageKind.SORT_EXCHANGE:
            if exchange is ExchangeStrategy.SERVERLESS:
                outputs, latency = _sort_serverless(
                    stage, inputs, w, pool, store, profiles, options, emit
                )
                vm_stage = False
            else:
                outputs, latency = _sort_vm(stage, inputs, w, store, profiles, options, emit)
                vm_stage = True
        else:
            outputs, latency = _encode_stage(
                stage, inputs, w, pool, store, profiles, options, emit
            )
            vm_stage = False
    except BaseException as exc:
        _cleanup_stage_outputs(store, stage)
        if isinstance(exc, TaskError) and isinstance(exc.cause, MemoryBudgetError):
            raise exc.cause from exc
        raise
    requests = store.store_metrics() - before
    busy = latency.total - latency.startup
    report = StageReport(
        stage_id=stage.id,
        kind=stage.kind.value,
        workers=w,
        latency=latency,
        requests=requests,
        busy_seconds=0.0 if vm_stage else busy,
        vm_seconds=latency.total if vm_stage else 0.0,
    )
    return outputs, report


def run_workflow(
    spec: WorkflowSpec,
    mode: Mode | str = Mode.EMULATED,
    seed: int = 0,
    store: Blobstore | None = None,
    options: EngineOptions | None = None,
) -> RunReport:
    """Execute a workflow end to end and return its report.

    Emulated mode needs a store already holding the input objects; the
    store's clock decides wall versus virtual timing. Modeled mode needs
    the input's declared size. Auto parallelism is resolved by the
    optimizer before execution and recorded in the report. Deterministic
    given (spec, mode, seed); under a virtual clock, timings are too.
    """
    mode = Mode(mode)
    violations = validate_workflow(spec)
    if violations:
        raise ValidationError(violations)
    run = _Run(spec, mode, seed, store, options or EngineOptions())
    if mode is Mode.MODELED:
        return run.run_modeled()
    return run.run_emulated()
