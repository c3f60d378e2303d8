"""Two-stage multitask curriculum scheduling.

A stage plan names the tasks it trains on, the mixing rate per task, a sample
budget, and a seed. Stage 1 mixes the single-label tasks with extra weight on
sentiment and facial captioning; stage 2 drops facial captioning, keeps a
small sentiment share, and gives the remaining tasks equal weight. The
scheduler turns plans plus a record pool into deterministic training streams.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import ConfigError, ShortageError, ValidationError
from .records import TASK_IDENTIFIERS, TaskKind, TaskRecord

# Budget sentinel: consume every record the earlier stages left behind,
# quota-capped by this stage's rates.
REMAINING = "remaining"

Budget = Union[int, str]

# Which tasks each stage may train on. Facial captioning is an alignment-only
# task (first stage); reasoning and cause-pair extraction need the aligned
# backbone and appear only in the second.
STAGE_TASKS: dict[int, frozenset[TaskKind]] = {
    1: frozenset({TaskKind.MSA, TaskKind.ER, TaskKind.FER}),
    2: frozenset({TaskKind.MSA, TaskKind.ER, TaskKind.ERI, TaskKind.ECPE}),
}

DEFAULT_STAGE1_RATES = {TaskKind.MSA: 0.40, TaskKind.FER: 0.40, TaskKind.ER: 0.20}
DEFAULT_STAGE1_BUDGET = 15_000
DEFAULT_STAGE2_RATES = {
    TaskKind.MSA: 0.10,
    TaskKind.ER: 0.30,
    TaskKind.ERI: 0.30,
    TaskKind.ECPE: 0.30,
}
DEFAULT_STAGE2_BUDGET = REMAINING

_RATE_SUM_TOL = 1e-9


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    task_rates: dict[TaskKind, float]
    sample_budget: Budget
    seed: int


@dataclass(frozen=True)
class TrainingItem:
    record: TaskRecord
    stage_id: int
    position: int

    def to_dict(self) -> dict:
        return {
            "position": self.position,
            "stage_id": self.stage_id,
            "record": self.record.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingItem":
        return cls(
            record=TaskRecord.from_dict(obj["record"]),
            stage_id=int(obj["stage_id"]),
            position=int(obj["position"]),
        )


def verify_plan(plan: StagePlan) -> list[str]:
    """Return every invariant the plan violates; an empty list means ok."""
    violations = []
    if plan.stage_id not in STAGE_TASKS:
        violations.append(f"unknown stage_id {plan.stage_id}")
        return violations
    if not plan.task_rates:
        violations.append("plan names no tasks")
    allowed = STAGE_TASKS[plan.stage_id]
    for task, rate in plan.task_rates.items():
        if task not in allowed:
            violations.append(
                f"task {task.value} is not trainable in stage {plan.stage_id}"
            )
        if not (0.0 <= rate <= 1.0) or not math.isfinite(rate):
            violations.append(f"rate for {task.value} is {rate}, outside [0, 1]")
    total = sum(plan.task_rates.values())
    if plan.task_rates and abs(total - 1.0) > _RATE_SUM_TOL:
        violations.append(f"rates sum to {total}, not 1")
    if plan.sample_budget != REMAINING:
        if not isinstance(plan.sample_budget, int) or plan.sample_budget <= 0:
            violations.append(
                f"sample_budget must be a positive integer or {REMAINING!r}, "
                f"got {plan.sample_budget!r}"
            )
    return violations


def _coerce_task(key) -> TaskKind:
    if isinstance(key, TaskKind):
        return key
    try:
        return TaskKind(str(key))
    except ValueError:
        raise ConfigError(f"unknown task {key!r}") from None


def _resolve_rates(defaults: Mapping[TaskKind, float],
                   overrides: Optional[Mapping]) -> dict[TaskKind, float]:
    """Merge partial rate overrides onto the defaults, drop zero-rate tasks,
    and renormalize the rest to sum to 1. Setting one task's rate to 0 is how
    a plan is shrunk (the ablation configs do this); the leftover mass is
    spread proportionally over the surviving tasks."""
    rates = dict(defaults)
    for key, value in (overrides or {}).items():
        task = _coerce_task(key)
        rate = float(value)
        if rate < 0 or not math.isfinite(rate):
            raise ConfigError(f"rate override for {task.value} is {value!r}")
        rates[task] = rate
    rates = {task: rate for task, rate in rates.items() if rate > 0.0}
    total = sum(rates.values())
    if total <= 0:
        raise ConfigError("every task rate is zero")
    return {task: rate / total for task, rate in rates.items()}


def default_plans(config: Optional[Mapping] = None) -> list[StagePlan]:
    """Materialize both stage plans, applying config overrides.

    The config mapping may carry `seed` plus per-stage blocks, e.g.
    ``{"stage1": {"rates": {"MSA": 0.5}, "budget": 10000}, "seed": 7}``.
    Rate overrides are partial; unnamed tasks keep their default share.
    """
    config = config or {}
    seed = int(config.get("seed", 0))
    plans = []
    for stage_id, default_rates, default_budget in (
        (1, DEFAULT_STAGE1_RATES, DEFAULT_STAGE1_BUDGET),
        (2, DEFAULT_STAGE2_RATES, DEFAULT_STAGE2_BUDGET),
    ):
        block = config.get(f"stage{stage_id}") or {}
        rates = _resolve_rates(default_rates, block.get("rates"))
        budget = block.get("budget", default_budget)
        if budget != REMAINING:
            budget = int(budget)
        plan = StagePlan(stage_id, rates, budget, seed)
        violations = verify_plan(plan)
        if violations:
            raise ConfigError(
                f"stage {stage_id} overrides produce an invalid plan: "
                + "; ".join(violations)
            )
        plans.append(plan)
    return plans


def largest_remainder_quotas(budget: int, rates: Mapping[TaskKind, float]
                             ) -> dict[TaskKind, int]:
    """Integer quotas that sum exactly to the budget: floor each share, then
    hand the leftover units to the largest fractional parts (ties broken by
    task name so the result never depends on dict order)."""
    if budget < 0:
        raise ValidationError(f"budget {budget} is negative")
    floors = {}
    fractions = {}
    for task, rate in rates.items():
        raw = rate * budget
        # Snap float fuzz like 2.9999999999999996 back onto the integer.
        nearest = round(raw)
        if abs(raw - nearest) < 1e-6:
            raw = float(nearest)
        floors[task] = int(math.floor(raw))
        fractions[task] = raw - floors[task]
    leftover = budget - sum(floors.values())
    order = sorted(rates, key=lambda task: (-fractions[task], task.value))
    for task in order[:leftover]:
        floors[task] += 1
    return floors


def _pools_by_task(records: Iterable[TaskRecord]) -> dict[TaskKind, list[TaskRecord]]:
    pools: dict[TaskKind, list[TaskRecord]] = {}
    seen: set[str] = set()
    for record in records:
        if record.record_id in seen:
            raise ValidationError(f"duplicate record_id {record.record_id!r} in pool")
        seen.add(record.record_id)
        pools.setdefault(record.task, []).append(record)
    # Sorting by record_id makes selection independent of input order.
    for pool in pools.values():
        pool.sort(key=lambda record: record.record_id)
    return pools


def assign_stream(records: Sequence[TaskRecord], plan: StagePlan,
                  exclude_ids: Optional[set[str]] = None,
                  mode: str = "quota") -> list[TrainingItem]:
    """Draw one stage's training stream from the record pool.

    Quota mode (the default) hits the plan's rates exactly: per-task counts
    are the largest-remainder quotas, selection within a task and the global
    interleave are seeded shuffles. iid mode instead draws every slot
    independently (task by rate, record uniform, with replacement), so counts
    only approximate the rates.

    With a numeric budget the stream holds exactly that many items; a task
    whose pool cannot cover its quota raises a shortage error. With the
    "remaining" budget the stream takes everything the earlier stages left,
    capped per task by the rate quotas.
    """
    violations = verify_plan(plan)
    if violations:
        raise ConfigError("invalid plan: " + "; ".join(violations))
    if mode not in ("quota", "iid"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    exclude_ids = exclude_ids or set()

    pools = _pools_by_task(records)
    available = {
        task: [r for r in pools.get(task, []) if r.record_id not in exclude_ids]
        for task in plan.task_rates
    }
    empty = sorted(task.value for task, pool in available.items() if not pool)
    if empty:
        raise ShortageError(
            f"stage {plan.stage_id} plans tasks with no available records: "
            + ", ".join(empty)
        )

    if plan.sample_budget == REMAINING:
        budget = sum(len(pool) for pool in available.values())
        capped = True
    else:
        budget = plan.sample_budget
        capped = False

    if mode == "iid":
        chosen = _draw_iid(available, plan, budget)
    else:
        quotas = largest_remainder_quotas(budget, plan.task_rates)
        if not capped:
            short = {
                task: (quotas[task], len(available[task]))
                for task in quotas
                if quotas[task] > len(available[task])
            }
            if short:
                detail = ", ".join(
                    f"{task.value} needs {need} but has {have}"
                    for task, (need, have) in sorted(short.items(), key=lambda kv: kv[0].value)
                )
                raise ShortageError(f"stage {plan.stage_id} pool too small: {detail}")
        chosen = []
        for task in sorted(plan.task_rates, key=lambda task: task.value):
            take = min(quotas[task], len(available[task]))
            rng = random.Random(f"{plan.seed}:{plan.stage_id}:{task.value}")
            chosen.extend(rng.sample(available[task], take))

    interleave = random.Random(f"{plan.seed}:{plan.stage_id}:interleave")
    interleave.shuffle(chosen)
    return [
        TrainingItem(record=record, stage_id=plan.stage_id, position=position)
        for position, record in enumerate(chosen)
    ]


def _draw_iid(available: Mapping[TaskKind, list[TaskRecord]], plan: StagePlan,
              budget: int) -> list[TaskRecord]:
    tasks = sorted(plan.task_rates, key=lambda task: task.value)
    weights = [plan.task_rates[task] for task in tasks]
    rng = random.Random(f"{plan.seed}:{plan.stage_id}:iid")
    chosen = []
    for _ in range(budget):
        task = rng.choices(tasks, weights=weights, k=1)[0]
        chosen.append(rng.choice(available[task]))
    return chosen


def schedule_stages(records: Sequence[TaskRecord], plans: Sequence[StagePlan],
                    mode: str = "quota") -> list[list[TrainingItem]]:
    """Run every plan in order against one shared pool. Records consumed by an
    earlier stage never reappear in a later one."""
    consumed: set[str] = set()
    streams = []
    for plan in plans:
        stream = assign_stream(records, plan, exclude_ids=consumed, mode=mode)
        streams.append(stream)
        consumed.update(item.record.record_id for item in stream)
    return streams


def attach_identifier(record: TaskRecord,
                      identifier_map: Mapping[TaskKind, str] = TASK_IDENTIFIERS) -> str:
    """Query text with the task's identifier token prepended. Safe to apply to
    a query that already starts with the token: it never double-prepends."""
    try:
        token = identifier_map[record.task]
    except KeyError:
        raise ConfigError(f"no identifier for task {record.task!r}") from None
    if record.query == token or record.query.startswith(token + " "):
        return record.query
    return f"{token} {record.query}"


def stream_counts(stream: Iterable[TrainingItem]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for item in stream:
        counts[item.record.task.value] = counts.get(item.record.task.value, 0) + 1
    return counts


def write_stream(path, stream: Iterable[TrainingItem]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for item in stream:
            handle.write(json.dumps(item.to_dict(), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def read_stream(path) -> list[TrainingItem]:
    items = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                items.append(TrainingItem.from_dict(json.loads(line)))
    return items
