"""Stage-wise training runner: warm-up cosine schedule, response-only loss,
frozen vision backbone, run manifests, and per-stage checkpoints."""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .errors import (
    ConfigError,
    EmptyInputError,
    TrainingDivergedError,
    ValidationError,
)
from .model import (
    DEFAULT_ADAPTER_TARGETS,
    DecodeConfig,
    ModelConfig,
    ProjectedTokens,
    ToyModel,
    VisualTokens,
    apply_adapters,
    encode_media,
    example_loss,
    forward,
    prepare_example,
    project,
    prompt_fused,
    save_checkpoint,
)
from .records import TaskRecord
from .scheduler import StagePlan, TrainingItem, attach_identifier, schedule_stages, stream_counts, write_stream


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 2
    batch_size: int = 1
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    max_steps: Optional[int] = None
    lora_r: int = 8
    lora_alpha: float = 32.0
    lora_targets: tuple = DEFAULT_ADAPTER_TARGETS

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate {self.learning_rate!r} is invalid")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not (0.0 <= self.warmup_ratio <= 1.0):
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside [0, 1]")


def warmup_cosine_factor(step: int, total_steps: int, warmup_steps: int) -> float:
    """Multiplier on the peak learning rate for 1-based step numbers: linear
    ramp over the warm-up, then a half-cosine down to zero."""
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if warmup_steps > 0 and step <= warmup_steps:
        return step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    stage_id: int
    loss_trace: list[float]
    steps: int

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


class RunLog:
    """Line-delimited run manifest. The only place timestamps are written, so
    every other artifact stays byte-reproducible."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, event: str, **payload) -> None:
        if self.path is None:
            return
        row = {"event": event, "time": _dt.datetime.now(_dt.timezone.utc).isoformat()}
        row.update(payload)
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


class MediaCache:
    """Visual tokens are constant for frozen encoder weights, so encode each
    media file once per run."""

    def __init__(self, model: ToyModel, media_base: Optional[Path]):
        self.model = model
        self.media_base = Path(media_base) if media_base is not None else None
        self._cache: dict[str, VisualTokens] = {}

    def resolve(self, ref: str) -> Path:
        path = Path(ref)
        if not path.is_absolute() and self.media_base is not None:
            path = self.media_base / path
        return path

    def visual(self, record: TaskRecord) -> Optional[ProjectedTokens]:
        if not record.media:
            return None
        matrices = []
        for ref in record.media:
            if ref not in self._cache:
                self._cache[ref] = encode_media(self.resolve(ref), self.model.vision)
            matrices.append(project(self._cache[ref], self.model).matrix)
        return ProjectedTokens(torch.cat(matrices, dim=0))


def train_stage(stream: Sequence[TrainingItem], model: ToyModel,
                config: TrainConfig, media_base: Optional[Path] = None,
                log: Optional[RunLog] = None) -> TrainResult:
    """Run the configured epochs over one stage's stream. Loss covers response
    tokens only. A non-finite loss aborts with the trace collected so far."""
    if not stream:
        raise EmptyInputError("training stream is empty")
    stage_id = stream[0].stage_id
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("model has no trainable parameters; apply adapters first")

    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    batches = [
        list(stream[i:i + config.batch_size])
        for i in range(0, len(stream), config.batch_size)
    ]
    total_steps = config.epochs * len(batches)
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    warmup_steps = int(round(config.warmup_ratio * total_steps))

    cache = MediaCache(model, media_base)
    trace: list[float] = []
    step = 0
    if log:
        log.write("stage_start", stage_id=stage_id, items=len(stream),
                  batches=len(batches), total_steps=total_steps,
                  task_counts=stream_counts(stream))
    for _epoch in range(config.epochs):
        for batch in batches:
            if step >= total_steps:
                break
            factor = warmup_cosine_factor(step + 1, total_steps, warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * factor
            optimizer.zero_grad()
            losses = []
            for item in batch:
                prompt = attach_identifier(item.record)
                visual = cache.visual(item.record)
                example = prepare_example(model, prompt, item.record.response, visual)
                losses.append(example_loss(model, example))
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage_id} step {step}", trace
                )
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            trace.append(float(loss.detach()))
            step += 1
        if step >= total_steps:
            break
    if log:
        log.write("stage_end", stage_id=stage_id, steps=step,
                  initial_loss=trace[0], final_loss=trace[-1])
        log.write("loss_trace", stage_id=stage_id, values=trace)
    return TrainResult(stage_id=stage_id, loss_trace=trace, steps=step)


@dataclass
class TrainOutcome:
    model: ToyModel
    results: list[TrainResult]
    checkpoint_paths: dict[int, Path] = field(default_factory=dict)
    stream_paths: dict[int, Path] = field(default_factory=dict)


def _vision_fingerprint(model: ToyModel) -> torch.Tensor:
    return model.vision.weight.detach().clone()


def run_training(records: Sequence[TaskRecord], plans: Sequence[StagePlan],
                 model_config: ModelConfig, train_config: TrainConfig,
                 output_dir: Optional[Path] = None,
                 media_base: Optional[Path] = None,
                 sampling_mode: str = "quota",
                 stages: Optional[Sequence[int]] = None,
                 initial_model: Optional[ToyModel] = None,
                 extra_manifest: Optional[dict] = None) -> TrainOutcome:
    """Schedule every stage from the shared pool, then train the requested
    stages in order on one model. Scheduling always covers all plans so a
    resumed run sees exactly the streams the full run would have used."""
    if initial_model is not None:
        model = initial_model
    else:
        model = ToyModel(model_config)
        apply_adapters(model, r=train_config.lora_r, alpha=train_config.lora_alpha,
                       targets=train_config.lora_targets)

    streams = schedule_stages(records, plans, mode=sampling_mode)
    wanted = set(stages) if stages is not None else {plan.stage_id for plan in plans}

    output_dir = Path(output_dir) if output_dir is not None else None
    log = RunLog(output_dir / "run_manifest.jsonl" if output_dir else None)
    log.write(
        "run_config",
        model=model_config.to_dict(),
        train={
            "learning_rate": train_config.learning_rate,
            "epochs": train_config.epochs,
            "batch_size": train_config.batch_size,
            "warmup_ratio": train_config.warmup_ratio,
            "weight_decay": train_config.weight_decay,
            "grad_clip": train_config.grad_clip,
            "max_steps": train_config.max_steps,
            "lora": {
                "r": train_config.lora_r,
                "alpha": train_config.lora_alpha,
                "targets": list(train_config.lora_targets),
            },
        },
        plans=[
            {
                "stage_id": plan.stage_id,
                "task_rates": {task.value: rate for task, rate in plan.task_rates.items()},
                "sample_budget": plan.sample_budget,
                "seed": plan.seed,
            }
            for plan in plans
        ],
        sampling_mode=sampling_mode,
        stages_trained=sorted(wanted),
        **(extra_manifest or {}),
    )

    outcome = TrainOutcome(model=model, results=[])
    before = _vision_fingerprint(model)
    adapter_info = {
        "r": train_config.lora_r,
        "alpha": train_config.lora_alpha,
        "targets": list(train_config.lora_targets),
    }
    for plan, stream in zip(plans, streams):
        if output_dir is not None:
            stream_path = output_dir / f"stage{plan.stage_id}_stream.jsonl"
            write_stream(stream_path, stream)
            outcome.stream_paths[plan.stage_id] = stream_path
        if plan.stage_id not in wanted:
            continue
        result = train_stage(stream, model, train_config,
                             media_base=media_base, log=log)
        outcome.results.append(result)
        after = _vision_fingerprint(model)
        if model.config.encoder.frozen and not torch.equal(before, after):
            raise ValidationError(
                f"vision backbone changed during stage {plan.stage_id} "
                "despite the frozen flag"
            )
        if output_dir is not None:
            ckpt = output_dir / f"stage{plan.stage_id}.pt"
            save_checkpoint(ckpt, model, adapter_info)
            outcome.checkpoint_paths[plan.stage_id] = ckpt
            log.write("checkpoint_saved", stage_id=plan.stage_id, path=str(ckpt))
    return outcome


def predict_records(model: ToyModel, records: Sequence[TaskRecord],
                    media_base: Optional[Path] = None,
                    decode: DecodeConfig = DecodeConfig(),
                    score_lookup: Optional[dict] = None) -> list[dict]:
    """Greedy-decode one prediction row per record. Rows carry the gold
    response; sentiment rows also carry the raw gold score when the lookup
    provides one (keyed by source sample id)."""
    cache = MediaCache(model, media_base)
    rows = []
    for record in records:
        prompt = attach_identifier(record)
        with torch.no_grad():
            visual = cache.visual(record)
            fused = prompt_fused(model, prompt, visual)
            text = forward(fused, model, decode)
        row = {
            "record_id": record.record_id,
            "task": record.task.value,
            "prediction": text,
            "gold": record.response,
        }
        if score_lookup and record.source_sample_id in score_lookup:
            score = score_lookup[record.source_sample_id]
            if score is not None:
                row["gold_score"] = float(score)
        rows.append(row)
    return rows
