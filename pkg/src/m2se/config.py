"""One config file drives every command. Loading resolves paths relative to
the config file, applies environment overrides, and validates every block
against the module that will consume it before any work starts."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from . import au
from .dataset import BuildContext
from .errors import ConfigError
from .model import DecodeConfig, EncoderConfig, ModelConfig
from .reason import offline_generators
from .records import TASK_ORDER, TaskKind
from .scheduler import (
    DEFAULT_STAGE1_BUDGET,
    DEFAULT_STAGE1_RATES,
    DEFAULT_STAGE2_RATES,
    REMAINING,
    StagePlan,
    default_plans,
)
from .train import TrainConfig

OUTPUT_ROOT_ENV = "M2SE_OUTPUT_ROOT"

_TOP_KEYS = {
    "corpus_manifest", "output_root", "seed", "tasks", "dataset",
    "schedule", "model", "train", "decode", "evaluate",
}


@dataclass
class RunConfig:
    corpus_manifest: Path
    output_root: Path
    seed: int
    tasks: tuple[TaskKind, ...]
    dataset_options: dict
    schedule_options: dict
    model_config: ModelConfig
    train_config: TrainConfig
    decode_config: DecodeConfig
    scheme: Optional[str] = None
    source_path: Optional[Path] = None
    # Raw train block as written, kept for provenance reporting.
    _raw_train: dict = field(default_factory=dict)

    @property
    def media_base(self) -> Path:
        return self.corpus_manifest.parent

    @property
    def sampling_mode(self) -> str:
        return self.schedule_options.get("mode", "quota")

    def plans(self) -> list[StagePlan]:
        overrides = {"seed": self.seed}
        for key in ("stage1", "stage2"):
            if key in self.schedule_options:
                overrides[key] = self.schedule_options[key]
        return default_plans(overrides)

    def build_context(self) -> BuildContext:
        opts = self.dataset_options
        table_path = opts.get("emotion_au_table")
        lexicon_path = opts.get("au_lexicon")
        table = au.load_emotion_au_table(table_path)
        lexicon = au.load_au_lexicon(lexicon_path)
        generator = opts.get("reason_generator", "template")
        if generator == "template":
            describer, reasoner = offline_generators()
        elif generator in (None, "none"):
            describer = reasoner = None
        else:
            raise ConfigError(
                f"unknown reason_generator {generator!r}; use 'template' or 'none'"
            )
        kwargs = {}
        if opts.get("neutral_caption"):
            kwargs["neutral_caption"] = str(opts["neutral_caption"])
        return BuildContext(
            emotion_au_table=table,
            au_lexicon=lexicon,
            presence_threshold=float(opts.get("presence_threshold", 0.0)),
            negative_threshold=float(opts.get("negative_threshold", 0.0)),
            positive_threshold=float(opts.get("positive_threshold", 0.0)),
            describer=describer,
            reasoner=reasoner,
            **kwargs,
        )

    def provenance_notes(self) -> dict[str, str]:
        """Source of each training-relevant setting: the published M2SE value,
        this toolkit's fixed default, or an explicit config override."""
        notes = {}
        stage1 = self.schedule_options.get("stage1") or {}
        stage2 = self.schedule_options.get("stage2") or {}
        notes["stage1.budget"] = (
            "config override" if "budget" in stage1
            else f"published M2SE setting ({DEFAULT_STAGE1_BUDGET})"
        )
        notes["stage1.rates"] = (
            "config override" if "rates" in stage1
            else "toolkit default (numeric fix of the published rate ordering)"
        )
        notes["stage2.budget"] = (
            "config override" if "budget" in stage2
            else f"toolkit default ({REMAINING!r}: records stage 1 left unused)"
        )
        notes["stage2.rates"] = (
            "config override" if "rates" in stage2
            else "toolkit default (numeric fix of the published rate ordering)"
        )
        train = self._raw_train
        for key, published in (("learning_rate", 1e-5), ("epochs", 2)):
            given = train.get(key)
            notes[f"train.{key}"] = (
                "config override" if given is not None and given != published
                else f"published M2SE setting ({published})"
            )
        lora = train.get("lora") or {}
        notes["train.lora"] = (
            "config override"
            if (lora.get("r", 8), lora.get("alpha", 32)) != (8, 32)
            else "published M2SE setting (r=8, alpha=32)"
        )
        return notes


def _parse_tasks(raw) -> tuple[TaskKind, ...]:
    if raw is None:
        return TASK_ORDER
    tasks = []
    for item in raw:
        try:
            tasks.append(TaskKind(str(item)))
        except ValueError:
            raise ConfigError(f"unknown task {item!r} in tasks list") from None
    if not tasks:
        raise ConfigError("tasks list is empty")
    return tuple(tasks)


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base / path).resolve()


def load_run_config(path, env: Optional[dict] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """Parse and fully validate a run config. Every sub-config constructor
    runs here, so invalid settings fail before any output is written.
    A non-None `seed` (e.g. from a CLI flag) replaces the file's seed."""
    env = env if env is not None else dict(os.environ)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as handle:
        raw = yaml.safe_load(handle) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    if seed is not None:
        raw["seed"] = int(seed)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    if "corpus_manifest" not in raw:
        raise ConfigError(f"{path}: corpus_manifest is required")

    base = path.parent
    manifest = _resolve(base, str(raw["corpus_manifest"]))
    if not manifest.exists():
        raise ConfigError(f"corpus manifest not found: {manifest}")

    output_root = env.get(OUTPUT_ROOT_ENV) or raw.get("output_root") or "runs"
    output_root = _resolve(base, str(output_root))

    seed = int(raw.get("seed", 0))
    tasks = _parse_tasks(raw.get("tasks"))
    dataset_options = dict(raw.get("dataset") or {})
    schedule_options = dict(raw.get("schedule") or {})
    if schedule_options.get("mode", "quota") not in ("quota", "iid"):
        raise ConfigError(f"unknown schedule mode {schedule_options.get('mode')!r}")

    model_block = dict(raw.get("model") or {})
    encoder_block = dict(model_block.pop("encoder", {}) or {})
    encoder_block.setdefault("seed", seed)
    model_block.setdefault("seed", seed)
    try:
        model_config = ModelConfig(encoder=EncoderConfig(**encoder_block), **model_block)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad model block: {exc}") from None

    train_block = dict(raw.get("train") or {})
    lora = dict(train_block.pop("lora", {}) or {})
    try:
        train_config = TrainConfig(
            lora_r=int(lora.get("r", 8)),
            lora_alpha=float(lora.get("alpha", 32)),
            lora_targets=tuple(lora.get("targets", TrainConfig().lora_targets)),
            **train_block,
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: bad train block: {exc}") from None

    decode_block = dict(raw.get("decode") or {})
    decode_block.setdefault("seed", seed)
    try:
        decode_config = DecodeConfig(**decode_block)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad decode block: {exc}") from None
    if decode_config.temperature <= 0:
        raise ConfigError("decode temperature must be positive")

    eval_block = dict(raw.get("evaluate") or {})
    scheme = eval_block.get("scheme")

    config = RunConfig(
        corpus_manifest=manifest,
        output_root=output_root,
        seed=seed,
        tasks=tasks,
        dataset_options=dataset_options,
        schedule_options=schedule_options,
        model_config=model_config,
        train_config=train_config,
        decode_config=decode_config,
        scheme=scheme,
        source_path=path,
    )
    config._raw_train = dict(raw.get("train") or {})
    config.plans()  # validates schedule overrides
    config.build_context()  # validates dataset options and AU resources
    return config
