"""Desk-scale multimodal backbone: a frozen patch encoder feeds a trainable
linear projector whose output rows are concatenated with byte-level text
embeddings and decoded by a tiny causal transformer.

Everything runs in float64 so matrix identities and finite-difference
gradient checks hold at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigError,
    MediaError,
    NumericGuardError,
    ShapeError,
    ValidationError,
)

DTYPE = torch.float64

# Byte-level vocabulary: 256 raw bytes plus control tokens.
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 256, 257, 258, 259
VOCAB_SIZE = 260

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}

CHECKPOINT_VERSION = 1


class ByteTokenizer:
    """UTF-8 bytes as token ids; control ids sit above the byte range."""

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        raw = bytes(i for i in ids if 0 <= i < 256)
        return raw.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class EncoderConfig:
    d_vision: int = 12
    image_size: int = 448
    patch_size: int = 32
    channels: int = 3
    seed: int = 0
    max_frames: int = 4
    frozen: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not a multiple of "
                f"patch_size {self.patch_size}"
            )
        if self.d_vision < 1 or self.max_frames < 1:
            raise ConfigError("d_vision and max_frames must be positive")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 768
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.d_model > 64:
            raise ConfigError(f"d_model {self.d_model} exceeds the desk-scale cap of 64")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.max_len < 2:
            raise ConfigError("n_layers and max_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if "encoder" in obj and isinstance(obj["encoder"], dict):
            obj["encoder"] = EncoderConfig(**obj["encoder"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# Token containers
# ---------------------------------------------------------------------------

@dataclass
class VisualTokens:
    matrix: torch.Tensor  # num_tokens x d_vision
    media_ref: str

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ShapeError(f"visual tokens need at least one row, got {tuple(self.matrix.shape)}")
        if not torch.isfinite(self.matrix).all():
            raise ValidationError(f"non-finite visual tokens from {self.media_ref}")


@dataclass
class ProjectedTokens:
    matrix: torch.Tensor  # num_tokens x d_model


@dataclass
class TextTokens:
    token_ids: list[int]
    matrix: torch.Tensor  # seq_len x d_model

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise ShapeError("text token sequence is empty")
        if self.matrix.shape[0] != len(self.token_ids):
            raise ShapeError(
                f"embedding rows {self.matrix.shape[0]} != ids {len(self.token_ids)}"
            )


@dataclass
class FusedInput:
    matrix: torch.Tensor  # (num_visual + seq_len) x d_model
    boundary: int  # rows [0, boundary) are visual

    def split(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.matrix[: self.boundary], self.matrix[self.boundary:]


# ---------------------------------------------------------------------------
# Vision encoder stub
# ---------------------------------------------------------------------------

class PatchEncoder(nn.Module):
    """Bias-free linear patch embedding with weights fixed by the config seed.
    Stands in for a vision transformer; a zero frame maps to zero tokens."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        weight = torch.randn(
            config.d_vision, config.patch_dim, generator=generator, dtype=DTYPE
        ) / math.sqrt(config.patch_dim)
        self.weight = nn.Parameter(weight, requires_grad=not config.frozen)

    def encode_frames(self, frames: np.ndarray, media_ref: str) -> VisualTokens:
        """frames: (n, H, W, C) floats in [0, 1]; H and W already resized."""
        cfg = self.config
        n, height, width, channels = frames.shape
        if height != cfg.image_size or width != cfg.image_size or channels != cfg.channels:
            raise ShapeError(
                f"{media_ref}: frames are {height}x{width}x{channels}, encoder "
                f"expects {cfg.image_size}x{cfg.image_size}x{cfg.channels}"
            )
        p = cfg.patch_size
        grid = cfg.image_size // p
        patches = (
            frames.reshape(n, grid, p, grid, p, channels)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n * grid * grid, cfg.patch_dim)
        )
        tokens = torch.from_numpy(np.ascontiguousarray(patches)).to(DTYPE)
        return VisualTokens(tokens @ self.weight.T, media_ref)


def _load_frame(path: Path, image_size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise MediaError(f"cannot decode image {path}: {exc}") from exc


def _sample_frames(frames: np.ndarray, max_frames: int) -> np.ndarray:
    if frames.shape[0] <= max_frames:
        return frames
    idx = np.linspace(0, frames.shape[0] - 1, max_frames).astype(int)
    return frames[idx]


def encode_media(media_ref: Union[str, Path],
                 encoder: Union[PatchEncoder, EncoderConfig]) -> VisualTokens:
    """Turn a media reference into visual tokens.

    Accepts an image file, a directory of frame images (stride-sampled down to
    the configured frame cap), or a .npy file holding either precomputed
    tokens (2-d), one raw frame (3-d), or a frame stack (4-d).
    """
    if isinstance(encoder, EncoderConfig):
        encoder = PatchEncoder(encoder)
    cfg = encoder.config
    path = Path(media_ref)
    if not path.exists():
        raise MediaError(f"media not found: {media_ref}")

    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise MediaError(f"directory {media_ref} holds no frame images")
        files = [files[i] for i in np.linspace(0, len(files) - 1,
                                               min(len(files), cfg.max_frames)).astype(int)]
        frames = np.stack([_load_frame(p, cfg.image_size) for p in files])
        return encoder.encode_frames(frames, str(media_ref))

    suffix = path.suffix.lower()
    if suffix == ".npy":
        try:
            array = np.load(path)
        except (ValueError, OSError) as exc:
            raise MediaError(f"cannot read feature file {media_ref}: {exc}") from exc
        if array.ndim == 2:
            if array.shape[1] != cfg.d_vision:
                raise ShapeError(
                    f"{media_ref}: precomputed tokens are {array.shape[1]}-wide, "
                    f"encoder expects d_vision={cfg.d_vision}"
                )
            return VisualTokens(torch.from_numpy(array).to(DTYPE), str(media_ref))
        if array.ndim == 3:
            array = array[None]
        if array.ndim != 4:
            raise MediaError(f"{media_ref}: unsupported array rank {array.ndim}")
        if array.dtype == np.uint8:
            array = array.astype(np.float64) / 255.0
        frames = _sample_frames(array.astype(np.float64), cfg.max_frames)
        return encoder.encode_frames(frames, str(media_ref))

    if suffix in _IMAGE_SUFFIXES:
        frame = _load_frame(path, cfg.image_size)
        return encoder.encode_frames(frame[None], str(media_ref))

    raise MediaError(
        f"unsupported media type {suffix!r} for {media_ref}; provide an image, "
        "a frame directory, or a .npy feature file"
    )


# ---------------------------------------------------------------------------
# Language model
# ---------------------------------------------------------------------------

class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.o = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[0]

        def heads(t):
            return t.view(length, self.n_heads, self.head_dim).transpose(0, 1)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(0, 1).reshape(length, -1))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.fc1 = nn.Linear(d_model, 4 * d_model, bias=False, dtype=DTYPE)
        self.fc2 = nn.Linear(4 * d_model, d_model, bias=False, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ToyModel(nn.Module):
    """Frozen patch encoder, always-trainable projector, small causal LM."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tokenizer = ByteTokenizer()
        self.vision = PatchEncoder(config.encoder)
        self.projector = nn.Linear(config.encoder.d_vision, config.d_model,
                                   bias=False, dtype=DTYPE)
        self.embedding = nn.Embedding(VOCAB_SIZE, config.d_model, dtype=DTYPE)
        self.positions = nn.Embedding(config.max_len, config.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model, dtype=DTYPE)
        self.head = nn.Linear(config.d_model, VOCAB_SIZE, bias=False, dtype=DTYPE)
        self._init_weights()

    def _init_weights(self):
        generator = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.startswith("vision."):
                    continue  # seeded by the encoder config, frozen
                if "norm" in name:
                    if name.endswith("weight"):
                        param.fill_(1.0)
                    else:
                        param.zero_()
                elif param.dim() >= 2:
                    param.normal_(0.0, 0.02, generator=generator)
                else:
                    param.zero_()

    @property
    def projection_matrix(self) -> torch.Tensor:
        """The d_vision x d_model alignment matrix (row-vector convention)."""
        return self.projector.weight.T

    def embed_text(self, token_ids: Sequence[int]) -> TextTokens:
        ids = list(token_ids)
        if not ids:
            raise ShapeError("cannot embed an empty token sequence")
        if any(i < 0 or i >= VOCAB_SIZE for i in ids):
            raise ValidationError("token id outside the vocabulary")
        matrix = self.embedding(torch.tensor(ids, dtype=torch.long))
        return TextTokens(ids, matrix)

    def hidden_states(self, matrix: torch.Tensor) -> torch.Tensor:
        length = matrix.shape[0]
        if length > self.config.max_len:
            raise ShapeError(
                f"sequence of {length} rows exceeds max_len {self.config.max_len}"
            )
        x = matrix + self.positions(torch.arange(length, dtype=torch.long))
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def logits(self, matrix: torch.Tensor) -> torch.Tensor:
        return self.head(self.hidden_states(matrix))


def project(tv: VisualTokens, model: ToyModel) -> ProjectedTokens:
    """Exact linear alignment of visual tokens into the text embedding space."""
    width = tv.matrix.shape[1]
    expected = model.projector.in_features
    if width != expected:
        raise ShapeError(
            f"visual tokens are {width}-wide but the projection expects {expected}"
        )
    return ProjectedTokens(model.projector(tv.matrix))


def fuse(tv: Optional[ProjectedTokens], tt: TextTokens) -> FusedInput:
    """Row-concatenate visual tokens (first) with text embeddings. Records
    without media pass tv=None and get boundary 0."""
    if tv is None or tv.matrix.shape[0] == 0:
        return FusedInput(tt.matrix, 0)
    if tv.matrix.shape[1] != tt.matrix.shape[1]:
        raise ShapeError(
            f"visual width {tv.matrix.shape[1]} != text width {tt.matrix.shape[1]}"
        )
    return FusedInput(torch.cat([tv.matrix, tt.matrix], dim=0), tv.matrix.shape[0])


@dataclass(frozen=True)
class DecodeConfig:
    max_new_tokens: int = 64
    greedy: bool = True
    temperature: float = 1.0
    seed: int = 0


def forward(x: FusedInput, model: ToyModel,
            decode: DecodeConfig = DecodeConfig()) -> str:
    """Autoregressive decode from the fused prompt; greedy by default."""
    matrix = x.matrix
    generator = torch.Generator().manual_seed(decode.seed)
    generated: list[int] = []
    with torch.no_grad():
        for _ in range(decode.max_new_tokens):
            if matrix.shape[0] >= model.config.max_len:
                break
            logits = model.logits(matrix)[-1]
            if not torch.isfinite(logits).all():
                raise NumericGuardError("non-finite logits during decoding")
            if decode.greedy:
                next_id = int(logits.argmax())
            else:
                probs = torch.softmax(logits / decode.temperature, dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=generator))
            if next_id == EOS_ID:
                break
            generated.append(next_id)
            step = model.embedding(torch.tensor([next_id], dtype=torch.long))
            matrix = torch.cat([matrix, step], dim=0)
    return model.tokenizer.decode(generated)


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------

class LoRALinear(nn.Module):
    """Frozen base linear plus a trainable rank-r update scaled by alpha/r.
    The second factor starts at zero so the wrapped layer is initially exact."""

    def __init__(self, base: nn.Linear, r: int, alpha: float,
                 generator: torch.Generator):
        super().__init__()
        d_out, d_in = base.weight.shape
        if r > min(d_in, d_out):
            raise ConfigError(
                f"adapter rank {r} exceeds min({d_in}, {d_out}) of the base layer"
            )
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)
        self.base = base
        self.scale = alpha / r
        self.lora_a = nn.Parameter(
            torch.randn(r, d_in, generator=generator, dtype=DTYPE) * 0.02
        )
        self.lora_b = nn.Parameter(torch.zeros(d_out, r, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scale

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features


DEFAULT_ADAPTER_TARGETS = ("q", "k", "v", "o", "fc1", "fc2", "head")


def apply_adapters(model: ToyModel, r: int = 8, alpha: float = 32.0,
                   targets: Sequence[str] = DEFAULT_ADAPTER_TARGETS) -> ToyModel:
    """Freeze the language model and wrap the targeted linear layers with
    rank-r adapters; the projector stays trainable. Each wrapped d_in x d_out
    layer contributes exactly r*(d_in + d_out) trainable parameters."""
    if r < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {r}")
    block_targets = {"q", "k", "v", "o", "fc1", "fc2"}
    unknown = set(targets) - block_targets - {"head"}
    if unknown:
        raise ConfigError(f"unknown adapter targets: {sorted(unknown)}")

    for name, param in model.named_parameters():
        if not name.startswith(("vision.", "projector.")):
            param.requires_grad_(False)

    generator = torch.Generator().manual_seed(model.config.seed + 0x5EED)
    for block in model.blocks:
        for attr in ("q", "k", "v", "o"):
            if attr in targets:
                setattr(block.attn, attr,
                        LoRALinear(getattr(block.attn, attr), r, alpha, generator))
        for attr in ("fc1", "fc2"):
            if attr in targets:
                setattr(block, attr, LoRALinear(getattr(block, attr), r, alpha, generator))
    if "head" in targets:
        model.head = LoRALinear(model.head, r, alpha, generator)
    return model


def adapter_parameter_count(model: ToyModel) -> int:
    return sum(
        p.numel() for name, p in model.named_parameters() if ".lora_" in name or name.startswith("lora_")
    )


def trainable_parameter_count(model: ToyModel) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def expected_adapter_parameters(model: ToyModel, r: int,
                                targets: Sequence[str] = DEFAULT_ADAPTER_TARGETS) -> int:
    """Closed-form adapter budget: sum of r*(d_in + d_out) over target layers."""
    d = model.config.d_model
    per_block = 0
    for attr in ("q", "k", "v", "o"):
        if attr in targets:
            per_block += r * (d + d)
    if "fc1" in targets:
        per_block += r * (d + 4 * d)
    if "fc2" in targets:
        per_block += r * (4 * d + d)
    total = per_block * len(model.blocks)
    if "head" in targets:
        total += r * (d + VOCAB_SIZE)
    return total


# ---------------------------------------------------------------------------
# Sequence assembly and loss
# ---------------------------------------------------------------------------

@dataclass
class PreparedExample:
    fused: FusedInput
    token_ids: list[int]  # BOS + prompt + SEP + response + EOS
    response_start: int  # index into token_ids of the first response id


def prepare_example(model: ToyModel, prompt: str, response: str,
                    visual: Optional[ProjectedTokens]) -> PreparedExample:
    tok = model.tokenizer
    prompt_ids = [BOS_ID] + tok.encode(prompt) + [SEP_ID]
    response_ids = tok.encode(response) + [EOS_ID]
    ids = prompt_ids + response_ids
    text = model.embed_text(ids)
    fused = fuse(visual, text)
    if fused.matrix.shape[0] > model.config.max_len:
        raise ShapeError(
            f"example needs {fused.matrix.shape[0]} rows, max_len is "
            f"{model.config.max_len}; shorten the text or raise max_len"
        )
    return PreparedExample(fused, ids, len(prompt_ids))


def example_loss(model: ToyModel, example: PreparedExample) -> torch.Tensor:
    """Next-token cross-entropy over the response tokens only; query and
    identifier tokens never contribute."""
    logits = model.logits(example.fused.matrix)
    boundary = example.fused.boundary
    ids = example.token_ids
    positions = [boundary + k - 1 for k in range(example.response_start, len(ids))]
    targets = torch.tensor(ids[example.response_start:], dtype=torch.long)
    return F.cross_entropy(logits[positions], targets)


def prompt_fused(model: ToyModel, prompt: str,
                 visual: Optional[ProjectedTokens]) -> FusedInput:
    ids = [BOS_ID] + model.tokenizer.encode(prompt) + [SEP_ID]
    return fuse(visual, model.embed_text(ids))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ToyModel,
                    adapter_info: Optional[dict] = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": model.config.to_dict(),
            "adapters": adapter_info,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> ToyModel:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has format_version {version}, "
            f"this build reads {CHECKPOINT_VERSION}"
        )
    model = ToyModel(ModelConfig.from_dict(payload["model_config"]))
    adapters = payload.get("adapters")
    if adapters:
        apply_adapters(model, r=adapters["r"], alpha=adapters["alpha"],
                       targets=tuple(adapters["targets"]))
    model.load_state_dict(payload["state_dict"])
    return model
