"""CNN architectures for tagging and event detection.

Two complementary profiles built from the same blocks:

* ``pt_spec``  four pooled CNN modules plus a tail block. Time is pooled
  down 16x (500 input frames become 31), which helps clip-level tagging but
  quantizes event boundaries coarsely. Trains with input Gaussian noise and
  dropout.
* ``ps_spec``  three modules with no temporal pooling and a temporal
  receptive field of exactly 11 frames, so frame predictions stay sharp at
  the original hop. No stochastic layers.

Both end in a frequency average, two 1x1 convolution heads, and attention
pooling over time that turns frame probabilities into clip probabilities.

All randomness (weight init, input noise, dropout) flows through explicit
torch Generators so that training runs are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError, ValidationError


@dataclass(frozen=True)
class CnnBlockSpec:
    """One convolution block: Conv2d (no bias) + BatchNorm + ReLU."""

    out_channels: int
    kernel: tuple[int, int]  # (time, frequency)

    def validate(self) -> None:
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        for k in self.kernel:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 1, got {self.kernel}")


@dataclass(frozen=True)
class CnnModuleSpec:
    """A block followed by max pooling and (optionally) dropout."""

    block: CnnBlockSpec
    pool: tuple[int, int]  # (time, frequency)
    dropout: float = 0.0

    def validate(self) -> None:
        self.block.validate()
        if min(self.pool) < 1:
            raise ConfigError(f"pool factors must be >= 1, got {self.pool}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "pt" (time-compressing tagger) or "ps" (frame-preserving detector)
    n_mels: int
    n_classes: int
    modules: tuple[CnnModuleSpec, ...]
    tail: CnnBlockSpec | None = None
    input_noise_std: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("pt", "ps"):
            raise ConfigError(f"kind must be 'pt' or 'ps', got {self.kind!r}")
        if self.n_mels < 1 or self.n_classes < 1:
            raise ConfigError("n_mels and n_classes must be >= 1")
        for module in self.modules:
            module.validate()
        if self.tail is not None:
            self.tail.validate()
        if self.input_noise_std < 0:
            raise ConfigError(f"input_noise_std must be >= 0, got {self.input_noise_std}")
        if self.frequency_bins() < 1:
            raise ConfigError("frequency pooling collapses all mel bins")
        if self.kind == "ps":
            if self.temporal_compression != 1:
                raise ConfigError("a 'ps' model must preserve the frame rate")
            if any(m.dropout > 0 for m in self.modules) or self.input_noise_std > 0:
                raise ConfigError("a 'ps' model must have no stochastic layers")
        if self.kind == "pt" and self.temporal_compression < 2:
            raise ConfigError("a 'pt' model must pool over time")

    @property
    def temporal_compression(self) -> int:
        factor = 1
        for module in self.modules:
            factor *= module.pool[0]
        return factor

    def output_frames(self, n_frames: int) -> int:
        t = n_frames
        for module in self.modules:
            t //= module.pool[0]
        return t

    def frequency_bins(self) -> int:
        f = self.n_mels
        for module in self.modules:
            f //= module.pool[1]
        return f

    @property
    def head_channels(self) -> int:
        if self.tail is not None:
            return self.tail.out_channels
        if self.modules:
            return self.modules[-1].block.out_channels
        return 1


def _scaled(base: int, width: float) -> int:
    return max(1, round(base * width))


def pt_spec(n_classes: int = 5, n_mels: int = 64, width: float = 1.0) -> ModelSpec:
    """Time-compressing tagger: 4 modules, 2x2 pools, dropout, input noise."""
    modules = tuple(
        CnnModuleSpec(CnnBlockSpec(_scaled(c, width), (3, 3)), pool=(2, 2), dropout=0.3)
        for c in (16, 32, 64, 128)
    )
    tail = CnnBlockSpec(_scaled(128, width), (3, 3))
    return ModelSpec("pt", n_mels, n_classes, modules, tail, input_noise_std=0.15)


def ps_spec(n_classes: int = 5, n_mels: int = 64, width: float = 1.0) -> ModelSpec:
    """Frame-preserving detector: temporal kernels 3/5/5, frequency-only pooling."""
    modules = tuple(
        CnnModuleSpec(CnnBlockSpec(_scaled(c, width), (k, k)), pool=(1, 2), dropout=0.0)
        for c, k in zip((64, 128, 128), (3, 5, 5))
    )
    return ModelSpec("ps", n_mels, n_classes, modules, None, input_noise_std=0.0)


# ---------------------------------------------------------------------------
# Derived architecture quantities
# ---------------------------------------------------------------------------


def temporal_receptive_field(spec: ModelSpec) -> int:
    """Input frames feeding one output frame, via the usual jump recursion."""
    rf, jump = 1, 1
    for module in spec.modules:
        rf += (module.block.kernel[0] - 1) * jump
        rf += (module.pool[0] - 1) * jump
        jump *= module.pool[0]
    if spec.tail is not None:
        rf += (spec.tail.kernel[0] - 1) * jump
    return rf


def count_params(spec: ModelSpec) -> int:
    """Analytic trainable-parameter count (must match introspection)."""
    total = 2 * spec.n_mels  # input norm affine
    in_channels = 1
    blocks = [m.block for m in spec.modules]
    if spec.tail is not None:
        blocks.append(spec.tail)
    for block in blocks:
        total += in_channels * block.out_channels * block.kernel[0] * block.kernel[1]
        total += 2 * block.out_channels  # norm affine
        in_channels = block.out_channels
    total += 2 * (in_channels * spec.n_classes + spec.n_classes)  # two 1x1 heads
    return total


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def attention_pooling(frame_logits: torch.Tensor, attn_logits: torch.Tensor) -> torch.Tensor:
    """Clip probabilities as an attention-weighted mean of frame probabilities.

    Inputs are (..., T, C); the softmax runs over T per class, so the output
    is a convex combination of sigmoid frame probabilities and stays in [0, 1].
    """
    if frame_logits.shape != attn_logits.shape:
        raise InputError(
            f"shape mismatch: frame {tuple(frame_logits.shape)} vs attention {tuple(attn_logits.shape)}"
        )
    weights = torch.softmax(attn_logits, dim=-2)
    return (weights * torch.sigmoid(frame_logits)).sum(dim=-2)


def gaussian_input_noise(x: torch.Tensor, std: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive Gaussian noise drawn from an explicit generator."""
    if std < 0:
        raise ConfigError(f"noise std must be >= 0, got {std}")
    if std == 0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return x + std * noise


def _generator_dropout(x: torch.Tensor, p: float, generator: torch.Generator) -> torch.Tensor:
    """Inverted dropout with an explicit generator (nn.Dropout uses global RNG)."""
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=generator, device=x.device) < keep
    return x * mask.to(x.dtype) / keep


def restore_frames(values: np.ndarray, n_frames: int, stride: int) -> np.ndarray:
    """Expand time-compressed frame values back to the original frame grid.

    Original frame t maps to compressed frame min(t // stride, T' - 1); the
    clamp absorbs input frames dropped by floor pooling.
    """
    values = np.asarray(values)
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if n_frames < 0:
        raise InputError(f"n_frames must be >= 0, got {n_frames}")
    t_compressed = values.shape[-2]
    if t_compressed < 1:
        raise InputError("cannot restore from an empty frame axis")
    idx = np.minimum(np.arange(n_frames) // stride, t_compressed - 1)
    return np.take(values, idx, axis=-2)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


@dataclass
class ModelOutput:
    clip_probs: torch.Tensor  # (B, C)
    frame_probs: torch.Tensor  # (B, T', C) at the model's own frame rate


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, spec: CnnBlockSpec):
        super().__init__()
        k_t, k_f = spec.kernel
        self.conv = nn.Conv2d(
            in_channels, spec.out_channels, spec.kernel, padding=(k_t // 2, k_f // 2), bias=False
        )
        self.norm = nn.BatchNorm2d(spec.out_channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.norm(self.conv(h)))


class SedModel(nn.Module):
    """Shared trunk for both profiles; behavior is fully driven by the spec."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.input_norm = nn.BatchNorm1d(spec.n_mels)
        blocks = []
        in_channels = 1
        for module in spec.modules:
            blocks.append(ConvBlock(in_channels, module.block))
            in_channels = module.block.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.tail = ConvBlock(in_channels, spec.tail) if spec.tail is not None else None
        self.frame_head = nn.Conv1d(spec.head_channels, spec.n_classes, 1)
        self.attention_head = nn.Conv1d(spec.head_channels, spec.n_classes, 1)
        self.rng = torch.Generator()

    def forward(self, x: torch.Tensor) -> ModelOutput:
        if x.dim() != 3 or x.shape[-1] != self.spec.n_mels:
            raise InputError(
                f"expected input (batch, frames, {self.spec.n_mels}), got {tuple(x.shape)}"
            )
        if self.spec.output_frames(x.shape[1]) < 1:
            raise InputError(f"{x.shape[1]} frames pool away to nothing in this model")
        h = self.input_norm(x.transpose(1, 2)).transpose(1, 2)
        if self.training and self.spec.input_noise_std > 0:
            h = gaussian_input_noise(h, self.spec.input_noise_std, self.rng)
        h = h.unsqueeze(1)
        for module, block in zip(self.spec.modules, self.blocks):
            h = block(h)
            if module.pool != (1, 1):
                h = torch.nn.functional.max_pool2d(h, module.pool)
            if self.training and module.dropout > 0:
                h = _generator_dropout(h, module.dropout, self.rng)
        if self.tail is not None:
            h = self.tail(h)
        h = h.mean(dim=3)  # average over frequency -> (B, channels, T')
        frame_logits = self.frame_head(h).transpose(1, 2)  # (B, T', C)
        attn_logits = self.attention_head(h).transpose(1, 2)
        clip_probs = attention_pooling(frame_logits, attn_logits)
        return ModelOutput(clip_probs=clip_probs, frame_probs=torch.sigmoid(frame_logits))


def build_model(spec: ModelSpec, seed: int) -> SedModel:
    """Construct a model with deterministic, generator-driven initialization.

    Conv trunk weights get He-normal init; the two heads get the smaller
    fan-in gain so initial clip probabilities sit near 0.5. The model's own
    generator (noise, dropout) is seeded from seed + 1.
    """
    model = SedModel(spec)
    init_rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                module.weight.copy_(torch.randn(module.weight.shape, generator=init_rng) * std)
            elif isinstance(module, nn.Conv1d):
                fan_in = module.in_channels * module.kernel_size[0]
                std = math.sqrt(1.0 / fan_in)
                module.weight.copy_(torch.randn(module.weight.shape, generator=init_rng) * std)
                module.bias.zero_()
    model.rng.manual_seed(seed + 1)
    return model


# ---------------------------------------------------------------------------
# Checkpoints: metadata.json (architecture + tensor table) + weights.bin
# ---------------------------------------------------------------------------

_TENSOR_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def _spec_from_json(payload: dict) -> ModelSpec:
    modules = tuple(
        CnnModuleSpec(
            CnnBlockSpec(m["block"]["out_channels"], tuple(m["block"]["kernel"])),
            tuple(m["pool"]),
            m["dropout"],
        )
        for m in payload["modules"]
    )
    tail = payload["tail"]
    return ModelSpec(
        kind=payload["kind"],
        n_mels=payload["n_mels"],
        n_classes=payload["n_classes"],
        modules=modules,
        tail=CnnBlockSpec(tail["out_channels"], tuple(tail["kernel"])) if tail else None,
        input_noise_std=payload["input_noise_std"],
    )


def save_checkpoint(model: SedModel, path) -> None:
    """Write weights (parameters and buffers) plus architecture metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    entries = []
    with open(path / "weights.bin", "wb") as fh:
        for name in sorted(state):
            tensor = state[name].detach().cpu().contiguous()
            dtype = str(tensor.dtype).replace("torch.", "")
            if dtype not in _TENSOR_DTYPES:
                raise ValidationError(f"cannot serialize tensor {name} of dtype {dtype}")
            entries.append({"name": name, "shape": list(tensor.shape), "dtype": dtype})
            fh.write(tensor.numpy().tobytes())
    meta = {"format_version": 1, "spec": asdict(model.spec), "tensors": entries}
    (path / "metadata.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path, spec: ModelSpec | None = None) -> SedModel:
    """Rebuild a model from a checkpoint directory; reject architecture mismatch."""
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise ValidationError(f"no checkpoint at {path}")
    meta = json.loads(meta_path.read_text())
    stored = _spec_from_json(meta["spec"])
    if spec is not None and spec != stored:
        raise ValidationError("checkpoint architecture does not match the requested one")
    model = SedModel(stored)
    blob = (path / "weights.bin").read_bytes()
    state = {}
    offset = 0
    for entry in meta["tensors"]:
        np_dtype = _TENSOR_DTYPES[entry["dtype"]]
        numel = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = numel * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(blob):
            raise ValidationError(f"weights file is truncated at tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype=np_dtype, count=numel, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.copy().reshape(entry["shape"]))
        offset += nbytes
    if offset != len(blob):
        raise ValidationError("weights file has trailing bytes the metadata does not describe")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint tensors do not fit the architecture: {exc}") from None
    model.eval()
    return model
