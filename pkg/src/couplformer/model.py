"""Couplformer image classifier.

Pipeline: convolutional stem -> raster token grid (+ optional learnable
position embedding) -> pre-norm encoder blocks with coupled or standard
attention -> final layer norm -> sequence pooling -> linear head.

Each stem stage is a 3x3 convolution (padding keeps the spatial size at
stride 1), ReLU, and an optional 3x3/stride-2/padding-1 max pool.  The token
embedding dimension is the final stage's channel count.  Sequence pooling
replaces a class token: a learned d->1 projection scores every token, the
softmax of those scores weights the token average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import tensor as T
from .attention import (
    AttentionGeometry,
    CouplingAttentionParams,
    attention_forward,
    trunc_normal,
)
from .autograd import Var
from .tensor import ShapeError, Tensor

__all__ = [
    "StemStage",
    "ModelConfig",
    "EncoderBlockParams",
    "CouplformerModel",
    "CheckpointError",
    "conv_stem_forward",
    "encoder_block_forward",
    "sequence_pool",
    "model_forward",
    "ATTENTION_KINDS",
    "POS_EMBEDDING_MODES",
]

ATTENTION_KINDS = ("standard", "coupled_fast", "coupled_explicit")
POS_EMBEDDING_MODES = ("none", "learnable")


class CheckpointError(ValueError):
    """Checkpoint file does not match the model it is being loaded into."""


@dataclass(frozen=True)
class StemStage:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = True


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def _pool_out(size: int) -> int:
    # 3x3 max pool, stride 2, padding 1
    return (size + 2 - 3) // 2 + 1


@dataclass(frozen=True)
class ModelConfig:
    img_size: tuple[int, int]
    in_channels: int
    conv_stem: tuple[StemStage, ...]
    embed_dim: int
    depth: int
    heads: int
    num_classes: int
    mlp_ratio: int = 2
    pos_embedding: str = "learnable"
    attention_kind: str = "coupled_fast"

    def __post_init__(self) -> None:
        object.__setattr__(self, "img_size", tuple(self.img_size))
        object.__setattr__(self, "conv_stem", tuple(self.conv_stem))
        if not self.conv_stem:
            raise ShapeError("config: conv_stem needs at least one stage")
        if self.conv_stem[-1].out_channels != self.embed_dim:
            raise ShapeError(
                f"config: final stem channels {self.conv_stem[-1].out_channels} "
                f"must equal embed_dim {self.embed_dim}"
            )
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"config: embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.pos_embedding not in POS_EMBEDDING_MODES:
            raise ValueError(f"config: pos_embedding must be one of {POS_EMBEDDING_MODES}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"config: attention_kind must be one of {ATTENTION_KINDS}")
        self.token_grid()  # fail fast if the stem collapses the image

    def token_grid(self) -> tuple[int, int]:
        h, w = self.img_size
        for stage in self.conv_stem:
            h = _conv_out(h, stage.kernel, stage.stride)
            w = _conv_out(w, stage.kernel, stage.stride)
            if stage.pool:
                h, w = _pool_out(h), _pool_out(w)
            if h < 1 or w < 1:
                raise ShapeError(f"config: stem collapses {self.img_size} to {h}x{w}")
        return h, w

    def geometry(self) -> AttentionGeometry:
        h, w = self.token_grid()
        return AttentionGeometry(h=h, w=w, d=self.embed_dim, heads=self.heads)

    def with_attention(self, kind: str) -> "ModelConfig":
        return replace(self, attention_kind=kind)


class EncoderBlockParams:
    """Layer norms, attention projections, and FFN weights for one block."""

    def __init__(
        self,
        ln1_gamma: Var,
        ln1_beta: Var,
        attn: CouplingAttentionParams,
        ln2_gamma: Var,
        ln2_beta: Var,
        ffn_w1: Var,
        ffn_b1: Var,
        ffn_w2: Var,
        ffn_b2: Var,
    ) -> None:
        self.ln1_gamma, self.ln1_beta = ln1_gamma, ln1_beta
        self.attn = attn
        self.ln2_gamma, self.ln2_beta = ln2_gamma, ln2_beta
        self.ffn_w1, self.ffn_b1 = ffn_w1, ffn_b1
        self.ffn_w2, self.ffn_b2 = ffn_w2, ffn_b2

    @classmethod
    def initialize(
        cls, geometry: AttentionGeometry, mlp_ratio: int, rng: np.random.Generator
    ) -> "EncoderBlockParams":
        d = geometry.d
        hidden = mlp_ratio * d
        return cls(
            ln1_gamma=ag.parameter(T.ones((d,))),
            ln1_beta=ag.parameter(T.zeros((d,))),
            attn=CouplingAttentionParams.initialize(geometry, rng),
            ln2_gamma=ag.parameter(T.ones((d,))),
            ln2_beta=ag.parameter(T.zeros((d,))),
            ffn_w1=ag.parameter(trunc_normal(rng, (d, hidden))),
            ffn_b1=ag.parameter(T.zeros((hidden,))),
            ffn_w2=ag.parameter(trunc_normal(rng, (hidden, d))),
            ffn_b2=ag.parameter(T.zeros((d,))),
        )

    def parameters(self) -> dict[str, Var]:
        out = {"ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta}
        for name, var in self.attn.parameters().items():
            out[f"attn.{name}"] = var
        out.update(
            {
                "ln2.gamma": self.ln2_gamma,
                "ln2.beta": self.ln2_beta,
                "ffn.w1": self.ffn_w1,
                "ffn.b1": self.ffn_b1,
                "ffn.w2": self.ffn_w2,
                "ffn.b2": self.ffn_b2,
            }
        )
        return out


def conv_stem_forward(image: Var, stages: list[tuple[StemStage, Var, Var]]) -> Var:
    """Run the stem and flatten the final feature map to raster-order tokens."""
    x = image
    for stage, weight, bias in stages:
        x = ag.conv2d(x, weight, bias, stride=stage.stride, padding=stage.kernel // 2)
        x = ag.relu(x)
        if stage.pool:
            x = ag.maxpool2d(x, kernel=3, stride=2, padding=1)
    d, h, w = x.value.shape
    return ag.transpose2d(ag.reshape(x, (d, h * w)))


def encoder_block_forward(x: Var, block: EncoderBlockParams, kind: str) -> Var:
    """Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.))."""
    attended = attention_forward(
        ag.layernorm(x, block.ln1_gamma, block.ln1_beta), block.attn, kind
    )
    x = ag.add(x, attended)
    normed = ag.layernorm(x, block.ln2_gamma, block.ln2_beta)
    hidden = ag.gelu(ag.add_bias_rows(ag.matmul(normed, block.ffn_w1), block.ffn_b1))
    ffn_out = ag.add_bias_rows(ag.matmul(hidden, block.ffn_w2), block.ffn_b2)
    return ag.add(x, ffn_out)


def sequence_pool(x: Var, pool_weight: Var) -> Var:
    """Softmax-weighted token average with a learned d->1 scoring projection."""
    scores = ag.transpose2d(ag.matmul(x, pool_weight))  # (1, L)
    alpha = ag.softmax_rows(scores)
    return ag.reshape(ag.matmul(alpha, x), (x.value.shape[1],))


class CouplformerModel:
    """Parameter container plus forward pass for the classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.geometry = config.geometry()
        rng = np.random.default_rng((int(seed), 0x6D6F64))  # model-init stream

        self.stem: list[tuple[StemStage, Var, Var]] = []
        in_ch = config.in_channels
        for stage in config.conv_stem:
            # Fan-in-scaled init for the conv kernels: the 0.02 std used for
            # the linear projections would start the stem at near-zero signal.
            fan_in = in_ch * stage.kernel * stage.kernel
            weight = ag.parameter(
                trunc_normal(
                    rng,
                    (stage.out_channels, in_ch, stage.kernel, stage.kernel),
                    std=math.sqrt(2.0 / fan_in),
                )
            )
            bias = ag.parameter(T.zeros((stage.out_channels,)))
            self.stem.append((stage, weight, bias))
            in_ch = stage.out_channels

        L, d = self.geometry.tokens, config.embed_dim
        self.pos_embedding: Var | None = None
        if config.pos_embedding == "learnable":
            # Zero init keeps "none" and "learnable" identical at initialization.
            self.pos_embedding = ag.parameter(T.zeros((L, d)))

        self.blocks = [
            EncoderBlockParams.initialize(self.geometry, config.mlp_ratio, rng)
            for _ in range(config.depth)
        ]
        self.final_ln_gamma = ag.parameter(T.ones((d,)))
        self.final_ln_beta = ag.parameter(T.zeros((d,)))
        self.pool_weight = ag.parameter(trunc_normal(rng, (d, 1)))
        self.head_weight = ag.parameter(trunc_normal(rng, (d, config.num_classes)))
        self.head_bias = ag.parameter(T.zeros((config.num_classes,)))

    def parameters(self) -> dict[str, Var]:
        out: dict[str, Var] = {}
        for i, (_, weight, bias) in enumerate(self.stem):
            out[f"stem.{i}.weight"] = weight
            out[f"stem.{i}.bias"] = bias
        if self.pos_embedding is not None:
            out["pos_embedding"] = self.pos_embedding
        for i, block in enumerate(self.blocks):
            for name, var in block.parameters().items():
                out[f"blocks.{i}.{name}"] = var
        out["final_ln.gamma"] = self.final_ln_gamma
        out["final_ln.beta"] = self.final_ln_beta
        out["pool.weight"] = self.pool_weight
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def param_count(self) -> int:
        return sum(v.value.size for v in self.parameters().values())

    def forward(self, image) -> Var:
        return model_forward(image, self)

    # -- checkpointing: manifest (names + shapes, text) plus tensor blobs --

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        params = self.parameters()
        lines = []
        with open(directory / "tensors.bin", "wb") as fh:
            for name, var in params.items():
                dims = " ".join(str(s) for s in var.value.shape)
                lines.append(f"{name} {dims}".rstrip())
                T.write_record(var.value, fh)
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n")

    def load_state(self, directory) -> None:
        directory = Path(directory)
        manifest = (directory / "manifest.txt").read_text().splitlines()
        params = self.parameters()
        entries = []
        for line in manifest:
            if not line.strip():
                continue
            parts = line.split()
            entries.append((parts[0], tuple(int(p) for p in parts[1:])))
        if [name for name, _ in entries] != list(params):
            raise CheckpointError(
                "checkpoint parameter names do not match this model configuration"
            )
        with open(directory / "tensors.bin", "rb") as fh:
            for name, shape in entries:
                t = T.read_record(fh)
                if t.shape != shape or params[name].value.shape != shape:
                    raise CheckpointError(
                        f"checkpoint geometry mismatch for {name}: "
                        f"file {t.shape}, manifest {shape}, model {params[name].value.shape}"
                    )
                params[name].assign(t)

    @classmethod
    def load(cls, directory, config: ModelConfig) -> "CouplformerModel":
        model = cls(config, seed=0)
        model.load_state(directory)
        return model


def model_forward(image, model: CouplformerModel) -> Var:
    """Logits for one image of shape (in_channels, H, W)."""
    if isinstance(image, Tensor):
        image = ag.constant(image)
    expected = (model.config.in_channels, *model.config.img_size)
    if image.value.shape != expected:
        raise ShapeError(f"model: expected image of shape {expected}, got {image.value.shape}")
    x = conv_stem_forward(image, model.stem)
    if model.pos_embedding is not None:
        x = ag.add(x, model.pos_embedding)
    for block in model.blocks:
        x = encoder_block_forward(x, block, model.config.attention_kind)
    x = ag.layernorm(x, model.final_ln_gamma, model.final_ln_beta)
    pooled = sequence_pool(x, model.pool_weight)
    logits = ag.add_bias_rows(
        ag.matmul(ag.reshape(pooled, (1, model.config.embed_dim)), model.head_weight),
        model.head_bias,
    )
    return ag.reshape(logits, (model.config.num_classes,))
