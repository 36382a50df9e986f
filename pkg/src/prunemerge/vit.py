"""Tiny pre-norm vision transformer with attention-map instrumentation.

Blocks follow the DeiT convention: z' = z + SA(LN(z)); out = z' + MLP(LN(z')).
Attention projections are bias-free; the patch embedding and the head carry
biases.  Every block can record its post-softmax attention maps (and, after a
backward pass, their gradients) into an AttentionTrace sink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 28
    patch_size: int = 7
    channels: int = 1
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    num_classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name in ("image_size", "patch_size", "channels", "embed_dim",
                     "heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.depth < 0:
            raise ContractError("depth must be nonnegative")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1  # class token at index 0

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class PatchEmbedParams:
    w: Tensor      # patch_dim x D
    b: Tensor      # D
    cls: Tensor    # 1 x D
    pos: Tensor    # N x D


@dataclass
class BlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_fc1: Tensor
    w_fc2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self):
        for f in ("w_q", "w_k", "w_v", "w_o", "w_fc1", "w_fc2",
                  "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f, getattr(self, f)


@dataclass
class VitParams:
    embed: PatchEmbedParams
    blocks: list[BlockParams]
    ln_f_g: Tensor
    ln_f_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self):
        yield "embed.w", self.embed.w
        yield "embed.b", self.embed.b
        yield "embed.cls", self.embed.cls
        yield "embed.pos", self.embed.pos
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"block{i}.{name}", t
        yield "ln_f.g", self.ln_f_g
        yield "ln_f.b", self.ln_f_b
        yield "head.w", self.head_w
        yield "head.b", self.head_b


@dataclass
class AttentionTrace:
    """Per-layer sink for the post-softmax attention maps.

    ``attention`` stays wired into the graph, so after backward its grad
    holds dL/dA.  ``tokens`` is the block's input, captured for
    activation-based scoring.
    """

    layer: int
    attention: Tensor | None = None
    tokens: Tensor | None = None

    @property
    def maps(self) -> np.ndarray:
        if self.attention is None:
            raise ContractError("trace has no attention recorded yet")
        return self.attention.data

    @property
    def grads(self) -> np.ndarray:
        if self.attention is None or self.attention.grad is None:
            raise ContractError(
                "attention gradients are present only after a backward pass")
        return self.attention.grad


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_params(config: ModelConfig, seed: int = 0) -> VitParams:
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def w(shape):
        return Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    embed = PatchEmbedParams(
        w=w((config.patch_dim, d)),
        b=zeros(d),
        cls=w((1, d)),
        pos=w((config.num_tokens, d)),
    )
    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockParams(
            w_q=w((d, d)), w_k=w((d, d)), w_v=w((d, d)), w_o=w((d, d)),
            w_fc1=w((d, config.mlp_ratio * d)),
            w_fc2=w((config.mlp_ratio * d, d)),
            ln1_g=ones(d), ln1_b=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
        ))
    return VitParams(
        embed=embed,
        blocks=blocks,
        ln_f_g=ones(d),
        ln_f_b=zeros(d),
        head_w=w((d, config.num_classes)),
        head_b=zeros(config.num_classes),
    )


def extract_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Cut (B, Ch, H, W) pixels into (B, num_patches, patch_dim) rows.

    Patches are raster ordered (row-major over the grid), so neighbouring
    tokens are horizontal neighbours in the image.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, ch, h, w = images.shape
    p = config.patch_size
    if (ch, h, w) != (config.channels, config.image_size, config.image_size):
        raise ContractError(
            f"image shape {(ch, h, w)} does not match config "
            f"{(config.channels, config.image_size, config.image_size)}")
    g = config.grid_size
    x = images.reshape(b, ch, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gy, gx, Ch, p, p)
    return x.reshape(b, g * g, ch * p * p)


def patchify(images: np.ndarray, config: ModelConfig,
             embed: PatchEmbedParams) -> Tensor:
    """Embed pixels into the (B, N, D) token sequence.

    Projects flattened patches, prepends the class token at index 0, and
    adds the learned positional embedding (one row per token, class
    position included).
    """
    patches = extract_patches(images, config)
    b = patches.shape[0]
    tok = T.matmul(Tensor(patches), embed.w) + embed.b
    cls = T.broadcast_to(embed.cls, (b, 1, config.embed_dim))
    z = T.concat([cls, tok], axis=1)
    return z + embed.pos


def block_forward(z: Tensor, params: BlockParams, heads: int,
                  trace: AttentionTrace | None = None,
                  attn_bump: np.ndarray | None = None) -> Tensor:
    """One pre-norm transformer block on a (B, N, D) token tensor.

    ``attn_bump`` adds a constant to the post-softmax attention maps;
    finite-difference tests use it to probe dL/dA at the exact tensor the
    trace records.
    """
    b, n, d_model = z.shape
    d = d_model // heads
    if trace is not None:
        trace.tokens = z

    h = T.layer_norm(z, params.ln1_g, params.ln1_b)
    q = T.matmul(h, params.w_q)
    k = T.matmul(h, params.w_k)
    v = T.matmul(h, params.w_v)

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, heads, d)), (0, 2, 1, 3))

    scale = 1.0 / math.sqrt(d)
    scores = T.matmul(split(q), T.swap_last2(split(k))) * scale
    attn = T.softmax_rows(scores)  # (B, H, N, N), rows are queries
    if trace is not None:
        trace.attention = attn
    if attn_bump is not None:
        attn = attn + Tensor(attn_bump)
    ctx = T.matmul(attn, split(v))
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d_model))
    z = z + T.matmul(ctx, params.w_o)

    h2 = T.layer_norm(z, params.ln2_g, params.ln2_b)
    mlp = T.matmul(T.gelu(T.matmul(h2, params.w_fc1)), params.w_fc2)
    return z + mlp


def model_forward(images: np.ndarray, params: VitParams, config: ModelConfig,
                  traces: list[AttentionTrace] | None = None,
                  attn_bumps: dict[int, np.ndarray] | None = None) -> Tensor:
    """Full forward pass to (B, num_classes) logits."""
    z = patchify(images, config, params.embed)
    for layer, blk in enumerate(params.blocks):
        trace = None
        if traces is not None:
            trace = AttentionTrace(layer)
            traces.append(trace)
        bump = attn_bumps.get(layer) if attn_bumps else None
        z = block_forward(z, blk, config.heads, trace=trace, attn_bump=bump)
    z = T.layer_norm(z, params.ln_f_g, params.ln_f_b)
    cls = z[:, 0, :]
    return T.matmul(cls, params.head_w) + params.head_b


class VisionTransformer:
    """Config plus parameters, with the forward pass as a method."""

    def __init__(self, config: ModelConfig, params: VitParams):
        if len(params.blocks) != config.depth:
            raise ContractError(
                f"params carry {len(params.blocks)} blocks, config says "
                f"{config.depth}")
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "VisionTransformer":
        return cls(config, init_params(config, seed))

    def forward(self, images: np.ndarray,
                traces: list[AttentionTrace] | None = None,
                attn_bumps: dict[int, np.ndarray] | None = None) -> Tensor:
        return model_forward(images, self.params, self.config,
                             traces=traces, attn_bumps=attn_bumps)

    def named_parameters(self):
        return self.params.named_parameters()

    def frozen_copy(self) -> "VisionTransformer":
        """A gradient-free deep copy, e.g. for use as a distillation teacher."""
        return VisionTransformer(self.config,
                                 clone_params(self.params, requires_grad=False))


def clone_params(params: VitParams, requires_grad: bool = True) -> VitParams:
    def c(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=requires_grad)

    return VitParams(
        embed=PatchEmbedParams(w=c(params.embed.w), b=c(params.embed.b),
                               cls=c(params.embed.cls), pos=c(params.embed.pos)),
        blocks=[BlockParams(**{name: c(t) for name, t in blk.named()})
                for blk in params.blocks],
        ln_f_g=c(params.ln_f_g), ln_f_b=c(params.ln_f_b),
        head_w=c(params.head_w), head_b=c(params.head_b),
    )


def params_from_named(config: ModelConfig, arrays: dict[str, np.ndarray],
                      requires_grad: bool = True) -> VitParams:
    """Rebuild a parameter tree from the dict produced by
    ``dict(params.named_parameters())`` (values may be raw arrays)."""
    def take(name: str) -> Tensor:
        try:
            value = arrays[name]
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None
        data = value.data if isinstance(value, Tensor) else value
        return Tensor(np.asarray(data, dtype=np.float64).copy(),
                      requires_grad=requires_grad)

    return VitParams(
        embed=PatchEmbedParams(w=take("embed.w"), b=take("embed.b"),
                               cls=take("embed.cls"), pos=take("embed.pos")),
        blocks=[
            BlockParams(**{name: take(f"block{i}.{name}")
                           for name, _ in BlockParams.__dataclass_fields__.items()})
            for i in range(config.depth)
        ],
        ln_f_g=take("ln_f.g"), ln_f_b=take("ln_f.b"),
        head_w=take("head.w"), head_b=take("head.b"),
    )
