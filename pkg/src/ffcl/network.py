"""Block-stack models, embedding taps and the binary classifier head.

Blocks are indexed from 0. Each block owns its weight and bias outright, so
a loss on block ``i``'s detached output can only ever reach block ``i``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, SpecError
from .tensor import (
    Tensor,
    add,
    bias_add,
    conv2d,
    flatten,
    global_avg_pool,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    transpose,
)

EMBEDDINGS = ("gap", "flatten")


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "conv" | "linear"
    out: int  # output channels (conv) or features (linear)
    kernel: int = 3
    stride: int = 1
    use_residual: bool = False

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_BACKBONE = (
    BlockSpec("conv", 8, 3, 1),
    BlockSpec("conv", 16, 3, 2),
    BlockSpec("conv", 32, 3, 2),
    BlockSpec("conv", 64, 3, 2),
)


@dataclass
class Block:
    spec: BlockSpec
    weight: Tensor
    bias: Tensor
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _out_shape(spec: BlockSpec, in_shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if spec.out < 1 or spec.kernel < 1 or spec.stride < 1:
        raise SpecError(f"block {index}: out, kernel and stride must be positive ({spec})")
    if spec.kind == "conv":
        if len(in_shape) != 3:
            raise SpecError(f"block {index}: conv block cannot follow a flat input of shape {in_shape}")
        c, h, w = in_shape
        p = spec.padding
        if spec.kernel > h + 2 * p or spec.kernel > w + 2 * p:
            raise SpecError(f"block {index}: kernel {spec.kernel} larger than padded input {h + 2 * p}x{w + 2 * p}")
        shape = (spec.out, (h + 2 * p - spec.kernel) // spec.stride + 1, (w + 2 * p - spec.kernel) // spec.stride + 1)
    elif spec.kind == "linear":
        shape = (spec.out,)
    else:
        raise SpecError(f"block {index}: unknown kind {spec.kind!r}")
    if spec.use_residual and shape != tuple(in_shape):
        raise SpecError(f"block {index}: residual needs matching shapes, got {tuple(in_shape)} -> {shape}")
    return shape


class BlockStack:
    """Ordered blocks B_0..B_{n-1}, each followed by ReLU."""

    def __init__(self, blocks: list[Block], input_shape: Sequence[int], embedding: str = "gap"):
        if embedding not in EMBEDDINGS:
            raise SpecError(f"embedding must be one of {EMBEDDINGS}, got {embedding!r}")
        self.blocks = blocks
        self.input_shape = tuple(int(v) for v in input_shape)
        self.embedding = embedding

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def specs(self) -> list[BlockSpec]:
        return [b.spec for b in self.blocks]

    @property
    def embedding_dim(self) -> int:
        return self.tap_dim(self.n - 1)

    def tap_dim(self, i: int) -> int:
        shape = self.blocks[i].out_shape
        if len(shape) == 1 or self.embedding == "gap":
            return shape[0]
        return int(np.prod(shape))

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def block_parameters(self, i: int) -> list[Tensor]:
        return self.blocks[i].parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [(f"block{i}.weight", b.weight), (f"block{i}.bias", b.bias)]
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def spec_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "embedding": self.embedding,
            "blocks": [s.to_dict() for s in self.specs],
        }

    def astype(self, dtype) -> "BlockStack":
        """Deep copy with parameters cast to ``dtype``."""
        blocks = [
            Block(b.spec, Tensor(b.weight.data, True, dtype), Tensor(b.bias.data, True, dtype), b.in_shape, b.out_shape)
            for b in self.blocks
        ]
        return BlockStack(blocks, self.input_shape, self.embedding)

    def copy(self) -> "BlockStack":
        return self.astype(self.blocks[0].weight.dtype)


def build_model(
    specs: Sequence[BlockSpec],
    input_shape: Sequence[int],
    seed: int,
    embedding: str = "gap",
) -> BlockStack:
    """He-uniform weights and zero biases, drawn block by block from ``seed``."""
    if not specs:
        raise SpecError("model needs at least one block")
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in input_shape)
    blocks = []
    for i, spec in enumerate(specs):
        out_shape = _out_shape(spec, shape, i)
        if spec.kind == "conv":
            fan_in = shape[0] * spec.kernel * spec.kernel
            wshape = (spec.out, shape[0], spec.kernel, spec.kernel)
        else:
            fan_in = int(np.prod(shape))
            wshape = (spec.out, fan_in)
        bound = np.sqrt(6.0 / fan_in)
        weight = Tensor(rng.uniform(-bound, bound, size=wshape), requires_grad=True)
        bias = Tensor(np.zeros(spec.out), requires_grad=True)
        blocks.append(Block(spec, weight, bias, shape, out_shape))
        shape = out_shape
    return BlockStack(blocks, input_shape, embedding)


def block_preactivation(stack: BlockStack, i: int, x: Tensor) -> Tensor:
    """Block ``i``'s output before the ReLU (residual included)."""
    block = stack.blocks[i]
    if tuple(x.shape[1:]) != block.in_shape:
        raise ShapeError(f"block {i} expects input [N, {block.in_shape}], got {x.shape}")
    spec = block.spec
    if spec.kind == "conv":
        z = conv2d(x, block.weight, block.bias, stride=spec.stride, padding=spec.padding)
    else:
        flat = flatten(x) if x.data.ndim > 2 else x
        z = bias_add(matmul(flat, transpose(block.weight)), block.bias)
        if spec.use_residual:
            x = flat
    if spec.use_residual:
        z = add(z, x)
    return z


def forward_block(stack: BlockStack, i: int, x: Tensor, detach_input: bool = False) -> Tensor:
    if not 0 <= i < stack.n:
        raise IndexError(f"block index {i} out of range for {stack.n} blocks")
    if detach_input:
        x = x.detach()
    return relu(block_preactivation(stack, i, x))


def tap(stack: BlockStack, h: Tensor) -> Tensor:
    """Turn a block output into an embedding [N, D]."""
    if h.data.ndim == 2:
        return h
    if stack.embedding == "gap":
        return global_avg_pool(h)
    return flatten(h)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def embed_at_block(stack: BlockStack, i: int, x) -> Tensor:
    """Embedding of block ``i``; gradients reach only block ``i``."""
    h = _as_input(x)
    with no_grad():
        for j in range(i):
            h = forward_block(stack, j, h)
    return tap(stack, forward_block(stack, i, h, detach_input=True))


def embed_global(stack: BlockStack, x) -> Tensor:
    """Final embedding with gradients flowing through every block."""
    h = _as_input(x)
    for j in range(stack.n):
        h = forward_block(stack, j, h)
    return tap(stack, h)


@dataclass
class ClassifierHead:
    weight: Tensor  # [1, D]
    bias: Tensor  # [1]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def init_head(dim: int, seed: int) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / dim)
    return ClassifierHead(
        Tensor(rng.uniform(-bound, bound, size=(1, dim)), requires_grad=True),
        Tensor(np.zeros(1), requires_grad=True),
    )


def classify(head: ClassifierHead, embedding: Tensor) -> Tensor:
    """Probabilities [N] = sigmoid(embedding . w^T + b)."""
    if embedding.data.ndim != 2 or embedding.shape[1] != head.dim:
        raise ShapeError(f"head expects [N, {head.dim}] embeddings, got {embedding.shape}")
    return sigmoid(reshape(logits(head, embedding), (embedding.shape[0],)))


def logits(head: ClassifierHead, embedding: Tensor) -> Tensor:
    return bias_add(matmul(embedding, transpose(head.weight)), head.bias)


def param_fingerprint(stack: BlockStack, i: int | None = None) -> list[str] | str:
    """sha256 over each block's parameter shapes and bytes."""

    def digest(block: Block) -> str:
        h = hashlib.sha256()
        for p in block.parameters():
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    if i is not None:
        return digest(stack.blocks[i])
    return [digest(b) for b in stack.blocks]
