# jointdiff/nn/denoiser.py
"""Time-conditioned encoder-decoder that denoises the joint (image, age, sex) tuple.

The scalar variables enter as constant input planes next to the image. The
image head reads the decoder output; the age and sex heads read the
bottleneck and finish with global average pooling.
"""

import logging
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from jointdiff.diffusion.categorical import category_levels
from jointdiff.errors import NonFiniteError, ShapeError
from jointdiff.nn import autograd as ag
from jointdiff.nn.autograd import Node

logger = logging.getLogger(__name__)

Params = Dict[str, Node]
ArrayOrNode = Union[np.ndarray, Node]

IN_CHANNELS = 3
KERNEL = 3


class DenoiserConfig(BaseModel):
    """Architecture of the denoiser."""

    model_config = ConfigDict(extra="forbid")

    side: int = Field(16, ge=2)
    base_channels: int = Field(32, ge=1)
    depth: int = Field(2, ge=1)
    temb_dim: int = Field(64, ge=2)
    n_categories: int = Field(2, ge=2)
    norm_groups: int = Field(8, ge=1)
    channel_mult: Optional[Tuple[int, ...]] = None
    precision: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_shapes(self) -> "DenoiserConfig":
        if self.side % (2 ** self.depth) != 0:
            raise ValueError(f"side {self.side} is not divisible by 2^depth = {2 ** self.depth}")
        if self.temb_dim % 2 != 0:
            raise ValueError(f"temb_dim must be even, got {self.temb_dim}")
        if self.channel_mult is not None:
            if len(self.channel_mult) != self.depth + 1:
                raise ValueError(f"channel_mult needs {self.depth + 1} entries, got {len(self.channel_mult)}")
            if any(m < 1 for m in self.channel_mult):
                raise ValueError(f"channel_mult entries must be positive, got {self.channel_mult}")
        for ch in self.channels:
            if ch % self.norm_groups != 0:
                raise ValueError(f"{self.norm_groups} norm groups do not divide {ch} channels")
        return self

    @property
    def channels(self) -> List[int]:
        """Channel width per resolution level, bottleneck last."""
        mult = self.channel_mult or (1,) + (2,) * self.depth
        return [self.base_channels * m for m in mult]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)


class DenoiserInput(NamedTuple):
    """Noisy joint state as the network sees it.

    image: (B, H, W); age: (B,); sex: (B, K) one-hot or soft; t: (B,) steps.
    """

    image: ArrayOrNode
    age: ArrayOrNode
    sex: ArrayOrNode
    t: np.ndarray


class DenoiserOutput(NamedTuple):
    eps_image: Node   # (B, H, W)
    eps_age: Node     # (B,)
    sex_logits: Node  # (B, K)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; slot 2i = sin(t / 10000^(2i/dim)), slot 2i+1 = cos.

    Accepts a scalar step (returns (dim,)) or an array of steps (returns (B, dim)).
    """
    if dim % 2 != 0 or dim < 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    steps = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = steps[..., None] * freqs
    emb = np.empty(steps.shape + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


# -- parameters ----------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator, dtype: np.dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: Params = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ag.leaf(value.astype(self.dtype), name=name)

    def conv(self, name: str, cin: int, cout: int, zero: bool = False) -> None:
        shape = (cout, cin, KERNEL, KERNEL)
        if zero:
            w = np.zeros(shape)
        else:
            w = self.rng.standard_normal(shape) / np.sqrt(cin * KERNEL * KERNEL)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout))

    def dense(self, name: str, din: int, dout: int) -> None:
        self._add(f"{name}.w", self.rng.standard_normal((din, dout)) / np.sqrt(din))
        self._add(f"{name}.b", np.zeros(dout))

    def norm(self, name: str, ch: int) -> None:
        self._add(f"{name}.gamma", np.ones(ch))
        self._add(f"{name}.beta", np.zeros(ch))

    def resblock(self, name: str, cin: int, cout: int, temb_dim: int) -> None:
        self.norm(f"{name}.norm1", cin)
        self.conv(f"{name}.conv1", cin, cout)
        self.dense(f"{name}.temb", temb_dim, cout)
        self.norm(f"{name}.norm2", cout)
        self.conv(f"{name}.conv2", cout, cout)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout)

    def head(self, name: str, ch: int, n_out: int, zero: bool) -> None:
        for j in range(2):
            self.norm(f"{name}.block{j}.norm", ch)
            self.conv(f"{name}.block{j}.conv", ch, ch)
        self.conv(f"{name}.proj", ch, n_out, zero=zero)


def init_params(config: DenoiserConfig, rng: np.random.Generator, zero_init_heads: bool = True) -> Params:
    """Fan-in scaled normal weights, zero biases, identity norms.

    The last layer of every head is zero when `zero_init_heads` is set, so a
    fresh network predicts all-zero noise and uniform logits.
    """
    ch = config.channels
    init = _Init(rng, config.dtype)
    init.conv("conv_in", IN_CHANNELS, ch[0])
    init.dense("temb.fc1", config.temb_dim, config.temb_dim)
    init.dense("temb.fc2", config.temb_dim, config.temb_dim)
    for i in range(config.depth):
        init.resblock(f"down{i}", ch[i], ch[i], config.temb_dim)
        init.conv(f"down{i}.conv", ch[i], ch[i + 1])
    init.resblock("mid", ch[-1], ch[-1], config.temb_dim)
    for i in reversed(range(config.depth)):
        init.resblock(f"up{i}", ch[i + 1] + ch[i], ch[i], config.temb_dim)
    init.norm("out.norm", ch[0])
    init.conv("out.conv", ch[0], 1, zero=zero_init_heads)
    init.head("age_head", ch[-1], 1, zero=zero_init_heads)
    init.head("sex_head", ch[-1], config.n_categories, zero=zero_init_heads)

    logger.debug(f"Initialized denoiser with {parameter_count(init.params)} parameters")
    return init.params


def parameter_count(params: Params) -> int:
    return int(sum(p.value.size for p in params.values()))


# -- forward -------------------------------------------------------------------

class _Forward:
    def __init__(self, params: Params, config: DenoiserConfig):
        self.p = params
        self.config = config
        self.stage = 0

    def check(self, node: Node, label: str) -> Node:
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"Non-finite activation at stage {self.stage} ({label})", stage=self.stage)
        self.stage += 1
        return node

    def conv(self, name: str, x: Node) -> Node:
        return ag.conv2d(x, self.p[f"{name}.w"], self.p[f"{name}.b"])

    def dense(self, name: str, x: Node) -> Node:
        b = self.p[f"{name}.b"]
        out = ag.matmul(x, self.p[f"{name}.w"])
        bias = ag.broadcast(ag.reshape(b, (1, b.shape[0])), out.shape)
        return ag.add(out, bias)

    def norm(self, name: str, x: Node) -> Node:
        return ag.group_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"], self.config.norm_groups)

    def resblock(self, name: str, x: Node, temb_act: Node) -> Node:
        h = self.conv(f"{name}.conv1", ag.silu(self.norm(f"{name}.norm1", x)))
        B, C, H, W = h.shape
        shift = ag.reshape(self.dense(f"{name}.temb", temb_act), (B, C, 1, 1))
        h = ag.add(h, ag.broadcast(shift, (B, C, H, W)))
        h = self.conv(f"{name}.conv2", ag.silu(self.norm(f"{name}.norm2", h)))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.w" in self.p else x
        return self.check(ag.add(h, skip), name)

    def head(self, name: str, x: Node) -> Node:
        h = x
        for j in range(2):
            h = self.conv(f"{name}.block{j}.conv", ag.silu(self.norm(f"{name}.block{j}.norm", h)))
        h = ag.add(h, x)
        pooled = ag.reduce_mean(self.conv(f"{name}.proj", h), axis=(2, 3))
        return self.check(pooled, name)


def _input_planes(inputs: DenoiserInput, config: DenoiserConfig) -> Node:
    dtype = config.dtype
    image = ag.as_node(inputs.image if isinstance(inputs.image, Node) else np.asarray(inputs.image, dtype=dtype))
    age = ag.as_node(inputs.age if isinstance(inputs.age, Node) else np.asarray(inputs.age, dtype=dtype))
    sex = ag.as_node(inputs.sex if isinstance(inputs.sex, Node) else np.asarray(inputs.sex, dtype=dtype))

    if image.value.ndim != 3 or image.shape[1:] != (config.side, config.side):
        raise ShapeError(f"image must be (B, {config.side}, {config.side}), got {image.shape}")
    B = image.shape[0]
    if age.shape != (B,):
        raise ShapeError(f"age must be ({B},), got {age.shape}")
    if sex.shape != (B, config.n_categories):
        raise ShapeError(f"sex must be ({B}, {config.n_categories}), got {sex.shape}")

    plane = (B, 1, config.side, config.side)
    levels = ag.constant(category_levels(config.n_categories).reshape(-1, 1), dtype=dtype)
    sex_value = ag.matmul(sex, levels)
    return ag.concat_channels(
        ag.reshape(image, plane),
        ag.broadcast(ag.reshape(age, (B, 1, 1, 1)), plane),
        ag.broadcast(ag.reshape(sex_value, (B, 1, 1, 1)), plane),
    )


def forward(inputs: DenoiserInput, params: Params, config: DenoiserConfig) -> DenoiserOutput:
    """Run the network on a batch of noisy joint states.

    Args:
        inputs: Encoded noisy state plus per-sample steps.
        params: Parameters from `init_params` or a checkpoint.
        config: Architecture the parameters were built for.

    Returns:
        Noise predictions for image and age, and logits for sex.
    """
    run = _Forward(params, config)
    x = run.check(_input_planes(inputs, config), "input")
    B = x.shape[0]

    steps = np.asarray(inputs.t)
    if steps.shape != (B,):
        raise ShapeError(f"t must hold one step per sample ({B},), got {steps.shape}")
    temb = ag.constant(time_embedding(steps, config.temb_dim), dtype=config.dtype)
    temb = run.dense("temb.fc2", ag.silu(run.dense("temb.fc1", temb)))
    temb_act = ag.silu(temb)

    h = run.check(run.conv("conv_in", x), "conv_in")
    skips = []
    for i in range(config.depth):
        h = run.resblock(f"down{i}", h, temb_act)
        skips.append(h)
        h = run.conv(f"down{i}.conv", ag.avg_pool2(h))
    bottleneck = run.resblock("mid", h, temb_act)

    h = bottleneck
    for i in reversed(range(config.depth)):
        h = ag.concat_channels(ag.upsample2(h), skips[i])
        h = run.resblock(f"up{i}", h, temb_act)

    out = run.conv("out.conv", ag.silu(run.norm("out.norm", h)))
    eps_image = ag.reshape(run.check(out, "out"), (B, config.side, config.side))
    eps_age = ag.reshape(run.head("age_head", bottleneck), (B,))
    sex_logits = run.head("sex_head", bottleneck)
    return DenoiserOutput(eps_image, eps_age, sex_logits)
