"""Networks: multi-scale CNN encoder, latent-seeded template decoder, and
per-point deformation / correction heads composed into one field.

The composed field at normalized point p with input volume X is

    logits(p) = template[p + deform(F(p))] + correct(F(p))

where F(p) is the point encoding (trilinearly sampled feature pyramid
plus raw coordinates), deform is tanh-bounded so the displaced point
stays finite, the displaced point is clamped to the template cube, and
the template grid is a frozen logits volume produced by the template
decoder from its trainable latent.

Both heads end in zero-initialized layers: a fresh pipeline is exactly
the identity on the template (deform 0, correct 0), which pins the
starting point of stage-two training and makes the template path
testable in isolation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .nn import CheckpointError, Parameter, Tensor, load_arrays, ops, save_arrays


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    channels: tuple[int, ...] = (16, 32, 64, 128)
    slope: float = 0.1

    def __post_init__(self):
        if self.in_channels < 1 or not self.channels:
            raise ValueError("encoder needs inputs and at least one stage")


@dataclass(frozen=True)
class TemplateConfig:
    num_classes: int
    latent_dim: int = 64
    resolution: int = 32
    channels: tuple[int, ...] = (32, 16, 8, 8)  # seed stage then one per x2 upsample
    seed_side: int = 4
    slope: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("template needs background plus at least one class")
        ups = len(self.channels) - 1
        if self.seed_side * 2**ups != self.resolution:
            raise ValueError(
                f"channels {self.channels} give resolution {self.seed_side * 2 ** ups}, "
                f"want {self.resolution}"
            )


@dataclass(frozen=True)
class HeadConfig:
    hidden: tuple[int, ...] = (96, 96)
    slope: float = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig
    template: TemplateConfig
    deform: HeadConfig = HeadConfig()
    correct: HeadConfig = HeadConfig()

    @property
    def feature_length(self) -> int:
        return sum(self.encoder.channels) + 3

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        def tup(d, *keys):
            d = dict(d)
            for k in keys:
                d[k] = tuple(d[k])
            return d

        return cls(
            encoder=EncoderConfig(**tup(obj["encoder"], "channels")),
            template=TemplateConfig(**tup(obj["template"], "channels")),
            deform=HeadConfig(**tup(obj["deform"], "hidden")),
            correct=HeadConfig(**tup(obj["correct"], "hidden")),
        )


def _he_conv(rng, out_c, in_c, k):
    std = np.sqrt(2.0 / (in_c * k**3))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k, k))


def _he_linear(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Encoder:
    """Feature pyramid: full-resolution stage then stride-2 stages."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params: list[Parameter] = []
        in_c = config.in_channels
        for i, out_c in enumerate(config.channels):
            w = Parameter(f"enc.stage{i}.w", _he_conv(rng, out_c, in_c, 3))
            b = Parameter(f"enc.stage{i}.b", np.zeros(out_c))
            self.params += [w, b]
            in_c = out_c

    def forward(self, x: Tensor) -> list[Tensor]:
        """x is (c, d, h, w); returns one (c_i, d_i, h_i, w_i) level per stage."""
        cur = ops.reshape(x, (1, *x.shape))
        levels = []
        for i in range(len(self.config.channels)):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            stride = 1 if i == 0 else 2
            cur = ops.leaky_relu(ops.conv3d(cur, w, b, stride=stride, padding=1), self.config.slope)
            levels.append(ops.reshape(cur, cur.shape[1:]))
        return levels


class TemplateNet:
    """Decodes a trainable latent into a logits grid (num_classes, r, r, r)."""

    def __init__(self, config: TemplateConfig, rng: np.random.Generator):
        self.config = config
        c = config
        seed_elems = c.channels[0] * c.seed_side**3
        self.latent = Parameter("tmpl.latent", rng.normal(0.0, 0.1, size=c.latent_dim))
        self.fc_w = Parameter("tmpl.fc.w", _he_linear(rng, c.latent_dim, seed_elems))
        self.fc_b = Parameter("tmpl.fc.b", np.zeros(seed_elems))
        self.stage_params: list[Parameter] = []
        for i in range(1, len(c.channels)):
            w = Parameter(f"tmpl.stage{i}.w", _he_conv(rng, c.channels[i], c.channels[i - 1], 3))
            b = Parameter(f"tmpl.stage{i}.b", np.zeros(c.channels[i]))
            self.stage_params += [w, b]
        self.head_w = Parameter("tmpl.head.w", _he_conv(rng, c.num_classes, c.channels[-1], 1))
        self.head_b = Parameter("tmpl.head.b", np.zeros(c.num_classes))

    def parameters(self) -> list[Parameter]:
        return [self.latent, self.fc_w, self.fc_b, *self.stage_params, self.head_w, self.head_b]

    def generate(self) -> Tensor:
        c = self.config
        seed = ops.linear(ops.reshape(self.latent, (1, c.latent_dim)), self.fc_w, self.fc_b)
        cur = ops.reshape(seed, (1, c.channels[0], c.seed_side, c.seed_side, c.seed_side))
        for i in range(1, len(c.channels)):
            w, b = self.stage_params[2 * (i - 1)], self.stage_params[2 * (i - 1) + 1]
            cur = ops.upsample2(cur)
            cur = ops.leaky_relu(ops.conv3d(cur, w, b, stride=1, padding=1), c.slope)
        out = ops.conv3d(cur, self.head_w, self.head_b, stride=1, padding=0)
        return ops.reshape(out, out.shape[1:])

    def grid(self) -> np.ndarray:
        """Frozen logits volume for use after pretraining."""
        return self.generate().data.copy()


class PointMLP:
    """Small per-point head over the point encoding; the output layer starts
    at zero so the head is initially silent."""

    def __init__(self, name: str, in_features: int, out_features: int, config: HeadConfig, rng):
        self.name = name
        self.config = config
        self.params: list[Parameter] = []
        fan = in_features
        for i, width in enumerate(config.hidden):
            w = Parameter(f"{name}.layer{i}.w", _he_linear(rng, fan, width))
            b = Parameter(f"{name}.layer{i}.b", np.zeros(width))
            self.params += [w, b]
            fan = width
        self.params += [
            Parameter(f"{name}.head.w", np.zeros((fan, out_features))),
            Parameter(f"{name}.head.b", np.zeros(out_features)),
        ]

    def forward(self, x: Tensor) -> Tensor:
        n_hidden = len(self.config.hidden)
        for i in range(n_hidden):
            x = ops.leaky_relu(
                ops.linear(x, self.params[2 * i], self.params[2 * i + 1]), self.config.slope
            )
        return ops.linear(x, self.params[2 * n_hidden], self.params[2 * n_hidden + 1])


def point_encoding(levels: list[Tensor], coords: Tensor) -> Tensor:
    """Concatenate trilinear samples of every pyramid level with the raw
    coordinates; differentiable in the levels and in coords."""
    pieces = [ops.trilinear(level, coords) for level in levels]
    pieces.append(coords)
    return ops.concat(pieces, axis=1)


class Pipeline:
    """Encoder + frozen template grid + deformation and correction heads."""

    def __init__(self, config: PipelineConfig, template_grid: np.ndarray, rng: np.random.Generator):
        k1 = config.template.num_classes
        r = config.template.resolution
        if template_grid.shape != (k1, r, r, r):
            raise ValueError(f"template grid {template_grid.shape} != {(k1, r, r, r)}")
        self.config = config
        self.template_grid = np.asarray(template_grid, dtype=np.float64)
        self.encoder = Encoder(config.encoder, rng)
        feat = config.feature_length
        self.deform = PointMLP("deform", feat, 3, config.deform, rng)
        self.correct = PointMLP("correct", feat, k1, config.correct, rng)

    def parameters(self) -> list[Parameter]:
        return [*self.encoder.params, *self.deform.params, *self.correct.params]

    def encode_volume(self, x: np.ndarray) -> list[Tensor]:
        return self.encoder.forward(Tensor(x))

    def forward_points(self, levels: list[Tensor], coords: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (logits (n, classes), displacement (n, 3)) at coords."""
        c = Tensor(np.asarray(coords, dtype=np.float64))
        enc = point_encoding(levels, c)
        disp = ops.tanh(self.deform.forward(enc))
        moved = ops.clamp(ops.add(c, disp), -1.0, 1.0)
        t_logits = ops.trilinear(Tensor(self.template_grid), moved)
        c_logits = self.correct.forward(enc)
        return ops.add(t_logits, c_logits), disp


def save_pipeline(path, pipeline: Pipeline) -> None:
    arrays = {p.name: p.data for p in pipeline.parameters()}
    arrays["template.grid"] = pipeline.template_grid
    save_arrays(path, arrays, {"kind": "pipeline", "config": pipeline.config.to_json()})


def load_pipeline(path) -> Pipeline:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "pipeline":
        raise CheckpointError(f"{path}: not a pipeline checkpoint")
    config = PipelineConfig.from_json(meta["config"])
    pipe = Pipeline(config, arrays["template.grid"], np.random.default_rng(0))
    for p in pipe.parameters():
        if p.name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {p.name}")
        if arrays[p.name].shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name}")
        p.data = arrays[p.name]
    return pipe


def save_template(path, net: TemplateNet) -> None:
    arrays = {p.name: p.data for p in net.parameters()}
    save_arrays(path, arrays, {"kind": "template", "config": dataclasses.asdict(net.config)})


def load_template(path) -> TemplateNet:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "template":
        raise CheckpointError(f"{path}: not a template checkpoint")
    cfg_dict = dict(meta["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    config = TemplateConfig(**cfg_dict)
    net = TemplateNet(config, np.random.default_rng(0))
    for p in net.parameters():
        if p.name not in arrays or arrays[p.name].shape != p.data.shape:
            raise CheckpointError(f"{path}: bad or missing parameter {p.name}")
        p.data = arrays[p.name]
    return net
