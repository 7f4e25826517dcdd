"""The KDI convolutional network and the KDS convolutional-recurrent network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .ingest import N_KEYS
from .nnengine import Network

KDI_SHAPE = (5, N_KEYS, N_KEYS)
EMBED_SLICE = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CnnConfig:
    kernel: int = 3
    stage_channels: tuple = (32, 64)
    fc_sizes: tuple = (256, 64, 1)
    dropout_rate: float = 0.5

    def to_dict(self):
        return {"kind": "cnn", **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        for k in ("stage_channels", "fc_sizes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class CnnRnnConfig:
    conv_kernel: tuple = (2, 8)
    conv_filters: int = 32
    rnn_kind: str = "gru"
    rnn_layers: int = 2
    rnn_hidden: int = 64

    def to_dict(self):
        d = asdict(self)
        d["conv_kernel"] = list(self.conv_kernel)
        return {"kind": "cnn-rnn", **d}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        if "conv_kernel" in d:
            d["conv_kernel"] = tuple(d["conv_kernel"])
        return cls(**d)


def config_from_dict(d):
    return CnnRnnConfig.from_dict(d) if d.get("kind") == "cnn-rnn" else CnnConfig.from_dict(d)


def cnn_specs(cfg: CnnConfig, input_shape=KDI_SHAPE) -> list[dict]:
    k = cfg.kernel
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"CNN kernel must be a positive odd size, got {k}")
    if not cfg.fc_sizes or cfg.fc_sizes[-1] != 1:
        raise ConfigError("last fully connected layer must have one output")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError("dropout_rate must lie in [0, 1)")
    c, h, w = input_shape
    specs = []
    for out in cfg.stage_channels:
        if k > min(h, w):
            raise ConfigError(f"kernel {k}x{k} larger than the {h}x{w} feature map")
        specs += [
            {"kind": "Conv2d", "in_channels": c, "out_channels": out, "kernel": [k, k], "padding": "same"},
            {"kind": "ReLU"},
            {"kind": "Conv2d", "in_channels": out, "out_channels": out, "kernel": [k, k], "padding": "same"},
            {"kind": "ReLU"},
            {"kind": "MaxPool2d", "size": 2},
        ]
        c, h, w = out, h // 2, w // 2
    specs.append({"kind": "Flatten"})
    width = c * h * w
    hidden, last = cfg.fc_sizes[:-1], cfg.fc_sizes[-1]
    for units in hidden:
        specs += [{"kind": "Dense", "in_features": width, "units": units}, {"kind": "ReLU"}]
        width = units
    specs += [
        {"kind": "Dropout", "rate": cfg.dropout_rate},
        {"kind": "Dense", "in_features": width, "units": last},
        {"kind": "Sigmoid"},
    ]
    return specs


def build_cnn(cfg: CnnConfig = CnnConfig(), seed: int = 0, input_shape=KDI_SHAPE, dtype="float32") -> Network:
    """conv-relu-conv-relu-pool per stage, then FC layers, dropout, FC(1), sigmoid."""
    return Network(cnn_specs(cfg, input_shape), input_shape, seed=seed, dtype=dtype)


def cnn_rnn_specs(cfg: CnnRnnConfig, input_length: int, input_width: int) -> list[dict]:
    kh, kw = cfg.conv_kernel
    if input_length < kh:
        raise ConfigError(f"sequence length {input_length} shorter than kernel height {kh}")
    if cfg.rnn_kind not in ("rnn", "gru", "lstm"):
        raise ConfigError(f"unknown rnn kind {cfg.rnn_kind!r}")
    # kernels of width kw step across the embedding in strides of kw; the
    # width is zero-padded on the right up to a multiple of kw
    pad_right = (-input_width) % kw
    slices = math.ceil(input_width / kw)
    cell = {"rnn": "RNNCellStack", "gru": "GRUCellStack", "lstm": "LSTMCellStack"}[cfg.rnn_kind]
    return [
        {"kind": "Unsqueeze"},
        {"kind": "Conv2d", "in_channels": 1, "out_channels": cfg.conv_filters,
         "kernel": [kh, kw], "stride": [1, kw], "padding": [0, 0, 0, pad_right]},
        {"kind": "ReLU"},
        {"kind": "ToSequence"},
        {"kind": cell, "input_size": cfg.conv_filters * slices,
         "hidden_size": cfg.rnn_hidden, "num_layers": cfg.rnn_layers},
        {"kind": "Dense", "in_features": cfg.rnn_hidden, "units": 1},
        {"kind": "Sigmoid"},
    ]


def build_cnn_rnn(cfg: CnnRnnConfig = CnnRnnConfig(), input_length: int = 100, input_width: int = 48,
                  seed: int = 0, dtype="float32") -> Network:
    """Rectangular conv over the KDS, a recurrent stack on its output, FC(1), sigmoid."""
    specs = cnn_rnn_specs(cfg, input_length, input_width)
    return Network(specs, (input_length, input_width), seed=seed, dtype=dtype)


def build_model(config, input_shape, seed=0, dtype="float32") -> Network:
    if isinstance(config, CnnRnnConfig):
        if len(input_shape) != 2:
            raise ConfigError("cnn-rnn expects KDS input (L, W)")
        return build_cnn_rnn(config, input_shape[0], input_shape[1], seed, dtype)
    if len(input_shape) != 3:
        raise ConfigError("cnn expects KDI input (C, H, W)")
    return build_cnn(config, seed, tuple(input_shape), dtype)
