"""Feature extractor F(I, Theta): a small ReLU MLP plus a cosine classification head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EmbedderConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    embed_dim: int = 32
    num_classes: int = 200

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer sizes must be positive")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.embed_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            shapes[f"W{i}"] = (fan_in, fan_out)
            shapes[f"b{i}"] = (fan_out,)
        shapes["head"] = (self.num_classes, self.embed_dim)
        return shapes


@dataclass
class EmbedderParams:
    """Named parameter arrays.  ``guidance`` copies are read-only."""

    config: EmbedderConfig
    arrays: dict[str, np.ndarray]
    guidance: bool = False

    def __post_init__(self):
        expected = self.config.param_shapes()
        if set(expected) != set(self.arrays):
            raise ValueError(f"parameter names {sorted(self.arrays)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_dims)

    @property
    def head(self) -> np.ndarray:
        return self.arrays["head"]

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def with_head(self, head: np.ndarray) -> "EmbedderParams":
        """Trainable copy whose head is replaced (possibly with a new class count)."""
        cfg = EmbedderConfig(
            self.config.input_dim, self.config.hidden_dims, self.config.embed_dim, head.shape[0]
        )
        arrays = {k: v.copy() for k, v in self.arrays.items()}
        arrays["head"] = np.array(head, dtype=np.float64)
        return EmbedderParams(cfg, arrays)

    def equal(self, other: "EmbedderParams") -> bool:
        """Bit-level equality of every parameter array."""
        return self.config == other.config and all(
            self.arrays[k].tobytes() == other.arrays[k].tobytes() for k in self.arrays
        )

    def on_tape(self, tape: dc.Tape) -> dict[str, dc.Tensor]:
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}


def init_params(config: EmbedderConfig, seed: int) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(config.layer_dims):
        arrays[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    arrays["head"] = rng.normal(0.0, np.sqrt(1.0 / config.embed_dim), size=(config.num_classes, config.embed_dim))
    return EmbedderParams(config, arrays)


def freeze_guidance(params: EmbedderParams) -> EmbedderParams:
    arrays = {}
    for k, v in params.arrays.items():
        a = v.copy()
        a.setflags(write=False)
        arrays[k] = a
    return EmbedderParams(params.config, arrays, guidance=True)


def forward(obs, params: EmbedderParams | Mapping[str, dc.Tensor], tape: dc.Tape | None = None) -> dc.Tensor:
    """Raw embeddings for a batch of observations.

    ``params`` is either an :class:`EmbedderParams` (treated as constants) or
    the leaf mapping returned by :meth:`EmbedderParams.on_tape`.
    """
    if isinstance(params, EmbedderParams):
        tensors = {k: dc.Tensor(v, tape=tape) for k, v in params.arrays.items()}
    else:
        tensors = dict(params)
    n_layers = sum(1 for k in tensors if k.startswith("W"))
    x = obs if isinstance(obs, dc.Tensor) else dc.Tensor(obs, tape=tape)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise dc.ShapeError(f"forward: expected a nonempty B x input_dim batch, got shape {x.shape}")
    if x.shape[1] != tensors["W0"].shape[0]:
        raise dc.ShapeError(f"forward: batch shape {x.shape} does not match W0 shape {tensors['W0'].shape}")
    for i in range(n_layers):
        x = dc.add_rowvec(dc.matmul(x, tensors[f"W{i}"]), tensors[f"b{i}"])
        if i < n_layers - 1:
            x = dc.relu(x)
    return x


def embed(obs: np.ndarray, params: EmbedderParams) -> np.ndarray:
    """Plain numpy forward pass for evaluation; no tape."""
    x = np.asarray(obs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise dc.ShapeError(f"embed: batch shape {x.shape} does not match input_dim {params.config.input_dim}")
    for i in range(params.n_layers):
        x = x @ params.arrays[f"W{i}"] + params.arrays[f"b{i}"]
        if i < params.n_layers - 1:
            x = np.maximum(x, 0.0)
    return x


def save_checkpoint(path, params: EmbedderParams, extra: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "guidance": params.guidance,
        "extra": extra or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **params.arrays)


def load_checkpoint(path) -> tuple[EmbedderParams, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        cfg = EmbedderConfig(**header["config"])
        arrays = {k: np.array(z[k]) for k in z.files if k != "__header__"}
    params = EmbedderParams(cfg, arrays)
    if header.get("guidance"):
        params = freeze_guidance(params)
    return params, header.get("extra", {})
