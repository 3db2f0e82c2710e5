"""Two-branch embedding network built from the autodiff primitives.

The network is a ReLU MLP trunk followed by a projection head of ``L``
affine layers with ReLU between them (batchnorm after each hidden
projection affine when enabled), plus an optional two-layer predictor
and an optional momentum-averaged target copy.  ``forward`` runs either
the online branch (trainable, tape-connected) or the target branch,
whose output is always detached: with a momentum target the parameters
are the EMA copies, with stop-grad the online parameters are reused and
only the tape connection is severed, so both branches share one code
path and the stop-grad target is bit-identical to the online forward.

Batchnorm is composed from differentiable primitives, so its gradient
(including the terms through batch mean and variance) is exact.  In
training mode it normalizes by batch statistics (population variance)
and updates running statistics; in eval mode it applies the stored
running statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Value

__all__ = [
    "EncoderConfig",
    "EncoderState",
    "init_state",
    "forward",
    "predictor_forward",
    "momentum_update",
    "save_checkpoint",
    "load_checkpoint",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # fraction of the new batch statistic blended in
CHECKPOINT_VERSION = "VGSSL-CKPT-1"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 64
    proj_layers: int = 1
    proj_batchnorm: bool = False
    predictor: bool = False
    momentum_target: bool = False
    momentum: float = 0.99
    stop_grad_target: bool = False
    identity_projection: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.identity_projection:
            if self.embed_dim != self.trunk_out:
                raise ValueError(
                    f"identity projection needs embed_dim == trunk output "
                    f"({self.trunk_out}), got {self.embed_dim}"
                )
        elif self.proj_layers < 1:
            raise ValueError("projection head needs at least one layer")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")

    @property
    def trunk_out(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def has_target_branch(self) -> bool:
        return self.momentum_target or self.stop_grad_target


@dataclass
class EncoderState:
    params: dict[str, Value]
    target: dict[str, np.ndarray] | None
    bn_running: dict[str, np.ndarray] = field(default_factory=dict)
    target_bn_running: dict[str, np.ndarray] | None = None


def _affine_names(cfg: EncoderConfig) -> list[tuple[str, int, int]]:
    """(prefix, fan_in, fan_out) for every affine, in forward order."""
    out: list[tuple[str, int, int]] = []
    prev = cfg.input_dim
    for i, h in enumerate(cfg.hidden_dims):
        out.append((f"trunk.{i}", prev, h))
        prev = h
    if not cfg.identity_projection:
        for i in range(cfg.proj_layers):
            out.append((f"proj.{i}", prev, cfg.embed_dim))
            prev = cfg.embed_dim
    if cfg.predictor:
        out.append(("pred.0", cfg.embed_dim, cfg.embed_dim))
        out.append(("pred.1", cfg.embed_dim, cfg.embed_dim))
    return out


def _bn_sites(cfg: EncoderConfig) -> list[tuple[str, int]]:
    """(prefix, width) for every batchnorm, in forward order."""
    sites: list[tuple[str, int]] = []
    if cfg.proj_batchnorm and not cfg.identity_projection:
        for i in range(cfg.proj_layers - 1):
            sites.append((f"proj.{i}.bn", cfg.embed_dim))
    if cfg.predictor:
        sites.append(("pred.bn", cfg.embed_dim))
    return sites


def init_state(cfg: EncoderConfig, seed: int) -> EncoderState:
    """Fan-in uniform weights, zero biases, unit batchnorm, target = copy."""
    rng = np.random.default_rng(seed)
    params: dict[str, Value] = {}
    for prefix, fi, fo in _affine_names(cfg):
        limit = 1.0 / np.sqrt(fi)
        params[f"{prefix}.W"] = Value(rng.uniform(-limit, limit, size=(fi, fo)))
        params[f"{prefix}.b"] = Value(np.zeros(fo))
    bn_running: dict[str, np.ndarray] = {}
    for prefix, width in _bn_sites(cfg):
        params[f"{prefix}.gamma"] = Value(np.ones((1, width)))
        params[f"{prefix}.beta"] = Value(np.zeros((1, width)))
        bn_running[f"{prefix}.mean"] = np.zeros((1, width))
        bn_running[f"{prefix}.var"] = np.ones((1, width))
    target = None
    target_bn = None
    if cfg.momentum_target:
        target = {
            name: v.data.copy()
            for name, v in params.items()
            if not name.startswith("pred.")
        }
        target_bn = {
            name: a.copy() for name, a in bn_running.items() if not name.startswith("pred.")
        }
    return EncoderState(
        params=params, target=target, bn_running=bn_running, target_bn_running=target_bn
    )


def _batchnorm(
    x: Value,
    gamma: Value,
    beta: Value,
    running: dict[str, np.ndarray],
    prefix: str,
    training: bool,
    update_running: bool,
) -> Value:
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        xhat = centered / (var + BN_EPS).sqrt()
        if update_running:
            running[f"{prefix}.mean"] = (
                (1 - BN_MOMENTUM) * running[f"{prefix}.mean"] + BN_MOMENTUM * mu.data
            )
            running[f"{prefix}.var"] = (
                (1 - BN_MOMENTUM) * running[f"{prefix}.var"] + BN_MOMENTUM * var.data
            )
    else:
        mean = running[f"{prefix}.mean"]
        var = running[f"{prefix}.var"]
        xhat = (x - mean) / np.sqrt(var + BN_EPS)
    return xhat * gamma + beta


def forward(
    state: EncoderState,
    cfg: EncoderConfig,
    batch: np.ndarray | Value,
    branch: str = "online",
    training: bool = True,
) -> Value:
    """Embed a batch (N, input_dim) -> (N, embed_dim).

    ``branch='target'`` requires a momentum target or stop-grad target and
    returns a tape-detached constant.
    """
    x = batch if isinstance(batch, Value) else Value(batch)
    if x.data.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected batch of shape (N, {cfg.input_dim}), got {x.shape}")

    if branch == "online":
        params: dict[str, Value] = state.params
        running = state.bn_running
        update_running = training
    elif branch == "target":
        if not cfg.has_target_branch:
            raise ValueError("this encoder has no target branch")
        if cfg.momentum_target:
            params = {name: Value(a) for name, a in state.target.items()}
            running = state.target_bn_running
        else:  # stop-grad: same parameters, severed tape at the output
            params = state.params
            running = state.bn_running
        update_running = False
    else:
        raise ValueError(f"unknown branch {branch!r}")

    def affine(prefix: str, h: Value) -> Value:
        return h @ params[f"{prefix}.W"] + params[f"{prefix}.b"]

    for i in range(len(cfg.hidden_dims)):
        x = affine(f"trunk.{i}", x).relu()

    if not cfg.identity_projection:
        for i in range(cfg.proj_layers):
            x = affine(f"proj.{i}", x)
            if i < cfg.proj_layers - 1:
                if cfg.proj_batchnorm:
                    x = _batchnorm(
                        x,
                        params[f"proj.{i}.bn.gamma"],
                        params[f"proj.{i}.bn.beta"],
                        running,
                        f"proj.{i}.bn",
                        training,
                        update_running,
                    )
                x = x.relu()

    return x.detach() if branch == "target" else x


def predictor_forward(
    state: EncoderState, cfg: EncoderConfig, z: Value, training: bool = True
) -> Value:
    """Two-layer head on top of an online embedding, batchnorm + ReLU inside."""
    if not cfg.predictor:
        raise RuntimeError("encoder was built without a predictor")
    h = z @ state.params["pred.0.W"] + state.params["pred.0.b"]
    h = _batchnorm(
        h,
        state.params["pred.bn.gamma"],
        state.params["pred.bn.beta"],
        state.bn_running,
        "pred.bn",
        training,
        update_running=training,
    )
    h = h.relu()
    return h @ state.params["pred.1.W"] + state.params["pred.1.b"]


def momentum_update(state: EncoderState, cfg: EncoderConfig) -> None:
    """EMA step: target <- m * target + (1 - m) * online, stats included."""
    if not cfg.momentum_target or state.target is None:
        raise RuntimeError("no momentum target to update")
    m = cfg.momentum
    for name, tgt in state.target.items():
        state.target[name] = m * tgt + (1 - m) * state.params[name].data
    for name, tgt in state.target_bn_running.items():
        state.target_bn_running[name] = m * tgt + (1 - m) * state.bn_running[name]


# -- checkpointing ---------------------------------------------------------


def _tensor_map(state: EncoderState, extra_tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, v in state.params.items():
        out[f"params.{name}"] = v.data
    if state.target is not None:
        for name, a in state.target.items():
            out[f"target.{name}"] = a
    for name, a in state.bn_running.items():
        out[f"bn.{name}"] = a
    if state.target_bn_running is not None:
        for name, a in state.target_bn_running.items():
            out[f"target_bn.{name}"] = a
    for name, a in extra_tensors.items():
        out[f"extra.{name}"] = a
    return out


def save_checkpoint(
    path: str | Path,
    state: EncoderState,
    cfg: EncoderConfig,
    meta: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Single-file binary checkpoint: JSON header plus raw float64 buffers.

    Layout: 4-byte little-endian header length, UTF-8 JSON header listing
    every tensor's name, shape and byte offset, then the concatenated
    little-endian float64 buffers in manifest order.  ``meta`` holds small
    JSON-safe values (epoch counters, optimizer step); ``extra_tensors``
    holds optimizer moments keyed by parameter name.
    """
    tensors = _tensor_map(state, extra_tensors or {})
    manifest = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        a = tensors[name]
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "meta": meta or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(tensors[name].astype("<f8").tobytes())


def load_checkpoint(path: str | Path):
    """Inverse of ``save_checkpoint``.

    Returns (state, cfg, meta, extra_tensors).
    """
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        body = fh.read()
    conf = dict(header["config"])
    conf["hidden_dims"] = tuple(conf["hidden_dims"])
    cfg = EncoderConfig(**conf)
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        a = np.frombuffer(body, dtype="<f8", count=size, offset=start).reshape(shape)
        tensors[entry["name"]] = a.astype(np.float64)
    params = {
        name[len("params."):]: Value(a)
        for name, a in tensors.items()
        if name.startswith("params.")
    }
    target = {
        name[len("target."):]: a.copy()
        for name, a in tensors.items()
        if name.startswith("target.")
    } or None
    bn = {
        name[len("bn."):]: a.copy() for name, a in tensors.items() if name.startswith("bn.")
    }
    target_bn = {
        name[len("target_bn."):]: a.copy()
        for name, a in tensors.items()
        if name.startswith("target_bn.")
    } or None
    extra = {
        name[len("extra."):]: a.copy()
        for name, a in tensors.items()
        if name.startswith("extra.")
    }
    state = EncoderState(
        params=params, target=target, bn_running=bn, target_bn_running=target_bn
    )
    return state, cfg, header["meta"], extra
