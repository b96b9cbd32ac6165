"""Trainable feature extractors with hand-written forward/backward passes.

Two small reference backbones sit behind one contract: ``mlp-2`` (two dense
layers with a relu between, for vector data) and ``conv-4`` (four conv3x3 +
relu + maxpool blocks, global average pooling, and a linear projection, for
small images). Both are float64 throughout and expose exact analytic
parameter gradients, which the finite-difference harness verifies.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import numpy as np

from .episodes import DatasetSplit
from .exceptions import (
    CheckpointError,
    DivergenceError,
    InvalidArgument,
    ShapeMismatch,
)

ARCHS = ("mlp-2", "conv-4")

CHECKPOINT_FORMAT = "epicon-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    arch: str = "mlp-2"
    embed_dim: int = 64
    input_shape: tuple[int, ...] = (64,)
    hidden_dim: int = 64  # mlp-2 only
    channels: int = 32  # conv-4 only
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.arch not in ARCHS:
            raise InvalidArgument(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.embed_dim < 2:
            raise InvalidArgument("embed_dim must be >= 2")
        if self.arch == "mlp-2" and len(self.input_shape) != 1:
            raise InvalidArgument("mlp-2 expects a flat (dim,) input shape")
        if self.arch == "conv-4":
            if len(self.input_shape) != 3:
                raise InvalidArgument("conv-4 expects a (C, H, W) input shape")
            _, h, w = self.input_shape
            if h % 16 != 0 or w % 16 != 0:
                raise InvalidArgument("conv-4 needs H and W divisible by 16")


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "EncoderState":
        return EncoderState(
            copy.deepcopy(self.config),
            {k: v.copy() for k, v in self.params.items()},
            self.step,
        )


def init_encoder(config: EncoderConfig) -> EncoderState:
    rng = np.random.default_rng(config.seed)
    if config.arch == "mlp-2":
        din = config.input_shape[0]
        h = config.hidden_dim
        params = {
            "w1": rng.normal(0.0, np.sqrt(2.0 / din), size=(din, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, np.sqrt(2.0 / h), size=(h, config.embed_dim)),
            "b2": np.zeros(config.embed_dim),
        }
    else:
        c_in = config.input_shape[0]
        c = config.channels
        params = {}
        for i in range(4):
            fan_in = (c_in if i == 0 else c) * 9
            params[f"conv{i}_w"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=(c, c_in if i == 0 else c, 3, 3)
            )
            params[f"conv{i}_b"] = np.zeros(c)
        params["proj_w"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(c, config.embed_dim))
        params["proj_b"] = np.zeros(config.embed_dim)
    return EncoderState(config, params, step=0)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _check_batch(config: EncoderConfig, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if tuple(x.shape[1:]) != config.input_shape:
        raise ShapeMismatch(
            f"batch shape {x.shape[1:]} does not match input shape {config.input_shape}"
        )
    return x


def forward(config: EncoderConfig, params: dict, batch: np.ndarray):
    """Embeddings plus the cache the backward pass needs."""
    x = _check_batch(config, batch)
    if config.arch == "mlp-2":
        a1 = x @ params["w1"] + params["b1"]
        hidden = np.maximum(a1, 0.0)
        z = hidden @ params["w2"] + params["b2"]
        return z, ("mlp", x, a1, hidden)
    return _conv4_forward(params, x)


def backward(config: EncoderConfig, params: dict, cache, d_z: np.ndarray) -> dict:
    """Parameter gradients for the cached forward pass."""
    if cache[0] == "mlp":
        _, x, a1, hidden = cache
        grads = {
            "w2": hidden.T @ d_z,
            "b2": d_z.sum(axis=0),
        }
        d_hidden = d_z @ params["w2"].T
        d_a1 = d_hidden * (a1 > 0.0)
        grads["w1"] = x.T @ d_a1
        grads["b1"] = d_a1.sum(axis=0)
        return grads
    return _conv4_backward(params, cache, d_z)


def encode(state: EncoderState, batch: np.ndarray) -> np.ndarray:
    """Deterministic (B, embed_dim) embeddings for a batch."""
    z, _ = forward(state.config, state.params, batch)
    return z


def _im2col(x_padded: np.ndarray, h: int, w: int) -> np.ndarray:
    # (B, C, H+2, W+2) -> (B, H*W, C*9) patch matrix for 3x3 kernels
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (3, 3), axis=(2, 3))
    b, c = x_padded.shape[0], x_padded.shape[1]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im(d_cols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    dxp = np.zeros((b, c, h + 2, w + 2))
    d = d_cols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + w] += d[:, :, :, :, i, j]
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def _conv4_forward(params: dict, x: np.ndarray):
    caches = []
    cur = x
    for i in range(4):
        b, c_in, h, w = cur.shape
        w_flat = params[f"conv{i}_w"].reshape(params[f"conv{i}_w"].shape[0], -1)
        xp = np.pad(cur, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _im2col(xp, h, w)
        a = cols @ w_flat.T + params[f"conv{i}_b"]  # (B, H*W, Cout)
        act = np.maximum(a, 0.0)
        c_out = w_flat.shape[0]
        act_img = act.transpose(0, 2, 1).reshape(b, c_out, h, w)
        hh, ww = h // 2, w // 2
        tiles = (
            act_img.reshape(b, c_out, hh, 2, ww, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c_out, hh, ww, 4)
        )
        pick = tiles.argmax(axis=-1)
        pooled = np.take_along_axis(tiles, pick[..., None], axis=-1)[..., 0]
        caches.append((cols, a > 0.0, pick, (b, c_in, h, w)))
        cur = pooled
    gap_in = cur
    z0 = gap_in.mean(axis=(2, 3))
    z = z0 @ params["proj_w"] + params["proj_b"]
    caches.append((gap_in.shape, z0))
    return z, ("conv", caches)


def _conv4_backward(params: dict, cache, d_z: np.ndarray) -> dict:
    _, caches = cache
    gap_shape, z0 = caches[-1]
    grads = {
        "proj_w": z0.T @ d_z,
        "proj_b": d_z.sum(axis=0),
    }
    d_z0 = d_z @ params["proj_w"].T
    b, c_out, hh, ww = gap_shape
    d_cur = np.broadcast_to(
        d_z0[:, :, None, None] / (hh * ww), gap_shape
    ).copy()
    for i in reversed(range(4)):
        cols, relu_mask, pick, (bb, c_in, h, w) = caches[i]
        # un-pool: route the gradient to each tile's argmax slot
        d_tiles = np.zeros((bb, c_out, h // 2, w // 2, 4))
        np.put_along_axis(d_tiles, pick[..., None], d_cur[..., None], axis=-1)
        d_act_img = (
            d_tiles.reshape(bb, c_out, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bb, c_out, h, w)
        )
        d_act = d_act_img.reshape(bb, c_out, h * w).transpose(0, 2, 1)
        d_a = d_act * relu_mask
        w_flat = params[f"conv{i}_w"].reshape(c_out, -1)
        grads[f"conv{i}_w"] = np.einsum("bmo,bmk->ok", d_a, cols).reshape(
            params[f"conv{i}_w"].shape
        )
        grads[f"conv{i}_b"] = d_a.sum(axis=(0, 1))
        if i > 0:
            d_cols = d_a @ w_flat
            d_cur = _col2im(d_cols, bb, c_in, h, w)
    return grads


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def pretrain(
    state: EncoderState,
    base_split: DatasetSplit,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.9,
) -> EncoderState:
    """Supervised warm-up over all base classes with a throwaway linear head.

    Plain SGD with momentum on encoder + head; the head is discarded and the
    updated encoder returned. Aborts with :class:`DivergenceError` if the
    loss goes non-finite.
    """
    if len(base_split) == 0:
        raise InvalidArgument("base split is empty")
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise InvalidArgument("need epochs >= 0, batch_size >= 1, lr > 0")
    out = state.copy()
    if epochs == 0:
        return out

    num_classes = base_split.num_classes
    d = out.config.embed_dim
    head = {
        "head_w": rng.normal(0.0, np.sqrt(1.0 / d), size=(d, num_classes)),
        "head_b": np.zeros(num_classes),
    }
    velocity = {k: np.zeros_like(v) for k, v in out.params.items()}
    velocity.update({k: np.zeros_like(v) for k, v in head.items()})

    n = len(base_split)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = base_split.samples[idx]
            yb = base_split.labels[idx]
            z, fcache = forward(out.config, out.params, xb)
            logits = z @ head["head_w"] + head["head_b"]
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = -log_probs[np.arange(len(idx)), yb].mean()
            if not np.isfinite(loss):
                raise DivergenceError(f"pre-training loss became non-finite: {loss}")

            g_logits = np.exp(log_probs)
            g_logits[np.arange(len(idx)), yb] -= 1.0
            g_logits /= len(idx)
            grads = backward(out.config, out.params, fcache, g_logits @ head["head_w"].T)
            grads["head_w"] = z.T @ g_logits
            grads["head_b"] = g_logits.sum(axis=0)

            for key, grad in grads.items():
                tgt = head if key.startswith("head_") else out.params
                velocity[key] = momentum * velocity[key] + grad
                tgt[key] = tgt[key] - lr * velocity[key]
            out.step += 1
    return out


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_encoder_checkpoint(path, state: EncoderState, extra_meta: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "encoder",
        "config": asdict(state.config),
        "step": state.step,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param:{k}": v for k, v in state.params.items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_encoder_checkpoint(path, expected_config: EncoderConfig | None = None) -> EncoderState:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("kind") != "encoder":
                raise CheckpointError(f"not an encoder checkpoint: {path}")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
            cfg_dict = dict(meta["config"])
            cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
            config = EncoderConfig(**cfg_dict)
            params = {
                k[len("param:") :]: data[k] for k in data.files if k.startswith("param:")
            }
            state = EncoderState(config, params, int(meta["step"]))
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if expected_config is not None and asdict(expected_config) != asdict(config):
        raise CheckpointError(
            "checkpoint config does not match the expected encoder config"
        )
    return state
