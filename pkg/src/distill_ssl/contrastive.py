"""Momentum-contrastive learning: paired encoders, key queue, InfoNCE.

The query encoder learns by backpropagation; the key encoder tracks it as
an exponential moving average and feeds a FIFO queue of negative keys.
``moco_train_step`` and the distilled variant share one step core so a
zero distillation weight reproduces plain training bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, Frame, sample_view, view_stream
from .data import Batch
from .rng import STREAM_INIT, Rng
from .tensor import GraphError, ParamSet, ParameterError, Tensor


class ContractError(RuntimeError):
    """A state invariant was violated by the caller."""


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderConfig:
    """Small convolutional backbone plus a 2-layer MLP projection head."""

    in_channels: int = 1
    input_size: tuple[int, int] = (32, 32)
    conv_channels: tuple[int, int] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    pad: int = 1
    d_backbone: int = 64
    d: int = 32

    def param_shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        c1, c2 = self.conv_channels
        k = self.kernel_size
        return {
            "backbone": {
                "conv1.kernels": (c1, self.in_channels, k, k),
                "conv2.kernels": (c2, c1, k, k),
                "fc.weight": (c2, self.d_backbone),
                "fc.bias": (self.d_backbone,),
            },
            "head": {
                "fc1.weight": (self.d_backbone, self.d_backbone),
                "fc1.bias": (self.d_backbone,),
                "fc2.weight": (self.d_backbone, self.d),
                "fc2.bias": (self.d,),
            },
        }

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "input_size": list(self.input_size),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "pad": self.pad,
            "d_backbone": self.d_backbone,
            "d": self.d,
        }


@dataclass
class EncoderParams:
    backbone: ParamSet
    head: ParamSet
    cfg: EncoderConfig

    def clone(self) -> "EncoderParams":
        return EncoderParams(self.backbone.clone(), self.head.clone(), self.cfg)

    def copy_from(self, other: "EncoderParams") -> None:
        self.backbone.copy_from(other.backbone)
        self.head.copy_from(other.head)

    def zero_grad(self) -> None:
        self.backbone.zero_grad()
        self.head.zero_grad()


def _uniform_init(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return (rng.uniform(int(np.prod(shape))) * 2.0 * s - s).reshape(shape)


def init_encoder(cfg: EncoderConfig, rng: Rng) -> EncoderParams:
    """Fresh parameters, uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    Draw order is fixed (layer by layer, weights before biases) so a seed
    pins every parameter.
    """
    c1, c2 = cfg.conv_channels
    k = cfg.kernel_size
    stream = rng.derive(STREAM_INIT)
    backbone = ParamSet(
        {
            "conv1.kernels": _uniform_init(stream, (c1, cfg.in_channels, k, k), cfg.in_channels * k * k),
            "conv2.kernels": _uniform_init(stream, (c2, c1, k, k), c1 * k * k),
            "fc.weight": _uniform_init(stream, (c2, cfg.d_backbone), c2),
            "fc.bias": _uniform_init(stream, (cfg.d_backbone,), c2),
        }
    )
    head = ParamSet(
        {
            "fc1.weight": _uniform_init(stream, (cfg.d_backbone, cfg.d_backbone), cfg.d_backbone),
            "fc1.bias": _uniform_init(stream, (cfg.d_backbone,), cfg.d_backbone),
            "fc2.weight": _uniform_init(stream, (cfg.d_backbone, cfg.d), cfg.d_backbone),
            "fc2.bias": _uniform_init(stream, (cfg.d,), cfg.d_backbone),
        }
    )
    return EncoderParams(backbone, head, cfg)


def center_input(frames: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1] before the first convolution.

    Uncentered inputs couple every gradient through the shared DC
    component and stall training at desk scale.
    """
    return (np.asarray(frames, dtype=np.float64) - 0.5) * 2.0


def forward_backbone(enc: EncoderParams, x: Tensor) -> Tensor:
    bb = enc.backbone
    h = T.relu(T.conv2d(x, bb["conv1.kernels"], stride=enc.cfg.stride, pad=enc.cfg.pad))
    h = T.relu(T.conv2d(h, bb["conv2.kernels"], stride=enc.cfg.stride, pad=enc.cfg.pad))
    return T.affine(T.global_avg_pool(h), bb["fc.weight"], bb["fc.bias"])


def forward_head(enc: EncoderParams, features: Tensor) -> Tensor:
    hd = enc.head
    h = T.relu(T.affine(features, hd["fc1.weight"], hd["fc1.bias"]))
    return T.affine(h, hd["fc2.weight"], hd["fc2.bias"])


def encode(enc: EncoderParams, frames: np.ndarray, record_grads: bool = False) -> Tensor:
    """Unit-norm embeddings for a stacked B x C x H x W batch."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != enc.cfg.in_channels:
        raise T.ShapeError(
            f"encode expects B x {enc.cfg.in_channels} x H x W frames, got {frames.shape}"
        )
    if record_grads:
        if not T.recording():
            raise GraphError("record_grads=True requires an open Graph")
        return _encode_forward(enc, frames)
    with T.no_grad():
        return _encode_forward(enc, frames)


def _encode_forward(enc: EncoderParams, frames: np.ndarray) -> Tensor:
    x = T.constant(center_input(frames))
    return T.l2_normalize(forward_head(enc, forward_backbone(enc, x)))


# ---------------------------------------------------------------------------
# key queue


class KeyQueue:
    """Ring buffer of M unit-norm key embeddings with FIFO overwrite."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"bad queue geometry M={capacity}, d={dim}")
        self.rows = np.zeros((capacity, dim))
        self.ptr = 0
        self.filled = 0

    @property
    def capacity(self) -> int:
        return self.rows.shape[0]

    def push(self, keys: np.ndarray) -> None:
        m = self.capacity
        n = keys.shape[0]
        if keys.ndim != 2 or keys.shape[1] != self.rows.shape[1]:
            raise ContractError(f"keys {keys.shape} do not fit queue {self.rows.shape}")
        if m % n != 0:
            raise ContractError(f"batch size {n} must divide queue capacity {m}")
        norms = np.sqrt((keys * keys).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError(
                f"queue keys must be unit-norm, worst deviation {np.abs(norms - 1.0).max():.3e}"
            )
        end = self.ptr + n
        if end <= m:
            self.rows[self.ptr : end] = keys
        else:
            split = m - self.ptr
            self.rows[self.ptr :] = keys[:split]
            self.rows[: end - m] = keys[split:]
        self.ptr = end % m
        self.filled = min(self.filled + n, m)

    @property
    def warmed(self) -> bool:
        return self.filled >= self.capacity


def queue_push(queue: KeyQueue, keys: np.ndarray) -> None:
    queue.push(keys)


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> None:
    """theta_k <- m*theta_k + (1-m)*theta_q over backbone and head."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"momentum coefficient must be in [0, 1], got {m}")
    for key_set, query_set in ((key.backbone, query.backbone), (key.head, query.head)):
        _momentum_update_set(key_set, query_set, m)


def _momentum_update_set(key_set: ParamSet, query_set: ParamSet, m: float) -> None:
    if key_set.shapes() != query_set.shapes():
        raise ContractError(
            f"momentum update shape mismatch: {key_set.shapes()} vs {query_set.shapes()}"
        )
    if m == 1.0:  # exact endpoints stay bitwise
        return
    if m == 0.0:
        key_set.copy_from(query_set)
        return
    for name, kt in key_set.items():
        kt.data *= m
        kt.data += (1.0 - m) * query_set[name].data


# ---------------------------------------------------------------------------
# InfoNCE


def key_similarity_logits(q: Tensor, k_plus: np.ndarray, queue: KeyQueue) -> Tensor:
    """Per-row logits [q.k+, q.k_1, ..., q.k_M]; gradients flow into q only."""
    k_plus = np.asarray(k_plus, dtype=np.float64)
    if q.data.shape != k_plus.shape:
        raise ContractError(f"q {q.data.shape} and k_plus {k_plus.shape} must align")
    rows = queue.rows
    out = Tensor(
        np.concatenate([(q.data * k_plus).sum(axis=1, keepdims=True), q.data @ rows.T], axis=1)
    )

    def backward(g: np.ndarray) -> None:
        T.accumulate(q, g[:, :1] * k_plus + g[:, 1:] @ rows)

    T.record(out, backward)
    return out


def info_nce_loss(q: Tensor, k_plus: np.ndarray, queue: KeyQueue, tau: float) -> Tensor:
    """Mean over the batch of -log softmax(logits / tau) at the positive."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = key_similarity_logits(q, k_plus, queue)
    return _nce_from_logits(logits, tau)


def _nce_from_logits(logits: Tensor, tau: float) -> Tensor:
    u = logits.data / tau
    umax = u.max(axis=1, keepdims=True)
    lse = umax[:, 0] + np.log(np.exp(u - umax).sum(axis=1))
    n = u.shape[0]
    out = Tensor(np.float64((lse - u[:, 0]).mean()))
    p = T.stable_softmax(u)

    def backward(g: np.ndarray) -> None:
        d = p.copy()
        d[:, 0] -= 1.0
        T.accumulate(logits, d * (float(g) / (n * tau)))

    T.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# training state


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    m: float = 0.999
    lam: float = 5.0
    batch_size: int = 32
    queue_size: int = 256
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 500
    seed: int = 7
    distill_tau: float | None = None  # defaults to tau
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.m < 1.0:
            raise ParameterError(f"m must be in [0, 1), got {self.m}")
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.queue_size % self.batch_size != 0:
            raise ParameterError(
                f"queue size {self.queue_size} must be a multiple of batch size {self.batch_size}"
            )

    @property
    def effective_distill_tau(self) -> float:
        return self.tau if self.distill_tau is None else self.distill_tau


@dataclass
class MoCoState:
    query: EncoderParams
    key: EncoderParams
    queue: KeyQueue
    cfg: TrainConfig
    step_count: int = 0


@dataclass
class StepResult:
    l_con: float
    l_dis: float
    total: float


def init_moco_state(enc_cfg: EncoderConfig, cfg: TrainConfig, rng: Rng) -> MoCoState:
    query = init_encoder(enc_cfg, rng)
    key = query.clone()
    return MoCoState(query, key, KeyQueue(cfg.queue_size, enc_cfg.d), cfg)


def build_views(batch: Batch, aug: AugmentConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Two stacked view batches from per-sample derived streams."""
    vq, vk = [], []
    for pos in range(batch.frames.shape[0]):
        frame = Frame(batch.frames[pos])
        idx = int(batch.indices[pos])
        vq.append(sample_view(frame, aug, view_stream(rng, batch.epoch, idx, 0)).pixels)
        vk.append(sample_view(frame, aug, view_stream(rng, batch.epoch, idx, 1)).pixels)
    return np.stack(vq), np.stack(vk)


def warm_up_queue(state: MoCoState, stream, rng: Rng, hook=None) -> None:
    """Fill the queue with key-encoder embeddings before any loss is taken.

    Consumes capacity/batch_size batches from the stream.  ``hook``, when
    given, receives (batch, view_k_frames) per warm-up batch so a paired
    queue can be filled from the same samples.
    """
    for _ in range(state.queue.capacity // state.cfg.batch_size):
        batch = stream.next_batch()
        _, views_k = build_views(batch, state.cfg.augment, rng)
        keys = encode(state.key, views_k)
        state.queue.push(keys.data)
        if hook is not None:
            hook(batch, views_k)


def moco_train_step(state: MoCoState, batch: Batch, rng: Rng) -> float:
    """One contrastive step; returns the InfoNCE loss value."""
    return _train_step(state, batch, rng, distill=None).l_con


def _train_step(state: MoCoState, batch: Batch, rng: Rng, distill=None) -> StepResult:
    """Shared step core.

    Order: views, query/key embeddings, losses, backprop + SGD on the
    query encoder, momentum update of the key encoder, queue pushes.
    ``distill`` is an optional duck-typed context providing soft targets
    and the distillation loss (see distill.distilled_train_step).
    """
    cfg = state.cfg
    if batch.frames.shape[0] != cfg.batch_size:
        raise ContractError(f"batch of {batch.frames.shape[0]}, config says {cfg.batch_size}")
    if not state.queue.warmed:
        raise ContractError("queue must be warmed before training steps")
    if distill is not None:
        distill.pre_check(state)

    views_q, views_k = build_views(batch, cfg.augment, rng)
    graph = T.Graph()
    with graph:
        q = encode(state.query, views_q, record_grads=True)
        k_plus = encode(state.key, views_k).data
        l_con = info_nce_loss(q, k_plus, state.queue, cfg.tau)
        l_dis_value = 0.0
        teacher_keys = None
        if distill is not None:
            p_t, teacher_keys = distill.teacher_forward(views_q, views_k)
            if distill.lam != 0.0:
                l_dis = distill.distill_loss(p_t, q, k_plus, state.queue)
                total = T.add(l_con, T.scale(l_dis, distill.lam))
                l_dis_value = float(l_dis.data)
            else:
                # Keep the recorded graph identical to plain training so a
                # zero weight reproduces it bitwise; report the value only.
                l_dis_value = float(distill.distill_loss_value(p_t, q.data, k_plus, state.queue))
                total = l_con
        else:
            total = l_con
    graph.backward(total)

    frozen_backbone = state.query.backbone.frozen
    if not frozen_backbone:
        T.sgd_step(state.query.backbone, cfg.lr, cfg.momentum, cfg.weight_decay)
    T.sgd_step(state.query.head, cfg.lr, cfg.momentum, cfg.weight_decay)

    # the key encoder must never see raw gradients, only the moving average
    for key_set in (state.key.backbone, state.key.head):
        for name, t in key_set.items():
            if t.grad is not None and np.any(t.grad != 0.0):
                raise ContractError(f"key parameter {name!r} received gradient")

    if frozen_backbone:
        # The frozen query backbone equals the frozen key backbone, so the
        # moving average is the identity there; skipping keeps it bitwise.
        _momentum_update_set(state.key.head, state.query.head, cfg.m)
    else:
        momentum_update(state.key, state.query, cfg.m)

    state.queue.push(k_plus)
    if distill is not None:
        distill.push_keys(teacher_keys)
        distill.post_check(state)
    state.step_count += 1
    return StepResult(l_con=float(l_con.data), l_dis=l_dis_value, total=float(total.data))
