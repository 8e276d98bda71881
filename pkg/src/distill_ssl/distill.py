"""Teacher adaptation and distilled contrastive training.

The teacher is a frozen-backbone encoder pair whose projection head was
adapted on the target data.  During student training it scores the same
two views the student sees and its tempered key-similarity distribution
supervises the student's through a KL divergence.  Teacher and student
keep parallel queues pushed with the same raw samples each step, so index
i of both distributions always refers to the same key sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .contrastive import (
    ContractError,
    EncoderConfig,
    EncoderParams,
    KeyQueue,
    MoCoState,
    StepResult,
    TrainConfig,
    _train_step,
    encode,
    key_similarity_logits,
)
from .data import Batch, load_checkpoint
from .rng import Rng
from .tensor import ParameterError, ParamSet, Tensor


@dataclass
class TeacherState:
    """Frozen-backbone encoder pair with its own synchronized key queue."""

    query: EncoderParams
    key: EncoderParams
    queue: KeyQueue
    cfg: TrainConfig
    step_count: int = 0


@dataclass
class SimilarityDistribution:
    """Probabilities over {positive key, M queue keys}; index 0 is the positive."""

    probs: Tensor

    def __post_init__(self):
        total = self.probs.data.sum(axis=-1)
        if np.any(np.abs(total - 1.0) > 1e-12) or np.any(self.probs.data < 0.0):
            raise ContractError("similarity distribution rows must be probabilities")

    @property
    def values(self) -> np.ndarray:
        return self.probs.data


def encoder_from_checkpoint(
    named: dict[str, ParamSet], set_prefix: str, enc_cfg: EncoderConfig
) -> EncoderParams:
    backbone = named[f"{set_prefix}.backbone"].clone()
    head = named[f"{set_prefix}.head"].clone()
    return EncoderParams(backbone, head, enc_cfg)


def init_teacher(
    ckpt_path,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    freeze_backbone: bool = True,
) -> TeacherState:
    """Teacher from a pretrained checkpoint: query and key both load the
    checkpoint's query encoder; backbones are frozen unless disabled.

    Shape validation covers the whole checkpoint up front, so nothing is
    partially loaded on mismatch.
    """
    shapes = enc_cfg.param_shapes()
    expected = {f"query.{name}": params for name, params in shapes.items()}
    named, _ = load_checkpoint(ckpt_path, expected_shapes=expected)
    query = encoder_from_checkpoint(named, "query", enc_cfg)
    key = encoder_from_checkpoint(named, "query", enc_cfg)
    if freeze_backbone:
        query.backbone.set_frozen(True)
        key.backbone.set_frozen(True)
    return TeacherState(query, key, KeyQueue(cfg.queue_size, enc_cfg.d), cfg)


def teacher_adapt_step(teacher: TeacherState, batch: Batch, rng: Rng) -> float:
    """One head-adaptation step; identical to a plain contrastive step
    except that frozen backbones receive neither gradients nor updates."""
    result = _train_step(_as_moco_state(teacher), batch, rng, distill=None)
    teacher.step_count += 1
    if teacher.query.backbone.frozen:
        _assert_zero_grads(teacher.query.backbone, "teacher backbone")
    return result.l_con


def _as_moco_state(teacher: TeacherState) -> MoCoState:
    return MoCoState(teacher.query, teacher.key, teacher.queue, teacher.cfg, teacher.step_count)


def _assert_zero_grads(ps: ParamSet, what: str) -> None:
    for name, t in ps.items():
        if t.grad is not None and np.any(t.grad != 0.0):
            raise ContractError(f"{what} parameter {name!r} received gradient")


def soft_targets(
    q_t: np.ndarray, k_t_plus: np.ndarray, teacher_queue: KeyQueue, tau: float
) -> SimilarityDistribution:
    """Tempered softmax over the teacher's key similarities; no gradients."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    q_t = np.atleast_2d(np.asarray(q_t, dtype=np.float64))
    k_t_plus = np.atleast_2d(np.asarray(k_t_plus, dtype=np.float64))
    sims = np.concatenate(
        [(q_t * k_t_plus).sum(axis=1, keepdims=True), q_t @ teacher_queue.rows.T], axis=1
    )
    return SimilarityDistribution(Tensor(T.stable_softmax(sims / tau)))


def student_similarity_distribution(
    q: Tensor, k_plus: np.ndarray, queue: KeyQueue, tau: float
) -> SimilarityDistribution:
    """As soft_targets, but differentiable through the student query."""
    logits = key_similarity_logits(q, k_plus, queue)
    return SimilarityDistribution(T.softmax_with_temperature(logits, tau))


def kl_distillation_loss(p_t: SimilarityDistribution, p_s: SimilarityDistribution) -> Tensor:
    """Batch-averaged KL(p_t || p_s), differentiable through p_s.

    Convention 0 * ln(0/x) = 0; p_s entries must be positive (softmax
    output of bounded similarities guarantees it).
    """
    pt = p_t.values
    ps_tensor = p_s.probs
    ps = ps_tensor.data
    if pt.shape != ps.shape:
        raise ContractError(f"distribution shapes differ: {pt.shape} vs {ps.shape}")
    n = pt.shape[0] if pt.ndim == 2 else 1
    mask = pt > 0.0
    terms = np.zeros_like(pt)
    np.log(np.divide(pt, ps, out=np.ones_like(pt), where=mask), out=terms, where=mask)
    out = Tensor(np.float64((pt * terms).sum() / n))

    def backward(g: np.ndarray) -> None:
        T.accumulate(ps_tensor, np.divide(-pt, ps) * (float(g) / n))

    T.record(out, backward)
    return out


class _DistillContext:
    """Hooks the teacher into the shared train-step core."""

    def __init__(self, teacher: TeacherState, lam: float, tau: float):
        self.teacher = teacher
        self.lam = lam
        self.tau = tau

    def pre_check(self, student: MoCoState) -> None:
        if self.teacher.queue.ptr != student.queue.ptr:
            raise ContractError(
                f"queues desynchronized: student ptr {student.queue.ptr}, "
                f"teacher ptr {self.teacher.queue.ptr}"
            )
        if not self.teacher.queue.warmed:
            raise ContractError("teacher queue must be warmed before distilled steps")

    def teacher_forward(self, views_q: np.ndarray, views_k: np.ndarray):
        q_t = encode(self.teacher.query, views_q)
        k_t = encode(self.teacher.key, views_k)
        p_t = soft_targets(q_t.data, k_t.data, self.teacher.queue, self.tau)
        return p_t, k_t.data

    def distill_loss(
        self, p_t: SimilarityDistribution, q: Tensor, k_plus: np.ndarray, queue: KeyQueue
    ) -> Tensor:
        p_s = student_similarity_distribution(q, k_plus, queue, self.tau)
        return kl_distillation_loss(p_t, p_s)

    def distill_loss_value(
        self, p_t: SimilarityDistribution, q: np.ndarray, k_plus: np.ndarray, queue: KeyQueue
    ) -> float:
        with T.no_grad():
            p_s = student_similarity_distribution(Tensor(q), k_plus, queue, self.tau)
            return float(kl_distillation_loss(p_t, p_s).data)

    def push_keys(self, teacher_keys: np.ndarray) -> None:
        self.teacher.queue.push(teacher_keys)

    def post_check(self, student: MoCoState) -> None:
        if self.teacher.queue.ptr != student.queue.ptr:
            raise ContractError("queues desynchronized after push")
        _assert_zero_grads(self.teacher.query.backbone, "teacher backbone")
        _assert_zero_grads(self.teacher.query.head, "teacher head")


def distilled_train_step(
    student: MoCoState, teacher: TeacherState, batch: Batch, rng: Rng
) -> StepResult:
    """One combined-objective step: total = L_con + lambda * L_dis.

    Both models see the same two augmented views; the teacher runs without
    gradients and both queues receive keys of the same samples.
    """
    ctx = _DistillContext(teacher, student.cfg.lam, student.cfg.effective_distill_tau)
    return _train_step(student, batch, rng, distill=ctx)
