"""Stage orchestration: pretraining runs, teacher adaptation, probing.

Each stage is a pure function of (inputs, config, seed) and returns its
loss history plus the trained state; the CLI persists checkpoints and
metrics.  Distilled and plain student training share the same batch and
augmentation streams, so they are bitwise comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .contrastive import (
    EncoderConfig,
    KeyQueue,
    MoCoState,
    TrainConfig,
    encode,
    init_moco_state,
    moco_train_step,
    warm_up_queue,
)
from .data import BatchStream, LabeledFrame, dataset_arrays, load_checkpoint, save_checkpoint
from .distill import (
    TeacherState,
    distilled_train_step,
    encoder_from_checkpoint,
    init_teacher,
    teacher_adapt_step,
)
from .eval import init_transfer
from .rng import Rng


@dataclass
class TrainRun:
    losses: list[float]  # per-step total loss
    l_con: list[float]
    l_dis: list[float]
    state: MoCoState | TeacherState


def _stream_and_rng(dataset: list[LabeledFrame], cfg: TrainConfig):
    frames, _ = dataset_arrays(dataset)
    return BatchStream(frames, cfg.batch_size, cfg.seed), Rng(cfg.seed)


def pretrain(
    dataset: list[LabeledFrame],
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    init_from: str | None = None,
) -> TrainRun:
    """Plain momentum-contrastive pretraining; optionally initialized from
    a checkpoint (the teacher-initialization transfer arm)."""
    stream, rng = _stream_and_rng(dataset, cfg)
    if init_from is not None:
        state = init_transfer(init_from, enc_cfg, cfg)
    else:
        state = init_moco_state(enc_cfg, cfg, rng)
    warm_up_queue(state, stream, rng)
    losses = []
    for _ in range(cfg.steps):
        losses.append(moco_train_step(state, stream.next_batch(), rng))
    return TrainRun(losses, losses, [0.0] * len(losses), state)


def adapt_teacher(
    dataset: list[LabeledFrame],
    generic_ckpt: str,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    freeze_backbone: bool = True,
) -> TrainRun:
    """Head-only adaptation of a generic-domain encoder on the target data."""
    stream, rng = _stream_and_rng(dataset, cfg)
    teacher = init_teacher(generic_ckpt, enc_cfg, cfg, freeze_backbone=freeze_backbone)
    warm_up_queue(_teacher_view(teacher), stream, rng)
    losses = []
    for _ in range(cfg.steps):
        losses.append(teacher_adapt_step(teacher, stream.next_batch(), rng))
    return TrainRun(losses, losses, [0.0] * len(losses), teacher)


def _teacher_view(teacher: TeacherState) -> MoCoState:
    return MoCoState(teacher.query, teacher.key, teacher.queue, teacher.cfg, teacher.step_count)


def pretrain_distilled(
    dataset: list[LabeledFrame],
    teacher_ckpt: str,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
) -> TrainRun:
    """Distilled student training: both queues warm on the same sample
    stream, then every step pushes paired keys."""
    stream, rng = _stream_and_rng(dataset, cfg)
    student = init_moco_state(enc_cfg, cfg, rng)
    teacher = load_teacher(teacher_ckpt, enc_cfg, cfg)

    def fill_teacher(batch, views_k):
        teacher.queue.push(encode(teacher.key, views_k).data)

    warm_up_queue(student, stream, rng, hook=fill_teacher)
    losses, cons, diss = [], [], []
    for _ in range(cfg.steps):
        res = distilled_train_step(student, teacher, stream.next_batch(), rng)
        losses.append(res.total)
        cons.append(res.l_con)
        diss.append(res.l_dis)
    return TrainRun(losses, cons, diss, student)


def load_teacher(ckpt_path: str, enc_cfg: EncoderConfig, cfg: TrainConfig) -> TeacherState:
    """Rebuild an adapted teacher (query and key sides) from its checkpoint."""
    shapes = enc_cfg.param_shapes()
    expected = {
        f"{side}.{name}": params
        for side in ("query", "key")
        for name, params in shapes.items()
    }
    named, _ = load_checkpoint(ckpt_path, expected_shapes=expected)
    query = encoder_from_checkpoint(named, "query", enc_cfg)
    key = encoder_from_checkpoint(named, "key", enc_cfg)
    query.backbone.set_frozen(True)
    key.backbone.set_frozen(True)
    return TeacherState(query, key, KeyQueue(cfg.queue_size, enc_cfg.d), cfg)


def save_model(state: MoCoState | TeacherState, path, config: dict | None = None) -> None:
    save_checkpoint(
        {
            "query.backbone": state.query.backbone,
            "query.head": state.query.head,
            "key.backbone": state.key.backbone,
            "key.head": state.key.head,
        },
        path,
        config,
    )
