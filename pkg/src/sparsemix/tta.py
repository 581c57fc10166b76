"""Online continual test-time adaptation engine.

Teacher and student start as copies of the source model (frozen backbone
shared, adapter state duplicated). Per batch, in order:

1. the teacher produces an augmentation-averaged soft pseudo-label; this is
   also the prediction that gets scored, so scoring always reflects the
   state before the update;
2. the student runs on the clean batch and minimizes soft cross-entropy
   against the pseudo-label, plus an optional proximal penalty pulling its
   expert weights back toward the teacher's;
3. Adam updates the trainable (adapter-only) view;
4. the teacher tracks the student by exponential moving average.

Only adapter parameters ever change; the frozen backbone is shared between
the two models by construction, so it cannot drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops
from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_init,
    adam_step,
    add,
    constant,
    log_softmax_lastdim,
    mean_over_axis,
    mul,
    neg,
    scale,
    sub,
    sum_over_axis,
)
from .backbone import ModelParams, clone_params, encode, expert_parameters, freeze_partition
from .domains import DomainStream
from .errors import ConfigError, ShapeError, ValidationError

Array = np.ndarray


@dataclass(frozen=True)
class Augmentation:
    """One teacher view: rescale factor, optional mirror, optional jitter."""

    scale: float = 1.0
    flip: bool = False
    jitter_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not self.flip and self.jitter_sigma == 0.0


@dataclass
class AugmentationSet:
    augs: list[Augmentation]
    seed: int = 1

    def __post_init__(self):
        if not self.augs:
            raise ConfigError("augmentation set must not be empty")
        if not any(a.is_identity for a in self.augs):
            raise ConfigError("augmentation set must contain the identity view")


def default_augmentations(seed: int = 1) -> AugmentationSet:
    """Desk set: identity, half/double resolution, horizontal flip."""
    return AugmentationSet(
        augs=[
            Augmentation(1.0),
            Augmentation(0.5),
            Augmentation(2.0),
            Augmentation(1.0, flip=True),
        ],
        seed=seed,
    )


def full_scale_augmentations(seed: int = 1) -> AugmentationSet:
    """The seven-scale ladder plus a flip view."""
    scales = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
    augs = [Augmentation(s) for s in scales] + [Augmentation(1.0, flip=True)]
    return AugmentationSet(augs=augs, seed=seed)


def augmentations_from_config(
    scales, flip: bool, jitter_sigma: float, seed: int
) -> AugmentationSet:
    augs = [Augmentation(float(s)) for s in scales]
    if 1.0 not in [a.scale for a in augs]:
        augs.insert(0, Augmentation(1.0))
    if flip:
        augs.append(Augmentation(1.0, flip=True))
    if jitter_sigma > 0:
        augs.append(Augmentation(1.0, jitter_sigma=float(jitter_sigma)))
    return AugmentationSet(augs=augs, seed=seed)


def apply_augmentation(
    images: Array, aug: Augmentation, rng: np.random.Generator | None = None
) -> Array:
    """Resample to the scaled geometry and back, then mirror/jitter."""
    out = images
    if aug.scale != 1.0:
        side = images.shape[1]
        mid = max(2, int(round(side * aug.scale)))
        resized = np.empty_like(images)
        for i in range(images.shape[0]):
            small = imageops.resize_bilinear(images[i], mid, mid)
            resized[i] = imageops.resize_bilinear(small, side, side)
        out = resized
    if aug.flip:
        out = out[:, :, ::-1].copy()
    if aug.jitter_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        out = out + rng.normal(0.0, aug.jitter_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def softmax_rows(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_label(
    teacher: ModelParams,
    images: Array,
    augs: AugmentationSet,
    rng: np.random.Generator | None = None,
    collect_features: list | None = None,
) -> Array:
    """Mean over augmented views of the teacher's softmax; rows sum to 1.

    Runs entirely off-tape, so the teacher accumulates no gradient state.
    Views are averaged in their listed order for determinism. When asked,
    the identity view's class-token feature is appended to
    ``collect_features`` for the analysis bank.
    """
    if not augs.augs:
        raise ConfigError("augmentation set must not be empty")
    total = None
    for aug in augs.augs:
        view = apply_augmentation(images, aug, rng)
        logits, _, feature = encode(view, teacher)
        if aug.is_identity and collect_features is not None:
            collect_features.append(feature.data.copy())
        probs = softmax_rows(logits.data)
        total = probs if total is None else total + probs
    return total / len(augs.augs)


def consistency_loss(student_logits: Tensor, targets: Array) -> Tensor:
    """Soft cross-entropy: mean over the batch of -sum targets * log softmax."""
    if student_logits.shape != targets.shape:
        raise ShapeError(
            f"logits {student_logits.shape} and targets {targets.shape} disagree"
        )
    sums = targets.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(targets < -1e-12):
        raise ValidationError("targets must be probability rows (sum 1, nonnegative)")
    logp = log_softmax_lastdim(student_logits)
    picked = sum_over_axis(mul(logp, constant(targets)), axis=1)
    return neg(mean_over_axis(picked, axis=0))


def proximal_loss(
    student_experts: dict[str, Tensor],
    teacher_experts: dict[str, Tensor],
    mu: float,
) -> Tensor:
    """(mu/2) * squared distance between student and teacher expert weights.

    The gradient w.r.t. each student tensor is exactly mu * (student -
    teacher). Gate parameters are deliberately not part of the sum; the
    penalty anchors the expert bank only.
    """
    if set(student_experts) != set(teacher_experts):
        raise ShapeError("student/teacher expert parameter sets differ")
    total: Tensor | None = None
    for name in sorted(student_experts):
        s = student_experts[name]
        t = teacher_experts[name]
        if s.shape != t.shape:
            raise ShapeError(f"parameter '{name}' shapes differ: {s.shape} vs {t.shape}")
        diff = sub(s, constant(t.data))
        term = sum_over_axis(mul(diff, diff))
        total = term if total is None else add(total, term)
    assert total is not None
    return scale(total, mu / 2.0)


@dataclass
class AdaptState:
    teacher: ModelParams
    student: ModelParams
    alpha: float
    mu: float
    optimizer: AdamState
    trainable: dict[str, Tensor]
    teacher_trainable: dict[str, Tensor]
    t: int = 0


def init_adapt_state(
    source: ModelParams,
    lr: float,
    alpha: float = 0.999,
    mu: float = 1.0,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> AdaptState:
    """Teacher and student both start at the source parameters; the frozen
    backbone is shared, adapter tensors are independent copies."""
    student = source
    teacher = clone_params(source, share_frozen=True)
    trainable = freeze_partition(student)
    return AdaptState(
        teacher=teacher,
        student=student,
        alpha=alpha,
        mu=mu,
        optimizer=adam_init(trainable, lr=lr, beta1=beta1, beta2=beta2, eps=eps),
        trainable=trainable,
        teacher_trainable=freeze_partition(teacher),
        t=0,
    )


def ema_update(state: AdaptState) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student over the trainable view."""
    a = state.alpha
    for name, t_teacher in state.teacher_trainable.items():
        t_teacher.data *= a
        t_teacher.data += (1.0 - a) * state.trainable[name].data


@dataclass
class StepMetrics:
    loss_consistency: float
    loss_proximal: float


def adapt_step(
    state: AdaptState,
    images: Array,
    augs: AugmentationSet,
    *,
    use_hp: bool = True,
    update: bool = True,
    rng: np.random.Generator | None = None,
    collect_features: list | None = None,
) -> tuple[Array, StepMetrics]:
    """One online step; returns the scored prediction and the loss terms.

    The prediction is the teacher's augmentation-averaged pseudo-label,
    computed before any update. With ``update`` disabled the step is a pure
    evaluation pass (losses still reported), which is how the frozen-source
    baseline runs.
    """
    targets = pseudo_label(state.teacher, images, augs, rng, collect_features)
    if not update:
        logits, _, _ = encode(images, state.student)
        cons = consistency_loss(logits, targets)
        if use_hp:
            prox = proximal_loss(
                expert_parameters(state.student), expert_parameters(state.teacher), state.mu
            )
            return targets, StepMetrics(cons.item(), prox.item())
        return targets, StepMetrics(cons.item(), 0.0)

    with Tape() as tape:
        logits, _, _ = encode(images, state.student)
        cons = consistency_loss(logits, targets)
        if use_hp:
            prox = proximal_loss(
                expert_parameters(state.student), expert_parameters(state.teacher), state.mu
            )
            loss = add(cons, prox)
        else:
            prox = None
            loss = cons
        grads = tape.backward(loss)
    named = {name: grads[t] for name, t in state.trainable.items() if t in grads}
    adam_step(state.trainable, named, state.optimizer)
    state.t += 1
    ema_update(state)
    return targets, StepMetrics(cons.item(), prox.item() if prox is not None else 0.0)


# ---------------------------------------------------------------------------
# stream driver


@dataclass
class MetricsRow:
    domain: str
    round: int
    batch: int
    error: float
    loss_consistency: float
    loss_proximal: float


@dataclass
class DomainRecord:
    domain: str
    round: int
    error: float
    count: int


@dataclass
class StreamResult:
    rows: list[MetricsRow]
    domains: list[DomainRecord]
    bank: list[tuple[str, Array, Array]]  # (key, features, labels) in stream order
    mean_error: float

    def per_round_mean(self) -> dict[int, float]:
        by_round: dict[int, list[DomainRecord]] = {}
        for rec in self.domains:
            by_round.setdefault(rec.round, []).append(rec)
        return {
            r: float(np.mean([rec.error for rec in recs])) for r, recs in by_round.items()
        }


@dataclass
class RunOutcome:
    method: StreamResult
    baseline: StreamResult

    @property
    def gain(self) -> float:
        return self.baseline.mean_error - self.method.mean_error


def stream_pass(
    source: ModelParams,
    stream: DomainStream,
    augs: AugmentationSet,
    *,
    lr: float,
    batch: int = 8,
    alpha: float = 0.999,
    mu: float = 1.0,
    use_hp: bool = True,
    update: bool = True,
    seed: int = 1,
) -> StreamResult:
    """Visit every domain (times rounds) in order, scoring online.

    Labels are consulted only after the prediction is recorded. Batches
    follow dataset order, so the pass is deterministic given the stream and
    seed. Per-domain class-token features of the teacher's identity view are
    pooled into the analysis bank.
    """
    model = clone_params(source)
    state = init_adapt_state(model, lr=lr, alpha=alpha, mu=mu)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA6]))
    rows: list[MetricsRow] = []
    domains: list[DomainRecord] = []
    bank: list[tuple[str, Array, Array]] = []
    for round_idx in range(1, stream.rounds + 1):
        for target in stream.targets:
            data = target.data
            wrong = 0
            seen = 0
            feats: list[Array] = []
            labels_seen: list[Array] = []
            n_batches = 0
            for start in range(0, len(data), batch):
                images = data.images[start : start + batch]
                labels = data.labels[start : start + batch]
                preds, metrics = adapt_step(
                    state,
                    images,
                    augs,
                    use_hp=use_hp,
                    update=update,
                    rng=rng,
                    collect_features=feats,
                )
                hard = np.argmax(preds, axis=1)
                err = float(np.mean(hard != labels))
                wrong += int(np.sum(hard != labels))
                seen += labels.shape[0]
                labels_seen.append(labels)
                rows.append(
                    MetricsRow(
                        domain=target.key,
                        round=round_idx,
                        batch=n_batches,
                        error=err,
                        loss_consistency=metrics.loss_consistency,
                        loss_proximal=metrics.loss_proximal,
                    )
                )
                n_batches += 1
            domains.append(
                DomainRecord(
                    domain=target.key,
                    round=round_idx,
                    error=100.0 * wrong / max(1, seen),
                    count=seen,
                )
            )
            bank.append(
                (
                    f"r{round_idx}:{target.key}",
                    np.concatenate(feats, axis=0),
                    np.concatenate(labels_seen, axis=0),
                )
            )
    mean_error = float(np.mean([d.error for d in domains]))
    return StreamResult(rows=rows, domains=domains, bank=bank, mean_error=mean_error)


def run_stream(
    source: ModelParams,
    stream: DomainStream,
    augs: AugmentationSet,
    *,
    lr: float,
    batch: int = 8,
    alpha: float = 0.999,
    mu: float = 1.0,
    use_hp: bool = True,
    seed: int = 1,
) -> RunOutcome:
    """Method pass plus the frozen-source baseline on the identical stream
    and seed. The gain column is baseline mean error minus method mean error."""
    method = stream_pass(
        source,
        stream,
        augs,
        lr=lr,
        batch=batch,
        alpha=alpha,
        mu=mu,
        use_hp=use_hp,
        update=True,
        seed=seed,
    )
    baseline = stream_pass(
        source,
        stream,
        augs,
        lr=lr,
        batch=batch,
        alpha=alpha,
        mu=mu,
        use_hp=use_hp,
        update=False,
        seed=seed,
    )
    return RunOutcome(method=method, baseline=baseline)
