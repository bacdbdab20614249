"""Semi-supervised training with an exponential-moving-average teacher.

The student trains exactly like the supervised model on the labeled subset;
a teacher copy tracks it by EMA and supplies consistency targets for both
the classifier logits and the negative center-distance vector, each compared
after a softmax under independent input perturbations.  Unlabeled samples
additionally receive the quantization penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .data import Dataset
from .errors import DimensionMismatch, DivergenceError, PreconditionError
from .model import (
    EmbeddingModel,
    EpochRecord,
    GradBuffers,
    Hyperparams,
    TrainReport,
    _accumulate_loss_grads,
    _backprop_chain,
    forward_batch,
    init_model,
    mean_quantization,
    sgd_update,
    warmup_project,
)

DEFAULT_CONSISTENCY_WEIGHT = 50.0
DEFAULT_EMA_DECAY = 0.999
DEFAULT_NOISE_STD = 0.1


@dataclass
class TeacherState:
    """EMA shadow of the student; only ema_update may touch its parameters."""

    model: EmbeddingModel
    ema_decay: float

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise PreconditionError("ema_decay must lie in [0, 1)")


@dataclass
class SemiDataset:
    """Labeled pool plus disjoint unlabeled pool."""

    labeled: Dataset
    unlabeled: Dataset

    def __post_init__(self):
        if self.labeled.n == 0:
            raise PreconditionError("labeled set must be nonempty")
        if not self.labeled.labeled_mask().all():
            raise PreconditionError("labeled split contains unlabeled rows")
        if set(self.labeled.ids.tolist()) & set(self.unlabeled.ids.tolist()):
            raise PreconditionError("labeled and unlabeled ids overlap")
        if self.unlabeled.n and self.unlabeled.dim != self.labeled.dim:
            raise DimensionMismatch("labeled/unlabeled feature widths differ")

    @classmethod
    def from_partial(cls, dataset: Dataset) -> "SemiDataset":
        mask = dataset.labeled_mask()
        return cls(dataset.subset(np.nonzero(mask)[0]),
                   dataset.subset(np.nonzero(~mask)[0]))


def ema_update(teacher: TeacherState, student: EmbeddingModel,
               decay: float) -> TeacherState:
    """theta_T <- decay * theta_T + (1 - decay) * theta_S, elementwise."""
    if not 0.0 <= decay < 1.0:
        raise PreconditionError("decay must lie in [0, 1)")
    t_params = teacher.model.parameters()
    s_params = student.parameters()
    if len(t_params) != len(s_params):
        raise DimensionMismatch("teacher and student parameter counts differ")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise DimensionMismatch(f"shape mismatch {t.shape} vs {s.shape}")
        t *= decay
        t += (1.0 - decay) * s
    return teacher


def perturb(x, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian perturbation; zero std returns an unmodified copy.

    Drawing is skipped entirely at zero std so the RNG stream is untouched.
    """
    if noise_std < 0:
        raise PreconditionError("noise_std must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if noise_std == 0.0:
        return x.copy()
    return x + rng.normal(0.0, noise_std, x.shape)


@dataclass
class ConsistencyResult:
    classifier_loss: float
    distance_loss: float
    grad_logits: np.ndarray    # d classifier_loss / d student logits
    grad_negdists: np.ndarray  # d distance_loss / d student negative distances


def _softmax_sqdist_grad(student_vec: np.ndarray, teacher_vec: np.ndarray):
    s = losses.stable_softmax(student_vec)
    t = losses.stable_softmax(teacher_vec)
    e = s - t
    loss = float(e @ e)
    # Jacobian of softmax applied to 2e: diag(s) - s s^T
    grad = 2.0 * (s * e - s * float(s @ e))
    return loss, grad


def consistency_losses(student_logits, teacher_logits, student_negdists,
                       teacher_negdists) -> ConsistencyResult:
    """Squared distances between softmaxed student and teacher outputs.

    The teacher side is a constant target: gradients flow only into the
    student vectors.  Returns both losses and both student-side gradients.
    """
    a = np.asarray(student_logits, dtype=np.float64)
    at = np.asarray(teacher_logits, dtype=np.float64)
    d = np.asarray(student_negdists, dtype=np.float64)
    dt = np.asarray(teacher_negdists, dtype=np.float64)
    if a.shape != at.shape or d.shape != dt.shape:
        raise DimensionMismatch("student/teacher output lengths differ")
    cls_loss, cls_grad = _softmax_sqdist_grad(a, at)
    dist_loss, dist_grad = _softmax_sqdist_grad(d, dt)
    return ConsistencyResult(cls_loss, dist_loss, cls_grad, dist_grad)


def negative_center_distances(F_row: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return -losses.center_distances(F_row, centers)


def extract_codes_model(student: EmbeddingModel,
                        teacher: TeacherState | None) -> EmbeddingModel:
    """Network used for code extraction; defaults to the teacher ensemble."""
    return teacher.model if teacher is not None else student


def train_mt_scdh(data: SemiDataset, hp: Hyperparams,
                  w: float = DEFAULT_CONSISTENCY_WEIGHT,
                  ema_decay: float = DEFAULT_EMA_DECAY,
                  noise_std: float = DEFAULT_NOISE_STD, *, r: int,
                  hidden=(64,), ramp_fraction: float = 0.2
                  ) -> tuple[EmbeddingModel, TeacherState, TrainReport]:
    """Semi-supervised training loop.

    Each step draws a mixed batch from the shuffled labeled+unlabeled pool,
    perturbs the student and teacher inputs independently, applies the full
    supervised objective to labeled rows, the quantization penalty to
    unlabeled rows, and the consistency terms to every row; the student is
    updated by SGD and the teacher by EMA with the warm-up decay
    min(1 - 1/(step+1), ema_decay).  The consistency weight ramps linearly
    from zero over the first ``ramp_fraction`` of training, so it is exactly
    zero at step 0.  With no unlabeled data, w = 0, and zero noise the
    student follows the supervised trajectory exactly.
    """
    if w < 0:
        raise PreconditionError("consistency weight must be non-negative")
    root = np.random.SeedSequence(hp.seed)
    init_ss, shuffle_ss, project_ss, noise_ss = root.spawn(4)
    dims = (data.labeled.dim, *hidden)
    C = data.labeled.label_count
    student = init_model(dims, C, r, init_ss)
    teacher = TeacherState(student.copy(), ema_decay)
    rng = np.random.default_rng(shuffle_ss)
    project_rng = np.random.default_rng(project_ss)
    noise_rng = np.random.default_rng(noise_ss)

    n_lab = data.labeled.n
    features = np.concatenate([
        data.labeled.features.astype(np.float64),
        data.unlabeled.features.astype(np.float64).reshape(-1, data.labeled.dim),
    ])
    labels = data.labeled.labels
    n_total = features.shape[0]
    steps_per_epoch = (n_total + hp.batch_size - 1) // hp.batch_size
    ramp_steps = max(1, round(ramp_fraction * hp.epochs)) * steps_per_epoch

    report = TrainReport()
    step = 0
    for epoch in range(hp.epochs):
        lr = hp.lr_at(epoch)
        perm = rng.permutation(n_total)
        sup_sums = np.zeros(4)
        sup_count = 0
        cons_sum = 0.0
        cons_count = 0
        for a0 in range(0, n_total, hp.batch_size):
            idx = perm[a0:a0 + hp.batch_size]
            X = perturb(features[idx], noise_std, noise_rng)
            lab_rows = np.nonzero(idx < n_lab)[0]
            unl_rows = np.nonzero(idx >= n_lab)[0]

            F, logits, acts = forward_batch(student, X)
            if not (np.all(np.isfinite(F)) and np.all(np.isfinite(logits))):
                raise DivergenceError(
                    "non-finite activations in the forward pass; the learning "
                    "rate is likely too high"
                )
            grad_F = np.zeros_like(F)
            grad_logits = np.zeros_like(logits)
            buffers = GradBuffers(student)
            total = 0.0

            if len(lab_rows):
                gF_lab = np.zeros((len(lab_rows), student.r))
                gl_lab = np.zeros((len(lab_rows), C))
                batch_labels = [labels[idx[j]] for j in lab_rows]
                bl = _accumulate_loss_grads(student, F[lab_rows], logits[lab_rows],
                                            batch_labels, hp, gF_lab, gl_lab,
                                            buffers.centers)
                grad_F[lab_rows] += gF_lab
                grad_logits[lab_rows] += gl_lab
                sup_sums += np.array([bl.scul, bl.classification, bl.quantization,
                                      bl.center_distance]) * len(lab_rows)
                sup_count += len(lab_rows)
                total += bl.total(hp) * len(lab_rows)

            for j in unl_rows:
                total += hp.alpha * losses.quantization_loss(
                    F[j], hp.holder_p, hp.holder_q)
                grad_F[j] += hp.alpha * losses.quantization_gradient(
                    F[j], hp.holder_p, hp.holder_q)

            w_eff = w * min(1.0, step / ramp_steps)
            if w_eff > 0.0:
                Xt = perturb(features[idx], noise_std, noise_rng)
                Ft, logits_t, _ = forward_batch(teacher.model, Xt)
                for j in range(len(idx)):
                    dneg = negative_center_distances(F[j], student.centers)
                    dneg_t = negative_center_distances(Ft[j], teacher.model.centers)
                    cr = consistency_losses(logits[j], logits_t[j], dneg, dneg_t)
                    grad_logits[j] += w_eff * hp.mu * cr.grad_logits
                    # negdists feed both the embedding and the centers
                    d_abs = losses.center_distances(F[j], student.centers)
                    u = losses._unit_directions(F[j], student.centers, d_abs)
                    grad_F[j] += w_eff * (u @ -cr.grad_negdists)
                    buffers.centers += w_eff * u * cr.grad_negdists[None, :]
                    cons = hp.mu * cr.classifier_loss + cr.distance_loss
                    cons_sum += cons
                    total += w_eff * cons
                cons_count += len(idx)

            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite step loss {total}; the learning rate is likely too high"
                )
            _backprop_chain(student, acts, grad_F, grad_logits, buffers)
            sgd_update(student, buffers, lr, hp.momentum)
            if epoch < hp.warmup_epochs:
                student.centers[:] = warmup_project(student.centers,
                                                    hp.warmup_norm_s, project_rng)
            decay_eff = min(1.0 - 1.0 / (step + 1), ema_decay)
            ema_update(teacher, student, decay_eff)
            step += 1

        means = sup_sums / max(sup_count, 1)
        report.epochs.append(EpochRecord(
            epoch, *means, learning_rate=lr,
            consistency_loss=cons_sum / max(cons_count, 1)))
    report.final_quantization = mean_quantization(student, features, hp)
    return student, teacher, report
