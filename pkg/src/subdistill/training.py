"""Optimizers, learning-rate schedules, and the training loops.

Three entry points: train_teacher (hard-label loss plus the contrastive
auxiliary loss), distill_student (subclass / conventional / penultimate /
intra-class modes against a frozen teacher), and evaluate (one MetricReport
per pass).

Seeding convention: one master seed per run; data shuffling derives from
seed+1, parameter init from seed+2, dropout masks from seed+3 and the
penultimate projection from seed+4 (per-epoch and per-step streams offset
by a fixed multiplier).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import metrics as M
from .data import batch_indices, minibatches
from .netcore import backward, build_network, forward

_STREAM = 1_000_003  # spacing between derived per-epoch / per-step seeds

DISTILL_MODES = ("none", "subclass", "conventional", "penultimate", "intra_class")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, last_losses):
        self.step = step
        self.last_losses = last_losses
        super().__init__(
            f"loss became non-finite at step {step}; last finite losses: {last_losses}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"                 # "adam" | "sgd_nesterov"
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def validate(self):
        if self.kind not in ("adam", "sgd_nesterov"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("adam betas must be in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class ScheduleConfig:
    kind: str = "constant"             # "constant" | "cosine_to_zero" | "quadratic_warmup"
    total_steps: int | None = None     # cosine; defaults to the run length
    peak_lr: float = 0.1               # quadratic warmup
    warmup_steps: int = 10_000

    def validate(self):
        if self.kind not in ("constant", "cosine_to_zero", "quadratic_warmup"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


@dataclass
class RunConfig:
    architecture: str = "mlp:32"
    c: int = 2
    s: int = 5
    temperature: float = 1.0           # distillation T
    aux_temperature: float = 1.0
    alpha: float = 0.5                 # task balance
    beta: float = 0.0                  # auxiliary loss weight
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 12
    batch_size: int = 256
    seed: int = 0
    distill_mode: str = "none"
    epoch_eval_cap: int | None = None  # cap validation size of per-epoch reports

    def validate(self):
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"unknown distill mode {self.distill_mode!r}")
        if self.c < 1 or self.s < 1:
            raise ValueError(f"need c >= 1 and s >= 1, got c={self.c}, s={self.s}")
        if not self.temperature > 0 or not self.aux_temperature > 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"task balance must be in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.epoch_eval_cap is not None and self.epoch_eval_cap < 1:
            raise ValueError("epoch_eval_cap must be >= 1 when set")
        self.optimizer.validate()
        self.schedule.validate()


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_xent: float
    loss_distill: float
    loss_aux: float
    clamp_events: int


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_reports: list[M.MetricReport] = field(default_factory=list)

    CSV_HEADER = "step,lr,loss_total,loss_xent,loss_distill,loss_aux,clamp_events"

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for r in self.steps:
                fh.write(f"{r.step},{r.lr!r},{r.loss_total!r},{r.loss_xent!r},"
                         f"{r.loss_distill!r},{r.loss_aux!r},{r.clamp_events}\n")


# ---------------------------------------------------------------------------
# Schedules and optimizer steps
# ---------------------------------------------------------------------------

def lr_at(schedule, step, lr0):
    """Learning rate at a 0-based step.  Cosine decays lr0 to exactly 0 at
    total_steps (clamped beyond); quadratic warmup rises to peak_lr."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.kind == "constant":
        return lr0
    if schedule.kind == "cosine_to_zero":
        total = schedule.total_steps
        if total is None:
            raise ValueError("cosine schedule needs total_steps resolved")
        if step >= total:
            return 0.0
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))
    if schedule.kind == "quadratic_warmup":
        if step >= schedule.warmup_steps:
            return schedule.peak_lr
        frac = step / schedule.warmup_steps
        return schedule.peak_lr * frac * frac
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


def _decays(name):
    # weight decay applies to weights only, never biases
    return not name.endswith(".b")


def sgd_nesterov_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place Nesterov momentum update over named tensors.

    Per tensor: g = grad (+ weight_decay * p for non-bias tensors),
    v = momentum * v + g, p -= lr * (g + momentum * v).
    """
    for name, p in params:
        g = grads[name]
        if weight_decay and _decays(name):
            g = g + np.asarray(weight_decay, p.dtype) * p
        v = velocity[name]
        v *= momentum
        v += g
        p -= np.asarray(lr, p.dtype) * (g + momentum * v)
    return params, velocity


def adam_step(params, grads, moments, lr, beta1, beta2, epsilon, step):
    """In-place bias-corrected Adam update over named tensors; step is
    1-based."""
    if step < 1:
        raise ValueError(f"adam step must be >= 1, got {step}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params:
        g = grads[name]
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + epsilon)
        p -= np.asarray(lr, p.dtype) * update
    return params, moments


class Optimizer:
    """Stateful wrapper dispatching to the configured step function."""

    def __init__(self, cfg, named_params):
        cfg.validate()
        self.cfg = cfg
        self.named_params = list(named_params)
        if cfg.kind == "sgd_nesterov":
            self.velocity = {name: np.zeros_like(p) for name, p in self.named_params}
        else:
            self.moments = {name: (np.zeros_like(p), np.zeros_like(p))
                            for name, p in self.named_params}
        self.steps_taken = 0

    def step(self, grads, lr):
        self.steps_taken += 1
        if self.cfg.kind == "sgd_nesterov":
            sgd_nesterov_step(self.named_params, grads, self.velocity, lr,
                              self.cfg.momentum, self.cfg.weight_decay)
        else:
            adam_step(self.named_params, grads, self.moments, lr,
                      self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon,
                      self.steps_taken)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _batched_logits(net, dataset, batch_size=512, want_penultimate=False):
    logits = []
    pens = []
    for start in range(0, dataset.n, batch_size):
        res = forward(net, dataset.x[start:start + batch_size], mode="eval")
        logits.append(res.logits)
        if want_penultimate:
            pens.append(res.penultimate)
    logits = np.concatenate(logits, axis=0)
    return (logits, np.concatenate(pens, axis=0)) if want_penultimate else logits


def evaluate(net, dataset, batch_size=512, use_hidden=True):
    """Full MetricReport for a network on a dataset; deterministic.

    Subclass metrics are filled only when hidden labels are present, fit the
    network's c*s subclass range, and s >= 2.
    """
    logits = _batched_logits(net, dataset, batch_size)
    probs = L.subclass_softmax(logits, 1.0)
    marg = L.class_marginal(probs)
    true_class = dataset.y_class.argmax(axis=1)
    binary_error = float(np.mean(marg.argmax(axis=1) != true_class))
    correct_marg = marg[np.arange(dataset.n), true_class]
    clamp_events = int(np.count_nonzero(correct_marg < L.LOG_CLAMP))

    subclass_accuracy = None
    effective_bits = None
    hidden = dataset.hidden_subclass if use_hidden else None
    if (hidden is not None and net.s >= 2 and hidden.size
            and hidden.max() < net.c * net.s):
        _, subclass_accuracy = M.best_permutation_accuracy(M.confusion(logits, hidden))
        effective_bits = M.effective_label_bits(subclass_accuracy, net.s)

    return M.MetricReport(
        binary_error_rate=binary_error,
        subclass_accuracy=subclass_accuracy,
        effective_bits=effective_bits,
        mean_prediction_entropy_bits=M.mean_prediction_entropy(probs),
        utilization_entropy_bits=M.utilization_entropy(logits),
        dead_subclass_count=M.dead_subclass_count(logits),
        clamp_events=clamp_events,
    )


def subclass_assignments(net, dataset, batch_size=512):
    """(example_index, predicted_subclass, true_subclass_or_None) rows."""
    logits = _batched_logits(net, dataset, batch_size)
    preds = M.predicted_subclass(logits)
    hidden = dataset.hidden_subclass
    return [(i, int(preds[i]), None if hidden is None else int(hidden[i]))
            for i in range(dataset.n)]


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _resolve_total_steps(run, n_train):
    steps_per_epoch = math.ceil(n_train / run.batch_size)
    return run.epochs * steps_per_epoch


def _epoch_eval_set(run, val_set):
    if run.epoch_eval_cap is None or run.epoch_eval_cap >= val_set.n:
        return val_set
    return val_set.take(np.arange(run.epoch_eval_cap))


def _check_finite(total, step, last_finite):
    if not math.isfinite(total):
        raise TrainingDivergedError(step, last_finite)


def train_teacher(run, data):
    """Minimize hard-label cross-entropy plus beta times the auxiliary loss.

    data is a (train_set, val_set) pair; returns (network, TrainLog) with one
    MetricReport per epoch on the validation set.
    """
    run.validate()
    if run.distill_mode != "none":
        raise ValueError("train_teacher requires distill_mode 'none'")
    train_set, val_set = data
    net = build_network(run.architecture, train_set.x.shape[1:], run.c, run.s,
                        seed=run.seed + 2)
    schedule = run.schedule
    if schedule.kind == "cosine_to_zero" and schedule.total_steps is None:
        schedule = ScheduleConfig(kind="cosine_to_zero",
                                  total_steps=_resolve_total_steps(run, train_set.n))
    opt = Optimizer(run.optimizer, net.parameters())
    epoch_val = _epoch_eval_set(run, val_set)
    log = TrainLog()
    step = 0
    last_finite = None
    for epoch in range(run.epochs):
        for batch in minibatches(train_set, run.batch_size,
                                 epoch_seed=(run.seed + 1) * _STREAM + epoch):
            res = forward(net, batch.x, mode="train",
                          seed=(run.seed + 3) * _STREAM + step)
            probs = L.subclass_softmax(res.logits, 1.0)
            xent = L.xent_class(probs, batch.y_class, 1.0)
            if run.beta > 0:
                aux = L.aux_loss(res.logits, run.aux_temperature)
                grad_z = xent.grad + np.asarray(run.beta, xent.grad.dtype) * aux.grad
                aux_value = aux.value
            else:
                grad_z = xent.grad
                aux_value = 0.0
            total = L.teacher_loss(xent.value, aux_value, run.beta)
            _check_finite(total, step, last_finite)
            last_finite = (xent.value, aux_value)
            grads = backward(net, grad_z, res.state)
            lr = lr_at(schedule, step, run.optimizer.lr0)
            opt.step(grads.tensors, lr)
            log.steps.append(StepRecord(step, lr, total, xent.value, 0.0,
                                        aux_value, xent.clamp_events))
            step += 1
        log.epoch_reports.append(evaluate(net, epoch_val))
    return net, log


def _init_projection(d_teacher, d_student, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = np.sqrt(2.0 / d_student)
    return (rng.standard_normal((d_teacher, d_student)) * scale).astype(np.float32)


def distill_student(run, teacher, data, initial_net=None):
    """Train a student against a frozen teacher.

    Modes: "subclass" (match the teacher's c*s subclass probabilities),
    "conventional" (match class marginals only), "penultimate" (L2 on
    projected penultimate activations, projection trained jointly), and
    "intra_class" (match within-class relative probabilities only; task
    balance is forced to 1 and class targets are never read).

    The teacher runs once in eval mode over the transfer set; its outputs
    are cached, and it receives no gradient.  initial_net warm-starts the
    student instead of a fresh seeded init.
    """
    run.validate()
    mode = run.distill_mode
    if mode == "none":
        raise ValueError("distill_student requires a distillation mode")
    if teacher.c != run.c:
        raise ValueError(f"teacher has c={teacher.c}, run expects c={run.c}")
    if mode in ("subclass", "intra_class") and teacher.s != run.s:
        raise ValueError(f"teacher has s={teacher.s}, run expects s={run.s}")
    train_set, val_set = data
    t = run.temperature
    alpha = 1.0 if mode == "intra_class" else run.alpha

    if initial_net is not None:
        if (initial_net.c, initial_net.s) != (run.c, run.s):
            raise ValueError("initial_net c/s do not match the run")
        net = initial_net
    else:
        net = build_network(run.architecture, train_set.x.shape[1:], run.c, run.s,
                            seed=run.seed + 2)
    schedule = run.schedule
    if schedule.kind == "cosine_to_zero" and schedule.total_steps is None:
        schedule = ScheduleConfig(kind="cosine_to_zero",
                                  total_steps=_resolve_total_steps(run, train_set.n))

    # teacher is deterministic in eval mode: compute its outputs once
    want_pen = mode == "penultimate"
    cached = _batched_logits(teacher, train_set, want_penultimate=want_pen)
    teacher_logits, teacher_pen = cached if want_pen else (cached, None)
    if mode == "subclass":
        teacher_target = L.subclass_softmax(teacher_logits, t)
    elif mode == "conventional":
        teacher_target = L.class_marginal(L.subclass_softmax(teacher_logits, t))
    elif mode == "intra_class":
        teacher_target = L.intra_class_softmax(teacher_logits, t)
    else:
        teacher_target = teacher_pen

    named_params = net.parameters()
    projection = None
    if mode == "penultimate":
        projection = _init_projection(teacher.penultimate_dim(),
                                      net.penultimate_dim(), run.seed + 4)
        named_params = named_params + [("projection.w", projection)]
    opt = Optimizer(run.optimizer, named_params)
    epoch_val = _epoch_eval_set(run, val_set)

    log = TrainLog()
    step = 0
    last_finite = None
    for epoch in range(run.epochs):
        for idx in batch_indices(train_set.n, run.batch_size,
                                 epoch_seed=(run.seed + 1) * _STREAM + epoch):
            res = forward(net, train_set.x[idx], mode="train",
                          seed=(run.seed + 3) * _STREAM + step)
            grad_pen = None
            proj_grad = None
            if mode == "subclass":
                dres = L.distill_subclass(teacher_target[idx], res.logits, t)
            elif mode == "conventional":
                dres = L.distill_conventional(teacher_target[idx], res.logits, t)
            elif mode == "intra_class":
                dres = L.intra_class_distill(teacher_target[idx], res.logits, t)
            else:
                dres = L.penultimate_distill(teacher_target[idx], res.penultimate,
                                             projection)
                grad_pen = alpha * dres.grad_student
                proj_grad = alpha * dres.grad_projection

            grad_z = np.zeros_like(res.logits)
            if mode != "penultimate":
                grad_z += alpha * dres.grad
            if mode == "intra_class":
                xent_value, clamps = 0.0, 0
            else:
                xent = L.xent_class(L.subclass_softmax(res.logits, 1.0),
                                    train_set.y_class[idx], 1.0)
                xent_value, clamps = xent.value, xent.clamp_events
                if alpha < 1.0:
                    grad_z += (1.0 - alpha) * xent.grad
            total = L.student_loss(dres.value, xent_value, alpha)
            _check_finite(total, step, last_finite)
            last_finite = (dres.value, xent_value)
            grads = backward(net, grad_z, res.state, grad_penultimate=grad_pen)
            if proj_grad is not None:
                grads.tensors["projection.w"] = proj_grad
            lr = lr_at(schedule, step, run.optimizer.lr0)
            opt.step(grads.tensors, lr)
            log.steps.append(StepRecord(step, lr, total, xent_value, dres.value,
                                        0.0, clamps))
            step += 1
        log.epoch_reports.append(evaluate(net, epoch_val))
    return net, log
