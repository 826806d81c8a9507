"""Training loops: full-precision teacher, fake-quantized student, sweeps.

The student keeps full-precision latent weights; every forward pass routes
them (and eligible activations) through their quantizers, and the backward
pass lands gradients on the latent values and the trainable quantizer
parameters. A distillation run freezes the teacher completely; its parameter
hash is re-checked every epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, MissingLabelsError, NumericError
from .losses import Mode, ObjectiveSpec, ce_loss, kl_loss
from .network import Network, same_topology
from .tensor import Tensor, add, mul_scalar

QUANT_PARAM_MARKERS = (".wq.", ".aq.")


@dataclass
class TrainPlan:
    objective: ObjectiveSpec
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    warmup_iters: int = 0
    grad_clip: float = 5.0
    seed: int = 0
    init: str = "from_teacher"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.init not in ("from_teacher", "random"):
            raise ConfigError(f"unknown init scheme '{self.init}'")


def lr_at(iteration: int, initial_lr: float, warmup_iters: int, total_iters: int) -> float:
    """Linear warmup to the base rate, then cosine decay to zero at the last iteration."""
    if total_iters <= 0:
        return 0.0
    if warmup_iters > 0 and iteration < warmup_iters:
        return initial_lr * iteration / warmup_iters
    span = total_iters - 1 - warmup_iters
    if span <= 0:
        return initial_lr
    t = min((iteration - warmup_iters) / span, 1.0)
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def plan_lr_at(iteration: int, plan: TrainPlan, total_iters: int) -> float:
    return lr_at(iteration, plan.lr, plan.warmup_iters, total_iters)


# ---------------------------------------------------------------------------
# optimizers


def _decays(name: str) -> bool:
    return not any(marker in name for marker in QUANT_PARAM_MARKERS)


class SGD:
    def __init__(self, named_params, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        for name, t in self.named_params:
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay and _decays(name):
                g = g + t.data.dtype.type(self.weight_decay) * t.data
            t.data = t.data - t.data.dtype.type(lr) * g


class Adam:
    def __init__(self, named_params, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named_params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.named_params:
            if t.grad is None:
                continue
            g = t.grad
            dt = t.data.dtype.type
            if self.weight_decay and _decays(name):
                g = g + dt(self.weight_decay) * t.data
            self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            m_hat = self.m[name] / dt(1 - b1**self.t)
            v_hat = self.v[name] / dt(1 - b2**self.t)
            t.data = t.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))


def make_optimizer(plan: TrainPlan, named_params):
    if plan.optimizer == "sgd":
        return SGD(named_params, plan.weight_decay)
    return Adam(named_params, plan.weight_decay)


def clip_gradients(named_params, max_norm: float) -> float:
    total = 0.0
    for _, t in named_params:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in named_params:
            if t.grad is not None:
                t.grad = t.grad * t.grad.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# run records


CSV_HEADER = "iter,epoch,ce_loss,kl_loss,total_loss,lr,test_acc"


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    epoch_stats: list = field(default_factory=list)
    wall_clock: float = 0.0
    diverged: bool = False

    def log_iter(self, iteration, epoch, ce, kl, total, lr):
        self.rows.append(
            {"iter": iteration, "epoch": epoch, "ce_loss": ce, "kl_loss": kl, "total_loss": total, "lr": lr, "test_acc": None}
        )

    def log_epoch(self, epoch, train_acc, test_acc):
        self.epoch_stats.append({"epoch": epoch, "train_acc": train_acc, "test_acc": test_acc})
        if self.rows and test_acc is not None:
            self.rows[-1]["test_acc"] = test_acc

    def final(self, key: str):
        for row in reversed(self.rows):
            if row[key] is not None:
                return row[key]
        return None

    @property
    def final_test_acc(self):
        for stats in reversed(self.epoch_stats):
            if stats["test_acc"] is not None:
                return stats["test_acc"]
        return None

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r["iter"]),
                        str(r["epoch"]),
                        _fmt(r["ce_loss"]),
                        _fmt(r["kl_loss"]),
                        _fmt(r["total_loss"]),
                        _fmt(r["lr"]),
                        _fmt(r["test_acc"]),
                    ]
                )
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared helpers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def evaluate(net: Network, quantized: bool, ds: Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy of the network on a labelled dataset."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if not ds.has_labels:
        raise DataError("evaluation needs a labelled dataset")
    correct = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.x[start : start + batch_size]
        yb = ds.y[start : start + batch_size]
        logits = net.forward(Tensor(xb), quantized=quantized)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return correct / len(ds)


def _check_grads_finite(net: Network, iteration: int) -> None:
    bad = []
    for name, t in net.parameters():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            bad.append(f"{name} (norm={float(np.linalg.norm(t.grad)):.3g})")
    if bad:
        raise NumericError(f"non-finite gradients at iteration {iteration}: {', '.join(bad)}")


def _constrain_quantizers(net: Network) -> None:
    for _, spec in net.quantizer_specs():
        spec.constrain_params()


# ---------------------------------------------------------------------------
# teacher pre-training


def train_teacher(net: Network, train: Dataset, plan: TrainPlan, test: Optional[Dataset] = None) -> RunRecord:
    """Cross-entropy training of a full-precision network, in place.

    On numeric divergence the most recent epoch-start parameters are
    restored and the record is marked diverged.
    """
    if net.has_quantizers():
        raise ConfigError("teacher network must not carry quantizers")
    if plan.objective.mode != Mode.CE_ONLY:
        raise ConfigError("teacher pre-training uses the cross-entropy objective")
    if not train.has_labels:
        raise MissingLabelsError("teacher pre-training needs labels")

    start = time.perf_counter()
    record = RunRecord()
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    optimizer = make_optimizer(plan, net.parameters())
    iters_per_epoch = math.ceil(len(train) / plan.batch_size)
    total_iters = plan.epochs * iters_per_epoch
    iteration = 0

    for epoch in range(plan.epochs):
        snapshot = net.param_state()
        diverged = False
        for idx in _batches(len(train), plan.batch_size, rng):
            logits = net.forward(Tensor(train.x[idx]), quantized=False)
            loss = ce_loss(logits, train.y[idx])
            if not np.isfinite(loss.data):
                diverged = True
                break
            net.zero_grad()
            loss.backward()
            _check_grads_finite(net, iteration)
            clip_gradients(net.parameters(), plan.grad_clip)
            lr = plan_lr_at(iteration, plan, total_iters)
            optimizer.step(lr)
            record.log_iter(iteration, epoch, float(loss.data), None, float(loss.data), lr)
            iteration += 1
        if diverged:
            net.load_param_state(snapshot)
            record.diverged = True
            break
        train_acc = evaluate(net, False, train)
        test_acc = evaluate(net, False, test) if test is not None else None
        record.log_epoch(epoch, train_acc, test_acc)

    record.wall_clock = time.perf_counter() - start
    return record


# ---------------------------------------------------------------------------
# fake-quantized student training


def _init_student_from_teacher(student: Network, teacher: Network) -> None:
    t_layers = teacher.parametric_layers()
    s_layers = student.parametric_layers()
    for (_, tl), (_, sl) in zip(t_layers, s_layers):
        sl.W.data = tl.W.data.copy()
        sl.b.data = tl.b.data.copy()
        if sl.weight_q is not None:
            # Re-derive weight-quantizer parameters from the copied weights.
            sl.weight_q.clip_params.clear()
            sl.weight_q.round_params.clear()
            sl.weight_q.init_from_array(sl.W.data)


def train_sqakd(
    teacher: Optional[Network],
    student: Network,
    train: Dataset,
    plan: TrainPlan,
    test: Optional[Dataset] = None,
) -> RunRecord:
    """Train a quantized student, optionally distilling from a frozen teacher.

    Per iteration: teacher forward (no gradient), student forward through the
    quantizers, objective per the plan, backward onto the latent weights and
    quantizer parameters, optimizer step on a warmup+cosine schedule. The
    cross-entropy and distillation losses are both logged whenever they are
    computable, independent of which one is optimized.
    """
    mode = plan.objective.mode
    if mode != Mode.CE_ONLY and teacher is None:
        raise ConfigError(f"objective '{mode.value}' needs a teacher network")
    if teacher is not None:
        if not same_topology(teacher, student):
            raise ConfigError("teacher and student topologies differ")
        teacher.set_requires_grad(False)

    if plan.init == "from_teacher":
        if teacher is None:
            raise ConfigError("init scheme 'from_teacher' needs a teacher network")
        _init_student_from_teacher(student, teacher)

    teacher_hash = teacher.param_hash() if teacher is not None else None

    start = time.perf_counter()
    record = RunRecord()
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    optimizer = make_optimizer(plan, student.parameters())
    iters_per_epoch = math.ceil(len(train) / plan.batch_size)
    total_iters = plan.epochs * iters_per_epoch
    iteration = 0

    for epoch in range(plan.epochs):
        for idx in _batches(len(train), plan.batch_size, rng):
            xb = Tensor(train.x[idx])
            yb = train.y[idx] if train.has_labels else None

            h_t = teacher.forward(xb, quantized=False) if teacher is not None else None
            h_s = student.forward(xb, quantized=True)

            ce_t = ce_loss(h_s, yb) if yb is not None else None
            kl_t = kl_loss(h_t, h_s, plan.objective.rho) if h_t is not None else None

            if mode == Mode.CE_ONLY:
                if ce_t is None:
                    raise MissingLabelsError("cross-entropy objective needs ground-truth labels")
                total = ce_t
            elif mode == Mode.KL_ONLY:
                total = kl_t
            else:
                if ce_t is None:
                    raise MissingLabelsError("mixed objective needs ground-truth labels")
                total = add(mul_scalar(ce_t, 1.0 - plan.objective.lam), mul_scalar(kl_t, plan.objective.lam))

            if not np.isfinite(total.data):
                raise NumericError(f"non-finite loss at iteration {iteration} (epoch {epoch})")

            student.zero_grad()
            total.backward()
            _check_grads_finite(student, iteration)
            clip_gradients(student.parameters(), plan.grad_clip)
            lr = plan_lr_at(iteration, plan, total_iters)
            optimizer.step(lr)
            _constrain_quantizers(student)

            record.log_iter(
                iteration,
                epoch,
                None if ce_t is None else float(ce_t.data),
                None if kl_t is None else float(kl_t.data),
                float(total.data),
                lr,
            )
            iteration += 1

        if train.has_labels:
            train_acc = evaluate(student, True, train)
            test_acc = evaluate(student, True, test) if test is not None and test.has_labels else None
        else:
            train_acc = test_acc = None
        record.log_epoch(epoch, train_acc, test_acc)

        if teacher is not None and teacher.param_hash() != teacher_hash:
            raise RuntimeError(f"teacher parameters changed during epoch {epoch}")

    record.wall_clock = time.perf_counter() - start
    return record


def sweep_lambda(
    teacher: Network,
    make_student: Callable[[], Network],
    train: Dataset,
    lambdas,
    plan: TrainPlan,
    test: Optional[Dataset] = None,
):
    """One independent run per lambda with identical seeds and data order."""
    records = {}
    students = {}
    for lam in lambdas:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
        objective = ObjectiveSpec.from_lambda(lam, plan.objective.rho)
        arm_plan = replace(plan, objective=objective)
        student = make_student()
        records[lam] = train_sqakd(teacher, student, train, arm_plan, test)
        students[lam] = student
    return records, students
