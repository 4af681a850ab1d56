"""Negative log-likelihood training: minibatch loop, SGD/Adam, early
stopping on validation AUC, gradient verification, and divergence guards.

One tape is built per example; batch gradients are the mean of per-example
gradients accumulated in ascending example order, so results are identical
no matter how many worker threads compute the forward/backward passes.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .data import Dataset, EventSequence
from .errors import NumericalError
from .model import (ModelConfig, Parameters, forward, init_parameters,
                    random_parameters)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"            # sgd | adam
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3                  # evaluations without improvement
    seed: int = 1
    grad_clip_norm: float | None = None
    eval_every: int = 1                # epochs between validation passes
    pos_weight: float = 1.0            # weight on positive-class loss terms
    target_train_nll: float | None = None  # stop early once reached
    workers: int = 1

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


# ---------------------------------------------------------------------------
# loss


def nll_loss(logit: float, label: int) -> float:
    """-[y ln p + (1-y) ln(1-p)] with p = sigmoid(logit).

    Fused from the logit: softplus(logit) - y * logit, total for any input.
    """
    return float(np.logaddexp(0.0, logit) - label * logit)


def nll_loss_var(logit_var: ad.Var, label: int, weight: float = 1.0) -> ad.Var:
    """Tape-level fused loss for backpropagation."""
    loss = ad.sub(ad.softplus(logit_var), ad.scale(logit_var, float(label)))
    return ad.scale(loss, weight) if weight != 1.0 else loss


def example_loss_and_grads(seq: EventSequence, params: Parameters,
                           config: ModelConfig,
                           pos_weight: float = 1.0
                           ) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + backward for one sequence; gradients keyed by parameter name."""
    cache = forward(seq, params, config)
    weight = pos_weight if seq.label == 1 else 1.0
    loss = nll_loss_var(cache.logit_var, seq.label, weight)
    node_grads = ad.backward(cache.tape, loss)
    grads = {name: node_grads[var.id] for name, var in cache.param_vars.items()}
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, kind: str, params: Parameters) -> "OptimizerState":
        state = cls(kind)
        if kind == "adam":
            state.m = {n: np.zeros_like(p) for n, p in params.items()}
            state.v = {n: np.zeros_like(p) for n, p in params.items()}
        return state


def optimizer_step(params: Parameters, grads: Mapping[str, np.ndarray],
                   state: OptimizerState, config: TrainConfig
                   ) -> tuple[Parameters, OptimizerState]:
    """In-place parameter update; NaN gradients abort, naming the tensor."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")

    if config.grad_clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > config.grad_clip_norm:
            factor = config.grad_clip_norm / total
            grads = {n: g * factor for n, g in grads.items()}

    lr = config.learning_rate
    if state.kind == "sgd":
        for name in params:
            params[name] -= lr * grads[name]
        state.step += 1
        return params, state

    state.step += 1
    t = state.step
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    for name in params:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    valid_auc: float | None
    seconds: float

    def line(self) -> str:
        auc_s = f"{self.valid_auc:.4f}" if self.valid_auc is not None else "-"
        return (f"epoch={self.epoch} train_nll={self.train_nll:.6f} "
                f"valid_auc={auc_s} seconds={self.seconds:.2f}")


@dataclass
class TrainResult:
    params: Parameters
    opt_state: OptimizerState
    model_config: ModelConfig
    train_config: TrainConfig
    log: list[EpochRecord]
    best_valid_auc: float | None
    best_epoch: int
    diverged: bool = False


def predict_scores(dataset: Dataset, params: Parameters,
                   config: ModelConfig) -> np.ndarray:
    return np.array([forward(s, params, config).y_hat
                     for s in dataset.sequences])


def _dataset_auc(dataset: Dataset, params: Parameters,
                 config: ModelConfig) -> float:
    scores = predict_scores(dataset, params, config)
    labels = [s.label for s in dataset.sequences]
    return mt.auc(mt.ScoredSet.of(scores, labels))


def _batch_grads(batch: Sequence[EventSequence], params: Parameters,
                 config: ModelConfig, pos_weight: float,
                 pool: ThreadPoolExecutor | None
                 ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and gradients over a batch, reduced in example order."""
    if pool is not None and len(batch) > 1:
        results = list(pool.map(
            lambda seq: example_loss_and_grads(seq, params, config, pos_weight),
            batch))
    else:
        results = [example_loss_and_grads(seq, params, config, pos_weight)
                   for seq in batch]

    total_loss = 0.0
    acc: dict[str, np.ndarray] = {n: np.zeros_like(p) for n, p in params.items()}
    for loss, grads in results:  # ascending example index within the batch
        total_loss += loss
        for name, g in grads.items():
            acc[name] += g
    scale = 1.0 / len(batch)
    for name in acc:
        acc[name] *= scale
    return total_loss * scale, acc


def train(train_ds: Dataset, valid_ds: Dataset, model_config: ModelConfig,
          train_config: TrainConfig,
          log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Single-seed training run returning the best-validation parameters.

    Epoch shuffles draw from a (seed, epoch) stream; batches accumulate
    gradients in ascending example order; validation AUC drives early
    stopping with the configured patience. Divergence (non-finite loss or
    gradient) stops training and returns the last good parameters.
    """
    model_config.validate()
    train_config.validate()
    if not train_ds.sequences:
        raise ValueError("empty training dataset")
    if not valid_ds.sequences:
        raise ValueError("empty validation dataset")

    n = train_ds.schema.n
    params = init_parameters(model_config, n, train_config.seed)
    state = OptimizerState.fresh(train_config.optimizer, params)

    best_params = params.copy()
    best_auc: float | None = None
    best_epoch = 0
    evals_since_improvement = 0
    log: list[EpochRecord] = []
    diverged = False
    pool = (ThreadPoolExecutor(max_workers=train_config.workers)
            if train_config.workers > 1 else None)

    try:
        for epoch in range(1, train_config.max_epochs + 1):
            started = time.perf_counter()
            rng = np.random.default_rng((train_config.seed, epoch))
            order = rng.permutation(len(train_ds.sequences))

            epoch_loss, seen = 0.0, 0
            try:
                for lo in range(0, len(order), train_config.batch_size):
                    batch = [train_ds.sequences[i]
                             for i in order[lo:lo + train_config.batch_size]]
                    loss, grads = _batch_grads(batch, params, model_config,
                                               train_config.pos_weight, pool)
                    if not np.isfinite(loss):
                        raise NumericalError(f"training loss diverged: {loss}")
                    params, state = optimizer_step(params, grads, state,
                                                   train_config)
                    epoch_loss += loss * len(batch)
                    seen += len(batch)
            except NumericalError as exc:
                diverged = True
                if log_fn:
                    log_fn(f"epoch={epoch} aborted: {exc}")
                break

            train_nll = epoch_loss / seen
            valid_auc = None
            if epoch % train_config.eval_every == 0:
                valid_auc = _dataset_auc(valid_ds, params, model_config)
                if best_auc is None or valid_auc > best_auc:
                    best_auc, best_epoch = valid_auc, epoch
                    best_params = params.copy()
                    evals_since_improvement = 0
                else:
                    evals_since_improvement += 1

            record = EpochRecord(epoch, train_nll, valid_auc,
                                 time.perf_counter() - started)
            log.append(record)
            if log_fn:
                log_fn(record.line())

            if (train_config.target_train_nll is not None
                    and train_nll < train_config.target_train_nll):
                break
            if evals_since_improvement >= train_config.patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if best_auc is None:  # no evaluation happened before stopping
        best_params, best_epoch = params.copy(), len(log)
    return TrainResult(best_params, state, model_config, train_config,
                       log, best_auc, best_epoch, diverged)


# ---------------------------------------------------------------------------
# gradient verification mode


@dataclass
class GradCheckReport:
    per_group: dict[str, tuple[float, int]]  # name -> (max rel err, flat index)
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(err for err, _ in self.per_group.values())

    def worst(self) -> tuple[str, float, int]:
        name = max(self.per_group, key=lambda n: self.per_group[n][0])
        err, idx = self.per_group[name]
        return name, err, idx

    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def lines(self) -> list[str]:
        out = []
        for name, (err, idx) in sorted(self.per_group.items(),
                                       key=lambda kv: -kv[1][0]):
            flag = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{flag:4s} {name:20s} max_rel_err={err:.3e} at [{idx}]")
        name, err, idx = self.worst()
        out.append(f"worst: {name}[{idx}] rel_err={err:.3e} "
                   f"({'pass' if self.passed() else 'fail'} at {self.tolerance:g})")
        return out


def grad_check_mode(sequences: Sequence[EventSequence], n: int,
                    model_config: ModelConfig, seed: int = 0,
                    eps: float = 1e-5, tolerance: float = 1e-4
                    ) -> GradCheckReport:
    """Finite-difference check of the full model loss on a small batch.

    Parameters are drawn at O(1) scale (see ``random_parameters``) so ReLU
    and softmax paths are exercised away from non-differentiable points.
    """
    params = random_parameters(model_config, n, seed)

    def total_loss(arrays: Mapping[str, np.ndarray]) -> float:
        p = Parameters(dict(arrays))
        return sum(nll_loss(forward(s, p, model_config).logit, s.label)
                   for s in sequences)

    analytic = {name: np.zeros_like(v) for name, v in params.items()}
    for seq in sequences:
        _, grads = example_loss_and_grads(seq, params, model_config)
        for name, g in grads.items():
            analytic[name] += g

    report = ad.finite_diff_errors(total_loss, dict(params.items()),
                                   analytic, eps=eps)
    return GradCheckReport(report, tolerance)
