"""Online SGD with momentum and L2, per-sample mask draws, and timing.

One training run is strictly sequential over samples; the wall-clock
numbers cover the update loop only (mask draws included, evaluation
excluded), which is what the speed comparisons are about.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datasets import Dataset
from .dropout import (
    DropoutPolicy,
    FixedMaskTable,
    fixed_table_init,
    inference_scale,
    sample_circuit_mask,
    sample_node_masks,
)
from .errors import DataError, ParameterError, PolicyError
from .network import (
    Gradients,
    Parameters,
    backward,
    forward,
    forward_batch,
)
from .rng import RngKey, permutation


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    momentum: float = 0.4
    l2: float = 0.0001
    retain_p: float = 0.5
    epochs: int = 100
    batch_size: int = 1
    init_scale: float = 1.0

    def __post_init__(self):
        # learning_rate = 0 is allowed: it makes training a deliberate no-op
        if self.learning_rate < 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.l2 < 0:
            raise ParameterError(f"l2 must be >= 0, got {self.l2}")
        if not 0.0 < self.retain_p <= 1.0:
            raise ParameterError(f"retain_p must be in (0, 1], got {self.retain_p}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_scale <= 0:
            raise ParameterError(f"init_scale must be > 0, got {self.init_scale}")


@dataclass
class Velocity:
    hidden_w: list
    hidden_b: list
    out_w: np.ndarray
    out_b: np.ndarray

    @classmethod
    def zeros_like(cls, params: Parameters) -> "Velocity":
        return cls(
            hidden_w=[np.zeros_like(w) for w in params.hidden_w],
            hidden_b=[np.zeros_like(b) for b in params.hidden_b],
            out_w=np.zeros_like(params.out_w),
            out_b=np.zeros_like(params.out_b),
        )


@dataclass
class TrialResult:
    condition: str
    seed: int
    train_errors: list
    test_errors: list
    epoch_seconds: list
    total_seconds: float
    final_test_error: float

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "seed": self.seed,
            "train_errors": self.train_errors,
            "test_errors": self.test_errors,
            "epoch_seconds": self.epoch_seconds,
            "total_seconds": self.total_seconds,
            "final_test_error": self.final_test_error,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrialResult":
        return cls(**obj)


def sample_loss(output: np.ndarray, target: int, head: str = "softmax") -> float:
    """Per-sample loss matching the network head."""
    if head == "softmax":
        return -math.log(max(float(output[target]), 1e-300))
    t = np.full(output.shape, -1.0)
    t[target] = 1.0
    return 0.5 * float(((output - t) ** 2).sum())


def sgd_step(
    params: Parameters, grads: Gradients, vel: Velocity, hp: Hyperparams
) -> tuple:
    """v <- momentum*v - lr*(g + l2*w); w <- w + v. Biases skip the L2 term.

    Updates params and vel in place and returns them.
    """
    lr = hp.learning_rate
    mom = hp.momentum
    decay = lr * hp.l2
    for w, g, v in zip(params.hidden_w, grads.hidden_w, vel.hidden_w):
        v *= mom
        v -= lr * g
        if decay:
            v -= decay * w
        w += v
    for b, g, v in zip(params.hidden_b, grads.hidden_b, vel.hidden_b):
        v *= mom
        v -= lr * g
        b += v
    vel.out_w *= mom
    vel.out_w -= lr * grads.out_w
    if decay:
        vel.out_w -= decay * params.out_w
    params.out_w += vel.out_w
    vel.out_b *= mom
    vel.out_b -= lr * grads.out_b
    params.out_b += vel.out_b
    return params, vel


def evaluate(params: Parameters, policy: DropoutPolicy, data: Dataset) -> float:
    """Classification error in percent under inference-scaled parameters."""
    if data.n_samples == 0:
        raise DataError(f"cannot evaluate on empty dataset {data.name!r}")
    scaled = inference_scale(params, policy)
    outputs = forward_batch(scaled, data.features)
    preds = np.argmax(outputs, axis=1)  # ties resolve to the lowest class index
    return 100.0 * float(np.mean(preds != data.labels))


def _draw_mask(policy, topology, table, trial, epoch, instance_id):
    if policy.kind == "none":
        return None
    key = RngKey(trial=trial, epoch=epoch, sample=instance_id)
    if policy.kind == "node_dropout":
        return sample_node_masks(
            topology, policy.retain_p, key, include_input=policy.apply_to_input
        )
    if policy.kind == "nonfixed_dropcircuit":
        return sample_circuit_mask(topology.k, policy.retain_p, key)
    return table.lookup(instance_id)


def train(
    params: Parameters,
    train_set: Dataset,
    test_set: Dataset,
    policy: DropoutPolicy,
    hp: Hyperparams,
    seed: RngKey,
    label: Optional[str] = None,
    clock: Callable[[], float] = time.perf_counter,
    mask_table: Optional[FixedMaskTable] = None,
) -> tuple:
    """Run the full epoch budget; returns (params, TrialResult).

    Every random decision is keyed off (seed.trial, epoch, instance id),
    so a rerun with the same arguments reproduces the trajectory bit for
    bit. Masks key off instance ids, not shuffle positions, which keeps
    fixed-mask training immune to reordering.
    """
    topo = params.topology
    if train_set.n_samples == 0 or test_set.n_samples == 0:
        raise DataError("train and test sets must be non-empty")
    if train_set.n_features != topo.input_dim or test_set.n_features != topo.input_dim:
        raise DataError(
            f"feature width {train_set.n_features} does not match network input {topo.input_dim}"
        )
    for ds in (train_set, test_set):
        if ds.class_count > topo.output_dim:
            raise DataError(
                f"{ds.class_count} classes exceed network output width {topo.output_dim}"
            )
    if policy.kind in ("nonfixed_dropcircuit", "fixed_dropcircuit") and topo.k < 2:
        raise PolicyError(f"{policy.kind} requires k >= 2 circuits, got k={topo.k}")

    ids = train_set.instance_ids
    if policy.kind == "fixed_dropcircuit":
        if len(np.unique(ids)) != len(ids):
            raise PolicyError("fixed_dropcircuit needs unique instance ids")

    X, labels = train_set.features, train_set.labels
    n = train_set.n_samples
    trial = seed.trial
    vel = Velocity.zeros_like(params)
    table = mask_table
    train_errors, test_errors, epoch_seconds = [], [], []

    for epoch in range(hp.epochs):
        t0 = clock()
        if table is None and policy.kind == "fixed_dropcircuit":
            table = fixed_table_init(
                ids, topo.k, policy.retain_p, seed.with_fields(purpose="circuit-mask")
            )
        order = permutation(seed.with_fields(epoch=epoch, purpose="shuffle"), n)
        if hp.batch_size == 1:
            for idx in order:
                iid = int(ids[idx])
                masks = _draw_mask(policy, topo, table, trial, epoch, iid)
                _, trace = forward(params, X[idx], masks, mode="train")
                grads = backward(params, trace, int(labels[idx]), masks)
                sgd_step(params, grads, vel, hp)
        else:
            for start in range(0, n, hp.batch_size):
                batch = order[start : start + hp.batch_size]
                acc = Gradients.zeros_like(params)
                for idx in batch:
                    iid = int(ids[idx])
                    masks = _draw_mask(policy, topo, table, trial, epoch, iid)
                    _, trace = forward(params, X[idx], masks, mode="train")
                    acc.add_(backward(params, trace, int(labels[idx]), masks))
                acc.scale_(1.0 / len(batch))
                sgd_step(params, acc, vel, hp)
        epoch_seconds.append(clock() - t0)

        train_errors.append(evaluate(params, policy, train_set))
        test_errors.append(evaluate(params, policy, test_set))

    for arr in params.weight_arrays() + params.bias_arrays():
        if not np.isfinite(arr).all():
            raise FloatingPointError(
                "training produced non-finite parameters (learning rate too high?)"
            )

    result = TrialResult(
        condition=label or policy.kind,
        seed=trial,
        train_errors=train_errors,
        test_errors=test_errors,
        epoch_seconds=epoch_seconds,
        total_seconds=float(sum(epoch_seconds)),
        final_test_error=test_errors[-1],
    )
    return params, result


def grad_check(
    params: Parameters,
    x: np.ndarray,
    target: int,
    masks=None,
    eps: float = 1e-5,
) -> float:
    """Max relative disagreement between backprop and central differences.

    Perturbs every scalar parameter; masks (if given) stay frozen across
    all perturbed evaluations. Relative error uses |a-n|/max(|a|,|n|,1e-8)
    so exactly-zero pairs (e.g. a fully dropped circuit) contribute 0.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    head = params.topology.head
    mode = "train" if masks is not None else "infer"
    _, trace = forward(params, x, masks, mode=mode)
    grads = backward(params, trace, target, masks)

    def loss() -> float:
        out, _ = forward(params, x, masks, mode=mode)
        return sample_loss(out, target, head)

    pairs = list(zip(params.hidden_w, grads.hidden_w))
    pairs += list(zip(params.hidden_b, grads.hidden_b))
    pairs += [(params.out_w, grads.out_w), (params.out_b, grads.out_b)]
    worst = 0.0
    for arr, g in pairs:
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
