"""Training loop: Glorot init, Adam with rate decay, subject-level splits.

Patch pairs are grouped by subject so validation subjects never
contribute gradient steps. Reference mode is single threaded and
deterministic given the seed; the per-epoch history records inference
mode train/validation MSE and the returned weights are the best
validation checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor
from .errors import SpecError
from .network import ModelSpec, ModelWeights, _ensemble_forward, build_aniso_unet, forward, run_model
from .patching import PatchSet


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 1e-6
    batch_size: int = 32
    epochs: int = 100
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"validation fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")
        if self.learning_rate < 0.0 or self.decay < 0.0:
            raise ValueError("learning rate and decay must be >= 0")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass
class HistoryRow:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


def glorot_init(shape, rng: int | np.random.Generator = 0) -> np.ndarray:
    """Glorot-normal tensor: N(0, 2 / (fan_in + fan_out)).

    For conv kernels (O, C, kx, ky, kz) the fans are C*k and O*k with k
    the kernel volume; for plain matrices, the two axis sizes.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    shape = tuple(int(s) for s in shape)
    if len(shape) >= 2:
        receptive = int(np.prod(shape[2:], initial=1))
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    else:
        fan_in = fan_out = shape[0]
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    step_index: int,
    config: TrainConfig,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """One Adam update in place; returns the effective learning rate.

    The rate decays per step as lr0 / (1 + decay * t); bias-corrected
    first/second moments follow the standard recursion. A NaN gradient
    aborts with the offending parameter named.
    """
    lr_t = config.learning_rate / (1.0 + config.decay * step_index)
    for name, tensor in params.items():
        g = grads[name] if grads is not None else tensor.grad
        if g is None:
            continue
        if np.isnan(g).any():
            raise RuntimeError(f"NaN gradient for parameter {name!r} at step {step_index}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**step_index)
        v_hat = v / (1.0 - beta2**step_index)
        tensor.data = tensor.data - lr_t * m_hat / (np.sqrt(v_hat) + eps)
    return lr_t


def split_subjects(patchsets: list[PatchSet], val_fraction: float, rng: np.random.Generator):
    """Shuffle subjects and split them into train/validation groups."""
    order = rng.permutation(len(patchsets))
    n_val = max(1, int(round(val_fraction * len(patchsets))))
    n_train = len(patchsets) - n_val
    if n_train < 1:
        raise ValueError(f"subject split is empty: {len(patchsets)} subjects at validation fraction {val_fraction}")
    val_idx = set(order[:n_val].tolist())
    train = [patchsets[i] for i in range(len(patchsets)) if i not in val_idx]
    val = [patchsets[i] for i in range(len(patchsets)) if i in val_idx]
    return train, val


def _stack_pairs(patchsets: list[PatchSet], dtype) -> tuple[np.ndarray, np.ndarray]:
    lf = [np.asarray(p, dtype=dtype)[None] for ps in patchsets for p in ps.lf_patches]
    hf = [np.asarray(p, dtype=dtype)[None] for ps in patchsets for p in ps.hf_patches]
    if not lf:
        raise ValueError("patch set is empty")
    return np.stack(lf), np.stack(hf)


def calibrate_bn_statistics(spec: ModelSpec, weights: ModelWeights, lf: np.ndarray, batch_size: int) -> None:
    """Set batchnorm running stats to population statistics.

    The momentum-EMA accumulated during optimisation trails the moving
    weights; one sweep over the training patches under the frozen final
    weights replaces it with the exact per-channel mean and variance,
    which is what inference should normalise by.
    """
    sums: dict[int, np.ndarray] = {}
    sumsq: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    states: dict[int, object] = {}
    for start in range(0, lf.shape[0], batch_size):
        x = Tensor(lf[start : start + batch_size])
        if spec.masksembles is not None and x.shape[0] % spec.masksembles.m:
            continue
        graph = Graph()
        graph.mutate_state = False
        run_model(spec, weights, graph, x, training=True)
        for node in graph.nodes:
            if node.kind != "batchnorm":
                continue
            state = node.params["state"]
            data = node.inputs[0].data
            key = id(state)
            m = data.sum(axis=(0, 2, 3, 4), keepdims=True)
            m2 = (data * data).sum(axis=(0, 2, 3, 4), keepdims=True)
            if key not in sums:
                sums[key], sumsq[key], counts[key], states[key] = m, m2, 0, state
            else:
                sums[key] = sums[key] + m
                sumsq[key] = sumsq[key] + m2
            counts[key] += data.shape[0] * data.shape[2] * data.shape[3] * data.shape[4]
    for key, state in states.items():
        mean = sums[key] / counts[key]
        var = sumsq[key] / counts[key] - mean * mean
        state.running_mean = mean.astype(state.running_mean.dtype)
        state.running_var = np.clip(var, 0.0, None).astype(state.running_var.dtype)


def evaluate_mse(spec: ModelSpec, weights: ModelWeights, lf: np.ndarray, hf: np.ndarray, batch_size: int) -> float:
    """Inference-mode mean squared error over a patch array, in float64."""
    total = 0.0
    count = 0
    for start in range(0, lf.shape[0], batch_size):
        x = lf[start : start + batch_size]
        y = hf[start : start + batch_size]
        if spec.masksembles is not None:
            pred = _ensemble_forward(weights, spec, x).mean(axis=0)
        else:
            pred = forward(weights, spec, x)
        diff = pred.astype(np.float64) - y.astype(np.float64)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def train(
    spec: ModelSpec,
    patchsets: list[PatchSet] | PatchSet,
    config: TrainConfig,
    init_seed: int | None = None,
    eval_batch_size: int | None = None,
    verbose: bool = False,
) -> tuple[ModelWeights, list[HistoryRow]]:
    """Optimize the network on subject-grouped patch pairs.

    Minimizes the per-pixel mean squared error between predicted and true
    high-field patches over shuffled mini-batches. Returns the weights of
    the epoch with the lowest validation MSE and the per-epoch history.
    """
    if isinstance(patchsets, PatchSet):
        patchsets = [patchsets]
    if spec.masksembles is not None and config.batch_size % spec.masksembles.m:
        raise SpecError(f"batch size {config.batch_size} not divisible by mask count {spec.masksembles.m}")

    rng = np.random.default_rng(config.seed)
    train_sets, val_sets = split_subjects(patchsets, config.val_fraction, rng)
    lf_train, hf_train = _stack_pairs(train_sets, np.float32)
    lf_val, hf_val = _stack_pairs(val_sets, np.float32)

    weights = build_aniso_unet(spec, seed=config.seed if init_seed is None else init_seed, dtype=np.float32)
    trainable = weights.trainable()
    state = AdamState.zeros_like(trainable)

    # A null optimizer freezes every piece of learned state (batchnorm
    # running statistics and batch order included), so the history is flat.
    learning = config.learning_rate > 0.0

    history: list[HistoryRow] = []
    best_weights = weights.copy()
    best_val = math.inf
    n = lf_train.shape[0]
    step = 0
    lr_t = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if learning else np.arange(n)
        loss_sum = 0.0
        loss_count = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if spec.masksembles is not None and len(idx) % spec.masksembles.m:
                continue  # partial tail batch cannot be routed through the masks
            x = Tensor(lf_train[idx])
            y = Tensor(hf_train[idx])
            graph = Graph()
            graph.mutate_state = learning
            out = run_model(spec, weights, graph, x, training=True)
            loss = graph.apply("mse", [out, y])
            loss_sum += float(loss.data.reshape(-1)[0]) * len(idx)
            loss_count += len(idx)
            if learning:
                for t in trainable.values():
                    t.zero_grad()
                from .autodiff import backward

                backward(graph, loss)
                step += 1
                lr_t = adam_step(trainable, None, state, step, config)

        eb = eval_batch_size or max(config.batch_size, 16)
        if spec.masksembles is not None:
            eb -= eb % spec.masksembles.m
        train_mse = loss_sum / loss_count
        val_mse = evaluate_mse(spec, weights, lf_val, hf_val, eb)
        history.append(HistoryRow(epoch=epoch, train_mse=train_mse, val_mse=val_mse, lr=lr_t))
        if verbose:
            print(f"epoch {epoch}: train_mse {train_mse:.6f} val_mse {val_mse:.6f} lr {lr_t:.6g}", flush=True)
        if val_mse < best_val:
            best_val = val_mse
            best_weights = weights.copy()

    if learning:
        calibrate_bn_statistics(spec, best_weights, lf_train, config.batch_size)
    return best_weights, history


def history_to_csv(history: list[HistoryRow]) -> str:
    lines = ["epoch,train_mse,val_mse,lr"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_mse:.10g},{row.val_mse:.10g},{row.lr:.10g}")
    return "\n".join(lines) + "\n"
