"""Encoder-decoder DCRNN, the DCNN single-step variant, and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import Windows, ZScore
from .dcgru import DCGRUParams, DCGRUState, stacked_step
from .dconv import CONV_MODES, DiffusionBasis
from .graph import WeightedDigraph

log = logging.getLogger(__name__)

CURRICULA = ("always_truth", "always_model", "scheduled")
TEMPORAL_MODES = ("dcrnn", "dcrnn_seq", "dcnn")
LOSSES = ("mae", "mse")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ConfigMismatch(ValueError):
    """A checkpoint does not fit the model configuration."""


def sampling_probability(i: int, tau: float) -> float:
    """Teacher-forcing probability ``tau / (tau + exp(i / tau))`` at iteration ``i``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    try:
        return tau / (tau + math.exp(i / tau))
    except OverflowError:
        return math.exp(math.log(tau) - np.logaddexp(math.log(tau), i / tau))


@dataclass
class SamplingSchedule:
    tau: float = 3000.0
    iteration: int = 0

    @property
    def epsilon(self) -> float:
        return sampling_probability(self.iteration, self.tau)

    def advance(self) -> float:
        self.iteration += 1
        return self.epsilon


@dataclass
class ModelConfig:
    horizon: int = 12
    history: int = 12
    layers: int = 2
    units: int = 64
    k_max: int = 3
    conv_mode: str = "bidirectional"
    curriculum: str = "scheduled"
    temporal_mode: str = "dcrnn"
    time_of_day: bool = False
    lambda_max: float = 2.0

    def __post_init__(self):
        if self.horizon < 1 or self.history < 1:
            raise ValueError("horizon and history must be >= 1")
        if self.layers < 1 or self.units < 1 or self.k_max < 1:
            raise ValueError("layers, units and k_max must be >= 1")
        if self.conv_mode not in CONV_MODES:
            raise ValueError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.curriculum not in CURRICULA:
            raise ValueError(f"curriculum must be one of {CURRICULA}, got {self.curriculum!r}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ValueError(f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")

    @property
    def input_dim(self) -> int:
        return 2 if self.time_of_day else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 100
    patience: int = 50
    lr_start_epoch: int = 20
    lr_period: int = 10
    lr_factor: float = 0.1
    tau: float = 3000.0
    seed: int = 0
    loss: str = "mae"
    max_grad_norm: float | None = None
    adam_eps: float = 1e-8
    shuffle: bool = True
    stop_train_loss: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be >= 1")


# ----------------------------------------------------------------------------
# models


def _rows(arr: np.ndarray) -> np.ndarray:
    """(B, N, C) -> node-major (N*B, C)."""
    b, n, c = arr.shape
    return arr.transpose(1, 0, 2).reshape(n * b, c)


def _masked_loss(pred: ad.Tensor, target: np.ndarray, mask: np.ndarray, kind: str):
    """Return ``(loss_tensor, error_sum, count)``; ``loss = error_sum / count``."""
    count = float(mask.sum())
    diff = pred - target
    err = ad.absolute(diff) if kind == "mae" else ad.square(diff)
    total = ad.sum(err * mask.astype(np.float64))
    if count == 0:
        return ad.mul(total, 0.0), 0.0, 0.0
    return ad.mul(total, 1.0 / count), float(total.value), count


def _stack_targets(batch: Windows, steps: int):
    """Targets and mask as node-major ``(N*B, steps)`` matrices."""
    b, _, n, _ = batch.targets.shape
    y = batch.targets[:, :steps, :, 0].transpose(2, 0, 1).reshape(n * b, steps)
    m = batch.target_mask[:, :steps].transpose(2, 0, 1).reshape(n * b, steps)
    return y, m


class DCRNN:
    """Sequence-to-sequence DCGRU forecaster."""

    def __init__(self, config: ModelConfig, basis: DiffusionBasis, seed: int = 0):
        self.config = config
        self.basis = basis
        rng = np.random.default_rng(seed)
        p, q = config.input_dim, config.units
        self.encoder = [
            DCGRUParams.init(f"encoder/{i}", p if i == 0 else q, q, basis, rng) for i in range(config.layers)
        ]
        self.decoder = [
            DCGRUParams.init(f"decoder/{i}", p if i == 0 else q, q, basis, rng) for i in range(config.layers)
        ]
        self.proj_w = ad.init_params((q, 1), rng, name="projection/w")
        self.proj_b = ad.init_params(1, rng, "zeros", name="projection/b")

    def params(self) -> list[ad.ParamTensor]:
        out = []
        for layer in self.encoder + self.decoder:
            out.extend(layer.params())
        return out + [self.proj_w, self.proj_b]

    @property
    def n_nodes(self) -> int:
        return self.basis.n_nodes

    def encode(self, inputs: np.ndarray) -> DCGRUState:
        """Consume ``(B, T', N, P)`` history in chronological order; returns the final state."""
        b, steps, n, p = inputs.shape
        if steps != self.config.history:
            raise ValueError(f"expected {self.config.history} input steps, got {steps}")
        state = DCGRUState.zeros(self.encoder, b * n)
        for t in range(steps):
            _, state = stacked_step(_rows(inputs[:, t]), state, self.encoder, self.basis)
        return state

    def decode(self, state: DCGRUState, batch: Windows | None, epsilon: float, rng=None) -> list[ad.Tensor]:
        """Roll the decoder for ``horizon`` steps starting from the GO frame (all zeros).

        Before each later step a coin per sample picks the ground-truth frame
        with probability ``epsilon``, otherwise the model's own previous
        output (padded with the known auxiliary channels).
        """
        if epsilon > 0 and batch is None:
            raise ValueError("ground-truth targets are required when epsilon > 0")
        cfg = self.config
        rows = state.hidden[0].shape[0]
        n = self.n_nodes
        b = rows // n
        inp = ad.Tensor(np.zeros((rows, cfg.input_dim)))
        outputs = []
        for t in range(cfg.horizon):
            top, state = stacked_step(inp, state, self.decoder, self.basis)
            out = ad.matmul(top, self.proj_w) + self.proj_b
            outputs.append(out)
            if t == cfg.horizon - 1:
                break
            aux = _rows(batch.aux[:, t]) if cfg.input_dim > 1 else None
            if epsilon >= 1.0:
                inp = ad.Tensor(self._frame(_rows(batch.targets[:, t]), aux))
                continue
            pred_frame = out if aux is None else ad.concat([out, aux], axis=1)
            if epsilon <= 0.0:
                inp = pred_frame
                continue
            coin = (rng.random(b) < epsilon).astype(np.float64)
            pick = np.tile(coin, n)[:, None]
            truth = self._frame(_rows(batch.targets[:, t]), aux)
            inp = pred_frame * (1.0 - pick) + truth * pick
        return outputs

    @staticmethod
    def _frame(speed: np.ndarray, aux: np.ndarray | None) -> np.ndarray:
        return speed if aux is None else np.concatenate([speed, aux], axis=1)

    def loss(self, batch: Windows, epsilon: float, rng, kind: str = "mae"):
        preds = self.decode(self.encode(batch.inputs), batch, epsilon, rng)
        y, m = _stack_targets(batch, self.config.horizon)
        return _masked_loss(ad.concat(preds, axis=1), y, m, kind)

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray:
        """Free-running forecast, shape ``(B, T, N)`` in normalised units."""
        b, _, n, _ = inputs.shape
        if self.config.input_dim > 1:
            raise ValueError("use predict_windows when auxiliary features are present")
        preds = self.decode(self.encode(inputs), None, 0.0)
        return np.stack([p.value.reshape(n, b).T for p in preds], axis=1)

    def predict_windows(self, batch: Windows) -> np.ndarray:
        b, _, n, _ = batch.inputs.shape
        preds = self.decode(self.encode(batch.inputs), batch, 0.0)
        return np.stack([p.value.reshape(n, b).T for p in preds], axis=1)


class DCNN:
    """Stacked diffusion convolutional layers over the flattened history, rolled out autoregressively."""

    def __init__(self, config: ModelConfig, basis: DiffusionBasis, seed: int = 0):
        self.config = config
        self.basis = basis
        rng = np.random.default_rng(seed)
        dims = [config.history * config.input_dim] + [config.units] * config.layers + [1]
        self.weights = []
        self.biases = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            self.weights.append(ad.init_params((din * basis.num_matrices, dout), rng, name=f"dcnn/{i}/w"))
            self.biases.append(ad.init_params(dout, rng, "zeros", name=f"dcnn/{i}/b"))

    def params(self) -> list[ad.ParamTensor]:
        return self.weights + self.biases

    @property
    def n_nodes(self) -> int:
        return self.basis.n_nodes

    def step(self, window: np.ndarray) -> ad.Tensor:
        """One-step prediction ``(N*B, 1)`` from a ``(B, T', N, P)`` window."""
        b, steps, n, p = window.shape
        h = ad.Tensor(window.transpose(2, 0, 1, 3).reshape(n * b, steps * p))
        last = len(self.weights) - 1
        for i, (w, bias) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(self.basis.features(h), w) + bias
            if i < last:
                h = ad.relu(h)
        return h

    def loss(self, batch: Windows, epsilon: float, rng, kind: str = "mae"):
        y, m = _stack_targets(batch, 1)
        return _masked_loss(self.step(batch.inputs), y, m, kind)

    def rollout(self, batch: Windows, steps: int | None = None) -> np.ndarray:
        steps = self.config.horizon if steps is None else steps
        window = batch.inputs.copy()
        b, _, n, _ = window.shape
        out = []
        for t in range(steps):
            pred = self.step(window).value.reshape(n, b).T[..., None]
            out.append(pred[..., 0])
            frame = pred if self.config.input_dim == 1 else np.concatenate([pred, batch.aux[:, t]], axis=2)
            window = np.concatenate([window[:, 1:], frame[:, None]], axis=1)
        return np.stack(out, axis=1)

    def predict_windows(self, batch: Windows) -> np.ndarray:
        return self.rollout(batch)

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray:
        b, _, n, p = inputs.shape
        t = self.config.horizon
        fake = Windows(inputs, np.zeros((b, t, n, 1)), np.zeros((b, t, n), bool), np.zeros((b, t, n, p - 1)), np.arange(b))
        return self.rollout(fake)


def build_model(config: ModelConfig, graph: WeightedDigraph, seed: int = 0):
    lam = config.lambda_max
    basis = DiffusionBasis.from_graph(graph, config.conv_mode, config.k_max, lambda_max=lam)
    cls = DCNN if config.temporal_mode == "dcnn" else DCRNN
    return cls(config, basis, seed)


def encode(inputs, model: DCRNN) -> DCGRUState:
    """Encode ``T'`` frames of shape ``(N, P)``; a 4-D array is taken as ``(B, T', N, P)``."""
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != model.config.history:
        raise ValueError(f"expected {model.config.history} input frames, got shape {arr.shape}")
    return model.encode(arr)


def decode(state: DCGRUState, targets, epsilon: float, rng, model: DCRNN) -> list[np.ndarray]:
    """Single-sample decode; ``targets`` is a list of ``T`` frames ``(N, 1)`` or ``None``."""
    n = model.n_nodes
    batch = None
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64).reshape(1, model.config.horizon, n, 1)
        p = model.config.input_dim
        batch = Windows(
            np.zeros((1, model.config.history, n, p)),
            y,
            np.ones((1, model.config.horizon, n), bool),
            np.zeros((1, model.config.horizon, n, p - 1)),
            np.zeros(1, dtype=np.int64),
        )
    return [o.value for o in model.decode(state, batch, epsilon, rng)]


# ----------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    epsilon: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_loss!r},{self.lr!r},{self.epsilon!r}"


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0
    stop_reason: str = ""
    iterations: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch].val_loss

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def to_csv(self) -> str:
        return "epoch,train_loss,val_loss,lr,epsilon\n" + "".join(r.csv() + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def evaluate_loss(model, windows: Windows, batch_size: int = 64, kind: str = "mae") -> float:
    """Dataset-level masked loss (free-running); independent of ``batch_size``."""
    total, count = 0.0, 0.0
    for batch in windows.batches(batch_size):
        if isinstance(model, DCNN):
            pred = model.rollout(batch)
        else:
            pred = model.predict_windows(batch)
        y = batch.targets[..., 0]
        m = batch.target_mask
        err = np.abs(pred - y) if kind == "mae" else np.square(pred - y)
        total += float(np.sum(err[m]))
        count += float(m.sum())
    return total / count if count else 0.0


def curriculum_epsilon(config: ModelConfig, schedule: SamplingSchedule) -> float:
    if config.temporal_mode == "dcrnn_seq" or config.curriculum == "always_truth":
        return 1.0
    if config.curriculum == "always_model":
        return 0.0
    return schedule.epsilon


def _snapshot(params):
    return [(p.value.copy(), p.m.copy(), p.v.copy(), p.step_count) for p in params]


def _restore(params, snap):
    for p, (v, m, s, c) in zip(params, snap):
        p.value[...] = v
        p.m[...] = m
        p.v[...] = s
        p.step_count = c


def train(model, train_w: Windows, val_w: Windows, tcfg: TrainConfig, checkpoint=None, meta=None) -> TrainReport:
    """Minibatch Adam with step-decayed learning rate and early stopping on validation loss.

    The best-validation parameters are restored into ``model`` before
    returning and, if ``checkpoint`` is given, written there.
    """
    if len(train_w) == 0 or len(val_w) == 0:
        raise ValueError("train and validation splits must both contain windows")
    cfg = model.config
    params = model.params()
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    coin_rng = np.random.default_rng([tcfg.seed, 2])
    schedule = SamplingSchedule(tcfg.tau)
    report = TrainReport()
    best, best_snap, wait = math.inf, None, 0
    started = time.perf_counter()
    for epoch in range(tcfg.epochs):
        lr = ad.lr_schedule(epoch, tcfg.lr, tcfg.lr_start_epoch, tcfg.lr_period, tcfg.lr_factor)
        order = shuffle_rng.permutation(len(train_w)) if tcfg.shuffle else None
        err_sum, count, eps = 0.0, 0.0, curriculum_epsilon(cfg, schedule)
        for batch in train_w.batches(tcfg.batch_size, order):
            eps = curriculum_epsilon(cfg, schedule)
            ad.zero_grad(params)
            with ad.Tape() as tape:
                loss, s, c = model.loss(batch, eps, coin_rng, tcfg.loss)
            if not math.isfinite(float(loss.value)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {schedule.iteration}")
            if c > 0:
                tape.backward(loss)
                if tcfg.max_grad_norm:
                    ad.clip_grad_norm(params, tcfg.max_grad_norm)
                try:
                    ad.adam_step(params, lr, eps=tcfg.adam_eps)
                except FloatingPointError as exc:
                    raise NumericalError(f"epoch {epoch}, iteration {schedule.iteration}: {exc}") from None
            else:
                tape.clear()
            err_sum += s
            count += c
            schedule.advance()
        train_loss = err_sum / count if count else 0.0
        val_loss = evaluate_loss(model, val_w, tcfg.batch_size, tcfg.loss)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        report.records.append(EpochRecord(epoch, train_loss, val_loss, lr, eps))
        log.info("epoch %d train %.5f val %.5f lr %.2e eps %.4f", epoch, train_loss, val_loss, lr, eps)
        if val_loss < best:
            best, best_snap, wait = val_loss, _snapshot(params), 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= tcfg.patience:
                report.stop_reason = f"no validation improvement for {tcfg.patience} epochs"
                break
        if tcfg.stop_train_loss is not None and train_loss < tcfg.stop_train_loss:
            report.stop_reason = f"train loss below {tcfg.stop_train_loss}"
            break
    else:
        report.stop_reason = "epoch limit"
    report.iterations = schedule.iteration
    report.wall_clock = time.perf_counter() - started
    if best_snap is not None:
        _restore(params, best_snap)
    if checkpoint is not None:
        save_model(checkpoint, model, meta)
    return report


# ----------------------------------------------------------------------------
# persistence and inference


def save_model(path, model, meta: dict | None = None) -> None:
    info = {"model_config": model.config.to_dict(), "n_nodes": model.n_nodes}
    info.update(meta or {})
    ad.save_checkpoint(path, model.params(), info)


def load_model(path, config: ModelConfig, graph: WeightedDigraph):
    """Rebuild a model for ``config`` and fill it from ``path``; raises :class:`ConfigMismatch`."""
    tensors, meta = ad.load_checkpoint(path)
    model = build_model(config, graph)
    diffs = []
    if meta.get("n_nodes", graph.n) != graph.n:
        diffs.append(f"n_nodes: checkpoint {meta.get('n_nodes')} vs graph {graph.n}")
    expected = {p.name: p for p in model.params()}
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            diffs.append(f"{name}: missing from checkpoint (expected {expected[name].shape})")
        elif name not in expected:
            diffs.append(f"{name}: unexpected in checkpoint {tensors[name].shape}")
        elif tensors[name].shape != expected[name].shape:
            diffs.append(f"{name}: checkpoint {tensors[name].shape} vs config {expected[name].shape}")
    if diffs:
        raise ConfigMismatch("checkpoint does not match configuration:\n  " + "\n  ".join(diffs))
    for name, p in expected.items():
        src = tensors[name]
        p.value[...] = src.value
        p.m[...] = src.m
        p.v[...] = src.v
        p.step_count = src.step_count
    return model, meta


def predict(inputs, model, zscore: ZScore) -> list[np.ndarray]:
    """Forecast ``T`` frames ``(N, 1)`` in physical units from ``T'`` physical frames ``(N,)`` or ``(N, 1)``."""
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[0] != model.config.history or arr.shape[1] != model.n_nodes:
        raise ValueError(
            f"inputs have shape {arr.shape}, model expects ({model.config.history}, {model.n_nodes}, P)"
        )
    arr = arr.copy()
    arr[..., 0] = zscore.apply(arr[..., 0])
    z = model.predict_batch(arr[None])[0]
    return [zscore.invert(frame)[:, None] for frame in z]


def predict_all(model, windows: Windows, batch_size: int = 256) -> np.ndarray:
    """Normalised free-running predictions ``(S, T, N)``."""
    chunks = [model.predict_windows(b) for b in windows.batches(batch_size)]
    if not chunks:
        return np.zeros((0, model.config.horizon, model.n_nodes))
    return np.concatenate(chunks, axis=0)
