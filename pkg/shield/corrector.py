"""Neural yaw-error corrector and the weighted correction strategy.

The network regresses the heading error of each leaf IMU relative to the
root IMU from root-frame orientations and accelerations plus the gravity
direction seen from the root. Its output is blended in through a weight that
rises while any IMU reports a disturbed field and decays otherwise.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray
from torch import nn

from shield.detector import IMU_COUNT, ROOT_INDEX
from shield.exceptions import ConfigError, DatasetError, FormatError, NumericalBlowUpError
from shield.rotmath import rot_about_axis

logger = logging.getLogger(__name__)

LEAF_COUNT = IMU_COUNT - 1
FEATURE_DIM = LEAF_COUNT * (9 + 3) + 3
OUTPUT_DIM = LEAF_COUNT
HIDDEN_DIM = 256
LSTM_LAYERS = 2
WEIGHT_STEP = 0.05
ACCEL_SCALE = 1.0 / 9.8

WEIGHTS_MAGIC = b"MSYC"
WEIGHTS_VERSION = 1


def build_input(acc_G: ArrayLike, R_G: ArrayLike, g_global: ArrayLike) -> NDArray[np.float64]:
    """63 features: per leaf ``R_root^T R_i`` (row-major) and ``R_root^T a_i``, then ``R_root^T g``."""
    return build_inputs(np.asarray(acc_G)[None], np.asarray(R_G)[None], g_global)[0]


def build_inputs(acc_G: ArrayLike, R_G: ArrayLike, g_global: ArrayLike) -> NDArray[np.float64]:
    """Vectorized :func:`build_input` over ``(T, 6, 3)`` accelerations and ``(T, 6, 3, 3)`` rotations."""
    acc = np.asarray(acc_G, dtype=np.float64)
    R = np.asarray(R_G, dtype=np.float64)
    g = np.asarray(g_global, dtype=np.float64)
    root_T = np.swapaxes(R[:, ROOT_INDEX], -1, -2)
    rel_R = np.einsum("tij,tljk->tlik", root_T, R[:, :ROOT_INDEX])
    rel_a = np.einsum("tij,tlj->tli", root_T, acc[:, :ROOT_INDEX])
    g_R = root_T @ g
    T = len(R)
    leaf = np.concatenate((rel_R.reshape(T, LEAF_COUNT, 9), rel_a), axis=2).reshape(T, LEAF_COUNT * 12)
    return np.concatenate((leaf, g_R), axis=1)


class YawCorrector(nn.Module):
    """Input linear + ReLU, two stacked LSTM layers, linear output."""

    def __init__(self, hidden: int = HIDDEN_DIM, dropout: float = 0.4,
                 feature_dim: int = FEATURE_DIM, output_dim: int = OUTPUT_DIM):
        super().__init__()
        self.hidden = hidden
        self.input = nn.Linear(feature_dim, hidden)
        self.dropout = nn.Dropout(dropout)
        self.lstm = nn.LSTM(hidden, hidden, num_layers=LSTM_LAYERS, dropout=dropout, batch_first=True)
        self.output = nn.Linear(hidden, output_dim)
        scale = torch.ones(feature_dim)
        for leaf in range(LEAF_COUNT):
            scale[leaf * 12 + 9: leaf * 12 + 12] = ACCEL_SCALE
        self.register_buffer("feature_scale", scale)

    def forward(self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor] | None = None,
                check_finite: bool = False):
        z = torch.relu(self.input(x * self.feature_scale))
        if check_finite:
            _check(z, "input")
        z = self.dropout(z)
        y, state = self.lstm(z, state)
        if check_finite:
            _check(y, "lstm")
            _check(state[1], "lstm")
        out = self.output(y)
        if check_finite:
            _check(out, "output")
        return out, state

    def zero_(self) -> "YawCorrector":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def _check(t: torch.Tensor, layer: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericalBlowUpError(layer)


@dataclass
class CorrectionState:
    w: float = 0.0
    hidden: tuple[torch.Tensor, torch.Tensor] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.w = min(1.0, max(0.0, float(self.w)))


def forward(model: YawCorrector, state: CorrectionState, features: ArrayLike,
            training: bool = False) -> tuple[NDArray[np.float64], CorrectionState]:
    """One recurrent step; dropout is active only when ``training`` is True."""
    model.train(training)
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32).reshape(1, 1, -1)
    with torch.set_grad_enabled(training):
        out, hidden = model(x, state.hidden, check_finite=True)
    delta = out.reshape(-1).detach().double().numpy()
    return delta, CorrectionState(state.w, hidden)


class CorrectorStream:
    """Streaming inference: recurrent state persists across frames until :meth:`reset`."""

    def __init__(self, model: YawCorrector):
        self.model = model.eval()
        self.state = CorrectionState()

    def reset(self) -> None:
        self.state = CorrectionState(self.state.w)

    def __call__(self, features: ArrayLike) -> NDArray[np.float64]:
        delta, self.state = forward(self.model, self.state, features, training=False)
        return delta


def update_weight(w: float, flags: Sequence[bool]) -> float:
    """``w - 0.05`` when every flag is True, ``w + 0.05`` otherwise, clamped to [0, 1]."""
    step = -WEIGHT_STEP if all(bool(f) for f in flags) else WEIGHT_STEP
    # rounding keeps w on the 0.05 grid so it lands exactly on 0 and 1
    return min(1.0, max(0.0, round(w + step, 10)))


def apply_correction(R_leaf: ArrayLike, acc_leaf: ArrayLike, gyro_leaf: ArrayLike,
                     delta: ArrayLike, w: float, g_global: ArrayLike):
    """Left-multiply each leaf's R, a, w by a rotation of ``-w * delta_i`` about gravity."""
    R = np.asarray(R_leaf, dtype=np.float64)
    acc = np.asarray(acc_leaf, dtype=np.float64)
    gyro = np.asarray(gyro_leaf, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    R_out, acc_out, gyro_out = np.empty_like(R), np.empty_like(acc), np.empty_like(gyro)
    for i in range(len(R)):
        Rg = rot_about_axis(g_global, -w * float(delta[i]))
        R_out[i] = Rg @ R[i]
        acc_out[i] = Rg @ acc[i]
        gyro_out[i] = Rg @ gyro[i]
    return R_out, acc_out, gyro_out


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    dropout: float = 0.4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    window: int = 128
    epochs: int = 100
    patience: int = 10
    hidden: int = HIDDEN_DIM
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.window < 1 or self.epochs < 1 or self.hidden < 1:
            raise ConfigError("batch_size, window, epochs and hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not self.lr > 0 or not self.eps > 0 or self.patience < 1:
            raise ConfigError("lr, eps and patience must be positive")


@dataclass
class SequenceSet:
    """Feature/label sequences for one split: lists of ``(T, 63)`` and ``(T, 5)`` arrays."""

    features: list[NDArray[np.float32]] = field(default_factory=list)
    labels: list[NDArray[np.float32]] = field(default_factory=list)

    def add(self, features: ArrayLike, labels: ArrayLike) -> None:
        x = np.asarray(features, dtype=np.float32)
        y = np.asarray(labels, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != FEATURE_DIM or y.shape != (len(x), OUTPUT_DIM):
            raise DatasetError(f"expected ({len(x)}, {FEATURE_DIM}) features and ({len(x)}, {OUTPUT_DIM}) labels")
        self.features.append(x)
        self.labels.append(y)

    def windows(self, length: int) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = [], []
        for x, y in zip(self.features, self.labels):
            for start in range(0, len(x) - length + 1, length):
                xs.append(x[start:start + length])
                ys.append(y[start:start + length])
        if not xs:
            return torch.empty(0, length, FEATURE_DIM), torch.empty(0, length, OUTPUT_DIM)
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))

    def __len__(self) -> int:
        return len(self.features)


def sequence_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the per-frame L2 norm of the delta error."""
    return torch.linalg.vector_norm(pred - target, dim=-1).mean()


@dataclass
class TrainResult:
    model: YawCorrector
    log: list[dict]
    best_val_loss: float
    best_epoch: int
    diverged: bool = False


def _evaluate(model: YawCorrector, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> tuple[float, float]:
    model.eval()
    loss_sum, abs_sum, frames = 0.0, 0.0, 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            pred, _ = model(xb)
            n = xb.shape[0] * xb.shape[1]
            loss_sum += float(sequence_loss(pred, yb)) * n
            abs_sum += float((pred - yb).abs().mean()) * n
            frames += n
    return loss_sum / frames, abs_sum / frames


def train(train_set: SequenceSet, val_set: SequenceSet | None, cfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Truncated BPTT over fixed windows with Adam; returns the best-validation weights.

    A non-finite training loss aborts the run and returns the last finite
    checkpoint with ``diverged=True``.
    """
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(max(1, cfg.threads))
    torch.use_deterministic_algorithms(True, warn_only=True)

    x_train, y_train = train_set.windows(cfg.window)
    if len(x_train) == 0:
        raise DatasetError(f"no training window of {cfg.window} frames")
    if val_set is not None and len(val_set):
        x_val, y_val = val_set.windows(cfg.window)
        if len(x_val) == 0:
            logger.warning("validation sequences shorter than one window; validating on training data")
            x_val, y_val = x_train, y_train
    else:
        x_val, y_val = x_train, y_train

    model = YawCorrector(hidden=cfg.hidden, dropout=cfg.dropout)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    generator = torch.Generator().manual_seed(cfg.seed)

    best_state = copy.deepcopy(model.state_dict())
    best_val, best_epoch, stale = math.inf, 0, 0
    log: list[dict] = []
    diverged = False
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x_train), generator=generator)
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred, _ = model(x_train[idx])
            loss = sequence_loss(pred, y_train[idx])
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        if diverged:
            logger.error("training diverged at epoch %d; keeping the last finite checkpoint", epoch)
            log.append({"epoch": epoch, "train_loss": None, "val_loss": None, "val_mae": None,
                        "lr": cfg.lr, "wall_time": round(time.perf_counter() - started, 3),
                        "status": "diverged"})
            break
        val_loss, val_mae = _evaluate(model, x_val, y_val, cfg.batch_size)
        entry = {"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": val_loss,
                 "val_mae": val_mae, "lr": cfg.lr, "wall_time": round(time.perf_counter() - started, 3)}
        log.append(entry)
        logger.info("epoch %d train %.5f val %.5f mae %.5f", epoch, entry["train_loss"], val_loss, val_mae)
        if on_epoch is not None:
            on_epoch(entry)
        if not math.isfinite(val_loss):
            diverged = True
            break
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_val, best_epoch, diverged)


def mean_abs_error(model: YawCorrector, data: SequenceSet) -> float:
    """Frame-averaged |delta - delta_gt| over whole sequences, streamed from a zero state."""
    model.eval()
    abs_sum, frames = 0.0, 0
    with torch.no_grad():
        for x, y in zip(data.features, data.labels):
            pred, _ = model(torch.from_numpy(x)[None])
            abs_sum += float((pred[0] - torch.from_numpy(y)).abs().sum())
            frames += y.size
    if frames == 0:
        raise DatasetError("empty evaluation set")
    return abs_sum / frames


# ---------------------------------------------------------------- weight files

def _tensor_order(model: YawCorrector) -> list[str]:
    names = ["input.weight", "input.bias"]
    for layer in range(LSTM_LAYERS):
        names += [f"lstm.weight_ih_l{layer}", f"lstm.weight_hh_l{layer}",
                  f"lstm.bias_ih_l{layer}", f"lstm.bias_hh_l{layer}"]
    return names + ["output.weight", "output.bias"]


def save_weights(model: YawCorrector, path: str | Path) -> None:
    """Little-endian: magic, version, dims (hidden, features, outputs, layers, tensors), shape table, float32 data."""
    state = model.state_dict()
    names = _tensor_order(model)
    header = WEIGHTS_MAGIC + struct.pack("<6I", WEIGHTS_VERSION, model.hidden, FEATURE_DIM,
                                         OUTPUT_DIM, LSTM_LAYERS, len(names))
    shapes = b""
    blobs = []
    for name in names:
        arr = state[name].detach().cpu().numpy().astype("<f4")
        shapes += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blobs.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(header + shapes + b"".join(blobs))


def load_weights(path: str | Path) -> YawCorrector:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a corrector weight file")
    try:
        version, hidden, features, outputs, layers, count = struct.unpack_from("<6I", data, 4)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    if features != FEATURE_DIM or outputs != OUTPUT_DIM or layers != LSTM_LAYERS:
        raise FormatError(f"{path}: layer table does not match the corrector architecture")
    model = YawCorrector(hidden=hidden)
    names = _tensor_order(model)
    if count != len(names):
        raise FormatError(f"{path}: expected {len(names)} tensors, found {count}")
    offset = 4 + struct.calcsize("<6I")
    shapes = []
    try:
        for _ in names:
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shapes.append(struct.unpack_from(f"<{ndim}I", data, offset))
            offset += 4 * ndim
    except struct.error as exc:
        raise FormatError(f"{path}: truncated shape table") from exc
    state = model.state_dict()
    for name, shape in zip(names, shapes):
        if tuple(state[name].shape) != tuple(shape):
            raise FormatError(f"{path}: tensor {name} has shape {shape}, expected {tuple(state[name].shape)}")
        n = int(np.prod(shape))
        if offset + 4 * n > len(data):
            raise FormatError(f"{path}: truncated tensor data")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    return model.eval()
