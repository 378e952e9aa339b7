"""Per-bin azimuth regressor over RD features, trained through the warp.

The network is a stack of unit-stride 'same' convolutions (zero padding) with ReLU on
hidden layers and a ``90 tanh`` output. Forward and backward passes are written out by
hand on an im2col layout: activations are (n_bins, channels) matrices.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, TrainingDiverged
from .geometry import Calibration, azimuth_deg, lift_depth
from .radar import RdSpectrum
from .warp import WarpGrid, warp_backward, warp_forward

OUTPUT_SCALE = 90.0
NET_MAGIC = b"RWNET1"
NET_VERSION = 1


def build_features(spec: RdSpectrum | np.ndarray) -> np.ndarray:
    """(3, n_range, n_doppler): power dB, arg(U2 U1*), arg(U3 U2*)."""
    u = spec.u if isinstance(spec, RdSpectrum) else np.asarray(spec)
    if u.shape[0] != 3:
        raise ConfigurationError("features need exactly 3 receive channels")
    with np.errstate(divide="ignore"):
        power = np.maximum(10 * np.log10(np.sum(np.abs(u) ** 2, axis=0)), -300.0)
    return np.stack([power, np.angle(u[1] * np.conj(u[0])), np.angle(u[2] * np.conj(u[1]))])


@dataclass(frozen=True)
class DoaNetConfig:
    kernel: int = 3
    t: int = 1
    snr_mask: bool = True
    scale_space_loss: bool = False
    loss_levels: int = 3

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ConfigurationError("kernel must be 1 or 3")
        if self.t < 1:
            raise ConfigurationError("layer modifier must be >= 1")

    @property
    def channels(self) -> list[int]:
        t = self.t
        return [3, 32 * t, 64 * t, 128 * t, 64 * t, 32 * t, 32 * t, 1]


def _im2col(x: np.ndarray, shape: tuple[int, int], k: int) -> np.ndarray:
    """(n, c) activations on an (h, w) grid -> (n, k*k*c) patches, zero padded."""
    if k == 1:
        return x
    h, w = shape
    c = x.shape[1]
    p = k // 2
    xp = np.zeros((h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[p:p + h, p:p + w] = x.reshape(h, w, c)
    cols = np.empty((h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[i:i + h, j:j + w]
    return cols.reshape(h * w, k * k * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int], k: int, c: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    if k == 1:
        return cols
    h, w = shape
    p = k // 2
    cols = cols.reshape(h, w, k, k, c)
    xp = np.zeros((h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[p:p + h, p:p + w].reshape(h * w, c)


@dataclass
class DoaNet:
    """Weights ``W[l]`` have shape (k*k*cin, cout), rows ordered (di, dj, cin)."""

    config: DoaNetConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    input_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def init(cls, config: DoaNetConfig, seed: int = 0, input_offset=None, input_scale=None) -> "DoaNet":
        rng = np.random.default_rng(seed)
        k = config.kernel
        ch = config.channels
        Ws, bs = [], []
        for cin, cout in zip(ch[:-1], ch[1:]):
            fan_in = k * k * cin
            Ws.append(rng.standard_normal((fan_in, cout)) * math.sqrt(2.0 / fan_in))
            bs.append(np.zeros(cout))
        Ws[-1] *= 0.1  # start near zero output
        off = np.zeros(3) if input_offset is None else np.asarray(input_offset, dtype=np.float64)
        sc = np.ones(3) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        return cls(config, Ws, bs, off, sc)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, features: np.ndarray, keep: bool = False, dtype=np.float64):
        """Azimuth prediction (deg) per RD bin, shape (n_range, n_doppler).

        With ``keep`` also returns the cache needed by :meth:`backward`. ``dtype`` sets
        the compute precision; parameters stay float64.
        """
        c, h, w = features.shape
        x = ((features.reshape(c, -1).T - self.input_offset) / self.input_scale).astype(dtype)
        k = self.config.kernel
        cache = []
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            cols = _im2col(x, (h, w), k)
            z = cols @ W.astype(dtype) + b.astype(dtype)
            last = layer == self.n_layers - 1
            x = OUTPUT_SCALE * np.tanh(z) if last else np.maximum(z, 0)
            if keep:
                cache.append((cols, z))
        if not np.all(np.isfinite(x)):
            raise TrainingDiverged("non-finite network output")
        out = x.reshape(h, w).astype(np.float64)
        return (out, (cache, (h, w))) if keep else out

    def backward(self, grad_out: np.ndarray, cache) -> list[np.ndarray]:
        """Gradients for :meth:`parameters` given dL/d(prediction)."""
        layers, (h, w) = cache
        k = self.config.kernel
        dtype = layers[0][0].dtype
        g = grad_out.reshape(-1, 1).astype(dtype)
        grads = []
        for layer in range(self.n_layers - 1, -1, -1):
            cols, z = layers[layer]
            if layer == self.n_layers - 1:
                g = g * OUTPUT_SCALE * (1 - np.tanh(z) ** 2)
            else:
                g = g * (z > 0)
            W = self.weights[layer].astype(dtype)
            grads.append(np.sum(g, axis=0, dtype=np.float64))
            grads.append((cols.T @ g).astype(np.float64))
            if layer:
                g = _col2im(g @ W.T, (h, w), k, W.shape[0] // (k * k))
        return grads[::-1]

    def copy(self) -> "DoaNet":
        return DoaNet(self.config, [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                      self.input_offset.copy(), self.input_scale.copy())


def feature_normalization(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stack = np.concatenate([f.reshape(3, -1) for f in features], axis=1)
    off = stack.mean(axis=1)
    sc = stack.std(axis=1)
    sc[sc == 0] = 1.0
    return off, sc


# --- losses --------------------------------------------------------------------------------

def loss_l1(pred_cam: np.ndarray, reference: np.ndarray, train_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over ``train_mask`` and its cotangent w.r.t. ``pred_cam``."""
    n = int(np.count_nonzero(train_mask))
    cot = np.zeros_like(pred_cam, dtype=np.float64)
    if n == 0:
        warnings.warn("empty training pixel set; step skipped", stacklevel=2)
        return 0.0, cot
    diff = pred_cam[train_mask] - reference[train_mask]
    cot[train_mask] = np.sign(diff) / n
    return float(np.mean(np.abs(diff))), cot


def _block_ids(shape: tuple[int, int], f: int) -> tuple[np.ndarray, int]:
    h, w = shape
    bw = -(-w // f)
    ids = (np.arange(h)[:, None] // f) * bw + (np.arange(w)[None, :] // f)
    return ids, (-(-h // f)) * bw


def power_pool(pred: np.ndarray, power_lin: np.ndarray, factor: int) -> np.ndarray:
    """Power-weighted average over ``factor`` x ``factor`` blocks, broadcast back to the grid."""
    if factor == 1:
        return pred
    ids, nb = _block_ids(pred.shape, factor)
    num = np.bincount(ids.ravel(), (power_lin * pred).ravel(), nb)
    den = np.bincount(ids.ravel(), power_lin.ravel(), nb)
    return (num / den)[ids]


def power_pool_backward(grad: np.ndarray, power_lin: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    ids, nb = _block_ids(grad.shape, factor)
    gsum = np.bincount(ids.ravel(), grad.ravel(), nb)
    den = np.bincount(ids.ravel(), power_lin.ravel(), nb)
    return (gsum / den)[ids] * power_lin


def loss_scalespace(pred_rd: np.ndarray, power_db: np.ndarray, reference: np.ndarray, train_mask: np.ndarray,
                    wg: WarpGrid, levels: int = 3) -> tuple[float, np.ndarray]:
    """Sum over s of (1/s) L1 between the warped level-s pooled prediction and the labels.

    Returns the loss and its gradient w.r.t. ``pred_rd``.
    """
    if levels < 1:
        raise ConfigurationError("need at least one loss level")
    power_lin = np.maximum(10 ** ((power_db - np.max(power_db)) / 10), 1e-300)
    total = 0.0
    grad = np.zeros_like(pred_rd)
    for s in range(1, levels + 1):
        f = 2 ** (s - 1)
        pooled = power_pool(pred_rd, power_lin, f)
        loss, cot = loss_l1(warp_forward(pooled, wg, fill=0.0), reference, train_mask)
        total += loss / s
        grad += power_pool_backward(warp_backward(cot, wg), power_lin, f) / s
    return total, grad


# --- training ------------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One frame: RD features, warp taps, camera labels and the training pixel mask."""

    features: np.ndarray
    warp: WarpGrid
    reference: np.ndarray
    train_mask: np.ndarray
    power_db: np.ndarray


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step += 1
        c1 = 1 - self.beta1 ** self.step
        c2 = 1 - self.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(f"non-finite parameters after step {self.step}")


def sample_loss(net: DoaNet, sample: TrainSample, grad: bool = True, dtype=np.float64):
    """Loss for one frame and (optionally) parameter gradients."""
    cfg = net.config
    if grad:
        pred, cache = net.forward(sample.features, keep=True, dtype=dtype)
    else:
        pred = net.forward(sample.features, dtype=dtype)
    if cfg.scale_space_loss:
        loss, g_rd = loss_scalespace(pred, sample.power_db, sample.reference, sample.train_mask,
                                     sample.warp, cfg.loss_levels)
    else:
        loss, cot = loss_l1(warp_forward(pred, sample.warp, fill=0.0), sample.reference, sample.train_mask)
        g_rd = warp_backward(cot, sample.warp)
    if not grad:
        return loss
    return loss, net.backward(g_rd, cache)


def validation_mae(net: DoaNet, samples: list[TrainSample], dtype=np.float64) -> float:
    """Pixel-weighted L1 between warped predictions and labels over each sample's mask."""
    num = 0.0
    cnt = 0
    for s in samples:
        pred = warp_forward(net.forward(s.features, dtype=dtype), s.warp, fill=0.0)
        m = s.train_mask
        num += float(np.sum(np.abs(pred[m] - s.reference[m])))
        cnt += int(np.count_nonzero(m))
    return num / cnt if cnt else float("nan")


@dataclass
class TrainResult:
    net: DoaNet
    state: AdamState
    trace: list[dict]
    best_epoch: int
    stopped_early: bool


def train(net: DoaNet, train_set: list[TrainSample], val_set: list[TrainSample], epochs: int = 20,
          lr: float = 1e-5, seed: int = 0, patience: int = 5, divergence_factor: float = 10.0,
          dtype=np.float64, lr_decay: float = 1.0) -> TrainResult:
    """Adam over single-frame steps in a seeded order; keeps the best validation checkpoint.

    ``dtype`` is the compute precision of forward/backward passes (float32 roughly halves
    the run time); Adam state and parameters stay float64. ``lr_decay`` multiplies the
    learning rate after every epoch.
    """
    if not train_set:
        raise ConfigurationError("empty training set")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    trace = []
    best = (np.inf, net.copy(), 0)
    initial = None
    bad_epochs = 0
    stopped = False
    params = net.parameters()
    for epoch in range(1, epochs + 1):
        for i in rng.permutation(len(train_set)):
            loss, grads = sample_loss(net, train_set[int(i)], dtype=dtype)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {state.step + 1}")
            if initial is None:
                initial = max(loss, 1e-12)
            elif loss > divergence_factor * initial:
                raise TrainingDiverged(f"loss {loss:.4g} exceeds {divergence_factor}x the initial {initial:.4g}")
            state.update(params, grads)
            trace.append({"step": state.step, "epoch": epoch, "train_loss": loss, "val_mae": ""})
        state.lr *= lr_decay
        val = validation_mae(net, val_set, dtype) if val_set else float(np.mean([t["train_loss"] for t in trace[-len(train_set):]]))
        trace[-1]["val_mae"] = val
        if val < best[0]:
            best = (val, net.copy(), epoch)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                stopped = True
                break
    return TrainResult(best[1], state, trace, best[2], stopped)


# --- checkpoint ----------------------------------------------------------------------------

def save_net(net: DoaNet, path: str | Path) -> None:
    """RWNET1: magic, u32 version, kernel, t, n_layers, (cin, cout) pairs, f64 input offset/scale, f64 weights+biases."""
    cfg = net.config
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(struct.pack("<IIII", NET_VERSION, cfg.kernel, cfg.t, net.n_layers))
        for W in net.weights:
            fh.write(struct.pack("<II", W.shape[0] // (cfg.kernel ** 2), W.shape[1]))
        fh.write(np.asarray(net.input_offset, "<f8").tobytes())
        fh.write(np.asarray(net.input_scale, "<f8").tobytes())
        for W, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(W, "<f8").tobytes())
            fh.write(np.ascontiguousarray(b, "<f8").tobytes())


def load_net(path: str | Path, snr_mask: bool = True, scale_space_loss: bool = False) -> DoaNet:
    data = Path(path).read_bytes()
    if not data.startswith(NET_MAGIC):
        raise ConfigurationError(f"{path}: not an RWNET1 checkpoint")
    off = len(NET_MAGIC)
    version, kernel, t, n_layers = struct.unpack_from("<IIII", data, off)
    if version != NET_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off += 16
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", data, off))
        off += 8
    body = np.frombuffer(data, dtype="<f8", offset=off)
    pos = 0

    def take(n):
        nonlocal pos
        out = body[pos:pos + n].astype(np.float64)
        pos += n
        return out

    in_off, in_sc = take(3), take(3)
    Ws, bs = [], []
    for cin, cout in dims:
        Ws.append(take(kernel * kernel * cin * cout).reshape(kernel * kernel * cin, cout))
        bs.append(take(cout))
    if pos != body.size:
        raise ConfigurationError(f"{path}: checkpoint size mismatch")
    cfg = DoaNetConfig(kernel=kernel, t=t, snr_mask=snr_mask, scale_space_loss=scale_space_loss)
    return DoaNet(cfg, Ws, bs, in_off, in_sc)


def doa_labels(depth: np.ndarray, calib: Calibration) -> np.ndarray:
    """Per-pixel azimuth (deg) of the lifted point in the radar frame; NaN where depth is invalid."""
    x_R = calib.radar_from_cam.apply(lift_depth(depth, calib.intrinsics))
    with np.errstate(invalid="ignore"):
        return azimuth_deg(x_R)
