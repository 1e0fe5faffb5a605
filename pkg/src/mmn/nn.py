"""Dense ReLU networks with batch norm, written directly against numpy.

A network is a stack of ``Linear -> BatchNorm -> ReLU`` hidden blocks followed
by a plain linear output layer.  Gradients are computed by hand in reverse
mode, both for the trainable parameters and for the network input (the latter
is what tandem training and gradient-based inversion need).
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"MMN-CKPT\n"

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    """Input array does not have the shape the network expects."""


class NumericOverflowError(FloatingPointError):
    """A non-finite value appeared while propagating through the network."""

    def __init__(self, layer: int, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite activation at layer {layer}")


class SchedulerError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: Tuple[int, ...]
    use_batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        for name, v in (("input_dim", self.input_dim), ("output_dim", self.output_dim)):
            if int(v) < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError(f"hidden layer widths must be positive: {self.hidden_layers}")

    @property
    def widths(self) -> List[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": list(self.hidden_layers),
            "use_batch_norm": self.use_batch_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["input_dim"]), int(d["output_dim"]),
                   tuple(d["hidden_layers"]), bool(d["use_batch_norm"]))


@dataclass
class _Cache:
    x: np.ndarray
    layer_inputs: list = field(default_factory=list)
    pre_bn: list = field(default_factory=list)
    xhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    pre_relu: list = field(default_factory=list)
    training: bool = False


class Network:
    """Trainable parameters plus batch-norm buffers for one :class:`NetworkSpec`.

    ``training`` selects batch statistics (and running-stat updates) versus
    running statistics.  Callers set it explicitly; inference mode is the
    default for freshly loaded checkpoints.
    """

    def __init__(self, spec: NetworkSpec, weights, biases, bn_scale=(), bn_shift=(),
                 running_mean=(), running_var=(), training: bool = False):
        self.spec = spec
        self.weights = list(weights)
        self.biases = list(biases)
        self.bn_scale = list(bn_scale)
        self.bn_shift = list(bn_shift)
        self.running_mean = list(running_mean)
        self.running_var = list(running_var)
        self.training = training
        self._check_shapes()

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator,
                   dtype=np.float32) -> "Network":
        """He-normal weights (variance 2 / fan_in), unit BN scale.

        Biases are uniform on +-1/sqrt(fan_in) so first-layer ReLU kinks do not
        all pass through the origin of the input space.
        """
        widths = spec.widths
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            weights.append(w.astype(dtype))
            bound = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        bn = [[], [], [], []]
        if spec.use_batch_norm:
            for h in spec.hidden_layers:
                bn[0].append(np.ones(h, dtype=dtype))
                bn[1].append(np.zeros(h, dtype=dtype))
                bn[2].append(np.zeros(h, dtype=dtype))
                bn[3].append(np.ones(h, dtype=dtype))
        return cls(spec, weights, biases, *bn, training=False)

    @classmethod
    def zeros(cls, spec: NetworkSpec, dtype=np.float32) -> "Network":
        net = cls.initialize(spec, np.random.default_rng(0), dtype)
        for w, b in zip(net.weights, net.biases):
            w[...] = 0
            b[...] = 0
        return net

    def _check_shapes(self):
        widths = self.spec.widths
        n = len(widths) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise CheckpointError(f"expected {n} dense layers, got {len(self.weights)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise CheckpointError(f"layer {i} has shape {w.shape}/{b.shape}")
        n_bn = len(self.spec.hidden_layers) if self.spec.use_batch_norm else 0
        for name in ("bn_scale", "bn_shift", "running_mean", "running_var"):
            arrs = getattr(self, name)
            if len(arrs) != n_bn:
                raise CheckpointError(f"{name}: expected {n_bn} tensors, got {len(arrs)}")
            for i, a in enumerate(arrs):
                if a.shape != (widths[i + 1],):
                    raise CheckpointError(f"{name}[{i}] has shape {a.shape}")

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def parameters(self) -> List[np.ndarray]:
        """Trainable tensors in canonical order (matches :meth:`_backward`)."""
        out = []
        for i in range(self.n_layers):
            out += [self.weights[i], self.biases[i]]
            if self.spec.use_batch_norm and i < len(self.spec.hidden_layers):
                out += [self.bn_scale[i], self.bn_shift[i]]
        return out

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Every stored tensor (parameters and buffers) with a stable name."""
        out = []
        for i in range(self.n_layers):
            out += [(f"dense{i}.weight", self.weights[i]), (f"dense{i}.bias", self.biases[i])]
            if self.spec.use_batch_norm and i < len(self.spec.hidden_layers):
                out += [(f"bn{i}.scale", self.bn_scale[i]), (f"bn{i}.shift", self.bn_shift[i]),
                        (f"bn{i}.running_mean", self.running_mean[i]),
                        (f"bn{i}.running_var", self.running_var[i])]
        return out

    def copy(self) -> "Network":
        return Network(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       [a.copy() for a in self.bn_scale], [a.copy() for a in self.bn_shift],
                       [a.copy() for a in self.running_mean], [a.copy() for a in self.running_var],
                       training=self.training)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for name in ("weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var"):
            setattr(net, name, [a.astype(dtype) for a in getattr(net, name)])
        return net

    def load_state(self, other: "Network") -> None:
        """Copy tensor values from ``other`` in place (used for best-snapshot restore)."""
        for (_, dst), (_, src) in zip(self.tensors(), other.tensors()):
            dst[...] = src

    # -- propagation -------------------------------------------------------

    def _as_batch(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"expected a (B, {self.spec.input_dim}) batch, got shape {X.shape}")
        if X.shape[0] < 1:
            raise DimensionError("empty batch")
        return X.astype(self.dtype, copy=False)

    def _forward(self, X: np.ndarray, keep: bool,
                 check: bool = True) -> Tuple[np.ndarray, Optional[_Cache]]:
        X = self._as_batch(X)
        training = self.training
        if training and self.spec.use_batch_norm and X.shape[0] < 2:
            raise DimensionError("batch norm in training mode needs at least 2 rows")
        cache = _Cache(x=X, training=training) if keep else None
        h = X
        n_hidden = len(self.spec.hidden_layers)
        for i in range(self.n_layers):
            if keep:
                cache.layer_inputs.append(h)
            z = h @ self.weights[i] + self.biases[i]
            if i == n_hidden:
                h = z
                break
            if self.spec.use_batch_norm:
                if training:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    n = z.shape[0]
                    m = self.dtype.type(BN_MOMENTUM)
                    self.running_mean[i] *= 1 - m
                    self.running_mean[i] += m * mean
                    self.running_var[i] *= 1 - m
                    self.running_var[i] += m * var * (n / (n - 1))
                else:
                    mean, var = self.running_mean[i], self.running_var[i]
                inv_std = 1.0 / np.sqrt(var + self.dtype.type(BN_EPS))
                xhat = (z - mean) * inv_std
                a = xhat * self.bn_scale[i] + self.bn_shift[i]
                if keep:
                    cache.pre_bn.append(z)
                    cache.xhat.append(xhat)
                    cache.inv_std.append(inv_std)
            else:
                a = z
            if keep:
                cache.pre_relu.append(a)
            h = np.maximum(a, 0)
        if check and not np.all(np.isfinite(h)):
            raise NumericOverflowError(self._first_bad_layer(cache, h))
        return h, cache

    def _first_bad_layer(self, cache: Optional[_Cache], out: np.ndarray) -> int:
        if cache is not None:
            for i, a in enumerate(cache.pre_relu):
                if not np.all(np.isfinite(a)):
                    return i
        return self.n_layers - 1

    def _backward(self, cache: _Cache, dout: np.ndarray,
                  need_params: bool = True) -> Tuple[Optional[List[np.ndarray]], np.ndarray]:
        """Reverse pass.  Returns (param grads in :meth:`parameters` order, d input)."""
        n_hidden = len(self.spec.hidden_layers)
        grads: List[Optional[list]] = [None] * self.n_layers
        g = dout.astype(self.dtype, copy=False)
        for i in range(self.n_layers - 1, -1, -1):
            layer_grads = []
            if i < n_hidden:
                g = g * (cache.pre_relu[i] > 0)
                if self.spec.use_batch_norm:
                    xhat, inv_std = cache.xhat[i], cache.inv_std[i]
                    if need_params:
                        dscale = (g * xhat).sum(axis=0)
                        dshift = g.sum(axis=0)
                    dxhat = g * self.bn_scale[i]
                    if cache.training:
                        n = g.shape[0]
                        g = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                             - xhat * (dxhat * xhat).sum(axis=0))
                    else:
                        g = dxhat * inv_std
                    if need_params:
                        layer_grads = [dscale, dshift]
            if need_params:
                dW = cache.layer_inputs[i].T @ g
                db = g.sum(axis=0)
                grads[i] = [dW, db, *layer_grads]
            g = g @ self.weights[i].T
        flat = None
        if need_params:
            flat = [t for layer in grads for t in layer]
        return flat, g

    def __call__(self, X) -> np.ndarray:
        return forward_pass(self, X)

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        """Checkpoint bytes: magic, one JSON header line, raw little-endian float32."""
        names, offsets, shapes, blobs = [], [], [], []
        pos = 0
        for name, arr in self.tensors():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            names.append(name)
            shapes.append(list(arr.shape))
            offsets.append([pos, len(raw)])
            blobs.append(raw)
            pos += len(raw)
        header = {
            "spec": self.spec.to_dict(),
            "layer_shapes": [list(w.shape) for w in self.weights],
            "batch_norm": [self.spec.use_batch_norm and i < len(self.spec.hidden_layers)
                           for i in range(self.n_layers)],
            "tensors": [{"name": n, "shape": s, "offset": o, "nbytes": b}
                        for n, s, (o, b) in zip(names, shapes, offsets)],
        }
        line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
        return CHECKPOINT_MAGIC + line + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Network":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("bad checkpoint magic")
        buf = io.BytesIO(data[len(CHECKPOINT_MAGIC):])
        try:
            header = json.loads(buf.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
        payload = buf.read()
        spec = NetworkSpec.from_dict(header["spec"])
        tensors = {}
        for t in header["tensors"]:
            start, nbytes = t["offset"], t["nbytes"]
            if start + nbytes > len(payload):
                raise CheckpointError(f"tensor {t['name']} truncated")
            arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
            tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
        n = len(spec.widths) - 1
        n_bn = len(spec.hidden_layers) if spec.use_batch_norm else 0
        try:
            return cls(
                spec,
                [tensors[f"dense{i}.weight"] for i in range(n)],
                [tensors[f"dense{i}.bias"] for i in range(n)],
                [tensors[f"bn{i}.scale"] for i in range(n_bn)],
                [tensors[f"bn{i}.shift"] for i in range(n_bn)],
                [tensors[f"bn{i}.running_mean"] for i in range(n_bn)],
                [tensors[f"bn{i}.running_var"] for i in range(n_bn)],
                training=False,
            )
        except KeyError as exc:
            raise CheckpointError(f"checkpoint missing tensor {exc}") from exc

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def forward_pass(net: Network, batch) -> np.ndarray:
    """Map a (B, input_dim) batch to (B, output_dim) in the net's current mode."""
    out, _ = net._forward(batch, keep=False)
    return out


def param_gradients(net: Network, batch, targets) -> Tuple[float, List[np.ndarray]]:
    """Mean squared error over all output entries and its parameter gradients.

    Gradients are returned in :meth:`Network.parameters` order.
    """
    targets = np.asarray(targets)
    out, cache = net._forward(batch, keep=True)
    if targets.shape != out.shape:
        raise DimensionError(f"targets shape {targets.shape} != output shape {out.shape}")
    diff = out - targets.astype(out.dtype, copy=False)
    loss = float(np.mean(diff * diff))
    grads, _ = net._backward(cache, (2.0 / diff.size) * diff)
    return loss, grads


def input_gradients(net: Network, x, target_y) -> np.ndarray:
    """Gradient of ``||net(x) - target_y||^2`` with respect to ``x``.

    Accepts a single vector or a batch of row vectors (gradients are then
    row-wise; the loss is summed over rows).  Parameters are never touched.
    """
    if net.training:
        raise ValueError("input_gradients requires the network in inference mode")
    x = np.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    T = np.asarray(target_y)
    T = T[None, :] if T.ndim == 1 else T
    out, cache = net._forward(X, keep=True)
    _, dx = net._backward(cache, 2.0 * (out - T.astype(out.dtype, copy=False)), need_params=False)
    return dx[0] if single else dx


def backprop_input(net: Network, X, dout, check: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Forward ``X`` then pull ``dout`` back to the input; returns (output, d input).

    ``dout`` is an array or a callable mapping the output to its gradient.
    Helper for chaining a frozen network behind a trainable one.
    """
    out, cache = net._forward(X, keep=True, check=check)
    _, dx = net._backward(cache, dout(out) if callable(dout) else dout, need_params=False)
    return out, dx


class Adam:
    """Adam with bias correction.  Updates parameter arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter / gradient count mismatch")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        step_size = self.lr / bc1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p -= (step_size * m / denom).astype(p.dtype, copy=False)


def adam_step(state: Adam, params, grads) -> None:
    state.step(params, grads)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 10, min_lr: float = 1e-6,
                 threshold: float = 1e-6, factor: float = 0.5):
        if patience < 1:
            raise ValueError("patience must be positive")
        self.lr = lr
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.factor = factor
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise SchedulerError(f"non-finite validation loss {val_loss!r}")
        if val_loss < self.best - self.threshold:
            self.best = float(val_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_step(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)
