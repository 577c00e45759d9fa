"""Small dense networks with hand-rolled derivatives.

The point of this module is not training speed; it is exact, inspectable
Jacobian products. ``JacobianOperator`` caches one forward trace and then
answers reverse-mode products (J u), forward-mode products (J' v), and a
dense assembly used as a test oracle and for similarity studies.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    ContractViolationError,
    ResourceLimitError,
    TrainingDivergenceError,
)
from .seeding import substream
from .serialize import atomic_write_bytes, atomic_write_text, canonical_json

DENSE_JACOBIAN_CAP = 10**8
CHECKPOINT_LAYOUT_VERSION = 1
_CHECKPOINT_MAGIC = b"TGPN"

OPTIMIZERS = ("sgd-momentum", "adam")
LOSSES = ("mse", "heteroscedastic-gaussian", "categorical-ce")


def _tanh_prime(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_prime(z):
    # Subgradient choice: derivative at exactly zero is zero.
    return (z > 0.0).astype(np.float64)


def _identity(z):
    return z


def _ones_like(z):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_prime),
    "relu": (_relu, _relu_prime),
    "identity": (_identity, _ones_like),
}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class MlpArchitecture:
    """Shape of a fully connected network.

    ``heteroscedastic`` doubles the internal output width: each declared
    channel c is emitted as an interleaved (mean, raw-scale) pair at
    internal columns 2c and 2c + 1. The raw scale parameterizes a
    variance 1e-5 + softplus(raw).

    Parameters are flattened layer-major, weights before bias, with each
    weight matrix stored row-major in (fan_out, fan_in) shape.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    heteroscedastic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractViolationError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ContractViolationError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolationError(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )

    @property
    def internal_output_dim(self) -> int:
        return 2 * self.output_dim if self.heteroscedastic else self.output_dim

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.internal_output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def parameter_count(self) -> int:
        dims = self.layer_dims
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(dims[:-1], dims[1:]))

    def layer_slices(self):
        """Per-layer (weight_slice, bias_slice, fan_in, fan_out) into the flat vector."""
        out = []
        offset = 0
        dims = self.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            b = slice(w.stop, w.stop + fan_out)
            offset = b.stop
            out.append((w, b, fan_in, fan_out))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "heteroscedastic": self.heteroscedastic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        try:
            return cls(
                input_dim=int(d["input_dim"]),
                hidden_widths=tuple(d["hidden_widths"]),
                output_dim=int(d["output_dim"]),
                activation=d["activation"],
                heteroscedastic=bool(d.get("heteroscedastic", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"architecture descriptor missing field {exc}") from exc


@dataclass(frozen=True)
class MlpNetwork:
    """An architecture bound to a flat parameter vector."""

    architecture: MlpArchitecture
    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        expected = self.architecture.parameter_count
        if params.shape != (expected,):
            raise ContractViolationError(
                f"parameter vector of shape {params.shape} does not match "
                f"architecture with {expected} parameters"
            )
        if not np.all(np.isfinite(params)):
            raise ContractViolationError("parameter vector contains non-finite entries")
        params = params.copy()
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    def layers(self):
        """Views of the flat vector as per-layer (weight matrix, bias) pairs."""
        out = []
        for w_sl, b_sl, fan_in, fan_out in self.architecture.layer_slices():
            out.append((self.params[w_sl].reshape(fan_out, fan_in), self.params[b_sl]))
        return out

    def with_params(self, params: np.ndarray) -> "MlpNetwork":
        return replace(self, params=params)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.architecture.to_dict(), sort_keys=True).encode())
        digest.update(self.params.tobytes())
        return digest.hexdigest()


def init_network(architecture: MlpArchitecture, seed: int) -> MlpNetwork:
    """Seeded initialization: weights Uniform(+-1/sqrt(fan_in)), biases zero."""
    rng = substream(seed, "init")
    parts = []
    dims = architecture.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).ravel())
        parts.append(np.zeros(fan_out))
    return MlpNetwork(architecture, np.concatenate(parts))


@dataclass(frozen=True)
class TaskDataset:
    """Inputs, targets, and an observation-noise variance for one task."""

    x: np.ndarray
    y: np.ndarray
    noise_variance: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ContractViolationError("inputs and targets must be 2-D arrays")
        if x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ContractViolationError(
                f"inputs ({x.shape[0]} rows) and targets ({y.shape[0]} rows) must share n >= 1"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ContractViolationError("dataset contains non-finite entries")
        if not self.noise_variance > 0:
            raise ContractViolationError(f"noise variance must be positive, got {self.noise_variance}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _forward_trace(network: MlpNetwork, x: np.ndarray):
    """Forward pass keeping per-layer inputs and hidden activation slopes."""
    act, act_prime = ACTIVATIONS[network.architecture.activation]
    layers = network.layers()
    inputs = []
    slopes = []
    h = x
    for idx, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        if idx < len(layers) - 1:
            slopes.append(act_prime(z))
            h = act(z)
        else:
            h = z
    return h, inputs, slopes


def forward(network: MlpNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch of inputs.

    Returns an (n, output_dim) array, or (n, 2 * output_dim) with
    interleaved (mean, raw-scale) pairs for heteroscedastic networks.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != network.architecture.input_dim:
        raise ContractViolationError(
            f"inputs of shape {x.shape} do not match input_dim {network.architecture.input_dim}"
        )
    out, _, _ = _forward_trace(network, x)
    return out


class JacobianOperator:
    """Matrix-free view of the p x (n*o) Jacobian of f(X; theta) in theta.

    Column i*o + c is the gradient of output channel c at datum i
    (datum-major flattening). The forward trace is computed once at
    construction, so products cost one additional pass each.
    """

    def __init__(self, network: MlpNetwork, inputs: np.ndarray):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != network.architecture.input_dim:
            raise ContractViolationError(
                f"inputs of shape {inputs.shape} do not match input_dim "
                f"{network.architecture.input_dim}"
            )
        if not np.all(np.isfinite(inputs)):
            raise ContractViolationError("Jacobian inputs contain non-finite entries")
        self.network = network
        self.inputs = inputs
        self._weights = [w for w, _ in network.layers()]
        out, layer_inputs, slopes = _forward_trace(network, inputs)
        self.outputs = out
        self._layer_inputs = layer_inputs
        self._slopes = slopes

    @property
    def n_data(self) -> int:
        return self.inputs.shape[0]

    @property
    def out_dim(self) -> int:
        return self.network.architecture.internal_output_dim

    @property
    def out_len(self) -> int:
        return self.n_data * self.out_dim

    @property
    def param_count(self) -> int:
        return self.network.architecture.parameter_count

    def vjp(self, u: np.ndarray) -> np.ndarray:
        """J u: gradient of <f(X), u> with respect to theta (one reverse pass)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.out_len,):
            raise ContractViolationError(f"expected vector of length {self.out_len}, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ContractViolationError("vjp input contains non-finite entries")
        delta = u.reshape(self.n_data, self.out_dim)
        grad = np.empty(self.param_count)
        slices = self.network.architecture.layer_slices()
        for idx in range(len(slices) - 1, -1, -1):
            w_sl, b_sl, _, _ = slices[idx]
            grad[w_sl] = (delta.T @ self._layer_inputs[idx]).ravel()
            grad[b_sl] = delta.sum(axis=0)
            if idx > 0:
                delta = (delta @ self._weights[idx]) * self._slopes[idx - 1]
        return grad

    def jvp(self, v: np.ndarray) -> np.ndarray:
        """J' v: exact directional derivative of f(X; theta) along v (forward mode)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.param_count,):
            raise ContractViolationError(
                f"expected vector of length {self.param_count}, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ContractViolationError("jvp input contains non-finite entries")
        slices = self.network.architecture.layer_slices()
        dh = None
        for idx, (w_sl, b_sl, fan_in, fan_out) in enumerate(slices):
            dw = v[w_sl].reshape(fan_out, fan_in)
            db = v[b_sl]
            dz = self._layer_inputs[idx] @ dw.T + db
            if dh is not None:
                dz = dz + dh @ self._weights[idx].T
            if idx < len(slices) - 1:
                dh = self._slopes[idx] * dz
            else:
                return dz.ravel()
        raise AssertionError("unreachable: architectures always have at least one layer")

    def dense(self, cap: int = DENSE_JACOBIAN_CAP) -> np.ndarray:
        """Assemble the p x (n*o) Jacobian; column i*o + c = vjp(one-hot(i, c))."""
        entries = self.param_count * self.out_len
        if entries > cap:
            raise ResourceLimitError(
                f"dense Jacobian needs {entries} entries (cap {cap}); "
                "use the matrix-free vjp/jvp products instead"
            )
        jac = np.empty((self.param_count, self.out_len))
        slices = self.network.architecture.layer_slices()
        for c in range(self.out_dim):
            delta = np.zeros((self.n_data, self.out_dim))
            delta[:, c] = 1.0
            d = delta
            for idx in range(len(slices) - 1, -1, -1):
                w_sl, b_sl, _, _ = slices[idx]
                per_datum_w = np.einsum("ni,nj->nij", d, self._layer_inputs[idx])
                jac[w_sl, c :: self.out_dim] = per_datum_w.reshape(self.n_data, -1).T
                jac[b_sl, c :: self.out_dim] = d.T
                if idx > 0:
                    d = (d @ self._weights[idx]) * self._slopes[idx - 1]
        return jac


def _loss_and_output_grad(outputs: np.ndarray, y: np.ndarray, loss: str):
    """Loss value and its gradient with respect to the raw network outputs.

    Overflow is left to propagate as inf/nan (silently); the caller turns
    non-finite losses into a divergence error.
    """
    n = outputs.shape[0]
    if loss == "mse":
        r = outputs - y
        with np.errstate(over="ignore"):
            return float(np.mean(r * r)), (2.0 / r.size) * r
    if loss == "heteroscedastic-gaussian":
        mu = outputs[:, 0::2]
        raw = outputs[:, 1::2]
        var = 1e-5 + _softplus(raw)
        r = mu - y
        nll = 0.5 * (np.log(2.0 * np.pi * var) + r * r / var)
        scale = 1.0 / nll.size
        grad = np.empty_like(outputs)
        grad[:, 0::2] = scale * r / var
        grad[:, 1::2] = scale * 0.5 * (1.0 / var - r * r / (var * var)) * _sigmoid(raw)
        return float(np.mean(nll)), grad
    if loss == "categorical-ce":
        shifted = outputs - outputs.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_prob = shifted - log_z
        loss_val = float(-np.mean(np.sum(y * log_prob, axis=1)))
        grad = (np.exp(log_prob) - y) / n
        return loss_val, grad
    raise ContractViolationError(f"loss must be one of {LOSSES}, got {loss!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    optimizer: str = "sgd-momentum"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    loss: str = "mse"
    seed: int = 0
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ContractViolationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ContractViolationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ContractViolationError("learning rate must be nonnegative")


@dataclass(frozen=True)
class TrainResult:
    network: MlpNetwork
    loss_trace: np.ndarray  # full-dataset loss after each epoch


def train(network: MlpNetwork, data: TaskDataset, cfg: OptimizerConfig) -> TrainResult:
    """Mini-batch training, bitwise reproducible for a fixed seed."""
    arch = network.architecture
    if data.x.shape[1] != arch.input_dim:
        raise ContractViolationError(
            f"dataset input dim {data.x.shape[1]} does not match network input_dim {arch.input_dim}"
        )
    if data.y.shape[1] != arch.output_dim:
        raise ContractViolationError(
            f"dataset target dim {data.y.shape[1]} does not match output_dim {arch.output_dim}"
        )
    rng = substream(cfg.seed, "train")
    theta = network.params.copy()
    velocity = np.zeros_like(theta)
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    step = 0
    trace = np.empty(cfg.epochs)

    for epoch in range(cfg.epochs):
        order = rng.permutation(data.n)
        for start in range(0, data.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            jac = JacobianOperator(network.with_params(theta), data.x[batch])
            loss_val, out_grad = _loss_and_output_grad(jac.outputs, data.y[batch], cfg.loss)
            if not np.isfinite(loss_val):
                raise TrainingDivergenceError(
                    f"non-finite training loss at epoch {epoch}", epoch=epoch
                )
            grad = jac.vjp(out_grad.ravel())
            step += 1
            if cfg.optimizer == "sgd-momentum":
                velocity = cfg.momentum * velocity - cfg.learning_rate * grad
                theta = theta + velocity
            else:
                adam_m = cfg.adam_beta1 * adam_m + (1 - cfg.adam_beta1) * grad
                adam_v = cfg.adam_beta2 * adam_v + (1 - cfg.adam_beta2) * grad * grad
                m_hat = adam_m / (1 - cfg.adam_beta1**step)
                v_hat = adam_v / (1 - cfg.adam_beta2**step)
                theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergenceError(
                f"non-finite parameters after epoch {epoch}", epoch=epoch
            )
        outputs = forward(network.with_params(theta), data.x)
        epoch_loss, _ = _loss_and_output_grad(outputs, data.y, cfg.loss)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(
                f"non-finite training loss at epoch {epoch}", epoch=epoch
            )
        trace[epoch] = epoch_loss

    return TrainResult(network=network.with_params(theta), loss_trace=trace)


def save_checkpoint(network: MlpNetwork, path, format: str = "json") -> None:
    """Write a versioned checkpoint, either JSON or little-endian binary."""
    if format == "json":
        payload = {
            "layout_version": CHECKPOINT_LAYOUT_VERSION,
            "architecture": network.architecture.to_dict(),
            "params": [float(v) for v in network.params],
        }
        atomic_write_text(path, canonical_json(payload))
    elif format == "binary":
        header = json.dumps(network.architecture.to_dict(), sort_keys=True).encode()
        blob = b"".join(
            [
                _CHECKPOINT_MAGIC,
                struct.pack("<II", CHECKPOINT_LAYOUT_VERSION, len(header)),
                header,
                network.params.astype("<f8").tobytes(),
            ]
        )
        atomic_write_bytes(path, blob)
    else:
        raise ContractViolationError(f"checkpoint format must be 'json' or 'binary', got {format!r}")


def load_checkpoint(path) -> MlpNetwork:
    """Read a checkpoint written by :func:`save_checkpoint` (format sniffed)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == _CHECKPOINT_MAGIC:
        version, header_len = struct.unpack("<II", blob[4:12])
        if version != CHECKPOINT_LAYOUT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint layout_version {version}")
        arch = MlpArchitecture.from_dict(json.loads(blob[12 : 12 + header_len].decode()))
        params = np.frombuffer(blob[12 + header_len :], dtype="<f8").astype(np.float64)
        return MlpNetwork(arch, params)
    try:
        payload = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not a recognized checkpoint: {exc}") from exc
    if payload.get("layout_version") != CHECKPOINT_LAYOUT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint layout_version {payload.get('layout_version')}"
        )
    arch = MlpArchitecture.from_dict(payload["architecture"])
    return MlpNetwork(arch, np.array(payload["params"], dtype=np.float64))
