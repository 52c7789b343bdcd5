"""Dense MLP machinery: forward/backward tapes, Adam, finite-difference checks.

Everything trains in float64 so gradient checks stay well conditioned at
desk scale. Parameters are plain numpy arrays owned by the network object.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("leaky_relu", "gelu", "identity")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatch(ValueError):
    pass


class StaleTape(RuntimeError):
    """A tape's backward pass was invoked more than once."""


def act_forward(kind: str, z: np.ndarray, slope: float):
    """Activation value plus whatever the backward pass can reuse."""
    if kind == "identity":
        return z, None
    if kind == "leaky_relu":
        gate = z > 0
        return z * (slope + (1.0 - slope) * gate), gate
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        return z * cdf, cdf
    raise ValueError(f"unknown activation {kind!r}")


def act_backward(kind: str, g: np.ndarray, z: np.ndarray, aux,
                 slope: float) -> np.ndarray:
    """Chain g through the activation whose pre-activation was z."""
    if kind == "identity":
        return g
    if kind == "leaky_relu":
        return g * (slope + (1.0 - slope) * aux)
    if kind == "gelu":
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return g * (aux + z * pdf)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes plus one activation per linear layer (last usually identity).

    ``heads`` adds extra linear read-outs from the trunk output. With
    ``input_mode="index"`` the input is a batch of integer indices into the
    rows of the first weight matrix, equivalent to a dense forward pass on
    one-hot vectors of width ``sizes[0]``.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    heads: tuple[int, ...] = ()
    input_mode: str = "dense"
    leak: float = 0.01

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(s < 1 for s in self.sizes):
            raise ValueError("layer sizes must be positive")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("activation count must equal layer count - 1")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.input_mode not in ("dense", "index"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")

    def to_json(self) -> str:
        return json.dumps({
            "sizes": list(self.sizes), "activations": list(self.activations),
            "heads": list(self.heads), "input_mode": self.input_mode,
            "leak": self.leak,
        }, sort_keys=True)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def scatter_add_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """target[idx[i]] += rows[i] with duplicate indices accumulated."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    uniq, starts = np.unique(sidx, return_index=True)
    target[uniq] += np.add.reduceat(rows[order], starts, axis=0)


@dataclass
class Tape:
    """Saved forward activations; consumed exactly once by backward()."""

    inputs: list = field(default_factory=list)      # per layer: input batch or index array
    preacts: list = field(default_factory=list)     # per layer: pre-activation batch
    act_aux: list = field(default_factory=list)     # per layer: cached activation state
    trunk_out: np.ndarray | None = None
    consumed: bool = False


class Mlp:
    """Feed-forward network with optional multiple linear heads."""

    def __init__(self, spec: MlpSpec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        self.names: list[str] = []
        for i in range(len(spec.sizes) - 1):
            fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
            if i == 0 and spec.input_mode == "index":
                # one-hot input: a single row is active, so scale rows to
                # unit variance instead of 1/fan_in
                W = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(fan_in, fan_out))
            else:
                W = he_uniform(rng, fan_in, (fan_in, fan_out))
            self.params.append(W)
            self.params.append(np.zeros(fan_out))
            self.names += [f"W{i}", f"b{i}"]
        for h, out in enumerate(spec.heads):
            fan_in = spec.sizes[-1]
            self.params.append(he_uniform(rng, fan_in, (fan_in, out)))
            self.params.append(np.zeros(out))
            self.names += [f"headW{h}", f"headb{h}"]

    @property
    def n_layers(self) -> int:
        return len(self.spec.sizes) - 1

    def forward(self, x: np.ndarray, tape: Tape | None = None):
        """Run the net; returns the trunk output, or a list when heads exist."""
        spec = self.spec
        if spec.input_mode == "index":
            idx = np.asarray(x)
            if idx.ndim != 1:
                raise ShapeMismatch(f"index input must be 1-D, got {idx.shape}")
            h = None
        else:
            h = np.asarray(x, dtype=np.float64)
            if h.ndim == 1:
                h = h[None, :]
            if h.shape[1] != spec.sizes[0]:
                raise ShapeMismatch(
                    f"input width {h.shape[1]} != first layer size {spec.sizes[0]}")
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            if i == 0 and spec.input_mode == "index":
                z = W[idx] + b
                layer_in = idx
            else:
                z = h @ W + b
                layer_in = h
            h, aux = act_forward(spec.activations[i], z, spec.leak)
            if tape is not None:
                tape.inputs.append(layer_in)
                tape.preacts.append(z)
                tape.act_aux.append(aux)
        if tape is not None:
            tape.trunk_out = h
        if not spec.heads:
            return h
        outs = []
        base = 2 * self.n_layers
        for j in range(len(spec.heads)):
            W, b = self.params[base + 2 * j], self.params[base + 2 * j + 1]
            outs.append(h @ W + b)
        return outs

    def backward(self, tape: Tape, grad_out):
        """Accumulate parameter gradients from the tape.

        ``grad_out`` matches forward's return shape (a list when heads
        exist). Returns (grads aligned with ``self.params``, input gradient);
        the input gradient is None for index inputs.
        """
        if tape.consumed:
            raise StaleTape("tape already consumed by a backward pass")
        tape.consumed = True
        spec = self.spec
        grads = [np.zeros_like(p) for p in self.params]

        if spec.heads:
            if not isinstance(grad_out, (list, tuple)) or len(grad_out) != len(spec.heads):
                raise ShapeMismatch("need one output gradient per head")
            h = tape.trunk_out
            g_h = np.zeros_like(h)
            base = 2 * self.n_layers
            for j, g in enumerate(grad_out):
                W = self.params[base + 2 * j]
                grads[base + 2 * j] = h.T @ g
                grads[base + 2 * j + 1] = g.sum(axis=0)
                g_h += g @ W.T
        else:
            g_h = np.asarray(grad_out, dtype=np.float64)
            if g_h.ndim == 1:
                g_h = g_h[None, :]

        for i in reversed(range(self.n_layers)):
            g_z = act_backward(spec.activations[i], g_h, tape.preacts[i],
                               tape.act_aux[i], spec.leak)
            layer_in = tape.inputs[i]
            if i == 0 and spec.input_mode == "index":
                scatter_add_rows(grads[0], layer_in, g_z)
                grads[1] = g_z.sum(axis=0)
                return grads, None
            grads[2 * i] = layer_in.T @ g_z
            grads[2 * i + 1] = g_z.sum(axis=0)
            g_h = g_z @ self.params[2 * i].T
        return grads, g_h


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeMismatch("gradient list length mismatch")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fd_gradient_check(loss_fn, params: list[np.ndarray], grads: list[np.ndarray],
                      rng: np.random.Generator, samples_per_param: int = 10,
                      h: float = 1e-5) -> float:
    """Max relative error between analytic grads and central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values; entries are perturbed in place and restored.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        n = flat_p.size
        if n <= samples_per_param:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        for i in idxs:
            orig = flat_p[i]
            flat_p[i] = orig + h
            hi = loss_fn()
            flat_p[i] = orig - h
            lo = loss_fn()
            flat_p[i] = orig
            fd = (hi - lo) / (2.0 * h)
            denom = max(abs(fd), abs(flat_g[i]), 1e-6)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint serialization

CKPT_MAGIC = b"PCLW"


def spec_hash(description: str) -> bytes:
    return hashlib.sha256(description.encode()).digest()


def save_arrays(path, description: str, arrays: list[np.ndarray]) -> None:
    """Write arrays in declaration order after a hash of the model layout."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(spec_hash(description))
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype=np.float64, order="C")
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_arrays(path, description: str) -> list[np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if f.read(32) != spec_hash(description):
            raise ValueError(f"{path}: checkpoint does not match this model layout")
        (count,) = struct.unpack("<I", f.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            arrays.append(data.copy())
    return arrays
