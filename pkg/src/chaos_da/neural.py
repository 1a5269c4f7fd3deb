"""Dense tanh MLP with hand-written reverse mode, ADAM, and a binary checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CDANET01"
ROLE_ACTOR = 0
ROLE_CRITIC = 1


@dataclass
class MlpParams:
    """Weights are stored (out, in); hidden layers use tanh, the output layer is linear.

    The same container holds gradients (see ``Gradients``).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} are inconsistent")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} fan-in {w.shape[1]} != previous width {self.weights[k - 1].shape[0]}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def zeros_like(self) -> "MlpParams":
        return MlpParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()])

    def same_shape(self, other: "MlpParams") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]

    def scaled(self, factor: float) -> "MlpParams":
        return MlpParams.from_arrays([factor * a for a in self.arrays()])

    def to_bytes(self, role: int = ROLE_ACTOR, extras=()) -> bytes:
        sizes = self.layer_sizes
        extras = np.asarray(extras, dtype="<f8").ravel()
        parts = [MAGIC, struct.pack("<BI", role, len(sizes)), struct.pack(f"<{len(sizes)}I", *sizes)]
        for a in self.arrays():
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        parts.append(struct.pack("<I", extras.size))
        parts.append(extras.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["MlpParams", int, np.ndarray]:
        """Inverse of ``to_bytes``; returns (params, role, extras)."""
        if blob[:8] != MAGIC:
            raise ValueError("not a network checkpoint (bad magic header)")
        role, n = struct.unpack_from("<BI", blob, 8)
        off = 8 + 5
        sizes = struct.unpack_from(f"<{n}I", blob, off)
        off += 4 * n
        arrays = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            for shape in ((fan_out, fan_in), (fan_out,)):
                count = int(np.prod(shape))
                arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
                off += 8 * count
        (n_extra,) = struct.unpack_from("<I", blob, off)
        off += 4
        extras = np.frombuffer(blob, dtype="<f8", count=n_extra, offset=off).astype(np.float64)
        if off + 8 * n_extra != len(blob):
            raise ValueError("trailing bytes in network checkpoint")
        return cls.from_arrays(arrays), role, extras


Gradients = MlpParams


def mlp_init(layer_sizes, seed: int) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"need at least two positive layer sizes, got {layer_sizes!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; also returns each layer's input activation for the backward pass."""
    h = x
    acts = []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        acts.append(h)
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
    return h, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != network fan-in {params.weights[0].shape[1]}")
    single = x.ndim == 1
    out, _ = forward_cached(params, x[None, :] if single else x)
    return out[0] if single else out


def backward_cached(params: MlpParams, acts: list[np.ndarray], out_grad: np.ndarray) -> MlpParams:
    """Gradients of sum_rows <out_grad, forward(x)> given the activations from ``forward_cached``."""
    g = out_grad
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        a = acts[k]
        gw[k] = g.T @ a
        gb[k] = g.sum(axis=0)
        if k:
            # acts[k] is tanh of the previous pre-activation
            g = (g @ params.weights[k]) * (1.0 - a * a)
    return MlpParams(gw, gb)


def mlp_backward(params: MlpParams, x, output_grad) -> Gradients:
    """Exact gradient of <output_grad, mlp_forward(params, x)>; a batch of rows is summed."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != network fan-in {params.weights[0].shape[1]}")
    if g.shape[-1] != params.weights[-1].shape[0]:
        raise ValueError(f"output_grad width {g.shape[-1]} != network output {params.weights[-1].shape[0]}")
    x2 = x[None, :] if x.ndim == 1 else x
    g2 = g[None, :] if g.ndim == 1 else g
    _, acts = forward_cached(params, x2)
    return backward_cached(params, acts, g2)


def global_norm(*groups) -> float:
    total = 0.0
    for group in groups:
        arrays = group.arrays() if isinstance(group, MlpParams) else [np.asarray(group)]
        for a in arrays:
            total += float(np.sum(a * a))
    return float(np.sqrt(total))


_CLIP_SLACK = 1e-12


def clip_grad_norm(grads: Gradients, max_norm: float, *extra: np.ndarray):
    """Rescale so the joint L2 norm of ``grads`` and any ``extra`` arrays is at most ``max_norm``.

    Returns the clipped gradients (a tuple when extras are given) and never mutates inputs.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads, *extra)
    # rescaled vectors can land a few ulps above max_norm; the slack keeps clipping idempotent
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        clipped, rest = grads, tuple(extra)
    else:
        scale = max_norm / norm
        clipped = grads.scaled(scale)
        rest = tuple(scale * e for e in extra)
    return (clipped, *rest) if extra else clipped


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays, lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_update(arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Functional ADAM with bias correction over plain array lists."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape} grad {g.shape} moment {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def adam_step(params: MlpParams, grads: Gradients, state: AdamState) -> tuple[MlpParams, AdamState]:
    if not params.same_shape(grads):
        raise ValueError("gradients are not shape-congruent with parameters")
    arrays, state = adam_update(params.arrays(), grads.arrays(), state)
    return MlpParams.from_arrays(arrays), state


def save_network(path, params: MlpParams, role: int, extras=()) -> None:
    Path(path).write_bytes(params.to_bytes(role, extras))


def load_network(path) -> tuple[MlpParams, int, np.ndarray]:
    return MlpParams.from_bytes(Path(path).read_bytes())
