"""Parallel-circuit feedforward networks.

A network with k circuits keeps its hidden layers as k disjoint stacks of
small dense matrices; circuits share the input vector and fan back in at
the output layer. Weights for hidden layer l live in one (k, fan_in, width)
array whose slice [c] is circuit c's matrix, so the per-sample pass is k
small matmuls done as one batched call. k=1 is an ordinary MLP.
"""

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ConsistencyError, ParameterError, PolicyError, ShapeError
from .linalg import softmax
from .rng import RngKey, uniform_stream

if TYPE_CHECKING:
    from .dropout import MaskSet

HEADS = ("softmax", "tanh")


@dataclass(frozen=True)
class Topology:
    """Structural description: input width, circuit count, total hidden widths, classes.

    `hidden` holds TOTAL widths per layer; each must divide evenly into k
    equal circuit slices. Networks with k >= 2 need at least two hidden
    layers, otherwise there is nothing for the circuits to decouple.
    """

    input_dim: int
    k: int
    hidden: tuple
    output_dim: int
    head: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.k < 1:
            raise ParameterError(f"circuit count must be >= 1, got {self.k}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be >= 1")
        if len(self.hidden) == 0:
            raise ParameterError("at least one hidden layer is required")
        if self.k >= 2 and len(self.hidden) < 2:
            raise ParameterError(
                f"k={self.k} circuits require at least two hidden layers, got {len(self.hidden)}"
            )
        for h in self.hidden:
            if h < 1:
                raise ParameterError(f"hidden widths must be >= 1, got {h}")
            if h % self.k != 0:
                raise ParameterError(
                    f"hidden width {h} is not divisible into {self.k} equal circuits"
                )
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def circuit_widths(self) -> tuple:
        """Per-circuit width of each hidden layer."""
        return tuple(h // self.k for h in self.hidden)

    @property
    def n_hidden_layers(self) -> int:
        return len(self.hidden)


@dataclass
class Parameters:
    """Weights and biases of one network.

    hidden_w[l] has shape (k, fan_in_l, width_l) with fan_in_0 = input_dim
    (shared input) and fan_in_l = width_{l-1} otherwise; hidden_w[l][c] is
    circuit c's weight matrix. out_w[c] maps circuit c's last hidden layer
    to the shared output; out_b is the shared output bias.
    """

    topology: Topology
    hidden_w: list
    hidden_b: list
    out_w: np.ndarray
    out_b: np.ndarray
    init_scale: Optional[float] = None
    init_seed: Optional[RngKey] = None

    def copy(self) -> "Parameters":
        return Parameters(
            topology=self.topology,
            hidden_w=[w.copy() for w in self.hidden_w],
            hidden_b=[b.copy() for b in self.hidden_b],
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
            init_scale=self.init_scale,
            init_seed=self.init_seed,
        )

    def weight_arrays(self):
        """All weight matrices (L2 applies to these)."""
        return list(self.hidden_w) + [self.out_w]

    def bias_arrays(self):
        return list(self.hidden_b) + [self.out_b]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.weight_arrays() + self.bias_arrays())


@dataclass
class Gradients:
    hidden_w: list
    hidden_b: list
    out_w: np.ndarray
    out_b: np.ndarray

    @classmethod
    def zeros_like(cls, params: Parameters) -> "Gradients":
        return cls(
            hidden_w=[np.zeros_like(w) for w in params.hidden_w],
            hidden_b=[np.zeros_like(b) for b in params.hidden_b],
            out_w=np.zeros_like(params.out_w),
            out_b=np.zeros_like(params.out_b),
        )

    def add_(self, other: "Gradients") -> None:
        for a, b in zip(self.hidden_w, other.hidden_w):
            a += b
        for a, b in zip(self.hidden_b, other.hidden_b):
            a += b
        self.out_w += other.out_w
        self.out_b += other.out_b

    def scale_(self, factor: float) -> None:
        for a in self.hidden_w + self.hidden_b:
            a *= factor
        self.out_w *= factor
        self.out_b *= factor


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, as consumed by the next layer.

    y[l] is the post-activation, post-mask output of hidden layer l; x is
    the input actually fed to the first layer ((k, d) when input dropout
    produced per-circuit views, (d,) otherwise).
    """

    x: np.ndarray
    z: list
    y: list
    logits: np.ndarray
    output: np.ndarray
    masks: Optional["MaskSet"] = None


def build_network(topology: Topology, init_scale: float, seed: RngKey) -> Parameters:
    """Initialize weights Uniform(-init_scale/sqrt(fan_in), +...), biases zero.

    Each (circuit, layer) slice comes from its own key-derived stream, so
    construction order never affects the values.
    """
    if init_scale <= 0:
        raise ParameterError(f"init_scale must be positive, got {init_scale}")
    k = topology.k
    widths = topology.circuit_widths
    hidden_w, hidden_b = [], []
    fan_in = topology.input_dim
    for l, w in enumerate(widths):
        bound = init_scale / np.sqrt(fan_in)
        layer = np.empty((k, fan_in, w), dtype=np.float64)
        for c in range(k):
            u = uniform_stream(seed.with_fields(circuit=c, purpose="init"), fan_in * w, lane=l)
            layer[c] = (bound * (2.0 * u - 1.0)).reshape(fan_in, w)
        hidden_w.append(layer)
        hidden_b.append(np.zeros((k, w), dtype=np.float64))
        fan_in = w
    out_lane = len(widths)
    bound = init_scale / np.sqrt(widths[-1] * k)  # output sums over all circuits
    out_w = np.empty((k, widths[-1], topology.output_dim), dtype=np.float64)
    for c in range(k):
        u = uniform_stream(
            seed.with_fields(circuit=c, purpose="init"),
            widths[-1] * topology.output_dim,
            lane=out_lane,
        )
        out_w[c] = (bound * (2.0 * u - 1.0)).reshape(widths[-1], topology.output_dim)
    out_b = np.zeros(topology.output_dim, dtype=np.float64)
    return Parameters(topology, hidden_w, hidden_b, out_w, out_b, init_scale, seed)


def _check_masks(topology: Topology, masks) -> None:
    widths = topology.circuit_widths
    if masks.granularity == "node":
        if masks.node is None or len(masks.node) != len(widths):
            raise PolicyError(
                f"node masks must cover all {len(widths)} hidden layers"
            )
        for l, (m, w) in enumerate(zip(masks.node, widths)):
            if m.shape != (topology.k, w):
                raise ShapeError(
                    f"node mask for layer {l} has shape {m.shape}, expected {(topology.k, w)}"
                )
        if masks.input is not None and masks.input.shape != (topology.k, topology.input_dim):
            raise ShapeError(
                f"input mask has shape {masks.input.shape}, "
                f"expected {(topology.k, topology.input_dim)}"
            )
    elif masks.granularity == "circuit":
        if masks.circuit is None or masks.circuit.shape != (topology.k,):
            raise ShapeError(
                f"circuit mask must have shape {(topology.k,)}, "
                f"got {None if masks.circuit is None else masks.circuit.shape}"
            )
    else:
        raise PolicyError(f"unknown mask granularity {masks.granularity!r}")


def forward(params: Parameters, x: np.ndarray, masks=None, mode: str = "infer"):
    """One sample through the network; returns (output, trace).

    In train mode, masks (if any) multiply each hidden layer's activations
    before the next layer consumes them; the trace records exactly those
    masked values. Inference never takes masks: scale the parameters
    instead (dropout.inference_scale).
    """
    topo = params.topology
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" and masks is not None:
        raise PolicyError("masks are a training-time construct; scale parameters for inference")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (topo.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, expected {(topo.input_dim,)}")
    node = circuit = None
    if masks is not None:
        _check_masks(topo, masks)
        if masks.granularity == "node":
            node = masks.node
        else:
            circuit = masks.circuit

    if masks is not None and masks.input is not None:
        y_prev = x * masks.input  # per-circuit input views, shape (k, d)
    else:
        y_prev = x
    x_used = y_prev

    zs, ys = [], []
    for l, (W, b) in enumerate(zip(params.hidden_w, params.hidden_b)):
        if y_prev.ndim == 1:
            z = np.matmul(y_prev, W) + b  # (k, width)
        else:
            z = np.matmul(y_prev[:, None, :], W)[:, 0, :] + b
        y = np.tanh(z)
        if node is not None:
            y = y * node[l]
        elif circuit is not None:
            y = y * circuit[:, None]
        zs.append(z)
        ys.append(y)
        y_prev = y
    logits = np.matmul(y_prev[:, None, :], params.out_w)[:, 0, :].sum(axis=0) + params.out_b
    output = softmax(logits) if topo.head == "softmax" else np.tanh(logits)
    return output, ForwardTrace(x=x_used, z=zs, y=ys, logits=logits, output=output, masks=masks)


def forward_batch(params: Parameters, X: np.ndarray) -> np.ndarray:
    """Inference outputs for a whole (n, input_dim) matrix at once.

    Same arithmetic as forward() per row, vectorized for evaluation; no
    masks.
    """
    topo = params.topology
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != topo.input_dim:
        raise ShapeError(f"batch has shape {X.shape}, expected (n, {topo.input_dim})")
    y = np.matmul(X, params.hidden_w[0]) + params.hidden_b[0][:, None, :]  # (k, n, w)
    y = np.tanh(y)
    for W, b in zip(params.hidden_w[1:], params.hidden_b[1:]):
        y = np.tanh(np.matmul(y, W) + b[:, None, :])
    logits = np.matmul(y, params.out_w).sum(axis=0) + params.out_b  # (n, C)
    return softmax(logits) if topo.head == "softmax" else np.tanh(logits)


def backward(params: Parameters, trace: ForwardTrace, target: int, masks=None) -> Gradients:
    """Exact loss gradient for one sample (cross-entropy for the softmax
    head, squared error against +/-1 targets for the tanh head).

    Dropped units neither receive nor transmit gradient: the mask factor
    zeroes their path exactly.
    """
    topo = params.topology
    if masks is not trace.masks:
        raise ConsistencyError("backward masks differ from the masks the trace was built with")
    if len(trace.y) != len(params.hidden_w) or trace.y[-1].shape[1] != params.out_w.shape[1]:
        raise ConsistencyError("trace does not match parameter shapes")
    if not 0 <= target < topo.output_dim:
        raise ParameterError(f"target class {target} outside [0, {topo.output_dim})")

    if topo.head == "softmax":
        dlogits = trace.output.copy()
        dlogits[target] -= 1.0
    else:
        t = np.full(topo.output_dim, -1.0)
        t[target] = 1.0
        dlogits = (trace.output - t) * (1.0 - trace.output**2)

    node = circuit = None
    if masks is not None:
        if masks.granularity == "node":
            node = masks.node
        else:
            circuit = masks.circuit

    y_pl = trace.y[-1]
    d_out_w = y_pl[:, :, None] * dlogits[None, None, :]
    d_out_b = dlogits.copy()
    dy = np.matmul(params.out_w, dlogits)  # (k, width_PL)

    L = len(params.hidden_w)
    d_hw = [None] * L
    d_hb = [None] * L
    for l in range(L - 1, -1, -1):
        y = trace.y[l]
        dz = dy * (1.0 - y * y)  # stored y is post-mask; mask factor below kills dropped units
        if node is not None:
            dz = dz * node[l]
        elif circuit is not None:
            dz = dz * circuit[:, None]
        d_hb[l] = dz
        y_in = trace.y[l - 1] if l > 0 else trace.x
        if y_in.ndim == 1:
            d_hw[l] = y_in[None, :, None] * dz[:, None, :]
        else:
            d_hw[l] = np.matmul(y_in[:, :, None], dz[:, None, :])
        if l > 0:
            dy = np.matmul(params.hidden_w[l], dz[:, :, None])[:, :, 0]
    return Gradients(hidden_w=d_hw, hidden_b=d_hb, out_w=d_out_w, out_b=d_out_b)


def count_connections(topology: Topology) -> dict:
    """Edge and bias counts; hidden-to-hidden shrinks by exactly 1/k."""
    h = topology.hidden
    input_to_hidden = topology.input_dim * h[0]
    hidden_to_hidden = sum(h[l] * h[l + 1] // topology.k for l in range(len(h) - 1))
    hidden_to_output = h[-1] * topology.output_dim
    biases = sum(h) + topology.output_dim
    return {
        "input_to_hidden": input_to_hidden,
        "hidden_to_hidden": hidden_to_hidden,
        "hidden_to_output": hidden_to_output,
        "biases": biases,
        "total": input_to_hidden + hidden_to_hidden + hidden_to_output + biases,
    }


def embed_as_single_circuit(params: Parameters) -> Parameters:
    """Rewrite a k-circuit net as an equivalent k=1 net.

    Hidden-to-hidden matrices become block-diagonal with the circuit
    blocks on the diagonal; forward outputs agree with the original up to
    float summation order.
    """
    topo = params.topology
    if topo.k == 1:
        return params
    k = topo.k
    widths = topo.circuit_widths
    new_topo = Topology(topo.input_dim, 1, topo.hidden, topo.output_dim, head=topo.head)
    hidden_w = [np.concatenate([params.hidden_w[0][c] for c in range(k)], axis=1)[None]]
    hidden_b = [params.hidden_b[0].reshape(1, -1).copy()]
    for l in range(1, len(widths)):
        win, wout = widths[l - 1], widths[l]
        big = np.zeros((k * win, k * wout), dtype=np.float64)
        for c in range(k):
            big[c * win : (c + 1) * win, c * wout : (c + 1) * wout] = params.hidden_w[l][c]
        hidden_w.append(big[None])
        hidden_b.append(params.hidden_b[l].reshape(1, -1).copy())
    out_w = np.concatenate([params.out_w[c] for c in range(k)], axis=0)[None]
    return Parameters(
        topology=new_topo,
        hidden_w=hidden_w,
        hidden_b=hidden_b,
        out_w=out_w,
        out_b=params.out_b.copy(),
        init_scale=params.init_scale,
        init_seed=params.init_seed,
    )


def save_checkpoint(params: Parameters, path) -> None:
    """Self-describing .npz checkpoint; arrays round-trip bit-exactly."""
    topo = params.topology
    meta = {
        "input_dim": topo.input_dim,
        "k": topo.k,
        "hidden": list(topo.hidden),
        "output_dim": topo.output_dim,
        "head": topo.head,
        "init_scale": params.init_scale,
        "init_seed": None
        if params.init_seed is None
        else {
            "trial": params.init_seed.trial,
            "epoch": params.init_seed.epoch,
            "sample": params.init_seed.sample,
            "circuit": params.init_seed.circuit,
            "purpose": params.init_seed.purpose,
        },
    }
    arrays = {"out_w": params.out_w, "out_b": params.out_b}
    for l, (w, b) in enumerate(zip(params.hidden_w, params.hidden_b)):
        arrays[f"hidden_w_{l}"] = w
        arrays[f"hidden_b_{l}"] = b
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> Parameters:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        topo = Topology(
            input_dim=meta["input_dim"],
            k=meta["k"],
            hidden=tuple(meta["hidden"]),
            output_dim=meta["output_dim"],
            head=meta["head"],
        )
        n_layers = len(topo.hidden)
        hidden_w = [data[f"hidden_w_{l}"] for l in range(n_layers)]
        hidden_b = [data[f"hidden_b_{l}"] for l in range(n_layers)]
        seed = None
        if meta["init_seed"] is not None:
            seed = RngKey(**meta["init_seed"])
        return Parameters(
            topology=topo,
            hidden_w=hidden_w,
            hidden_b=hidden_b,
            out_w=data["out_w"],
            out_b=data["out_b"],
            init_scale=meta["init_scale"],
            init_seed=seed,
        )
