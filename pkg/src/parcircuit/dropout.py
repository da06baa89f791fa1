"""Mask policies: per-node dropout and the two circuit-level variants.

Node masks drop individual hidden units per circuit per sample. Circuit
masks drop whole circuits atomically: every node of a dropped circuit
inherits the same zero bit at every layer. The fixed variant draws one
circuit mask per training instance up front and reuses it for all epochs;
the non-fixed variant redraws per presented sample.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, ParameterError, PolicyError, ShapeError
from .network import Parameters, Topology
from .rng import RngKey, bernoulli_stream

POLICY_KINDS = ("none", "node_dropout", "nonfixed_dropcircuit", "fixed_dropcircuit")
CIRCUIT_KINDS = ("nonfixed_dropcircuit", "fixed_dropcircuit")

_MAX_RESAMPLE = 100_000


@dataclass(frozen=True)
class DropoutPolicy:
    kind: str = "none"
    retain_p: float = 0.5
    apply_to_input: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown dropout kind {self.kind!r}, expected one of {POLICY_KINDS}")
        if self.kind != "none" and not 0.0 < self.retain_p <= 1.0:
            raise ParameterError(f"retain_p must be in (0, 1], got {self.retain_p}")


@dataclass
class MaskSet:
    """Masks for one training sample.

    node granularity: one (k, width) 0/1 array per hidden layer, plus an
    optional (k, input_dim) array when input dropout is on. circuit
    granularity: a single (k,) 0/1 vector shared by all layers.
    """

    granularity: str
    node: Optional[list] = None
    circuit: Optional[np.ndarray] = None
    input: Optional[np.ndarray] = None


def sample_node_masks(
    topology: Topology, p: float, key: RngKey, include_input: bool = False
) -> MaskSet:
    """Fresh Bernoulli(p) node masks, one key-derived stream per circuit."""
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"retain probability must be in (0, 1], got {p} (p=0 drops everything)")
    widths = topology.circuit_widths
    k = topology.k
    n_input = topology.input_dim if include_input else 0
    total = n_input + sum(widths)
    per_layer = [np.empty((k, w)) for w in widths]
    input_bits = np.empty((k, topology.input_dim)) if include_input else None
    for c in range(k):
        bits = bernoulli_stream(
            key.with_fields(circuit=c, purpose="node-mask"), p, total
        ).astype(np.float64)
        pos = 0
        if include_input:
            input_bits[c] = bits[: topology.input_dim]
            pos = topology.input_dim
        for l, w in enumerate(widths):
            per_layer[l][c] = bits[pos : pos + w]
            pos += w
    return MaskSet(granularity="node", node=per_layer, input=input_bits)


def sample_circuit_mask(k: int, p: float, key: RngKey) -> MaskSet:
    """One Bernoulli(p) bit per circuit, resampled until >= 1 circuit survives.

    The all-dropped outcome (probability (1-p)^k) would make the step a
    no-op, so each failed attempt redraws from the next sub-key.
    """
    if k < 2:
        raise PolicyError(f"DropCircuit needs k >= 2 circuits, got k={k}")
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"retain probability must be in (0, 1], got {p}")
    key = key.with_fields(purpose="circuit-mask")
    for attempt in range(_MAX_RESAMPLE):
        bits = bernoulli_stream(key, p, k, lane=attempt)
        if bits.any():
            return MaskSet(granularity="circuit", circuit=bits.astype(np.float64))
    raise ParameterError(f"no circuit retained after {_MAX_RESAMPLE} resamples (p={p})")


class FixedMaskTable:
    """Immutable instance-id -> circuit-mask table for Fixed DropCircuit."""

    def __init__(self, masks: dict, k: int, retain_p: float, seed: RngKey):
        for m in masks.values():
            m.setflags(write=False)
        self._masks = masks
        self.k = k
        self.retain_p = retain_p
        self.seed = seed

    def __len__(self):
        return len(self._masks)

    def __contains__(self, instance_id):
        return int(instance_id) in self._masks

    def lookup(self, instance_id) -> MaskSet:
        try:
            bits = self._masks[int(instance_id)]
        except KeyError:
            raise DataError(f"instance id {instance_id} not in fixed mask table") from None
        return MaskSet(granularity="circuit", circuit=bits)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for iid in sorted(self._masks):
            h.update(str(iid).encode())
            h.update(self._masks[iid].tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "retain_p": self.retain_p,
                "seed": {
                    "trial": self.seed.trial,
                    "epoch": self.seed.epoch,
                    "sample": self.seed.sample,
                    "circuit": self.seed.circuit,
                    "purpose": self.seed.purpose,
                },
                "masks": {str(i): [int(b) for b in m] for i, m in self._masks.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FixedMaskTable":
        obj = json.loads(text)
        masks = {int(i): np.array(bits, dtype=np.float64) for i, bits in obj["masks"].items()}
        return cls(masks, obj["k"], obj["retain_p"], RngKey(**obj["seed"]))


def fixed_table_init(instance_ids, k: int, p: float, key: RngKey) -> FixedMaskTable:
    """Draw one guarded circuit mask per training instance, once."""
    ids = [int(i) for i in instance_ids]
    if len(set(ids)) != len(ids):
        raise DataError("instance ids for a fixed mask table must be unique")
    masks = {}
    for iid in ids:
        ms = sample_circuit_mask(k, p, key.with_fields(sample=iid))
        masks[iid] = ms.circuit
    return FixedMaskTable(masks, k, p, key)


def apply_mask(y: np.ndarray, mask_slice: np.ndarray) -> np.ndarray:
    """Elementwise mask application for one layer's activations.

    A 1-D slice is a circuit mask: every activation of circuit c
    multiplies bit c. A 2-D slice masks node-by-node.
    """
    y = np.asarray(y, dtype=np.float64)
    mask_slice = np.asarray(mask_slice, dtype=np.float64)
    if mask_slice.ndim == 1:
        if y.ndim != 2 or y.shape[0] != mask_slice.shape[0]:
            raise ShapeError(
                f"circuit mask of length {mask_slice.shape[0]} cannot apply to activations {y.shape}"
            )
        return y * mask_slice[:, None]
    if mask_slice.shape != y.shape:
        raise ShapeError(f"mask shape {mask_slice.shape} != activations shape {y.shape}")
    return y * mask_slice


def inference_scale(params: Parameters, policy: DropoutPolicy) -> Parameters:
    """Deterministic weights approximating the mask-ensemble average.

    Node dropout scales every masked layer's outgoing weights by retain_p.
    DropCircuit drops circuits atomically, so only the circuit-to-output
    weights scale; interior activations of surviving circuits were never
    thinned and stay untouched.
    """
    if policy.kind == "none" or policy.retain_p == 1.0:
        return params
    p = policy.retain_p
    scaled = params.copy()
    if policy.kind == "node_dropout":
        for l in range(len(scaled.hidden_w)):
            if l == 0 and not policy.apply_to_input:
                continue
            scaled.hidden_w[l] *= p
        scaled.out_w *= p
    elif policy.kind in CIRCUIT_KINDS:
        scaled.out_w *= p
    return scaled
