"""PEFT adapter families on a frozen linear layer ``y = x @ W0`` (W0 is d x k).

Every adapter reads its parameters from one flat vector ``a``. Segment order:

* LoRA:   B (d x r) row-major, A (r x k) row-major
* DoRA:   B, A, magnitude (k)
* Prefix: prefix matrix (n_prefix x d) row-major
* FFA:    down weight (d x bottleneck), down bias, up weight (bottleneck x d), up bias
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from enum import Enum
import json
import math
import struct
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .generator import plan_chunks


class AdapterError(ValueError):
    pass


class DegenerateInputError(AdapterError):
    pass


class Family(str, Enum):
    LORA = "lora"
    DORA = "dora"
    PREFIX = "prefix"
    FFA = "ffa"


@dataclass(frozen=True)
class AdapterSpec:
    family: Family
    d: int
    k: int
    r: int = 4
    alpha: float | None = None
    n_prefix: int = 0
    bottleneck: int = 8
    # "residual": magnitude = ||W0 col|| + segment, so a zero vector is the identity.
    # "absolute": the segment is the magnitude itself.
    magnitude_mode: str = "residual"

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.d < 1 or self.k < 1:
            raise AdapterError(f"layer dims must be positive, got d={self.d}, k={self.k}")
        if self.family in (Family.LORA, Family.DORA):
            if self.r < 1:
                raise AdapterError(f"rank must be >= 1, got {self.r}")
            if self.r > min(self.d, self.k) / 2:
                warnings.warn(f"rank {self.r} is large relative to min(d, k) = {min(self.d, self.k)}")
        if self.family is Family.PREFIX and self.n_prefix < 0:
            raise AdapterError("n_prefix must be >= 0")
        if self.family is Family.FFA and self.bottleneck < 1:
            raise AdapterError("bottleneck must be >= 1")
        if self.magnitude_mode not in ("residual", "absolute"):
            raise AdapterError(f"unknown magnitude_mode {self.magnitude_mode!r}")

    @property
    def scaling(self) -> float:
        alpha = 2 * self.r if self.alpha is None else self.alpha
        return alpha / self.r

    @property
    def n_params(self) -> int:
        return sum(seg.size for seg in flat_layout(self))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family"] = self.family.value
        return out


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def flat_layout(spec: AdapterSpec) -> list[Segment]:
    if spec.family is Family.LORA:
        shapes = [("B", (spec.d, spec.r)), ("A", (spec.r, spec.k))]
    elif spec.family is Family.DORA:
        shapes = [("B", (spec.d, spec.r)), ("A", (spec.r, spec.k)), ("magnitude", (spec.k,))]
    elif spec.family is Family.PREFIX:
        shapes = [("prefix", (spec.n_prefix, spec.d))]
    else:
        shapes = [
            ("down", (spec.d, spec.bottleneck)),
            ("down_bias", (spec.bottleneck,)),
            ("up", (spec.bottleneck, spec.d)),
            ("up_bias", (spec.d,)),
        ]
    segments, off = [], 0
    for name, shape in shapes:
        seg = Segment(name, shape, off)
        segments.append(seg)
        off += seg.size
    return segments


def views(spec: AdapterSpec, a):
    """Structured views into ``a`` (torch tensor or numpy array); no copies."""
    if a.shape != (spec.n_params,):
        raise AdapterError(f"{spec.family.value} adapter needs {spec.n_params} values, got {tuple(a.shape)}")
    return {seg.name: a[seg.offset:seg.offset + seg.size].reshape(seg.shape) for seg in flat_layout(spec)}


def flatten(spec: AdapterSpec, parts: dict) -> np.ndarray:
    return np.concatenate([np.asarray(parts[seg.name], dtype=float).reshape(-1) for seg in flat_layout(spec)])


def qubit_count(spec: AdapterSpec, n_mlp: int) -> int:
    return plan_chunks(spec.n_params, n_mlp).n_qubits


# ---------------------------------------------------------------------------
# forward semantics (torch, so the loss can be differentiated w.r.t. ``a``)


def linear(x: torch.Tensor, W0: torch.Tensor) -> torch.Tensor:
    """The frozen layer; every adapter routes its base term through here so a
    zero adapter reproduces the plain layer bit for bit."""
    return x @ W0


def _check_x(x, W0, spec):
    if W0.shape != (spec.d, spec.k):
        raise AdapterError(f"W0 has shape {tuple(W0.shape)}, adapter expects {(spec.d, spec.k)}")
    if x.shape[-1] != spec.d:
        raise AdapterError(f"input feature dim {x.shape[-1]} != d={spec.d}")


def lora_forward(x, W0, spec: AdapterSpec, a):
    _check_x(x, W0, spec)
    v = views(spec, a)
    return linear(x, W0) + spec.scaling * ((x @ v["B"]) @ v["A"])


def column_norms(W: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(W, dim=0)


def dora_weight(W0, spec: AdapterSpec, a):
    v = views(spec, a)
    W = W0 + spec.scaling * (v["B"] @ v["A"])
    norms = column_norms(W)
    if bool((norms == 0).any()):
        raise DegenerateInputError("DoRA direction has a zero-norm column")
    if spec.magnitude_mode == "residual":
        magnitude = column_norms(W0) + v["magnitude"]
    else:
        magnitude = v["magnitude"]
    # magnitude / norms is exactly 1.0 at the identity point, keeping W0 bitwise
    return W * (magnitude / norms)


def dora_forward(x, W0, spec: AdapterSpec, a):
    _check_x(x, W0, spec)
    return linear(x, dora_weight(W0, spec, a))


def prefix_forward(x_seq, W0, spec: AdapterSpec, a):
    """Output has ``n_prefix + seq`` rows; prefix rows come first."""
    _check_x(x_seq, W0, spec)
    prefix = views(spec, a)["prefix"]
    y = linear(x_seq, W0)
    if spec.n_prefix == 0:
        return y
    y_prefix = linear(prefix, W0)
    if x_seq.dim() == 3:
        y_prefix = y_prefix.unsqueeze(0).expand(x_seq.shape[0], -1, -1)
    return torch.cat([y_prefix, y], dim=-2)


def ffa_forward(x, W0, spec: AdapterSpec, a):
    _check_x(x, W0, spec)
    v = views(spec, a)
    hidden = F.silu(x @ v["down"] + v["down_bias"])
    return linear(x + (hidden @ v["up"] + v["up_bias"]), W0)


_FORWARD = {
    Family.LORA: lora_forward,
    Family.DORA: dora_forward,
    Family.PREFIX: prefix_forward,
    Family.FFA: ffa_forward,
}


def adapter_forward(x, W0, spec: AdapterSpec, a):
    return _FORWARD[spec.family](x, W0, spec, a)


def init_params(spec: AdapterSpec, W0, seed=None) -> np.ndarray:
    """Conventional direct-training init; the adapted layer starts equal to W0
    (except Prefix, whose rows never reach the loss)."""
    rng = np.random.default_rng(seed)
    parts = {}
    if spec.family in (Family.LORA, Family.DORA):
        bound = 1.0 / math.sqrt(spec.d)
        parts["B"] = rng.uniform(-bound, bound, size=(spec.d, spec.r))
        parts["A"] = np.zeros((spec.r, spec.k))
        if spec.family is Family.DORA:
            if spec.magnitude_mode == "residual":
                parts["magnitude"] = np.zeros(spec.k)
            else:
                parts["magnitude"] = column_norms(torch.as_tensor(W0, dtype=torch.float64)).numpy()
    elif spec.family is Family.PREFIX:
        parts["prefix"] = 0.02 * rng.standard_normal((spec.n_prefix, spec.d))
    else:
        bound = 1.0 / math.sqrt(spec.d)
        parts["down"] = rng.uniform(-bound, bound, size=(spec.d, spec.bottleneck))
        parts["down_bias"] = np.zeros(spec.bottleneck)
        parts["up"] = np.zeros((spec.bottleneck, spec.d))
        parts["up_bias"] = np.zeros(spec.d)
    return flatten(spec, parts)


def identity_params(spec: AdapterSpec, W0=None) -> np.ndarray:
    """The vector for which the adapted layer equals the frozen one."""
    a = np.zeros(spec.n_params)
    if spec.family is Family.DORA and spec.magnitude_mode == "absolute":
        if W0 is None:
            raise AdapterError("absolute DoRA magnitudes need W0 for the identity vector")
        seg = flat_layout(spec)[-1]
        a[seg.offset:] = column_norms(torch.as_tensor(W0, dtype=torch.float64)).numpy()
    return a


# ---------------------------------------------------------------------------
# adapter file: b"QPAADPT\0", u32 version, u32 header length, JSON header, f64 LE values

ADAPTER_MAGIC = b"QPAADPT\x00"
ADAPTER_VERSION = 1


def save_adapter(path, spec: AdapterSpec, a) -> None:
    values = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    if values.shape != (spec.n_params,):
        raise AdapterError(f"expected {spec.n_params} values, got {values.shape}")
    header = json.dumps({"spec": spec.to_dict(), "n_values": int(values.size)}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(ADAPTER_MAGIC)
        f.write(struct.pack("<II", ADAPTER_VERSION, len(header)))
        f.write(header)
        f.write(values.tobytes())


def load_adapter(path) -> tuple[AdapterSpec, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != ADAPTER_MAGIC:
        raise AdapterError(f"{path}: not an adapter file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != ADAPTER_VERSION:
        raise AdapterError(f"{path}: unsupported adapter file version {version}")
    header = json.loads(blob[16:16 + hlen])
    spec = AdapterSpec(**header["spec"])
    body = blob[16 + hlen:]
    if len(body) % 8:
        raise AdapterError(f"{path}: truncated adapter payload")
    values = np.frombuffer(body, dtype="<f8").astype(float)
    if values.size != header["n_values"] or values.size != spec.n_params:
        raise AdapterError(f"{path}: truncated adapter payload")
    return spec, values
