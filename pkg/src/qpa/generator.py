"""Batched parameter generation: circuit probabilities -> shared MLP -> flat vector.

Each of the first ``n_ch`` basis states feeds ``(bits, 2**N * p_i)`` to one
shared mapping MLP that emits a chunk of ``n_mlp`` values; the chunks are
concatenated and truncated to the target length ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import expit

from . import statevector as sv

DEFAULT_HIDDEN_DIMS = (32, 64, 128, 128, 64, 32)


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkPlan:
    m: int
    n_mlp: int
    n_ch: int
    n_qubits: int

    def locate(self, index: int) -> tuple[int, int]:
        """(chunk index, offset within chunk) of flat element ``index``."""
        if not 0 <= index < self.m:
            raise IndexError(index)
        return divmod(index, self.n_mlp)


def plan_chunks(m: int, n_mlp: int) -> ChunkPlan:
    if m < 1 or n_mlp < 1:
        raise GeneratorError(f"m and n_mlp must be >= 1, got m={m}, n_mlp={n_mlp}")
    n_ch = -(-m // n_mlp)
    # exact integer ceil(log2(n_ch)); floats misround near powers of two
    n_qubits = max(1, (n_ch - 1).bit_length())
    return ChunkPlan(m, n_mlp, n_ch, n_qubits)


def basis_encoding(index: int, n_qubits: int) -> np.ndarray:
    if not 0 <= index < (1 << n_qubits):
        raise GeneratorError(f"basis index {index} out of range for {n_qubits} qubits")
    return np.array([(index >> (n_qubits - 1 - q)) & 1 for q in range(n_qubits)], dtype=float)


def basis_table(n_rows: int, n_qubits: int) -> np.ndarray:
    idx = np.arange(n_rows)[:, None]
    shifts = np.arange(n_qubits - 1, -1, -1)[None, :]
    return ((idx >> shifts) & 1).astype(float)


# ---------------------------------------------------------------------------
# mapping model


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def layer_dims(n_qubits: int, n_mlp: int, hidden_dims=DEFAULT_HIDDEN_DIMS) -> list[int]:
    return [n_qubits + 1, *hidden_dims, n_mlp]


def mapping_param_count(n_qubits: int, n_mlp: int, hidden_dims=DEFAULT_HIDDEN_DIMS) -> int:
    dims = layer_dims(n_qubits, n_mlp, hidden_dims)
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


@dataclass
class MappingModel:
    """MLP over ``[N bits, scaled probability]`` with SiLU hidden layers and a
    linear output layer.

    All weights and biases live in the single flat vector ``params``;
    ``weights``/``biases`` are views into it, so an optimizer stepping
    ``params`` in place updates the layers.
    """

    dims: list[int]
    params: np.ndarray
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        expected = sum(i * o + o for i, o in zip(self.dims[:-1], self.dims[1:]))
        if self.params.shape != (expected,):
            raise GeneratorError(f"mapping model needs {expected} parameters, got {self.params.shape}")
        self.weights, self.biases = [], []
        off = 0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            self.weights.append(self.params[off:off + i * o].reshape(i, o))
            off += i * o
            self.biases.append(self.params[off:off + o])
            off += o

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    @classmethod
    def init(cls, n_qubits: int, n_mlp: int, hidden_dims=DEFAULT_HIDDEN_DIMS, seed=None,
             final_scale: float = 1.0) -> "MappingModel":
        """Fan-in uniform init ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

        The output layer is scaled by ``final_scale``; ``final_scale=0`` starts
        from an all-zero generated vector.
        """
        dims = layer_dims(n_qubits, n_mlp, hidden_dims)
        rng = np.random.default_rng(seed)
        chunks = []
        n_layers = len(dims) - 1
        for li, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(i)
            scale = final_scale if li == n_layers - 1 else 1.0
            chunks.append(scale * rng.uniform(-bound, bound, size=i * o))
            chunks.append(scale * rng.uniform(-bound, bound, size=o))
        return cls(dims, np.concatenate(chunks))

    def forward(self, inputs: np.ndarray, cache: bool = False):
        """Rows of ``inputs`` are independent samples. Returns outputs, and the
        per-layer pre-activations when ``cache`` is set."""
        h = np.asarray(inputs, dtype=float)
        if h.shape[-1] != self.input_dim:
            raise GeneratorError(f"mapping model expects {self.input_dim} input features, got {h.shape[-1]}")
        acts, pres = [h], []
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pres.append(z)
            h = z if li == last else silu(z)
            acts.append(h)
        if cache:
            return h, (acts, pres)
        return h

    def backward(self, grad_out: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        """Returns (gradient w.r.t. the flat ``params``, gradient w.r.t. inputs)."""
        acts, pres = cache
        grad_params = np.zeros_like(self.params)
        gw, gb = [], []
        g = grad_out
        for li in range(len(self.weights) - 1, -1, -1):
            if li != len(self.weights) - 1:
                g = g * silu_grad(pres[li])
            gw.append(acts[li].T @ g)
            gb.append(g.sum(axis=0))
            g = g @ self.weights[li].T
        off = 0
        for w_grad, b_grad in zip(reversed(gw), reversed(gb)):
            grad_params[off:off + w_grad.size] = w_grad.reshape(-1)
            off += w_grad.size
            grad_params[off:off + b_grad.size] = b_grad
            off += b_grad.size
        return grad_params, g


def mapping_forward(model: MappingModel, basis_bits, scaled_prob: float) -> np.ndarray:
    bits = np.asarray(basis_bits, dtype=float).reshape(-1)
    if bits.size + 1 != model.input_dim:
        raise GeneratorError(f"expected {model.input_dim - 1} basis bits, got {bits.size}")
    if not np.isfinite(scaled_prob):
        raise GeneratorError("probability input must be finite")
    return model.forward(np.append(bits, scaled_prob)[None, :])[0]


# ---------------------------------------------------------------------------
# generation and its reverse pass


@dataclass
class GeneratedParams:
    values: np.ndarray
    plan: ChunkPlan

    @property
    def chunk_index(self) -> np.ndarray:
        return np.arange(self.plan.m) // self.plan.n_mlp

    @property
    def offset(self) -> np.ndarray:
        return np.arange(self.plan.m) % self.plan.n_mlp


def _check_consistent(plan: ChunkPlan, circuit: sv.CircuitSpec, model: MappingModel) -> None:
    if circuit.n_qubits != plan.n_qubits:
        raise GeneratorError(f"circuit has {circuit.n_qubits} qubits but the plan needs {plan.n_qubits}")
    if model.input_dim != plan.n_qubits + 1:
        raise GeneratorError(f"mapping model input is {model.input_dim}, expected {plan.n_qubits + 1}")
    if model.output_dim != plan.n_mlp:
        raise GeneratorError(f"mapping model output is {model.output_dim}, expected n_mlp={plan.n_mlp}")


@dataclass
class ProbabilitySource:
    """How the probability features are obtained. Only ``exact`` supports
    gradients; ``shots`` and ``noisy`` are evaluation-only."""

    mode: str = "exact"
    n_shots: int | None = None
    noise: sv.NoiseModel | None = None
    seed: int | None = None

    def probabilities(self, circuit, theta):
        if self.mode == "exact":
            return sv.exact_probabilities(circuit, theta)
        if self.mode == "shots":
            return sv.sample_shots(sv.exact_probabilities(circuit, theta), self.n_shots, self.seed)
        if self.mode == "noisy":
            return sv.apply_noise(circuit, theta, self.noise or sv.NoiseModel(), self.n_shots, self.seed)
        raise GeneratorError(f"unknown probability mode {self.mode!r}")


class Generator:
    """Stateful wrapper caching the forward pass so ``backward`` can reuse it."""

    def __init__(self, plan: ChunkPlan, circuit: sv.CircuitSpec, model: MappingModel,
                 rescale: bool = True, source: ProbabilitySource | None = None):
        _check_consistent(plan, circuit, model)
        self.plan, self.circuit, self.model = plan, circuit, model
        self.rescale = rescale
        self.source = source or ProbabilitySource()
        self.bits = basis_table(plan.n_ch, plan.n_qubits)
        self._cache = None

    @property
    def prob_scale(self) -> float:
        return float(self.circuit.dim) if self.rescale else 1.0

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.source.mode == "exact":
            psi = sv.apply_circuit(self.circuit, theta).amplitudes
            probs = psi.real**2 + psi.imag**2
        else:
            psi = None
            probs = self.source.probabilities(self.circuit, theta)
        inputs = np.column_stack([self.bits, self.prob_scale * probs[: self.plan.n_ch]])
        out, mcache = self.model.forward(inputs, cache=True)
        self._cache = (theta.copy(), psi, mcache)
        return out.reshape(-1)[: self.plan.m].copy()

    def backward(self, dL_da) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            raise GeneratorError("backward called before forward")
        if self.source.mode != "exact":
            raise sv.GradientModeError(f"generator gradients need exact probabilities, mode is {self.source.mode!r}")
        dL_da = np.asarray(dL_da, dtype=float).reshape(-1)
        if dL_da.size != self.plan.m:
            raise GeneratorError(f"dL/da has length {dL_da.size}, expected {self.plan.m}")
        theta, psi, mcache = self._cache
        grad_out = np.zeros(self.plan.n_ch * self.plan.n_mlp)
        grad_out[: self.plan.m] = dL_da  # truncated surplus gets no gradient
        grad_b, grad_in = self.model.backward(grad_out.reshape(self.plan.n_ch, self.plan.n_mlp), mcache)
        # bit features are constants; only the probability column carries gradient
        dL_dp = np.zeros(self.circuit.dim)
        dL_dp[: self.plan.n_ch] = self.prob_scale * grad_in[:, -1]
        if self.circuit.n_params:
            grad_theta = sv.prob_vjp(self.circuit, theta, dL_dp, psi=psi)
        else:
            grad_theta = np.zeros(0)
        return grad_theta, grad_b


def generate(theta, model: MappingModel, plan: ChunkPlan, circuit: sv.CircuitSpec,
             rescale: bool = True, source: ProbabilitySource | None = None) -> GeneratedParams:
    gen = Generator(plan, circuit, model, rescale=rescale, source=source)
    return GeneratedParams(gen.forward(theta), plan)


def generator_backward(theta, model: MappingModel, plan: ChunkPlan, circuit: sv.CircuitSpec,
                       dL_da, rescale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    gen = Generator(plan, circuit, model, rescale=rescale)
    gen.forward(theta)
    return gen.backward(dL_da)


def count_trainable(plan: ChunkPlan, circuit: sv.CircuitSpec | None = None, model: MappingModel | None = None,
                    *, kind="RY", depth: int = 8, hidden_dims=DEFAULT_HIDDEN_DIMS) -> dict[str, int]:
    """Trainable-parameter counts; works from dims alone when ``circuit`` or
    ``model`` is omitted, so reference-scale configurations need no allocation."""
    if circuit is not None:
        theta_count = circuit.n_params
    else:
        per_layer = 2 if sv.AnsatzKind(kind) in (sv.AnsatzKind.RXRZ, sv.AnsatzKind.RYRZ) else 1
        theta_count = depth * per_layer * plan.n_qubits
    if model is not None:
        b_count = model.n_params
    else:
        b_count = mapping_param_count(plan.n_qubits, plan.n_mlp, hidden_dims)
    return {"theta_count": theta_count, "b_count": b_count, "total": theta_count + b_count}
