"""Exact statevector simulation of the rotation + CNOT-chain ansatz families.

Qubit 0 is the most significant bit of a basis index, so amplitude ``i`` of an
``N``-qubit state corresponds to the bitstring ``format(i, f"0{N}b")``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

MAX_QUBITS = 24


class CircuitError(ValueError):
    pass


class GradientModeError(RuntimeError):
    """Raised when analytic gradients are requested outside exact simulation."""


class AnsatzKind(str, Enum):
    RY = "RY"
    RX = "RX"
    RXRZ = "RXRZ"
    RYRZ = "RYRZ"


# rotation axes per layer, in application order
_LAYER_AXES = {
    AnsatzKind.RY: ("Y",),
    AnsatzKind.RX: ("X",),
    AnsatzKind.RXRZ: ("X", "Z"),
    AnsatzKind.RYRZ: ("Y", "Z"),
}


@dataclass(frozen=True)
class Gate:
    name: str  # "RX" | "RY" | "RZ" | "CNOT"
    qubits: tuple[int, ...]
    param: int | None = None


@dataclass(frozen=True)
class CircuitSpec:
    kind: AnsatzKind
    n_qubits: int
    depth: int
    gates: tuple[Gate, ...] = field(repr=False)

    @property
    def params_per_layer(self) -> int:
        return len(_LAYER_AXES[self.kind]) * self.n_qubits

    @property
    def n_params(self) -> int:
        return self.depth * self.params_per_layer

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits


@dataclass
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass(frozen=True)
class NoiseModel:
    single_qubit_depolarizing_p: float = 0.0
    two_qubit_depolarizing_p: float = 0.0
    readout_flip_p: float = 0.0

    def __post_init__(self):
        for name in ("single_qubit_depolarizing_p", "two_qubit_depolarizing_p", "readout_flip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def is_noiseless(self) -> bool:
        return (
            self.single_qubit_depolarizing_p == 0.0
            and self.two_qubit_depolarizing_p == 0.0
            and self.readout_flip_p == 0.0
        )


def build_ansatz(kind, n_qubits: int, depth: int, max_qubits: int = MAX_QUBITS) -> CircuitSpec:
    """Lay out ``depth`` repetitions of rotations on every qubit followed by
    the CNOT chain 0->1->...->N-1. Two-rotation kinds repeat the
    (rotations, chain) block once per axis within each layer.
    """
    kind = AnsatzKind(kind)
    if n_qubits < 1:
        raise CircuitError(f"n_qubits must be >= 1, got {n_qubits}")
    if n_qubits > max_qubits:
        raise CircuitError(f"n_qubits={n_qubits} exceeds the configured maximum of {max_qubits}")
    if depth < 0:
        raise CircuitError(f"depth must be >= 0, got {depth}")

    gates: list[Gate] = []
    p = 0
    for _ in range(depth):
        for axis in _LAYER_AXES[kind]:
            for q in range(n_qubits):
                gates.append(Gate("R" + axis, (q,), p))
                p += 1
            for q in range(n_qubits - 1):
                gates.append(Gate("CNOT", (q, q + 1)))
    return CircuitSpec(kind, n_qubits, depth, tuple(gates))


def init_theta(circuit: CircuitSpec, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-np.pi, np.pi, size=circuit.n_params)


# ---------------------------------------------------------------------------
# gate kernels; every state array has shape (..., 2**N)


def rotation_matrix(axis: str, theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    if axis == "Y":
        return np.array([[c, -s], [s, c]], dtype=complex)
    if axis == "X":
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
    if axis == "Z":
        return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=complex)
    raise CircuitError(f"unknown rotation axis {axis!r}")


_PAULI = {
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def rotation_derivative(axis: str, theta: float) -> np.ndarray:
    # d/dθ exp(-iθP/2) = -i/2 P exp(-iθP/2)
    return -0.5j * _PAULI[axis] @ rotation_matrix(axis, theta)


def _apply_1q(states: np.ndarray, mat: np.ndarray, q: int, n: int) -> np.ndarray:
    lead = states.shape[:-1]
    v = states.reshape(-1, 1 << q, 2, 1 << (n - q - 1))
    s0, s1 = v[:, :, 0, :], v[:, :, 1, :]
    out = np.empty_like(v)
    out[:, :, 0, :] = mat[0, 0] * s0 + mat[0, 1] * s1
    out[:, :, 1, :] = mat[1, 0] * s0 + mat[1, 1] * s1
    return out.reshape(*lead, 1 << n)


def _cnot_perm(control: int, target: int, n: int) -> np.ndarray:
    idx = np.arange(1 << n)
    cbit = (idx >> (n - 1 - control)) & 1
    return np.where(cbit == 1, idx ^ (1 << (n - 1 - target)), idx)


def _apply_cnot(states: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    # CNOT is a self-inverse permutation
    return states[..., _cnot_perm(control, target, n)]


def _check_theta(circuit: CircuitSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != circuit.n_params:
        raise CircuitError(f"circuit expects {circuit.n_params} parameters, got {theta.size}")
    return theta


def _apply_gate(states, gate: Gate, theta, n, dagger=False):
    if gate.name == "CNOT":
        return _apply_cnot(states, gate.qubits[0], gate.qubits[1], n)
    mat = rotation_matrix(gate.name[1], theta[gate.param])
    if dagger:
        mat = mat.conj().T
    return _apply_1q(states, mat, gate.qubits[0], n)


def zero_state(n_qubits: int) -> np.ndarray:
    psi = np.zeros(1 << n_qubits, dtype=complex)
    psi[0] = 1.0
    return psi


def apply_circuit(circuit: CircuitSpec, theta) -> StateVector:
    theta = _check_theta(circuit, theta)
    n = circuit.n_qubits
    psi = zero_state(n)
    for gate in circuit.gates:
        psi = _apply_gate(psi, gate, theta, n)
    return StateVector(n, psi)


def basis_probabilities(state: StateVector) -> np.ndarray:
    amps = state.amplitudes
    return amps.real**2 + amps.imag**2


def exact_probabilities(circuit: CircuitSpec, theta) -> np.ndarray:
    return basis_probabilities(apply_circuit(circuit, theta))


# ---------------------------------------------------------------------------
# gradients


def _adjoint(circuit: CircuitSpec, theta: np.ndarray, psi: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Reverse sweep: returns 2 Re <lam_j | dG_j phi_j> for every parameter j.

    ``lam`` may carry a leading batch axis (one adjoint vector per row).
    """
    n = circuit.n_qubits
    phi = psi
    grads = np.zeros(lam.shape[:-1] + (circuit.n_params,))
    for gate in reversed(circuit.gates):
        phi = _apply_gate(phi, gate, theta, n, dagger=True)
        if gate.param is not None:
            dmat = rotation_derivative(gate.name[1], theta[gate.param])
            mu = _apply_1q(phi, dmat, gate.qubits[0], n)
            grads[..., gate.param] = 2.0 * np.real(np.sum(lam.conj() * mu, axis=-1))
        lam = _apply_gate(lam, gate, theta, n, dagger=True)
    return grads


def _require_exact(mode: str) -> None:
    if mode != "exact":
        raise GradientModeError(
            f"analytic probability gradients are only available in exact mode, not {mode!r}"
        )


def prob_gradients(circuit: CircuitSpec, theta, mode: str = "exact") -> np.ndarray:
    """Jacobian ``J[i, j] = d p_i / d theta_j`` of shape (2**N, n_params)."""
    _require_exact(mode)
    theta = _check_theta(circuit, theta)
    psi = apply_circuit(circuit, theta).amplitudes
    # row i of lam is e_i * psi
    lam = np.diag(psi)
    return _adjoint(circuit, theta, psi, lam)


def prob_vjp(circuit: CircuitSpec, theta, cotangent, mode: str = "exact", psi=None) -> np.ndarray:
    """``J^T v`` without forming the Jacobian: one forward and one reverse sweep."""
    _require_exact(mode)
    theta = _check_theta(circuit, theta)
    if psi is None:
        psi = apply_circuit(circuit, theta).amplitudes
    v = np.asarray(cotangent, dtype=float)
    if v.shape != psi.shape:
        raise CircuitError(f"cotangent has shape {v.shape}, expected {psi.shape}")
    return _adjoint(circuit, theta, psi, v * psi)


def parameter_shift_grad(circuit: CircuitSpec, theta, basis_index: int, param_index: int) -> float:
    theta = _check_theta(circuit, theta)
    plus, minus = theta.copy(), theta.copy()
    plus[param_index] += np.pi / 2
    minus[param_index] -= np.pi / 2
    p_plus = exact_probabilities(circuit, plus)[basis_index]
    p_minus = exact_probabilities(circuit, minus)[basis_index]
    return float((p_plus - p_minus) / 2)


# ---------------------------------------------------------------------------
# finite shots and noise


def _clean_probs(probs) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    return p / p.sum()


def sample_shots(probs, n_shots: int, seed) -> np.ndarray:
    if n_shots < 1:
        raise ValueError(f"n_shots must be >= 1, got {n_shots}")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n_shots, _clean_probs(probs))
    return counts / n_shots


def _draw_outcomes(probs: np.ndarray, rng) -> np.ndarray:
    """One basis outcome per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    out = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(out, probs.shape[-1] - 1)


def _apply_pauli_rows(states, rows, paulis, q, n):
    """Apply per-row Pauli ``paulis[r]`` in {1: X, 2: Y, 3: Z} on qubit ``q``.

    Y is applied as X.Z; the dropped global phase does not affect probabilities.
    """
    zmask = (paulis == 2) | (paulis == 3)
    xmask = (paulis == 1) | (paulis == 2)
    if zmask.any():
        bit = (np.arange(1 << n) >> (n - 1 - q)) & 1
        sign = 1.0 - 2.0 * bit
        states[rows[zmask]] *= sign
    if xmask.any():
        perm = np.arange(1 << n) ^ (1 << (n - 1 - q))
        r = rows[xmask]
        states[r] = states[r][:, perm]


def apply_noise(circuit: CircuitSpec, theta, noise: NoiseModel, n_shots: int, seed,
                batch_size: int | None = None) -> np.ndarray:
    """Trajectory-sampled noisy measurement frequencies.

    Each shot runs its own trajectory: after a rotation, with probability
    ``single_qubit_depolarizing_p`` a uniformly chosen X/Y/Z hits that qubit;
    after a CNOT, with probability ``two_qubit_depolarizing_p`` one of the 15
    non-identity two-qubit Paulis hits the pair. Each measured bit is then
    flipped with ``readout_flip_p``.
    """
    if n_shots < 1:
        raise ValueError(f"n_shots must be >= 1, got {n_shots}")
    theta = _check_theta(circuit, theta)
    if noise.is_noiseless:
        return sample_shots(exact_probabilities(circuit, theta), n_shots, seed)

    n = circuit.n_qubits
    dim = 1 << n
    if batch_size is None:
        batch_size = max(1, min(n_shots, (1 << 21) // dim))
    rng = np.random.default_rng(seed)
    p1 = noise.single_qubit_depolarizing_p
    p2 = noise.two_qubit_depolarizing_p
    counts = np.zeros(dim, dtype=np.int64)

    done = 0
    while done < n_shots:
        s = min(batch_size, n_shots - done)
        states = np.zeros((s, dim), dtype=complex)
        states[:, 0] = 1.0
        for gate in circuit.gates:
            states = _apply_gate(states, gate, theta, n)
            if gate.name == "CNOT":
                if p2 > 0:
                    hit = np.flatnonzero(rng.random(s) < p2)
                    # 1..15 encodes (control pauli, target pauli) in base 4, 0 excluded
                    code = rng.integers(1, 16, size=hit.size)
                    _apply_pauli_rows(states, hit, code // 4, gate.qubits[0], n)
                    _apply_pauli_rows(states, hit, code % 4, gate.qubits[1], n)
            elif p1 > 0:
                hit = np.flatnonzero(rng.random(s) < p1)
                pauli = rng.integers(1, 4, size=hit.size)
                _apply_pauli_rows(states, hit, pauli, gate.qubits[0], n)
        outcomes = _draw_outcomes(states.real**2 + states.imag**2, rng)
        if noise.readout_flip_p > 0:
            flips = rng.random((s, n)) < noise.readout_flip_p
            weights = 1 << np.arange(n - 1, -1, -1)
            outcomes = outcomes ^ (flips.astype(np.int64) @ weights)
        counts += np.bincount(outcomes, minlength=dim)
        done += s
    return counts / n_shots


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)))
