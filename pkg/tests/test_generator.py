import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpa import generator as gn
from qpa import statevector as sv


def make(m, n_mlp, hidden=(4, 3), depth=2, kind="RY", seed=0, final_scale=1.0):
    plan = gn.plan_chunks(m, n_mlp)
    circuit = sv.build_ansatz(kind, plan.n_qubits, depth)
    model = gn.MappingModel.init(plan.n_qubits, n_mlp, hidden, seed=seed, final_scale=final_scale)
    theta = sv.init_theta(circuit, seed)
    return plan, circuit, model, theta


# ---------------------------------------------------------------------------
# chunk planning


def test_plan_examples():
    assert gn.plan_chunks(10**9, 1024).n_qubits == 20
    p = gn.plan_chunks(204100, 2048)
    assert (p.n_ch, p.n_qubits) == (100, 7)
    p = gn.plan_chunks(7, 1)
    assert (p.n_ch, p.n_qubits) == (7, 3)
    assert gn.plan_chunks(5, 5).n_qubits == 1


@settings(max_examples=300)
@given(m=st.integers(1, 10**12), n_mlp=st.integers(1, 10**5))
def test_qubit_count_is_tight(m, n_mlp):
    p = gn.plan_chunks(m, n_mlp)
    assert p.n_ch == -(-m // n_mlp)
    assert p.n_ch <= 2**p.n_qubits
    if p.n_ch > 1:
        assert 2 ** (p.n_qubits - 1) < p.n_ch


def test_plan_rejects_nonpositive():
    with pytest.raises(gn.GeneratorError):
        gn.plan_chunks(0, 4)
    with pytest.raises(gn.GeneratorError):
        gn.plan_chunks(4, 0)


@settings(max_examples=50)
@given(m=st.integers(1, 5000), n_mlp=st.integers(1, 300))
def test_every_index_has_one_chunk_slot(m, n_mlp):
    p = gn.plan_chunks(m, n_mlp)
    slots = {p.locate(i) for i in range(m)}
    assert len(slots) == m
    assert all(0 <= c < p.n_ch and 0 <= o < n_mlp for c, o in slots)


def test_basis_encoding():
    assert list(gn.basis_encoding(0, 4)) == [0, 0, 0, 0]
    assert list(gn.basis_encoding(5, 3)) == [1, 0, 1]
    assert list(gn.basis_encoding(7, 3)) == [1, 1, 1]
    with pytest.raises(gn.GeneratorError):
        gn.basis_encoding(8, 3)
    table = gn.basis_table(6, 3)
    assert np.array_equal(table, np.array([gn.basis_encoding(i, 3) for i in range(6)]))


# ---------------------------------------------------------------------------
# mapping model


def test_layer_dims_and_counts():
    assert gn.layer_dims(7, 2048) == [8, 32, 64, 128, 128, 64, 32, 2048]
    assert gn.mapping_param_count(7, 2048) == 105152
    plan = gn.plan_chunks(2048 * 100, 2048)
    counts = gn.count_trainable(plan, kind="RY", depth=8)
    assert counts == {"theta_count": 56, "b_count": 105152, "total": 105208}
    assert gn.count_trainable(gn.plan_chunks(8, 1), kind="RY", depth=0)["theta_count"] == 0
    assert gn.count_trainable(plan, kind="RYRZ", depth=8)["theta_count"] == 112


def test_b_count_grows_with_chunk_size():
    counts = [gn.mapping_param_count(6, n) for n in (1, 2, 16, 256, 4096)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_count_from_objects_matches_dims():
    plan, circuit, model, _ = make(50, 8, hidden=(5, 6), depth=3)
    assert gn.count_trainable(plan, circuit, model) == gn.count_trainable(plan, kind="RY", depth=3,
                                                                           hidden_dims=(5, 6))


def silu_ref(x):
    return x / (1 + np.exp(-x))


def test_mapping_forward_matches_hand_oracle():
    rng = np.random.default_rng(0)
    model = gn.MappingModel.init(2, 3, (4, 2), seed=1)
    bits, prob = [1.0, 0.0], 1.7
    h = np.array([1.0, 0.0, 1.7])
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = np.array([sum(h[i] * w[i, o] for i in range(len(h))) + b[o] for o in range(w.shape[1])])
        h = z if li == len(model.weights) - 1 else silu_ref(z)
    out = gn.mapping_forward(model, bits, prob)
    assert out.shape == (3,)
    assert np.max(np.abs(out - h)) < 1e-14
    assert not np.array_equal(out, gn.mapping_forward(model, bits, prob + rng.uniform(0.1, 1)))


def test_zero_weights_give_zero_output():
    model = gn.MappingModel.init(3, 5, (4,), seed=0, final_scale=0.0)
    assert np.array_equal(gn.mapping_forward(model, [1, 0, 1], 3.2), np.zeros(5))
    model = gn.MappingModel(model.dims, np.zeros(model.n_params))
    assert np.array_equal(gn.mapping_forward(model, [0, 1, 1], -1.0), np.zeros(5))


def test_probability_weight_zero_removes_sensitivity():
    model = gn.MappingModel.init(2, 3, (4,), seed=2)
    model.weights[0][-1, :] = 0.0
    assert np.array_equal(gn.mapping_forward(model, [0, 1], 0.2), gn.mapping_forward(model, [0, 1], 9.0))


def test_mapping_dimension_errors():
    model = gn.MappingModel.init(3, 2, (4,), seed=0)
    with pytest.raises(gn.GeneratorError):
        gn.mapping_forward(model, [1, 0], 0.5)
    with pytest.raises(gn.GeneratorError):
        gn.mapping_forward(model, [1, 0, 1], np.nan)
    with pytest.raises(gn.GeneratorError):
        gn.MappingModel(model.dims, np.zeros(model.n_params + 1))


def test_weights_are_views_into_flat_params():
    model = gn.MappingModel.init(2, 3, (4,), seed=0)
    model.params[:] = 0.5
    assert np.all(model.weights[1] == 0.5) and np.all(model.biases[0] == 0.5)


# ---------------------------------------------------------------------------
# generation


def test_single_chunk_plan_uses_basis_zero():
    plan, circuit, model, theta = make(6, 6)
    a = gn.generate(theta, model, plan, circuit)
    p0 = sv.exact_probabilities(circuit, theta)[0]
    expected = gn.mapping_forward(model, [0.0], 2 * p0)
    assert np.array_equal(a.values, expected)


def test_ten_values_in_chunks_of_four():
    plan, circuit, model, theta = make(10, 4)
    assert (plan.n_ch, plan.n_qubits) == (3, 2)
    a = gn.generate(theta, model, plan, circuit)
    assert a.values.shape == (10,)
    assert list(np.bincount(a.chunk_index)) == [4, 4, 2]
    probs = sv.exact_probabilities(circuit, theta)
    for i in range(3):
        chunk = gn.mapping_forward(model, gn.basis_encoding(i, 2), 4 * probs[i])
        n = 4 if i < 2 else 2
        assert np.max(np.abs(a.values[4 * i:4 * i + n] - chunk[:n])) < 1e-14
    idx = np.flatnonzero((a.chunk_index == 2) & (a.offset == 1))[0]
    assert a.values[idx] == pytest.approx(gn.mapping_forward(model, [1, 0], 4 * probs[2])[1], abs=1e-15)


def test_only_first_chunk_count_bases_consumed():
    # 5 chunks on 3 qubits: bases 5..7 feed nothing
    plan, circuit, model, theta = make(5 * 3, 3)
    assert plan.n_qubits == 3 and plan.n_ch == 5
    gen = gn.Generator(plan, circuit, model)
    a = gen.forward(theta)
    assert gen.bits.shape == (5, 3)
    probs = sv.exact_probabilities(circuit, theta)
    manual = np.concatenate([gn.mapping_forward(model, gn.basis_encoding(i, 3), 8 * probs[i]) for i in range(5)])
    assert np.max(np.abs(a - manual)) < 1e-14


def test_rescaling_toggle():
    plan, circuit, model, theta = make(10, 4)
    on = gn.Generator(plan, circuit, model, rescale=True)
    off = gn.Generator(plan, circuit, model, rescale=False)
    assert on.prob_scale == 4.0 and off.prob_scale == 1.0
    assert not np.array_equal(on.forward(theta), off.forward(theta))


def test_inconsistent_pieces_rejected():
    plan, circuit, model, theta = make(10, 4)
    with pytest.raises(gn.GeneratorError):
        gn.Generator(plan, sv.build_ansatz("RY", 3, 2), model)
    with pytest.raises(gn.GeneratorError):
        gn.Generator(plan, circuit, gn.MappingModel.init(2, 5, (4,), seed=0))


# ---------------------------------------------------------------------------
# reverse pass


def loss_half_sq(plan, circuit, model_dims, theta, b):
    model = gn.MappingModel(model_dims, b)
    a = gn.Generator(plan, circuit, model).forward(theta)
    return 0.5 * float(a @ a)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("kind", ["RY", "RXRZ"])
def test_backward_matches_finite_differences_small(kind):
    plan, circuit, model, theta = make(5, 2, hidden=(3,), depth=2, kind=kind, seed=4)
    assert (plan.n_ch, plan.n_qubits) == (3, 2)
    b = model.params.copy()
    a = gn.Generator(plan, circuit, model).forward(theta)
    g_theta, g_b = gn.generator_backward(theta, model, plan, circuit, a)
    fd_theta = fd_grad(lambda t: loss_half_sq(plan, circuit, model.dims, t, b), theta)
    fd_b = fd_grad(lambda x: loss_half_sq(plan, circuit, model.dims, theta, x), b)
    assert np.max(np.abs(g_theta - fd_theta)) < 1e-5
    assert np.max(np.abs(g_b - fd_b)) < 1e-5


def test_backward_three_qubit_instance_relative():
    # N = 3 with five single-output chunks
    plan, circuit, model, theta = make(5, 1, hidden=(6, 5), depth=3, seed=9)
    assert plan.n_qubits == 3
    b = model.params.copy()
    assert theta.size + b.size <= 200
    a = gn.Generator(plan, circuit, model).forward(theta)
    g_theta, g_b = gn.generator_backward(theta, model, plan, circuit, a)
    g = np.concatenate([g_theta, g_b])
    fd = np.concatenate([fd_grad(lambda t: loss_half_sq(plan, circuit, model.dims, t, b), theta),
                         fd_grad(lambda x: loss_half_sq(plan, circuit, model.dims, theta, x), b)])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_backward_is_linear_in_upstream_gradient():
    plan, circuit, model, theta = make(10, 4, seed=2)
    v = np.random.default_rng(0).normal(size=10)
    g1 = gn.generator_backward(theta, model, plan, circuit, v)
    g2 = gn.generator_backward(theta, model, plan, circuit, 2 * v)
    assert np.array_equal(2 * g1[0], g2[0]) and np.array_equal(2 * g1[1], g2[1])
    z = gn.generator_backward(theta, model, plan, circuit, np.zeros(10))
    assert not z[0].any() and not z[1].any()


def test_truncated_outputs_get_no_gradient():
    plan, circuit, model, theta = make(10, 4, seed=3)
    g_theta, g_b = gn.generator_backward(theta, model, plan, circuit, np.ones(10))
    # extending the surplus of the last chunk must not change anything: rerun with
    # a plan whose m covers the full last chunk but zero upstream there
    plan12 = gn.plan_chunks(12, 4)
    dl = np.r_[np.ones(10), 0.0, 0.0]
    g12 = gn.generator_backward(theta, model, plan12, circuit, dl)
    assert np.allclose(g_theta, g12[0], atol=1e-15) and np.allclose(g_b, g12[1], atol=1e-15)


def test_b_moves_every_chunk_theta_only_through_probabilities():
    plan, circuit, model, theta = make(12, 4, seed=5)
    gen = gn.Generator(plan, circuit, model)
    a0 = gen.forward(theta)
    model.biases[-1][0] += 0.1
    a1 = gen.forward(theta)
    assert np.all((a1 - a0).reshape(3, 4)[:, 0] != 0)
    model.biases[-1][0] -= 0.1
    # with the probability weights zeroed, theta has no effect at all
    model.weights[0][-1, :] = 0.0
    assert np.array_equal(gen.forward(theta), gen.forward(theta + 0.3))


def test_backward_requires_forward_and_exact_mode():
    plan, circuit, model, theta = make(10, 4)
    gen = gn.Generator(plan, circuit, model)
    with pytest.raises(gn.GeneratorError):
        gen.backward(np.zeros(10))
    noisy = gn.Generator(plan, circuit, model, source=gn.ProbabilitySource("shots", n_shots=100, seed=0))
    noisy.forward(theta)
    with pytest.raises(sv.GradientModeError):
        noisy.backward(np.zeros(10))
    gen.forward(theta)
    with pytest.raises(gn.GeneratorError):
        gen.backward(np.zeros(9))


def test_shot_and_noisy_sources_are_seeded():
    plan, circuit, model, theta = make(10, 4)
    src = gn.ProbabilitySource("noisy", n_shots=500, noise=sv.NoiseModel(0.01, 0.01, 0.01), seed=3)
    a = gn.Generator(plan, circuit, model, source=src).forward(theta)
    b = gn.Generator(plan, circuit, model, source=src).forward(theta)
    assert np.array_equal(a, b)
