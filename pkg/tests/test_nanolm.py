import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from qpa import adapters as ad
from qpa import nanolm as nl
from qpa.tensorfile import CheckpointError

from conftest import TINY

K = nl.VOCAB_SIZE


# ---------------------------------------------------------------------------
# tokenizer


def test_vocabulary_layout():
    assert K == 97
    assert nl.tokenize("\n") == [1]
    assert nl.tokenize(" ") == [2]
    assert nl.tokenize("~") == [96]


def test_tokenize_examples():
    assert nl.tokenize("") == [] and nl.detokenize([]) == ""
    ids = nl.tokenize("ab")
    assert len(ids) == 2 and ids[0] != ids[1]
    assert nl.detokenize(ids) == "ab"
    ids = nl.tokenize("café!")
    assert ids[3] == nl.UNK_ID
    assert nl.detokenize(ids) == "caf�!"


@given(st.text(alphabet=st.sampled_from([chr(c) for c in range(0x20, 0x7F)] + ["\n"])))
def test_round_trip_in_vocabulary(text):
    assert nl.detokenize(nl.tokenize(text)) == text


# ---------------------------------------------------------------------------
# corpus


def test_bundled_corpora_split_disjoint_and_cover(corpus):
    full = np.array(nl.tokenize(nl.resolve_corpus_path("bundled:more_essays").read_text()))
    assert np.array_equal(np.concatenate([corpus.train, corpus.validation, corpus.test]), full)
    n = full.size
    assert abs(corpus.train.size - 0.8 * n) <= 1 and abs(corpus.validation.size - 0.1 * n) <= 1
    assert not (full == nl.UNK_ID).any()
    assert nl.load_corpus("bundled:essays").train.size > corpus.train.size


def test_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        nl.load_corpus(tmp_path / "missing.txt")
    with pytest.raises(ValueError):
        nl.load_corpus("bundled:essays", ratios=(0.5, 0.2, 0.2))


# ---------------------------------------------------------------------------
# loss


def test_uniform_logits_give_log_k():
    loss, _ = nl.cross_entropy_and_grad(torch.zeros(2, 3, 7, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.int64))
    assert abs(loss - math.log(7)) < 1e-14


def test_confident_correct_logits_give_small_loss():
    logits = torch.zeros(1, 4, 5, dtype=torch.float64)
    targets = torch.tensor([[0, 3, 1, 4]])
    logits[0, torch.arange(4), targets[0]] = 30.0
    loss, _ = nl.cross_entropy_and_grad(logits, targets)
    assert loss < 1e-6


def test_cross_entropy_gradient_finite_differences(rng):
    logits = rng.normal(size=(2, 3))
    targets = torch.tensor([2, 0])
    _, grad = nl.cross_entropy_and_grad(torch.as_tensor(logits), targets)
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        e = np.zeros_like(logits)
        e[idx] = 1e-6
        lp, _ = nl.cross_entropy_and_grad(torch.as_tensor(logits + e), targets)
        lm, _ = nl.cross_entropy_and_grad(torch.as_tensor(logits - e), targets)
        fd[idx] = (lp - lm) / 2e-6
    assert np.max(np.abs(grad.numpy() - fd)) < 1e-6
    # gradient rows sum to zero (softmax minus one-hot)
    assert np.max(np.abs(grad.numpy().sum(axis=-1))) < 1e-15


def test_cross_entropy_shape_error():
    with pytest.raises(ValueError):
        nl.cross_entropy_and_grad(torch.zeros(2, 3, 4), torch.zeros(3, dtype=torch.int64))


# ---------------------------------------------------------------------------
# forward


def np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def np_forward(sd, idx, n_heads):
    """Dense-algebra re-implementation over the state dict."""
    T = len(idx)
    x = sd["tok_emb.weight"][idx] + sd["pos_emb.weight"][:T]
    i = 0
    while f"blocks.{i}.ln1.weight" in sd:
        p = f"blocks.{i}."
        h = np_layernorm(x, sd[p + "ln1.weight"], sd[p + "ln1.bias"])
        qkv = h @ sd[p + "attn.qkv.weight"].T + sd[p + "attn.qkv.bias"]
        C = x.shape[1]
        q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
        hd = C // n_heads
        heads = []
        for hh in range(n_heads):
            sl = slice(hh * hd, (hh + 1) * hd)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
            s = np.where(np.tril(np.ones((T, T), bool)), s, -np.inf)
            w = np.exp(s - s.max(-1, keepdims=True))
            w /= w.sum(-1, keepdims=True)
            heads.append(w @ v[:, sl])
        x = x + np.concatenate(heads, axis=1) @ sd[p + "attn.proj.weight"].T + sd[p + "attn.proj.bias"]
        h = np_layernorm(x, sd[p + "ln2.weight"], sd[p + "ln2.bias"])
        h = np_gelu(h @ sd[p + "fc.weight"].T + sd[p + "fc.bias"])
        x = x + h @ sd[p + "out.weight"].T + sd[p + "out.bias"]
        i += 1
    x = np_layernorm(x, sd["ln_f.weight"], sd["ln_f.bias"])
    return x @ sd["W0"]


@pytest.mark.parametrize("n_heads", [1, 2])
def test_forward_matches_dense_oracle(n_heads):
    cfg = nl.NanoLMConfig(d_model=8, n_layers=1, n_heads=n_heads, context=6)
    model = nl.NanoLM(cfg, seed=3)
    # perturb biases and gains away from their trivial init so they are exercised
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        for name, p in model.named_parameters():
            if p.dim() == 1:
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.mul_(20.0)
    idx = np.array([5, 17, 2, 96, 40])
    ref = np_forward(model.base_tensors(), idx, n_heads)
    logits = model(torch.as_tensor(idx[None])).detach().numpy()[0]
    assert np.max(np.abs(logits - ref)) < 1e-10


def test_shapes_and_context_overflow():
    model = nl.NanoLM(TINY, seed=0)
    assert tuple(model.W0.shape) == (16, K)
    assert model(torch.tensor([[3]])).shape == (1, 1, K)
    assert model(torch.zeros(2, 32, dtype=torch.int64)).shape == (2, 32, K)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 33, dtype=torch.int64))
    with pytest.raises(ValueError):
        model(torch.tensor([[K]]))
    with pytest.raises(ValueError):
        nl.NanoLMConfig(d_model=10, n_heads=3)


def test_forward_is_causal():
    model = nl.NanoLM(TINY, seed=0)
    a = model(torch.tensor([[4, 5, 6, 7]])).detach()
    b = model(torch.tensor([[4, 5, 6, 50]])).detach()
    assert torch.equal(a[:, :3], b[:, :3]) and not torch.equal(a[:, 3], b[:, 3])


@pytest.mark.parametrize("family", ["lora", "dora", "prefix", "ffa"])
def test_zero_adapter_reproduces_base_logits(tiny_base, family):
    spec = ad.AdapterSpec(family, 16, K, r=2, n_prefix=3, bottleneck=4)
    idx = torch.as_tensor(np.random.default_rng(0).integers(0, K, size=(2, 20)))
    base = tiny_base(idx)
    adapted = tiny_base(idx, nl.AdapterSlot(spec, torch.as_tensor(ad.identity_params(spec))))
    assert torch.equal(base, adapted)


def test_install_adapter_checks_dims(tiny_base):
    with pytest.raises(ad.AdapterError):
        tiny_base.install_adapter(ad.AdapterSpec("lora", 8, K, r=1))


# ---------------------------------------------------------------------------
# perplexity


class ConstantLM(nl.NanoLM):
    """All-equal or fixed logits regardless of input."""

    def __init__(self, logits):
        super().__init__(nl.NanoLMConfig(d_model=4, n_layers=0, n_heads=1, context=8))
        self.fixed = torch.as_tensor(logits, dtype=torch.float64)

    def forward(self, idx, adapter=None):
        return self.fixed.expand(*idx.shape, K).clone()


def test_uniform_predictor_perplexity_is_k():
    tokens = np.random.default_rng(0).integers(0, K, size=200)
    assert abs(nl.perplexity(ConstantLM(np.zeros(K)), tokens) - K) < 1e-9


def test_memorized_single_character_corpus():
    logits = np.full(K, -40.0)
    logits[7] = 40.0
    assert nl.perplexity(ConstantLM(logits), np.full(100, 7)) < 1 + 1e-12


def test_perplexity_equals_exp_of_independent_mean(tiny_base, corpus):
    tokens = corpus.validation
    total, count = 0.0, 0
    with torch.no_grad():
        for w in nl.eval_windows(tokens, TINY.context):
            logits = tiny_base(torch.as_tensor(w[None, :-1]))[0]
            logp = torch.log_softmax(logits, dim=-1)
            for t, target in enumerate(w[1:]):
                total -= float(logp[t, target])
                count += 1
    assert count == len(tokens) - 1
    assert abs(nl.perplexity(tiny_base, tokens) - math.exp(total / count)) < 1e-9


def test_eval_windows_cover_every_target_once():
    tokens = np.arange(100)
    windows = nl.eval_windows(tokens, 32)
    targets = np.concatenate([w[1:] for w in windows])
    assert np.array_equal(targets, np.arange(1, 100))
    with pytest.raises(ValueError):
        nl.mean_loss(nl.NanoLM(TINY), np.array([3]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_base_perplexity_near_vocab_size(seed, corpus):
    model = nl.NanoLM(nl.NanoLMConfig(), seed=seed)
    result = nl.pretrain(model, corpus, steps=0, seed=seed)
    assert abs(math.exp(result.val_loss) - K) / K < 0.15
    assert model.frozen and not result.converged


# ---------------------------------------------------------------------------
# pretraining and checkpoints


def test_pretrain_is_deterministic_and_freezes(corpus):
    runs = []
    for _ in range(2):
        model = nl.NanoLM(TINY, seed=1)
        res = nl.pretrain(model, corpus, steps=5, seed=4, batch_size=4)
        runs.append((res.train_losses, model.base_tensors()))
        assert model.frozen
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_pretraining_lowers_validation_loss(tiny_base, corpus):
    fresh = nl.NanoLM(TINY, seed=0)
    assert nl.mean_loss(tiny_base, corpus.validation) < nl.mean_loss(fresh, corpus.validation) - 0.3


def test_checkpoint_round_trip_bitwise(tmp_path, tiny_base):
    path = tmp_path / "m.ckpt"
    extra = {"gen.theta": np.arange(3.0)}
    nl.save_checkpoint(tiny_base, path, {"note": "x"}, extra)
    model, meta, rest = nl.load_checkpoint(path)
    assert meta["note"] == "x" and model.frozen
    assert np.array_equal(rest["gen.theta"], extra["gen.theta"])
    idx = torch.as_tensor(np.random.default_rng(2).integers(0, K, size=(3, 32)))
    assert torch.equal(model(idx), tiny_base(idx))
    assert path.read_bytes()[:8] == b"QPACKPT\x00"


def test_corrupt_checkpoint_rejected(tmp_path, tiny_base):
    path = tmp_path / "m.ckpt"
    nl.save_checkpoint(tiny_base, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        nl.load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        nl.load_checkpoint(path)


def test_adapter_gradient_leaves_base_untouched(tiny_base, corpus):
    before = tiny_base.base_tensors()
    spec = ad.AdapterSpec("lora", 16, K, r=2)
    a = torch.zeros(spec.n_params, dtype=torch.float64, requires_grad=True)
    idx = torch.as_tensor(corpus.train[:33][None])
    logits = tiny_base(idx[:, :-1], nl.AdapterSlot(spec, a))
    torch.nn.functional.cross_entropy(logits[0], idx[0, 1:]).backward()
    assert a.grad is not None
    assert all(p.grad is None for p in tiny_base.parameters())
    after = tiny_base.base_tensors()
    assert all(np.array_equal(before[k], after[k]) for k in before)
