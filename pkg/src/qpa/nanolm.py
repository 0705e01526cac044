"""Character-level decoder-only language model used as the frozen base.

The final linear layer ("lmhead", ``W0`` of shape d x vocab) has no bias and
is routed through an installable adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import adapters as ad
from .tensorfile import save_tensors, load_tensors, CheckpointError

log = logging.getLogger(__name__)

DTYPE = torch.float64


class NumericalError(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"non-finite value in {stage}" + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------------------
# tokenizer: id 0 = UNK, id 1 = newline, ids 2.. = printable ASCII 0x20..0x7e

UNK_ID = 0
UNK_CHAR = "�"
_CHARS = ["\n"] + [chr(c) for c in range(0x20, 0x7F)]
_STOI = {ch: i + 1 for i, ch in enumerate(_CHARS)}
VOCAB_SIZE = len(_CHARS) + 1


def tokenize(text: str) -> list[int]:
    return [_STOI.get(ch, UNK_ID) for ch in text]


def detokenize(ids) -> str:
    return "".join(UNK_CHAR if i == UNK_ID else _CHARS[i - 1] for i in ids)


# ---------------------------------------------------------------------------
# corpus

DATA_DIR = Path(__file__).parent / "data"


@dataclass
class Corpus:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    path: str
    ratios: tuple[float, float, float]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "validation": self.validation, "val": self.validation,
                "test": self.test}[name]


def resolve_corpus_path(path) -> Path:
    """``bundled:<name>`` refers to a text shipped with the package."""
    path = str(path)
    if path.startswith("bundled:"):
        return DATA_DIR / f"{path.split(':', 1)[1]}.txt"
    return Path(path)


def load_corpus(path, ratios=(0.8, 0.1, 0.1)) -> Corpus:
    """Contiguous train/validation/test split of the whole file; disjoint by
    construction and independent of any seed."""
    p = resolve_corpus_path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {p}")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = np.array(tokenize(p.read_text(encoding="utf-8")), dtype=np.int64)
    n = ids.size
    a = int(round(n * ratios[0]))
    b = int(round(n * (ratios[0] + ratios[1])))
    return Corpus(ids[:a], ids[a:b], ids[b:], str(path), tuple(ratios))


# ---------------------------------------------------------------------------
# model


@dataclass
class NanoLMConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: NanoLMConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=DTYPE)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)
        mask = torch.tril(torch.ones(cfg.context, cfg.context, dtype=torch.bool))
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x):
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~self.mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: NanoLMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.fc = nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model, dtype=DTYPE)
        self.out = nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model, dtype=DTYPE)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


@dataclass
class AdapterSlot:
    spec: ad.AdapterSpec
    params: torch.Tensor


class NanoLM(nn.Module):
    def __init__(self, cfg: NanoLMConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.context, cfg.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.W0 = nn.Parameter(torch.empty(cfg.d_model, cfg.vocab_size, dtype=DTYPE))
        self.adapter: AdapterSlot | None = None
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:  # layer-norm gains
                    p.fill_(1.0)
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def install_adapter(self, spec: ad.AdapterSpec | None, params=None) -> None:
        if spec is None:
            self.adapter = None
            return
        if (spec.d, spec.k) != tuple(self.W0.shape):
            raise ad.AdapterError(f"adapter dims {(spec.d, spec.k)} do not match lmhead {tuple(self.W0.shape)}")
        self.adapter = AdapterSlot(spec, torch.as_tensor(params, dtype=DTYPE))

    def features(self, idx: torch.Tensor) -> torch.Tensor:
        """Hidden states entering the lmhead, shape (batch, seq, d)."""
        B, T = idx.shape
        if T > self.cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {self.cfg.context}")
        if T and int(idx.max()) >= self.cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        x = self.tok_emb(idx) + self.pos_emb(torch.arange(T))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def head(self, h: torch.Tensor, adapter: AdapterSlot | None = None) -> torch.Tensor:
        slot = adapter if adapter is not None else self.adapter
        if slot is None:
            return ad.linear(h, self.W0)
        out = ad.adapter_forward(h, self.W0, slot.spec, slot.params)
        if slot.spec.family is ad.Family.PREFIX:
            # prefix positions never enter the loss
            out = out[..., slot.spec.n_prefix:, :]
        return out

    def forward(self, idx: torch.Tensor, adapter: AdapterSlot | None = None) -> torch.Tensor:
        return self.head(self.features(idx), adapter)

    def base_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}


# ---------------------------------------------------------------------------
# loss and evaluation


def cross_entropy_and_grad(logits: torch.Tensor, targets: torch.Tensor):
    """Mean token cross-entropy and its gradient w.r.t. ``logits``."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    flat = logits.detach().reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    n = t.numel()
    logz = torch.logsumexp(flat, dim=-1)
    loss = (logz - flat.gather(1, t[:, None])[:, 0]).mean()
    grad = torch.exp(flat - logz[:, None])
    grad[torch.arange(n), t] -= 1.0
    return float(loss), (grad / n).reshape(logits.shape)


def eval_windows(tokens: np.ndarray, context: int) -> list[np.ndarray]:
    """Non-overlapping windows of up to ``context + 1`` tokens covering the split."""
    out = []
    for start in range(0, max(len(tokens) - 1, 0), context):
        w = tokens[start:start + context + 1]
        if len(w) >= 2:
            out.append(w)
    return out


def mean_loss(model: NanoLM, tokens: np.ndarray, batch_size: int = 32) -> float:
    windows = eval_windows(np.asarray(tokens), model.cfg.context)
    if not windows:
        raise ValueError("cannot evaluate an empty split")
    total, count = 0.0, 0
    with torch.no_grad():
        for length in sorted({len(w) for w in windows}):
            group = [w for w in windows if len(w) == length]
            for i in range(0, len(group), batch_size):
                batch = torch.as_tensor(np.stack(group[i:i + batch_size]))
                logits = model(batch[:, :-1])
                ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1),
                                     reduction="sum")
                total += float(ce)
                count += batch[:, 1:].numel()
    return total / count


def perplexity(model: NanoLM, tokens: np.ndarray) -> float:
    return math.exp(mean_loss(model, tokens))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    steps: int
    train_losses: list[float] = field(default_factory=list)
    val_loss: float = float("nan")
    converged: bool = False


def sample_batch(tokens: np.ndarray, context: int, batch_size: int, rng: np.random.Generator):
    starts = rng.integers(0, len(tokens) - context - 1, size=batch_size)
    w = np.stack([tokens[s:s + context + 1] for s in starts])
    w = torch.as_tensor(w)
    return w[:, :-1], w[:, 1:]


def pretrain(model: NanoLM, corpus: Corpus, steps: int, seed: int = 0, batch_size: int = 16,
             lr: float = 3e-3, weight_decay: float = 0.01, margin: float = 0.5,
             log_every: int = 100) -> PretrainResult:
    """Train the whole model briefly, then freeze it.

    ``converged`` records whether validation loss reached ``ln(vocab) - margin``.
    """
    rng = np.random.default_rng(seed)
    result = PretrainResult(steps)
    if steps > 0:
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: max(0.0, 1.0 - s / steps))
        for step in range(steps):
            x, y = sample_batch(corpus.train, model.cfg.context, batch_size, rng)
            logits = model(x)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1))
            if not torch.isfinite(loss):
                raise NumericalError("pretrain", f"loss={loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            result.train_losses.append(loss.item())
            if log_every and step % log_every == 0:
                log.info("pretrain step %d loss %.4f", step, loss.item())
    model.freeze()
    model.eval()
    result.val_loss = mean_loss(model, corpus.validation)
    result.converged = result.val_loss < math.log(model.cfg.vocab_size) - margin
    if not result.converged:
        log.warning("pretraining stopped at val loss %.4f, above ln(k) - %.2f", result.val_loss, margin)
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: NanoLM, path, extra_meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"base.{k}": v for k, v in model.base_tensors().items()}
    tensors.update(extra_tensors or {})
    meta = {"kind": "nanolm", "config": asdict(model.cfg), "frozen": model.frozen}
    meta.update(extra_meta or {})
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[NanoLM, dict, dict[str, np.ndarray]]:
    """Returns (model, meta, non-base tensors)."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "nanolm":
        raise CheckpointError(f"{path}: not a nanolm checkpoint")
    model = NanoLM(NanoLMConfig(**meta["config"]))
    state = {k[5:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("base.")}
    model.load_state_dict(state)
    if meta.get("frozen", True):
        model.freeze()
    model.eval()
    rest = {k: v for k, v in tensors.items() if not k.startswith("base.")}
    return model, meta, rest
