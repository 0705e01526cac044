"""Direct PEFT training and generated (QPA) training of the lmhead adapter.

Both modes share the same loss path: frozen trunk -> adapted lmhead ->
cross-entropy -> dL/da. Baseline mode steps ``a`` directly; QPA mode pulls
dL/da back through the generator into the circuit angles and mapping MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import logging
import math
import time

import numpy as np
import torch

from . import adapters as ad
from . import generator as gn
from . import statevector as sv
from .nanolm import (NanoLM, AdapterSlot, Corpus, NumericalError, cross_entropy_and_grad,
                     eval_windows, mean_loss, save_checkpoint, load_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "qpa"  # "baseline_peft" | "qpa"
    family: str = "lora"
    r: int = 4
    alpha: float | None = None
    n_prefix: int = 16
    bottleneck: int = 8
    magnitude_mode: str = "residual"
    # QPA knobs
    n_mlp: int = 16
    kind: str = "RY"
    depth: int = 8
    hidden_dims: tuple[int, ...] = gn.DEFAULT_HIDDEN_DIMS
    rescale_probs: bool = True
    final_init_scale: float = 0.1
    # optimizer
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int | None = None  # None: 100 for DoRA, 0 otherwise
    batch_size: int = 1
    epochs: int = 3
    clip_norm: float | None = None
    eval_interval: int = 0  # 0: evaluate at epoch ends only
    max_steps_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("baseline_peft", "qpa"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden_dims = tuple(self.hidden_dims)
        self.betas = tuple(self.betas)

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return 100 if self.family == "dora" else 0

    def adapter_spec(self, d: int, k: int) -> ad.AdapterSpec:
        return ad.AdapterSpec(self.family, d, k, r=self.r, alpha=self.alpha, n_prefix=self.n_prefix,
                              bottleneck=self.bottleneck, magnitude_mode=self.magnitude_mode)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    train_loss: float
    val_loss: float | None
    test_ppl: float | None
    n_trainable: int
    n_qubits: int | None
    step_time: float
    grad_norm: float
    grad_var: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer: torch AdamW stepping numpy arrays in place


def linear_schedule(warmup: int, total: int):
    def factor(step: int) -> float:
        if step < warmup:
            return step / max(1, warmup)
        return max(0.0, (total - step) / max(1, total - warmup))
    return factor


class AdamW:
    """AdamW with linear warmup/decay over arrays it updates in place."""

    def __init__(self, arrays: list[np.ndarray], cfg: TrainConfig, total_steps: int):
        self.tensors = [torch.from_numpy(a) for a in arrays]
        self.opt = torch.optim.AdamW(self.tensors, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                                     weight_decay=cfg.weight_decay, foreach=False)
        self.sched = torch.optim.lr_scheduler.LambdaLR(
            self.opt, linear_schedule(cfg.resolved_warmup, max(1, total_steps)))
        self.clip_norm = cfg.clip_norm

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    def step(self, grads: list[np.ndarray]) -> float:
        for t, g in zip(self.tensors, grads):
            t.grad = torch.from_numpy(np.ascontiguousarray(g, dtype=float))
        norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
        if self.clip_norm is not None and norm > self.clip_norm:
            for t in self.tensors:
                t.grad.mul_(self.clip_norm / norm)
        self.opt.step()
        self.sched.step()
        return norm


# ---------------------------------------------------------------------------
# one step


def _finite(stage: str, *arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(stage)


def adapter_loss_and_grad(model: NanoLM, spec: ad.AdapterSpec, a: np.ndarray, x, y,
                          features=None) -> tuple[float, np.ndarray]:
    """Loss of the adapted model on one batch and dL/da."""
    if features is None:
        with torch.no_grad():
            features = model.features(x)
    a_t = torch.tensor(a, dtype=torch.float64, requires_grad=True)
    logits = model.head(features, AdapterSlot(spec, a_t))
    loss, dlogits = cross_entropy_and_grad(logits, y)
    logits.backward(dlogits)
    return loss, a_t.grad.numpy()


class BaselineRun:
    """Trains the adapter vector ``a`` directly."""

    mode = "baseline_peft"

    def __init__(self, model: NanoLM, cfg: TrainConfig, a: np.ndarray | None = None):
        d, k = model.W0.shape
        self.model, self.cfg = model, cfg
        self.spec = cfg.adapter_spec(d, k)
        self.a = (ad.init_params(self.spec, model.W0.detach(), seed=cfg.seed) if a is None
                  else np.array(a, dtype=float))
        self.opt: AdamW | None = None

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.a]

    @property
    def group_names(self) -> list[str]:
        return ["a"]

    @property
    def n_trainable(self) -> int:
        return self.a.size

    @property
    def n_qubits(self):
        return None

    def adapter_params(self) -> np.ndarray:
        return self.a

    def loss_and_grads(self, x, y):
        loss, g = adapter_loss_and_grad(self.model, self.spec, self.a, x, y)
        _finite("adapter backward", [loss], g)
        return loss, [g]

    def checkpoint_tensors(self) -> dict:
        return {"adapter.a": self.a}


class QPARun:
    """Trains circuit angles ``theta`` and mapping weights ``b`` that generate ``a``."""

    mode = "qpa"

    def __init__(self, model: NanoLM, cfg: TrainConfig, theta=None, b=None):
        d, k = model.W0.shape
        self.model, self.cfg = model, cfg
        self.spec = cfg.adapter_spec(d, k)
        self.plan = gn.plan_chunks(self.spec.n_params, cfg.n_mlp)
        self.circuit = sv.build_ansatz(cfg.kind, self.plan.n_qubits, cfg.depth)
        self.theta = sv.init_theta(self.circuit, cfg.seed) if theta is None else np.array(theta, dtype=float)
        mapping = gn.MappingModel.init(self.plan.n_qubits, cfg.n_mlp, cfg.hidden_dims,
                                       seed=cfg.seed + 1, final_scale=cfg.final_init_scale)
        if b is not None:
            mapping = gn.MappingModel(mapping.dims, np.array(b, dtype=float))
        self.mapping = mapping
        self.generator = gn.Generator(self.plan, self.circuit, mapping, rescale=cfg.rescale_probs)
        self.opt: AdamW | None = None

    @property
    def b(self) -> np.ndarray:
        return self.mapping.params

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.theta, self.mapping.params]

    @property
    def group_names(self) -> list[str]:
        return ["theta", "b"]

    @property
    def n_trainable(self) -> int:
        return self.theta.size + self.mapping.n_params

    @property
    def n_qubits(self) -> int:
        return self.plan.n_qubits

    def counts(self) -> dict[str, int]:
        return gn.count_trainable(self.plan, self.circuit, self.mapping)

    def adapter_params(self) -> np.ndarray:
        return self.generator.forward(self.theta)

    def loss_and_grads(self, x, y):
        a = self.generator.forward(self.theta)
        _finite("generator forward", a)
        loss, dL_da = adapter_loss_and_grad(self.model, self.spec, a, x, y)
        _finite("adapter backward", [loss], dL_da)
        g_theta, g_b = self.generator.backward(dL_da)
        _finite("generator backward", g_theta, g_b)
        return loss, [g_theta, g_b]

    def checkpoint_tensors(self) -> dict:
        return {"generator.theta": self.theta, "generator.b": self.mapping.params}


def make_run(model: NanoLM, cfg: TrainConfig):
    return QPARun(model, cfg) if cfg.mode == "qpa" else BaselineRun(model, cfg)


def train_step(run, x, y) -> tuple[float, float]:
    """One AdamW descent step on the run's trainable arrays. Returns (loss, grad norm)."""
    if run.opt is None:
        raise RuntimeError("attach an optimizer before stepping")
    loss, grads = run.loss_and_grads(x, y)
    norm = run.opt.step(grads)
    run.last_grads = grads
    return loss, norm


def train_step_baseline(run: BaselineRun, x, y) -> float:
    if run.mode != "baseline_peft":
        raise ValueError("train_step_baseline needs a baseline run")
    return train_step(run, x, y)[0]


def train_step_qpa(run: QPARun, x, y) -> float:
    if run.mode != "qpa":
        raise ValueError("train_step_qpa needs a QPA run")
    return train_step(run, x, y)[0]


# ---------------------------------------------------------------------------
# full training loop


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    final_val_loss: float
    best_val_loss: float
    best_step: int
    test_ppl: float
    n_trainable: int
    n_qubits: int | None
    mean_step_time: float
    best_arrays: list[np.ndarray]


def evaluate(model: NanoLM, run, tokens) -> float:
    model.install_adapter(run.spec, run.adapter_params())
    try:
        return mean_loss(model, tokens)
    finally:
        model.install_adapter(None)


def train_batches(tokens: np.ndarray, context: int, batch_size: int, rng) -> list[tuple]:
    windows = [w for w in eval_windows(tokens, context) if len(w) == context + 1]
    order = rng.permutation(len(windows))
    batches = []
    for i in range(0, len(order), batch_size):
        w = torch.as_tensor(np.stack([windows[j] for j in order[i:i + batch_size]]))
        batches.append((w[:, :-1], w[:, 1:]))
    return batches


def run_training(cfg: TrainConfig, model: NanoLM, corpus: Corpus, run=None, checkpoint_path=None,
                 on_record=None) -> TrainResult:
    if not model.frozen:
        raise RuntimeError("run_training expects a frozen pretrained base model")
    run = run or make_run(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    n_windows = len([w for w in eval_windows(corpus.train, model.cfg.context) if len(w) == model.cfg.context + 1])
    if n_windows == 0:
        raise ValueError("training split is shorter than one context window")
    steps_per_epoch = math.ceil(n_windows / cfg.batch_size)
    if cfg.max_steps_per_epoch:
        steps_per_epoch = min(steps_per_epoch, cfg.max_steps_per_epoch)
    run.opt = AdamW(run.arrays, cfg, cfg.epochs * steps_per_epoch)

    records: list[MetricsRecord] = []
    best_val, best_step = evaluate(model, run, corpus.validation), 0
    best_arrays = [arr.copy() for arr in run.arrays]
    val = best_val
    step, times = 0, []
    for epoch in range(cfg.epochs):
        batches = train_batches(corpus.train, model.cfg.context, cfg.batch_size, rng)[:steps_per_epoch]
        for bi, (x, y) in enumerate(batches):
            t0 = time.perf_counter()
            loss, norm = train_step(run, x, y)
            dt = time.perf_counter() - t0
            times.append(dt)
            step += 1
            at_eval = (cfg.eval_interval and step % cfg.eval_interval == 0) or bi == len(batches) - 1
            val_now = None
            if at_eval:
                val = val_now = evaluate(model, run, corpus.validation)
                if val < best_val:
                    best_val, best_step = val, step
                    best_arrays = [arr.copy() for arr in run.arrays]
            rec = MetricsRecord(
                step=step, epoch=epoch, train_loss=loss, val_loss=val_now, test_ppl=None,
                n_trainable=run.n_trainable, n_qubits=run.n_qubits, step_time=dt, grad_norm=norm,
                grad_var={n: float(np.var(g)) for n, g in zip(run.group_names, run.last_grads)},
            )
            records.append(rec)
            if on_record:
                on_record(rec)
    test_ppl = math.exp(evaluate(model, run, corpus.test))
    if records:
        records[-1].test_ppl = test_ppl
    if checkpoint_path is not None:
        save_run_checkpoint(checkpoint_path, model, run, best_arrays)
    return TrainResult(records, val, best_val, best_step, test_ppl, run.n_trainable, run.n_qubits,
                       float(np.mean(times)) if times else 0.0, best_arrays)


# ---------------------------------------------------------------------------
# checkpoints with a generator or adapter section


def save_run_checkpoint(path, model: NanoLM, run, arrays=None) -> None:
    arrays = arrays if arrays is not None else run.arrays
    meta = {"run": {"mode": run.mode, "train_config": asdict(run.cfg)}}
    if run.mode == "qpa":
        meta["run"]["plan"] = asdict(run.plan)
        tensors = {"generator.theta": arrays[0], "generator.b": arrays[1]}
    else:
        tensors = {"adapter.a": arrays[0]}
    save_checkpoint(model, path, extra_meta=meta, extra_tensors=tensors)


def load_run_checkpoint(path):
    model, meta, tensors = load_checkpoint(path)
    if "run" not in meta:
        raise ValueError(f"{path} holds a base model only")
    cfg = TrainConfig(**meta["run"]["train_config"])
    if cfg.mode == "qpa":
        run = QPARun(model, cfg, theta=tensors["generator.theta"], b=tensors["generator.b"])
    else:
        run = BaselineRun(model, cfg, a=tensors["adapter.a"])
    return model, run


# ---------------------------------------------------------------------------
# diagnostics


def n_mlp_for_qubits(m: int, n_qubits: int) -> int:
    """Chunk size whose plan lands exactly on ``n_qubits``."""
    n_mlp = -(-m // (1 << n_qubits))
    plan = gn.plan_chunks(m, n_mlp)
    if plan.n_qubits != n_qubits:
        raise ValueError(f"no chunk size gives {n_qubits} qubits for m={m}")
    return n_mlp


def theta_gradient_samples(model: NanoLM, cfg: TrainConfig, corpus: Corpus, seeds, n_batches: int,
                           loss_grad_fn=None) -> np.ndarray:
    """Stack of dL/dtheta vectors for every (seed, batch) pair at initialization.

    ``loss_grad_fn(spec, a, x, y) -> (loss, dL_da)`` replaces the language-model
    loss when given.
    """
    samples = []
    for seed in seeds:
        run = QPARun(model, TrainConfig(**{**asdict(cfg), "seed": int(seed)}))
        rng = np.random.default_rng(int(seed))
        batches = train_batches(corpus.train, model.cfg.context, cfg.batch_size, rng)[:n_batches]
        a = run.generator.forward(run.theta)
        for x, y in batches:
            if loss_grad_fn is None:
                _, dL_da = adapter_loss_and_grad(model, run.spec, a, x, y)
            else:
                _, dL_da = loss_grad_fn(run.spec, a, x, y)
            g_theta, _ = run.generator.backward(dL_da)
            samples.append(g_theta)
    return np.array(samples)


def gradient_variance_probe(model: NanoLM, corpus: Corpus, cfg: TrainConfig, qubits, depths, seeds,
                            n_batches: int = 4, loss_grad_fn=None) -> list[dict]:
    """Variance of dL/dtheta over random inits and batches for each (N, L) cell."""
    spec = cfg.adapter_spec(*model.W0.shape)
    rows = []
    for n in qubits:
        n_mlp = n_mlp_for_qubits(spec.n_params, n)
        for depth in depths:
            cell = TrainConfig(**{**asdict(cfg), "mode": "qpa", "n_mlp": n_mlp, "depth": depth})
            g = theta_gradient_samples(model, cell, corpus, seeds, n_batches, loss_grad_fn)
            rows.append({
                "n_qubits": n, "depth": depth, "n_mlp": n_mlp, "n_theta": g.shape[1],
                "n_samples": g.shape[0], "variance": float(np.var(g)) if g.size else 0.0,
                "mean_abs": float(np.mean(np.abs(g))) if g.size else 0.0,
            })
    return rows


def measure_step_times(model: NanoLM, corpus: Corpus, baseline_cfg: TrainConfig, qpa_cfg: TrainConfig,
                       n_steps: int = 50, warmup: int = 5) -> dict:
    """Mean wall-clock per optimizer step for both modes on identical batches."""
    out = {}
    for cfg in (baseline_cfg, qpa_cfg):
        run = make_run(model, cfg)
        run.opt = AdamW(run.arrays, cfg, n_steps + warmup)
        batches = train_batches(corpus.train, model.cfg.context, cfg.batch_size, np.random.default_rng(0))
        times = []
        for i in range(n_steps + warmup):
            x, y = batches[i % len(batches)]
            t0 = time.perf_counter()
            train_step(run, x, y)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
        out[cfg.mode] = float(np.median(times))
    out["ratio"] = out["qpa"] / out["baseline_peft"]
    return out
