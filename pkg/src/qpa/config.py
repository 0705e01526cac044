"""Declarative experiment configuration (JSON) and sweep specifications.

Every section is a dataclass; parsing rejects unknown keys and values of the
wrong type, and ``to_dict`` followed by ``from_dict`` is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict, replace, is_dataclass
import json
import types
import typing
from pathlib import Path

from . import statevector as sv
from .nanolm import NanoLMConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PretrainConfig:
    corpus: str = "bundled:essays"
    ratios: tuple[float, float, float] = (0.9, 0.1, 0.0)
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.01
    resume_from: str | None = None


@dataclass
class CorpusConfig:
    path: str = "bundled:more_essays"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class SamplingConfig:
    """Finite-shot / noisy evaluation of the generated adapter. Training always
    uses exact probabilities."""

    n_shots: int | None = None
    depolarizing_1q: float = 0.0
    depolarizing_2q: float = 0.0
    readout_flip: float = 0.0

    @property
    def noise(self) -> sv.NoiseModel:
        return sv.NoiseModel(self.depolarizing_1q, self.depolarizing_2q, self.readout_flip)

    @property
    def active(self) -> bool:
        return self.n_shots is not None


@dataclass
class LayerDims:
    """Adapter target dims for count-only mode (no model is built)."""

    d: int
    k: int


@dataclass
class StudyConfig:
    """Shot, noise and gradient-variance study settings."""

    shot_multipliers: tuple[int, ...] = (10, 20, 40)
    shot_ladder: tuple[int, ...] = (100, 300, 1000, 3000, 10000)
    repeats: int = 20
    noise_levels: tuple[float, ...] = (0.0, 0.001, 0.003, 0.01, 0.03)
    noise_shots: int = 4000
    theta_checkpoint: str | None = None
    probe_qubits: tuple[int, ...] = (4, 5, 6, 7, 8, 9, 10)
    probe_depths: tuple[int, ...] = (2, 8, 32)
    probe_seeds: int = 8
    probe_batches: int = 2


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    base_checkpoint: str | None = None
    model: NanoLMConfig = field(default_factory=NanoLMConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    count_dims: LayerDims | None = None

    def train_config(self) -> TrainConfig:
        """The trainer config with the experiment seed applied."""
        return replace(self.train, seed=self.seed)

    def layer_dims(self) -> tuple[int, int]:
        if self.count_dims is not None:
            return self.count_dims.d, self.count_dims.k
        return self.model.d_model, self.model.vocab_size

    def to_dict(self) -> dict:
        out = _plain(asdict(self))
        # the experiment seed is authoritative; the trainer copy is derived
        del out["train"]["seed"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if isinstance(data.get("train"), dict) and "seed" in data["train"]:
            raise ConfigError("train.seed is not configurable; set the top-level seed")
        cfg = _build(cls, data, "")
        _check_consistency(cfg)
        return cfg


def _check_consistency(cfg: ExperimentConfig) -> None:
    t = cfg.train
    try:
        cfg.train.adapter_spec(*cfg.layer_dims())
        sv.AnsatzKind(t.kind)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    if t.n_mlp < 1 or t.depth < 1:
        raise ConfigError("train: n_mlp and depth must be >= 1")
    if any(h < 1 for h in t.hidden_dims):
        raise ConfigError("train: hidden_dims entries must be >= 1")
    if cfg.sampling.n_shots is not None and cfg.sampling.n_shots < 1:
        raise ConfigError("sampling.n_shots must be >= 1")
    try:
        cfg.sampling.noise
    except ValueError as exc:
        raise ConfigError(f"sampling: {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_type(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        for option in typing.get_args(hint):
            try:
                return _check_type(value, option, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {hint}")
    if hint is type(None):
        if value is not None:
            raise ConfigError(f"{where}: expected null")
        return None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_check_type(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_check_type(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(hint, value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        names.discard("seed")
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {prefix or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name in data:
        where = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _check_type(data[name], hints[name], where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("n_mlp", "r", "depth", "kind", "n_shots", "noise")


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep value list is empty")

    def cells(self) -> list[tuple[object, ExperimentConfig]]:
        """One config per value, in the order given."""
        out = []
        for value in self.values:
            out.append((value, apply_axis(self.base, self.axis, value)))
        return out

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": list(self.values), "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        unknown = sorted(set(data) - {"axis", "values", "base"})
        if unknown:
            raise ConfigError(f"unknown key(s) in sweep: {', '.join(unknown)}")
        if "axis" not in data or "values" not in data:
            raise ConfigError("sweep needs 'axis' and 'values'")
        if not isinstance(data["values"], list):
            raise ConfigError("sweep values must be a list")
        base = ExperimentConfig.from_dict(data.get("base", {}))
        return cls(data["axis"], list(data["values"]), base)


def apply_axis(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``base`` with one swept knob changed; the new config is
    re-validated so a bad value fails that cell only."""
    data = base.to_dict()
    if axis == "noise":
        p = float(value)
        data["sampling"].update(depolarizing_1q=p, depolarizing_2q=p, readout_flip=p)
        if data["sampling"]["n_shots"] is None:
            data["sampling"]["n_shots"] = data["study"]["noise_shots"]
    elif axis == "n_shots":
        data["sampling"]["n_shots"] = value
    else:
        data["train"][axis] = value
    return ExperimentConfig.from_dict(data)


def load_sweep(path) -> SweepSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: sweep spec must be an object")
    return SweepSpec.from_dict(data)
