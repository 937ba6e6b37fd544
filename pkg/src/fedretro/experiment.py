"""Typed experiment configuration and the pipeline shared by the CLI and scripts."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (PartitionSpec, ReactionDataset, contaminate, generate_synthetic, load_reactions,
                   partition_clients, split_dataset)
from .federation import (ClientNode, FedConfig, _map, _save_round, derive_seed, run_central, run_federated,
                         shared_init)
from .fingerprint import FingerprintConfig
from .learner import EncodedSet, ModelConfig, ParamVector, TrainConfig, train_local
from .metrics import DEFAULT_KS, EvalResult

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_FORWARD = 4  # seed purpose tag for the round-trip oracle


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    n_per_family: tuple[int, ...] = (500, 500, 500, 500)
    families: int = 4
    max_scaffold_atoms: int = 8
    split: tuple[float, ...] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class PartitionSection:
    strategy: str = "by_class"
    groups: str = ""  # "0,1;2;3" puts classes 0 and 1 on client 0, and so on
    alpha: float = 1.0

    def spec(self) -> PartitionSpec:
        groups = None
        if self.groups.strip():
            groups = tuple(tuple(c.strip() for c in g.split(",") if c.strip()) for g in self.groups.split(";"))
        return PartitionSpec(self.strategy, groups, self.alpha)


@dataclass(frozen=True)
class FederationSection:
    K: int = 4
    R_T: int = 50
    R_L: int = 5
    R_F: int = 10
    mu: float | None = None
    tau: float = 1.5
    proxy_cap: int | None = None
    eval_beam_width: int = 5
    cache_similarity: bool = False
    track_proxy: bool = True


@dataclass(frozen=True)
class ModelSection:
    fp_dim: int = 256
    embed_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 160


@dataclass(frozen=True)
class ContaminationSection:
    fraction: float = 0.0


@dataclass(frozen=True)
class MetricsSection:
    ks: tuple[int, ...] = DEFAULT_KS
    beam_width: int = 10
    roundtrip: bool = False


@dataclass(frozen=True)
class RunSection:
    modes: tuple[str, ...] = ("local", "fedavg", "ckif")
    seed: int = 0


_SECTIONS = {
    "data": DataSection,
    "partition": PartitionSection,
    "federation": FederationSection,
    "fingerprint": FingerprintConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "contamination": ContaminationSection,
    "metrics": MetricsSection,
    "run": RunSection,
}


def _convert(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)][0]
        return None if text.lower() in ("", "none") else _convert(text, inner, key)
    if origin is tuple:
        return tuple(_convert(x, args[0], key) for x in text.replace(",", " ").split())
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return hint(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(hint, '__name__', hint)}") from exc


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    partition: PartitionSection = PartitionSection()
    federation: FederationSection = FederationSection()
    fingerprint: FingerprintConfig = FingerprintConfig()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    contamination: ContaminationSection = ContaminationSection()
    metrics: MetricsSection = MetricsSection()
    run: RunSection = RunSection()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ConfigError for anything that would fail later; runs before any work."""
        try:
            self.fed_config("local")
            self.model_config()
            self.partition.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d = self.data
        if d.source == "synthetic":
            if len(d.n_per_family) not in (1, d.families) or any(n < 0 for n in d.n_per_family):
                raise ConfigError("data.n_per_family needs one non-negative count or one per family")
            if not 1 <= d.max_scaffold_atoms <= 8:
                raise ConfigError("data.max_scaffold_atoms must lie in 1..8")
        if len(d.split) != 3 or abs(sum(d.split) - 1.0) > 1e-9 or min(d.split) < 0:
            raise ConfigError("data.split must be three non-negative fractions summing to 1")
        if not 0.0 <= self.contamination.fraction <= 1.0:
            raise ConfigError("contamination.fraction must lie in [0, 1]")
        m = self.metrics
        if not m.ks or min(m.ks) < 1 or max(m.ks) > m.beam_width:
            raise ConfigError("metrics.ks must be positive and no larger than metrics.beam_width")
        bad = [x for x in self.run.modes if x not in ("local", "central", "fedavg", "ckif")]
        if bad or not self.run.modes:
            raise ConfigError(f"run.modes must be a non-empty subset of local, central, fedavg, ckif; got {self.run.modes}")
        if self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.batch_size and train.lr must be positive")

    # ---- conversions -------------------------------------------------

    def fed_config(self, mode: str) -> FedConfig:
        f = self.federation
        return FedConfig(K=f.K, R_T=f.R_T, R_L=f.R_L, R_F=f.R_F, mu=f.mu, tau=f.tau, mode=mode,
                         proxy_cap=f.proxy_cap, eval_beam_width=f.eval_beam_width, seed=self.run.seed,
                         cache_similarity=f.cache_similarity, track_proxy=f.track_proxy)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(fp_dim=m.fp_dim, embed_dim=m.embed_dim, hidden_dim=m.hidden_dim, max_len=m.max_len,
                           fingerprint=self.fingerprint)

    def replace(self, **sections) -> ExperimentConfig:
        """Copy with some fields changed, e.g. ``replace(run={"seed": 3})``."""
        changes = {}
        for name, values in sections.items():
            changes[name] = dataclasses.replace(getattr(self, name), **values)
        return dataclasses.replace(self, **changes)

    # ---- serialization -----------------------------------------------

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        sections = {}
        for name, values in d.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            klass = _SECTIONS[name]
            known = {f.name for f in dataclasses.fields(klass) if f.init}
            unknown = set(values) - known
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
            kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
            try:
                sections[name] = klass(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**sections)

    def to_ini(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                v = tuple(v) if isinstance(v, list) else v
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        sections = {}
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            klass = _SECTIONS[name]
            hints = typing.get_type_hints(klass)
            known = {f.name for f in dataclasses.fields(klass) if f.init}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[key] = _convert(raw, hints[key], f"{name}.{key}")
            try:
                sections[name] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**sections)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def source_dataset(exp: ExperimentConfig) -> ReactionDataset:
    d = exp.data
    if d.source == "synthetic":
        counts = d.n_per_family if len(d.n_per_family) == d.families else d.n_per_family * d.families
        return generate_synthetic(counts, d.families, seed=exp.run.seed, max_scaffold_atoms=d.max_scaffold_atoms)
    return load_reactions(d.source)


def prepare_dataset(exp: ExperimentConfig, raw: ReactionDataset | None = None) -> tuple[ReactionDataset, ReactionDataset]:
    """(clean split dataset, possibly contaminated copy); test records are identical in both."""
    raw = source_dataset(exp) if raw is None else raw
    clean = split_dataset(raw, exp.data.split, seed=exp.run.seed)
    used = clean
    if exp.contamination.fraction > 0:
        used = contaminate(clean, exp.contamination.fraction, seed=derive_seed(exp.run.seed, 0, 0, 9))
    return clean, used


def build_clients(exp: ExperimentConfig, ds: ReactionDataset) -> list[ClientNode]:
    parts = partition_clients(ds, exp.partition.spec(), exp.federation.K, seed=exp.run.seed)
    model = exp.model_config()
    return [ClientNode(k, p, model, exp.train, exp.federation.proxy_cap, exp.run.seed) for k, p in enumerate(parts)]


def train_forward_model(exp: ExperimentConfig, clients: Sequence[ClientNode]) -> ParamVector:
    """Round-trip oracle on the pooled forward task (a simulator privilege, labelled as such)."""
    model = exp.model_config()
    pooled = EncodedSet.concat([c.disclose_forward_set() for c in clients], model.fp_dim)
    f = exp.federation
    return train_local(shared_init(model, derive_seed(exp.run.seed, 0, 0, _FORWARD)), pooled, f.R_T * f.R_L,
                       model, exp.train, seed=derive_seed(exp.run.seed, 1, 0, _FORWARD))


@dataclass
class ModeResult:
    mode: str
    models: list[ParamVector]
    rounds: list = field(default_factory=list)

    def evaluate(self, clients, exp: ExperimentConfig, threads: int = 1, forward: ParamVector | None = None,
                 forward_label: str | None = None, ks: Sequence[int] | None = None) -> list[EvalResult]:
        ks = tuple(ks or exp.metrics.ks)
        return _map(lambda i: clients[i].evaluate(self.models[i], ks, exp.metrics.beam_width, forward, forward_label),
                    range(len(clients)), threads)


def run_mode(exp: ExperimentConfig, clients: Sequence[ClientNode], mode: str, threads: int = 1,
             checkpoint_root=None) -> ModeResult:
    cfg = exp.fed_config(mode)
    ckpt = Path(checkpoint_root) / mode if checkpoint_root is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        (ckpt / "experiment.json").write_text(json.dumps(exp.to_dict(), sort_keys=True, indent=1))
    if mode == "central":
        g = run_central(clients, cfg)
        if ckpt is not None:
            _save_round(ckpt, cfg.R_T, [g] * len(clients), [], checkpoint_manifest(clients, mode))
        return ModeResult(mode, [g] * len(clients))
    models, rounds = run_federated(clients, cfg, threads=threads, checkpoint_dir=ckpt)
    return ModeResult(mode, models, rounds)


def checkpoint_manifest(clients: Sequence[ClientNode], mode: str) -> dict:
    return {
        "mode": mode,
        "clients": [{"id": c.id, "N": c.N, "data_sha256": c.data_digest()} for c in clients],
    }


def versions() -> dict:
    return {"fedretro": __version__, "numpy": np.__version__, "python": platform.python_version()}


def dataset_digest(ds: ReactionDataset) -> str:
    h = hashlib.sha256()
    for r, s in zip(ds.records, ds.splits):
        h.update(f"{s}\t{r.to_line()}\n".encode())
    return h.hexdigest()


def heterogeneity_fixture(seed: int = 0, contamination: float = 0.0) -> ExperimentConfig:
    """Four single-family clients, three with 2000 records and one with 200.

    The small client holds esterification, whose acid and alcohol halves
    also appear in the amide and ether clients' reactant sides.
    """
    return ExperimentConfig(
        data=DataSection(n_per_family=(200, 2000, 2000, 2000), families=4, max_scaffold_atoms=5),
        partition=PartitionSection("by_class_groups", "1;2;3;0"),
        federation=FederationSection(K=4, R_T=10, R_L=2, R_F=2, mu=0.25, tau=1.5, proxy_cap=50),
        model=ModelSection(hidden_dim=64),
        train=TrainConfig(lr=1e-2, batch_size=16),
        contamination=ContaminationSection(contamination),
        metrics=MetricsSection(beam_width=10),
        run=RunSection(modes=("local", "fedavg", "ckif"), seed=seed),
    )
