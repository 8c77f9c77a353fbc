"""Flat key = value run configuration shared by every CLI subcommand.

Precedence: built-in defaults < config file < explicit CLI flags. Every run
directory receives a `config.resolved` snapshot of the effective values so
any artifact can be re-derived; re-running a subcommand from that file
reproduces the artifacts bit-identically (log timestamps aside).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from pointveil.losses import LossWeights
from pointveil.model import ModelConfig
from pointveil.synth import SynthSpec
from pointveil.train import TrainConfig


@dataclass
class RunConfig:
    # global
    seed: int = 0
    # synthetic dataset
    subjects: int = 8
    gestures: int = 6
    sequences_per_cell: int = 40
    frames: int = 32
    points: int = 32
    noise_sigma: float = 0.01
    # model
    d_h: int = 64
    d_m: int = 64
    d_k: int = 16
    d_v: int = 16
    heads: int = 4
    d_z: int = 64
    k: int = 2
    no_temporal_edges: bool = False
    no_temporal_knn: bool = False
    no_max_pool: bool = False
    decoder_node_feats: bool = False
    # training
    eta0: float = 0.001
    lam: float = 0.5
    decay_period: int = 20
    patience: int = 100
    batch_size: int = 32
    max_epochs: int = 500
    # loss weights
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 1.0
    delta: float = 2.0
    tau: float | None = None
    # splits
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(subjects=self.subjects, gestures=self.gestures,
                         sequences_per_cell=self.sequences_per_cell,
                         frames=self.frames, points_per_frame=self.points,
                         noise_sigma=self.noise_sigma, seed=self.seed)

    def model_config(self, *, ablations: bool = True) -> ModelConfig:
        return ModelConfig(
            d_h=self.d_h, d_m=self.d_m, d_k=self.d_k, d_v=self.d_v,
            heads=self.heads, d_z=self.d_z, k=self.k, seed=self.seed,
            no_temporal_edges=self.no_temporal_edges if ablations else False,
            no_temporal_knn=self.no_temporal_knn if ablations else False,
            no_max_pool=self.no_max_pool if ablations else False,
            decoder_node_feats=self.decoder_node_feats if ablations else False)

    def train_config(self) -> TrainConfig:
        return TrainConfig(eta0=self.eta0, lam=self.lam,
                           decay_period=self.decay_period, patience=self.patience,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           delta=self.delta, tau=self.tau)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_BOOL_FIELDS = {f.name for f in fields(RunConfig) if isinstance(f.default, bool)}
_INT_FIELDS = {f.name for f in fields(RunConfig)
               if isinstance(f.default, int) and not isinstance(f.default, bool)}
_OPT_FLOAT_FIELDS = {"tau"}


def _parse_value(key: str, raw: str):
    text = raw.strip()
    if key in _BOOL_FIELDS:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: cannot parse boolean from {text!r}")
    if key in _INT_FIELDS:
        return int(text)
    if key in _OPT_FLOAT_FIELDS and text.lower() in ("none", ""):
        return None
    return float(text)


def parse_config_file(path: str) -> dict:
    """Read `key = value` lines; `#` starts a comment; unknown keys that are
    not RunConfig fields are returned verbatim under the "extra" mapping."""
    values: dict = {}
    extra: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key in _FIELDS:
                values[key] = _parse_value(key, raw)
            else:
                extra[key] = raw
    values["extra"] = extra
    return values


def build_run_config(file_values: dict | None, cli_values: dict) -> RunConfig:
    """Merge defaults, config file, and CLI flags (None means unset)."""
    merged = {}
    if file_values:
        merged.update({k: v for k, v in file_values.items() if k in _FIELDS})
    merged.update({k: v for k, v in cli_values.items()
                   if k in _FIELDS and v is not None})
    return RunConfig(**merged)


def write_resolved(path: str, cfg: RunConfig, extra: dict) -> None:
    """Persist the effective configuration, including subcommand context."""
    lines = ["# resolved run configuration; rerun with --config <this file>"]
    for key in sorted(extra):
        lines.append(f"{key} = {extra[key]}")
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
