"""Run configuration: a flat ``section.key = value`` text file.

Example::

    # run.cfg
    run.name = table1-e
    data.train = data/train.json
    data.test = data/test.json
    decoder.variant = e
    train.steps = 3000
    train.seed = 1

Sections: ``run``, ``data``, ``model``, ``decoder``, ``train`` and ``loss``.
Blank lines and ``#`` comments are ignored; unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attention import AttentionConfig, ConfigError
from .decoder import DecoderConfig
from .loss import LossWeights
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunSection:
    name: str = "run"
    out_dir: str = "runs"


@dataclass(frozen=True)
class DataSection:
    train: str = "data/train.json"
    test: str = ""


@dataclass(frozen=True)
class ModelSection:
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_encoder_layers: int = 2
    grid: int = 8


@dataclass(frozen=True)
class TrainSection:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    lr_drop: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 500
    eval_mode: str = ""
    stop_at: float = 0.0
    augment: bool = False


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "decoder": DecoderConfig,
    "train": TrainSection,
    "loss": LossWeights,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)

    @property
    def run_dir(self) -> Path:
        return Path(self.run.out_dir) / self.run.name

    def train_config(self) -> TrainConfig:
        m = self.model
        model = ModelConfig(AttentionConfig(m.model_dim, m.n_heads, m.ffn_dim, m.n_encoder_layers),
                            self.decoder, m.grid)
        t = self.train
        return TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr, optimizer=t.optimizer,
                           momentum=t.momentum, clip_norm=t.clip_norm, seed=t.seed,
                           eval_every=t.eval_every, eval_mode=t.eval_mode or None,
                           stop_at=t.stop_at or None, augment=t.augment,
                           lr_drop=t.lr_drop or None,
                           weights=self.loss, model=model)

    def dumps(self) -> str:
        lines = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                value = getattr(obj, f.name)
                if value is None:
                    continue
                lines.append(f"{sec}.{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if "bool" in kind:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_assignments(pairs) -> dict[str, dict[str, object]]:
    """``[(key, raw_value, where), ...]`` -> typed values per section."""
    out: dict[str, dict[str, object]] = {}
    for key, raw, where in pairs:
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} needs a section prefix like 'train.steps'")
        sec, name = key.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {sec!r}; choose from {sorted(SECTIONS)}")
        kinds = {f.name: f.type for f in fields(SECTIONS[sec])}
        if name not in kinds:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out.setdefault(sec, {})[name] = _parse_value(raw, kinds[name], key)
    return out


def read_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = line.split("=", 1)
        pairs.append((key.strip(), raw, f"{source}:{lineno}"))
    return pairs


def build(values: dict[str, dict[str, object]], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates = {}
    for sec, kv in values.items():
        current = getattr(base, sec)
        if sec == "decoder" and "variant" in kv and "interaction" not in kv:
            kv = {**kv, "interaction": None}
        try:
            updates[sec] = replace(current, **kv)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    cfg = replace(base, **updates)
    cfg.train_config()  # validates the assembled configuration
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """File values first, then ``overrides`` (``"section.key=value"`` strings)."""
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        pairs += read_pairs(text, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        pairs.append((key.strip(), raw, "--set"))
    return build(parse_assignments(pairs))
