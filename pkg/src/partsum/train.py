"""Deterministic training loop with checkpoints, CSV logging and resume."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import Scene, TargetSet, Vocab, pad_targets
from .evaluation import evaluate_predictions, recall_key
from .heads import combine_inference, default_mode
from .loss import LossWeights, matched_loss
from .model import ModelConfig, PSTModel
from .optim import SGD, Adam, clip_grad_norm
from .scenes import SceneGenConfig, augment_scene, n_features, tokens_for


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    lr_drop: int | None = None
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 500
    eval_mode: str | None = None
    stop_at: float | None = None
    augment: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        from .attention import ConfigError
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.eval_every < 0:
            raise ConfigError("steps, batch_size, lr and eval_every must be positive")
        if self.lr_drop is not None and self.lr_drop < 1:
            raise ConfigError("lr_drop must be a positive step")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d


@dataclass
class TrainResult:
    model: PSTModel
    log: list[dict]
    best_metric: float | None
    step: int


PRIMARY_METRIC = recall_key(50, 1)


def batch_indices(step: int, n_scenes: int, batch_size: int, seed: int) -> np.ndarray:
    """Scenes of one step: consecutive slices of per-epoch permutations.

    A pure function of its arguments, so a resumed run draws the same batches.
    """
    start = step * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n_scenes)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n_scenes)
        out.append(perm[offset])
    return np.array(out)


def build_model(vocab: Vocab, config: TrainConfig) -> PSTModel:
    rng = np.random.default_rng([config.seed, 0])
    return PSTModel(config.model, vocab, n_features(vocab.n_entity), rng)


def make_optimizer(model: PSTModel, config: TrainConfig):
    params = model.parameters()
    if config.optimizer == "adam":
        return Adam(params, lr=config.lr)
    return SGD(params, lr=config.lr, momentum=config.momentum)


def checkpoint_entries(model: PSTModel, optimizer, step: int) -> dict[str, np.ndarray]:
    entries = {f"param/{k}": v for k, v in model.state().items()}
    if optimizer is not None:
        entries.update({f"optim/{k}": v for k, v in optimizer.state().items()})
    entries["step"] = np.array([float(step)])
    return entries


def load_checkpoint_into(path, model: PSTModel, optimizer=None) -> int:
    entries = checkpoint.load(path)
    model.load_state({k[6:]: v for k, v in entries.items() if k.startswith("param/")})
    if optimizer is not None:
        optimizer.load_state({k[6:]: v for k, v in entries.items() if k.startswith("optim/")})
    return int(entries["step"][0])


def predict_scenes(model: PSTModel, tokens: np.ndarray, batch: int = 32) -> list:
    preds = []
    for i in range(0, len(tokens), batch):
        p = model.predict(tokens[i:i + batch])
        preds.extend(p.index(j) for j in range(len(tokens[i:i + batch])))
    return preds


def evaluate_model(model: PSTModel, scenes: Sequence[Scene], mode: str | None = None,
                   ks=(50, 100), k_settings=(1, "all")) -> dict:
    tokens = tokens_for(scenes, model.config.grid, model.vocab.n_entity)
    preds = predict_scenes(model, tokens)
    mode = mode or default_mode(preds[0])
    combined = [combine_inference(p, mode) for p in preds]
    return evaluate_predictions(combined, [s.instances() for s in scenes], model.vocab.n_predicate,
                                ks=ks, k_settings=k_settings)


def _augmented_batch(scenes, idx, config: TrainConfig, vocab: Vocab, step: int, generator: SceneGenConfig):
    rng = np.random.default_rng([config.seed, 2, step])
    jittered = [augment_scene(scenes[i], rng, generator) for i in idx]
    tokens = tokens_for(jittered, config.model.grid, vocab.n_entity)
    return tokens, [pad_targets(s.instances(), config.model.decoder.n_queries, vocab) for s in jittered]


def _dump_divergence(out_dir: Path | None, step: int, info: dict) -> str | None:
    if out_dir is None:
        return None
    path = out_dir / "divergence.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=float) + "\n")
    return str(path)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(scenes: Sequence[Scene], vocab: Vocab, config: TrainConfig, out_dir=None,
          eval_scenes: Sequence[Scene] | None = None, resume=None, verbose: bool = False,
          generator: SceneGenConfig | None = None) -> TrainResult:
    """Train a model on ``scenes``; identical inputs give bit-identical logs and checkpoints.

    With ``out_dir`` the run writes ``config.json``, ``vocab.json``,
    ``metrics.csv``, ``final.ckpt`` and ``best.ckpt`` (best held-out
    relationship R@50, k=1).  ``resume`` names a checkpoint to continue from.
    """
    from .attention import ConfigError
    if not scenes:
        raise ConfigError("training needs at least one scene")
    if config.augment and generator is None:
        raise ConfigError("augmentation re-annotates scenes and needs the generator config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
        (out / "vocab.json").write_text(json.dumps(vocab.to_json()) + "\n")

    model = build_model(vocab, config)
    optimizer = make_optimizer(model, config)
    m = config.model.decoder.n_queries
    tokens = tokens_for(scenes, config.model.grid, vocab.n_entity)
    targets: list[TargetSet] = [pad_targets(s.instances(), m, vocab) for s in scenes]
    eval_scenes = list(eval_scenes) if eval_scenes else list(scenes)

    start = 0
    log: list[dict] = []
    best = None
    if resume is not None:
        start = load_checkpoint_into(resume, model, optimizer)
        if out is not None and (out / "metrics.csv").exists():
            with open(out / "metrics.csv", newline="") as fh:
                log = [r for r in csv.DictReader(fh) if int(r["step"]) <= start]
            for r in log:
                if r.get(PRIMARY_METRIC):
                    v = float(r[PRIMARY_METRIC])
                    best = v if best is None else max(best, v)
    params = model.parameters()

    def evaluate(step: int) -> float:
        nonlocal best
        metric = evaluate_model(model, eval_scenes, config.eval_mode, ks=(50,), k_settings=(1,))
        value = metric["relationship"][PRIMARY_METRIC]
        if out is not None and (best is None or value > best):
            checkpoint.save(out / "best.ckpt", checkpoint_entries(model, None, step))
        if best is None or value > best:
            best = value
        return value

    end = config.steps
    for step in range(start, config.steps):
        idx = batch_indices(step, len(scenes), config.batch_size, config.seed)
        optimizer.lr = config.lr * (0.1 if config.lr_drop is not None and step >= config.lr_drop else 1.0)
        model.zero_grad()
        if config.augment:
            batch, batch_targets = _augmented_batch(scenes, idx, config, vocab, step, generator)
        else:
            batch, batch_targets = tokens[idx], [targets[i] for i in idx]
        outputs, _ = model(batch)
        report, _ = matched_loss(outputs, batch_targets, config.weights)
        loss = report.value
        grad_norm = math.nan
        if math.isfinite(loss):
            report.total.backward()
            grad_norm = clip_grad_norm(params, config.clip_norm)
        if not (math.isfinite(loss) and math.isfinite(grad_norm)):
            info = {"step": step, "loss": loss, "grad_norm": grad_norm, "batch": idx.tolist(),
                    "terms": report.terms,
                    "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()}}
            path = _dump_divergence(out, step, info)
            raise DivergenceError(f"training diverged at step {step}: loss={loss}, grad_norm={grad_norm}", path)
        optimizer.step()

        row = {"step": step + 1, "loss": loss, "grad_norm": grad_norm, **report.by_head()}
        done = step + 1 == config.steps
        if config.eval_every and ((step + 1) % config.eval_every == 0 or done):
            row[PRIMARY_METRIC] = evaluate(step + 1)
        log.append(row)
        if verbose and (step + 1) % 100 == 0:
            print(f"step {step + 1}: loss {loss:.4f}" +
                  (f"  {PRIMARY_METRIC} {row[PRIMARY_METRIC]:.3f}" if PRIMARY_METRIC in row else ""),
                  flush=True)
        if config.stop_at is not None and row.get(PRIMARY_METRIC, -1.0) >= config.stop_at:
            end = step + 1
            break

    if out is not None:
        checkpoint.save(out / "final.ckpt", checkpoint_entries(model, optimizer, end))
        write_log(log, out / "metrics.csv")
    return TrainResult(model, log, best, end)


def write_log(log: list[dict], path) -> None:
    columns: list[str] = []
    for row in log:
        for k in row:
            if k not in columns:
                columns.append(k)
    if PRIMARY_METRIC in columns:
        columns.remove(PRIMARY_METRIC)
        columns.append(PRIMARY_METRIC)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in log:
        writer.writerow([row["step"] if k == "step" else _fmt(row[k]) if row.get(k, "") != "" else ""
                         for k in columns])
    Path(path).write_text(buf.getvalue())


def load_run(run_dir, which: str = "final") -> PSTModel:
    """Rebuild the model of a run directory and load one of its checkpoints."""
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    vocab = Vocab.from_json(json.loads((run_dir / "vocab.json").read_text()))
    config = config_from_json(cfg)
    model = build_model(vocab, config)
    load_checkpoint_into(run_dir / f"{which}.ckpt", model)
    return model


def config_from_json(obj: dict) -> TrainConfig:
    obj = dict(obj)
    obj["weights"] = LossWeights(**obj["weights"])
    obj["model"] = ModelConfig.from_json(obj["model"])
    return TrainConfig(**obj)


def with_variant(config: TrainConfig, variant: str, **decoder_overrides) -> TrainConfig:
    decoder_overrides.setdefault("interaction", None)
    dec = replace(config.model.decoder, variant=variant, **decoder_overrides)
    return replace(config, model=replace(config.model, decoder=dec))
