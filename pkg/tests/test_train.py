import csv
import importlib
import json
import math

import numpy as np
import pytest

from partsum.attention import AttentionConfig, ConfigError
from partsum.data import Vocab
from partsum.decoder import DecoderConfig
from partsum.loss import LossWeights
from partsum.model import ModelConfig
from partsum.scenes import SceneGenConfig, generate_dataset
from partsum.train import (DivergenceError, TrainConfig, batch_indices, config_from_json, evaluate_model,
                           load_run, train, with_variant)

train_mod = importlib.import_module("partsum.train")

SMALL = ModelConfig(AttentionConfig(model_dim=16, n_heads=2, ffn_dim=32, n_encoder_layers=1),
                    DecoderConfig(n_queries=6, n_layers=2), grid=4)


def data(n, seed=0):
    ds = generate_dataset(SceneGenConfig(seed=seed), n)
    return ds.scenes, Vocab.from_scenes(ds.scenes, ds.n_entity, ds.n_predicate)


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(s, 10, 5, 3) for s in range(4)])
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:]) == list(range(10))
    assert batch_indices(7, 10, 5, 3).tolist() == batch_indices(7, 10, 5, 3).tolist()
    assert batch_indices(0, 10, 5, 3).tolist() != batch_indices(0, 10, 5, 4).tolist()


def test_config_validation_and_json_roundtrip():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    cfg = TrainConfig(steps=7, weights=LossWeights(eos=0.2), model=SMALL)
    assert config_from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    v = with_variant(cfg, "b")
    assert v.model.decoder.variant == "vanilla-tensor" and v.model.decoder.interaction == "none"
    assert with_variant(cfg, "e", interaction="self-attention").model.decoder.interaction == "self-attention"


def test_same_seed_gives_bit_identical_artifacts(tmp_path):
    scenes, vocab = data(6)
    cfg = TrainConfig(steps=6, batch_size=2, eval_every=3, model=SMALL)
    train(scenes, vocab, cfg, tmp_path / "a")
    train(scenes, vocab, cfg, tmp_path / "b")
    for name in ("metrics.csv", "final.ckpt", "best.ckpt", "config.json", "vocab.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = train(scenes, vocab, TrainConfig(steps=6, batch_size=2, eval_every=3, model=SMALL, seed=1))
    assert other.log[0]["loss"] != train(scenes, vocab, cfg).log[0]["loss"]


@pytest.mark.parametrize("augment", [False, True])
def test_resume_continues_the_run_exactly(tmp_path, augment):
    scenes, vocab = data(5)
    full = TrainConfig(steps=8, batch_size=2, eval_every=4, model=SMALL, augment=augment)
    gen = SceneGenConfig()
    train(scenes, vocab, full, tmp_path / "full", generator=gen)
    half = TrainConfig(steps=4, batch_size=2, eval_every=4, model=SMALL, augment=augment)
    train(scenes, vocab, half, tmp_path / "split", generator=gen)
    train(scenes, vocab, full, tmp_path / "split", resume=tmp_path / "split" / "final.ckpt", generator=gen)
    for name in ("metrics.csv", "final.ckpt", "best.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()


def test_augmentation_changes_the_batches_deterministically():
    scenes, vocab = data(4)
    cfg = TrainConfig(steps=3, batch_size=2, eval_every=0, model=SMALL, augment=True)
    with pytest.raises(ConfigError):
        train(scenes, vocab, cfg)
    first, again = (train(scenes, vocab, cfg, generator=SceneGenConfig()) for _ in range(2))
    plain = train(scenes, vocab, TrainConfig(steps=3, batch_size=2, eval_every=0, model=SMALL))
    assert [r["loss"] for r in first.log] == [r["loss"] for r in again.log]
    assert first.log[0]["loss"] != plain.log[0]["loss"]


def test_log_columns_and_load_run(tmp_path):
    scenes, vocab = data(4)
    result = train(scenes, vocab, TrainConfig(steps=4, batch_size=2, eval_every=2, model=SMALL), tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    header = list(rows[0])
    assert header[:3] == ["step", "loss", "grad_norm"] and header[-1] == "R@50,k=1"
    assert "subject/nll" in header and "sum_predicate_box/giou" in header
    assert rows[0]["R@50,k=1"] == "" and rows[1]["R@50,k=1"] != ""
    assert float(rows[-1]["loss"]) == result.log[-1]["loss"]
    model = load_run(tmp_path)
    tokens = np.random.default_rng(0).normal(size=(1, 16, model.encoder.input_proj.weight.shape[0]))
    np.testing.assert_array_equal(model.predict(tokens).subject, result.model.predict(tokens).subject)


def test_zero_box_weights_keep_box_terms_zero():
    scenes, vocab = data(3)
    cfg = TrainConfig(steps=5, batch_size=2, eval_every=0, model=SMALL, weights=LossWeights(l1=0, giou=0))
    for row in train(scenes, vocab, cfg).log:
        box = [v for k, v in row.items() if k.endswith("/l1") or k.endswith("/giou")]
        assert len(box) == 12 and all(v == 0.0 for v in box)


def test_divergence_aborts_with_dump(tmp_path, monkeypatch):
    scenes, vocab = data(3)
    real = train_mod.matched_loss

    def poisoned(outputs, targets, weights):
        report, a = real(outputs, targets, weights)
        report.total.data = np.array(math.nan)
        return report, a
    monkeypatch.setattr(train_mod, "matched_loss", poisoned)
    with pytest.raises(DivergenceError) as info:
        train(scenes, vocab, TrainConfig(steps=3, batch_size=1, model=SMALL), tmp_path)
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert info.value.dump_path == str(tmp_path / "divergence.json")
    assert dump["step"] == 0 and "param_norms" in dump and dump["batch"]


def test_empty_training_set_is_config_error():
    _, vocab = data(1)
    with pytest.raises(ConfigError):
        train([], vocab, TrainConfig(model=SMALL))


def test_single_scene_overfit_smoke():
    scenes, vocab = data(1)
    model = ModelConfig(AttentionConfig(model_dim=32, n_heads=4, ffn_dim=64, n_encoder_layers=1),
                        DecoderConfig(n_queries=8, n_layers=2))
    result = train(scenes, vocab, TrainConfig(steps=200, batch_size=1, lr=1e-3, clip_norm=1.0, eval_every=0,
                                              model=model))
    losses = [r["loss"] for r in result.log]
    assert losses[-1] <= 0.1 * losses[9]
    assert evaluate_model(result.model, scenes)["relationship"]["R@50,k=1"] == 1.0


def test_stop_at_ends_on_first_evaluation_reaching_target(tmp_path):
    scenes, vocab = data(3)
    full = train(scenes, vocab, TrainConfig(steps=6, batch_size=2, eval_every=2, model=SMALL))
    evals = [r for r in full.log if "R@50,k=1" in r]
    target = evals[0]["R@50,k=1"]
    stopped = train(scenes, vocab, TrainConfig(steps=6, batch_size=2, eval_every=2, model=SMALL, stop_at=target),
                    tmp_path)
    assert stopped.step == 2 and len(stopped.log) == 2
    assert stopped.log == full.log[:2]
    never = train(scenes, vocab, TrainConfig(steps=6, batch_size=2, eval_every=2, model=SMALL, stop_at=1.5))
    assert never.step == 6


def test_lr_drop_equals_resuming_at_a_tenth_of_the_rate(tmp_path):
    scenes, vocab = data(4)
    dropped = train(scenes, vocab, TrainConfig(steps=3, batch_size=2, eval_every=0, lr=1e-3, lr_drop=1, model=SMALL))
    train(scenes, vocab, TrainConfig(steps=1, batch_size=2, eval_every=0, lr=1e-3, model=SMALL), tmp_path)
    resumed = train(scenes, vocab, TrainConfig(steps=3, batch_size=2, eval_every=0, lr=1e-4, model=SMALL),
                    resume=tmp_path / "final.ckpt")
    for k, p in dropped.model.parameters().items():
        np.testing.assert_allclose(p.data, resumed.model.parameters()[k].data, rtol=1e-12, atol=1e-15)
    with pytest.raises(ConfigError):
        TrainConfig(lr_drop=0)
