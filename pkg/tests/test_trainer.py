"""Tests for the training loop: overfit oracle, determinism, NaN abort, batching."""

import numpy as np
import pytest
import torch

from rationale_vt.feature_store import FeatureStore, LengthLimits, Task, load_instances
from rationale_vt.fixtures import build_fixture_vocab, generate_fixtures, load_role_inventory
from rationale_vt.fusion import build_sequence
from rationale_vt.model import (
    ModelConfig,
    TransformerLM,
    checkpoint_fingerprint,
    generate_greedy,
    load_checkpoint,
    save_checkpoint,
)
from rationale_vt.trainer import (
    TrainConfig,
    TrainingError,
    _bucketed_batches,
    linear_warmup_decay,
    smoothed,
    train,
)

LIMITS = LengthLimits()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    paths = generate_fixtures(tmp_path_factory.mktemp("fix"), seed=1, n_per_task=10)
    instances = list(load_instances(paths.instances, Task.VCR))
    vocab = build_fixture_vocab(instances, load_role_inventory(paths.roles))
    store = FeatureStore(paths.feature_dir)
    return paths, instances, vocab, store


def small_config(vocab):
    return ModelConfig(vocab_size=len(vocab), n_layers=2, n_heads=2, d_model=64,
                       max_positions=256, feature_dim=32, vc_dim=16, dropout=0.0, seed=5)


def test_config_defaults_match_reference_recipe():
    config = TrainConfig()
    assert (config.epochs, config.batch_size, config.learning_rate) == (5, 32, 5e-5)


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(TrainingError, match="unknown"):
        TrainConfig.from_json({"epochs": 1, "momentum": 0.9})
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=0)


def test_schedule_warms_up_then_decays():
    factor = linear_warmup_decay(warmup_steps=10, total_steps=100)
    ramp = [factor(s) for s in range(10)]
    assert ramp == sorted(ramp)
    assert factor(9) == 1.0
    tail = [factor(s) for s in range(10, 100)]
    assert tail == sorted(tail, reverse=True)
    assert factor(100) == 0.0


def test_bucketed_batches_partition_all_indices():
    rng = np.random.default_rng(0)
    lengths = [int(x) for x in rng.integers(5, 60, size=23)]
    batches = _bucketed_batches(lengths, batch_size=4, rng=np.random.default_rng(1))
    seen = [i for b in batches for i in b]
    assert sorted(seen) == list(range(23))
    assert all(len(b) <= 4 for b in batches)
    # each batch holds a contiguous run of the sorted length order
    for batch in batches:
        ls = [lengths[i] for i in batch]
        assert ls == sorted(ls)


def test_overfit_reaches_low_loss_and_exact_decode(world, tmp_path):
    # Derived oracle: with 8 instances to memorize, a small model must drive the
    # masked loss under 0.05 within 300 steps, and greedy decoding must then
    # reproduce each gold rationale token-for-token.
    _, instances, vocab, store = world
    eight = instances[:8]
    model = TransformerLM(small_config(vocab))
    config = TrainConfig(epochs=260, batch_size=8, learning_rate=3e-3,
                         warmup_fraction=0.05, seed=3,
                         output_dir=str(tmp_path / "overfit"))
    result = train(model, eight, store, "uniform", "objects", config, vocab, LIMITS)
    assert result.steps <= 300
    assert result.final_loss < 0.05

    for inst in eight:
        feats = store.load_features(inst.image_id)
        context = build_sequence(inst, vocab, LIMITS, "uniform", "objects",
                                 features=feats, include_rationale=False)
        generated = generate_greedy(model, context, vocab, max_new=LIMITS.max_rationale)
        gold = vocab.encode(inst.rationale)[: LIMITS.max_rationale]
        assert generated == gold, inst.instance_id

    window = smoothed(result.loss_curve, window=10)
    assert all(b <= a + 1e-9 for a, b in zip(window, window[1:]))


def test_baseline_mode_reads_no_features(world, tmp_path):
    _, instances, vocab, store = world
    model = TransformerLM(small_config(vocab))
    config = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-4,
                         output_dir=str(tmp_path / "base"))
    before = store.reads
    train(model, instances[:6], store, "baseline", None, config, vocab, LIMITS)
    assert store.reads == before


def test_zero_epochs_leaves_weights_untouched(world, tmp_path):
    _, instances, vocab, store = world
    model = TransformerLM(small_config(vocab))
    save_checkpoint(tmp_path / "pristine", model)
    config = TrainConfig(epochs=0, batch_size=4, output_dir=str(tmp_path / "zero"))
    result = train(model, instances[:4], None, "baseline", None, config, vocab, LIMITS)
    assert result.loss_curve == []
    assert result.steps == 0
    assert checkpoint_fingerprint(result.final_checkpoint) == checkpoint_fingerprint(
        tmp_path / "pristine"
    )


def test_same_seed_gives_bit_identical_checkpoints(world, tmp_path):
    _, instances, vocab, store = world
    prints = []
    for run in ("one", "two"):
        config_model = ModelConfig(vocab_size=len(vocab), n_layers=2, n_heads=2,
                                   d_model=32, feature_dim=32, vc_dim=16,
                                   dropout=0.1, seed=9)
        model = TransformerLM(config_model)
        config = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=13,
                             output_dir=str(tmp_path / run))
        result = train(model, instances[:6], store, "hybrid", "objects", config,
                       vocab, LIMITS)
        prints.append(checkpoint_fingerprint(result.final_checkpoint))
    assert prints[0] == prints[1]


def test_nan_loss_aborts_with_snapshot(world, tmp_path):
    _, instances, vocab, store = world
    model = TransformerLM(small_config(vocab))
    with torch.no_grad():
        model.token_emb.weight.fill_(float("nan"))
    config = TrainConfig(epochs=1, batch_size=4, output_dir=str(tmp_path / "nan"))
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        train(model, instances[:4], None, "baseline", None, config, vocab, LIMITS)
    snap = tmp_path / "nan" / "nan_diagnostic"
    assert (snap / "snapshot.json").exists()
    assert (snap / "params.f32").exists()
    restored, meta = load_checkpoint(snap)
    assert meta["step"] == 0


def test_unknown_variant_rejected(world, tmp_path):
    _, instances, vocab, store = world
    model = TransformerLM(small_config(vocab))
    config = TrainConfig(epochs=1, output_dir=str(tmp_path / "bad"))
    with pytest.raises(TrainingError, match="unknown variant"):
        train(model, instances[:2], store, "uniform", "situation_roles", config,
              vocab, LIMITS)
    with pytest.raises(TrainingError, match="empty"):
        train(model, [], store, "baseline", None, config, vocab, LIMITS)
