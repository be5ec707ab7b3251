"""Tests for the fused-input transformer: causality, masking, decoding, checkpoints."""

import math

import numpy as np
import pytest
import torch

from rationale_vt.feature_store import LengthLimits
from rationale_vt.fusion import (
    HybridSource,
    SlotKind,
    UniformSource,
    build_baseline,
    build_hybrid,
    build_uniform,
)
from rationale_vt.model import (
    Batch,
    ModelConfig,
    ModelError,
    TransformerLM,
    checkpoint_fingerprint,
    collate,
    generate_greedy,
    load_checkpoint,
    masked_lm_loss,
    save_checkpoint,
)
from rationale_vt.text_codec import SpecialTokenInventory, train_bpe
from tests.test_fusion import DIM, make_features, make_instance

LIMITS = LengthLimits()


@pytest.fixture(scope="module")
def vocab():
    inventory = SpecialTokenInventory.with_roles(["agent", "tool", "item"])
    corpus = [
        "why is the street wet because it rained people dining at a restaurant",
        "food table chair dog walked in sat down paid the bill eat dinner",
    ]
    return train_bpe(corpus, target_size=len(inventory.all_tokens()) + 256 + 40,
                     specials=inventory)


def tiny_config(vocab, **overrides):
    params = dict(
        vocab_size=len(vocab), n_layers=2, n_heads=2, d_model=16,
        max_positions=256, feature_dim=DIM, vc_dim=8, dropout=0.0, seed=11,
    )
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture(scope="module")
def model(vocab):
    m = TransformerLM(tiny_config(vocab))
    m.eval()
    return m


def test_config_validates_shape():
    with pytest.raises(ModelError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ModelError, match="positive"):
        ModelConfig(vocab_size=0)


def test_default_config_keeps_reference_ratios(vocab):
    config = ModelConfig(vocab_size=len(vocab))
    assert (config.n_layers, config.n_heads, config.d_model) == (4, 4, 128)
    assert config.d_model // config.n_heads == 128 // 4
    assert config.feature_dim == 2048


# ---------------------------------------------------------------------------
# embeddings and forward
# ---------------------------------------------------------------------------


def test_input_embedding_is_sum_of_tables(model, vocab):
    seq = build_baseline(make_instance(), vocab, LIMITS)
    batch = collate([seq], pad_id=vocab.pad_id)
    got = model.input_embeddings(batch)[0]
    tok = torch.tensor(seq.token_ids)
    seg = torch.tensor(seq.segment_ids)
    pos = torch.tensor(seq.position_ids)
    want = (
        model.token_emb.weight[tok]
        + model.segment_emb.weight[seg]
        + model.position_emb.weight[pos]
    )
    assert torch.equal(got, want)


def test_forward_is_causal(model, vocab):
    seq = build_baseline(make_instance(), vocab, LIMITS)
    cut = 6
    logits = model.forward(seq, pad_id=vocab.pad_id)
    # permute everything strictly after the cut
    perm = list(range(len(seq)))
    perm[cut + 1 :] = reversed(perm[cut + 1 :])
    shuffled = build_baseline(make_instance(), vocab, LIMITS)
    shuffled.token_ids = [seq.token_ids[i] for i in perm]
    shuffled.segment_ids = [seq.segment_ids[i] for i in perm]
    shuffled.position_ids = [seq.position_ids[i] for i in perm]
    shuffled.rationale_mask = [seq.rationale_mask[i] for i in perm]
    logits2 = model.forward(shuffled, pad_id=vocab.pad_id)
    assert torch.equal(logits[: cut + 1], logits2[: cut + 1])
    assert not torch.equal(logits[cut + 1 :], logits2[cut + 1 :])


def test_zero_weights_give_uniform_logits_and_log_vocab_loss(vocab):
    m = TransformerLM(tiny_config(vocab))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    m.eval()
    seq = build_baseline(make_instance(), vocab, LIMITS)
    logits = m.forward(seq, pad_id=vocab.pad_id)
    assert torch.all(logits == logits[0, 0])
    # analytic oracle: uniform distribution over V gives cross-entropy ln V
    loss = m.loss(seq, pad_id=vocab.pad_id)
    assert loss.item() == pytest.approx(math.log(len(vocab)), rel=1e-6)


def test_whole_image_slot_with_zeroed_projections_adds_norm_bias(model, vocab):
    # With a zero feature vector and zeroed projection weights, the region
    # embedding collapses to the layer-norm bias; the slot must shift exactly
    # its own position by exactly that vector.
    features = make_features(labels=("dog",))
    features.objects.objects[0].feature = np.zeros(DIM, dtype=np.float32)
    features.objects.whole_image = np.zeros(DIM, dtype=np.float32)
    seq = build_hybrid(make_instance(), features, HybridSource.OBJECTS, vocab, LIMITS)
    m = TransformerLM(tiny_config(vocab))
    m.eval()
    beta = torch.linspace(-1.0, 1.0, m.config.d_model)
    with torch.no_grad():
        m.projector.feature_projection.weight.zero_()
        m.projector.feature_projection.bias.zero_()
        m.projector.coordinate_projection.weight.zero_()
        m.projector.layer_norm.bias.copy_(beta)
    batch = collate([seq], pad_id=vocab.pad_id)
    with_slots = m.input_embeddings(batch)[0]
    bare = Batch(
        token_ids=batch.token_ids, segment_ids=batch.segment_ids,
        position_ids=batch.position_ids, key_mask=batch.key_mask,
        loss_mask=batch.loss_mask,
        region_feats=torch.zeros((0, DIM)), region_coords=torch.zeros((0, 5)),
        region_index=torch.zeros((0, 2), dtype=torch.long),
        vc_vecs=batch.vc_vecs, vc_index=batch.vc_index,
    )
    without_slots = m.input_embeddings(bare)[0]
    delta = with_slots - without_slots
    for slot in seq.visual_slots:
        assert torch.allclose(delta[slot.index], beta, atol=1e-6)
    untouched = [i for i in range(len(seq)) if all(s.index != i for s in seq.visual_slots)]
    assert torch.all(delta[untouched] == 0)


def test_forward_rejects_overlong_and_mismatched_inputs(vocab):
    m = TransformerLM(tiny_config(vocab, max_positions=8))
    seq = build_baseline(make_instance(), vocab, LIMITS)
    with pytest.raises(ModelError, match="max_positions"):
        m.forward(seq, pad_id=vocab.pad_id)
    m2 = TransformerLM(tiny_config(vocab, feature_dim=DIM + 1))
    hybrid = build_hybrid(make_instance(), make_features(), HybridSource.OBJECTS, vocab,
                          LIMITS)
    with pytest.raises(ModelError, match="feature_dim"):
        m2.forward(hybrid, pad_id=vocab.pad_id)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_masked_loss_matches_hand_computed_cross_entropy():
    # Oracle computed by hand: two masked targets with logits rows
    # [2, 0, 0, 0] (target 0) and [0, 1, 0, 2] (target 3).
    logits = torch.tensor([[[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 2.0], [9.0, 9.0, 9.0, 9.0]]])
    targets = torch.tensor([[0, 3, 1]])
    mask = torch.tensor([[True, True, False]])
    z1 = math.log(math.exp(2) + 3) - 2
    z2 = math.log(1 + math.exp(1) + 1 + math.exp(2)) - 2
    want = (z1 + z2) / 2
    got = masked_lm_loss(logits, targets, mask)
    assert got.item() == pytest.approx(want, rel=1e-6)


def test_rewriting_context_targets_changes_nothing(model, vocab):
    seq = build_uniform(make_instance(), make_features(), UniformSource.OBJECTS, vocab,
                        LIMITS)
    batch = collate([seq], pad_id=vocab.pad_id)
    logits = model.forward_batch(batch)
    targets = batch.token_ids[:, 1:].clone()
    mask = batch.loss_mask[:, 1:]
    base = masked_lm_loss(logits[:, :-1], targets, mask)
    rng = np.random.default_rng(5)
    for t in range(targets.shape[1]):
        if not mask[0, t]:
            rewritten = targets.clone()
            rewritten[0, t] = int(rng.integers(0, len(vocab)))
            again = masked_lm_loss(logits[:, :-1], rewritten, mask)
            assert again.item() == base.item()


def test_rewriting_a_masked_target_does_change_the_loss(model, vocab):
    seq = build_baseline(make_instance(), vocab, LIMITS)
    batch = collate([seq], pad_id=vocab.pad_id)
    logits = model.forward_batch(batch)
    targets = batch.token_ids[:, 1:].clone()
    mask = batch.loss_mask[:, 1:]
    base = masked_lm_loss(logits[:, :-1], targets, mask)
    where = int(torch.nonzero(mask[0])[0])
    rewritten = targets.clone()
    rewritten[0, where] = (int(rewritten[0, where]) + 1) % len(vocab)
    assert masked_lm_loss(logits[:, :-1], rewritten, mask).item() != base.item()


def test_empty_mask_is_an_error(model, vocab):
    seq = build_baseline(make_instance(), vocab, LIMITS, include_rationale=False)
    with pytest.raises(ModelError, match="masked target"):
        model.loss(seq, pad_id=vocab.pad_id)


def test_batched_loss_equals_pooled_per_sequence_loss(model, vocab):
    seqs = [
        build_baseline(make_instance(rationale="it rained hard"), vocab, LIMITS),
        build_baseline(make_instance(rationale="the dog"), vocab, LIMITS),
    ]
    batch = collate(seqs, pad_id=vocab.pad_id)
    batched = model.loss_batch(batch).item()
    total, count = 0.0, 0
    for seq in seqs:
        logits = model.forward(seq, pad_id=vocab.pad_id)
        targets = torch.tensor(seq.token_ids[1:])
        mask = torch.tensor(seq.rationale_mask[1:])
        n = int(mask.sum())
        total += masked_lm_loss(logits[:-1], targets, mask).item() * n
        count += n
    assert batched == pytest.approx(total / count, rel=1e-5)


def test_gradients_match_finite_differences(vocab):
    # float64 + central differences on a few entries of every parameter tensor
    torch.manual_seed(0)
    config = tiny_config(vocab, d_model=8, n_layers=1, n_heads=2)
    m = TransformerLM(config).double()
    m.eval()
    features = make_features(labels=("dog", "food"))
    seq = build_hybrid(
        make_instance(question="why", answer="dog", rationale="it rained"),
        features, HybridSource.OBJECTS, vocab,
        LengthLimits(max_question=3, max_answer=3, max_rationale=4, max_objects=2),
    )
    vc_seq = build_hybrid(make_instance(question="why", answer="dog", rationale="wet"),
                          make_features(), HybridSource.VISCOMET, vocab,
                          LengthLimits(max_question=2, max_answer=2, max_rationale=2))

    def total_loss():
        return m.loss(seq, pad_id=vocab.pad_id) + m.loss(vc_seq, pad_id=vocab.pad_id)

    m.zero_grad()
    total_loss().backward()
    rng = np.random.default_rng(1)
    h = 1e-5
    checked = 0
    for name, param in m.named_parameters():
        grad = param.grad
        assert grad is not None, name
        flat = param.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False)
        for idx in picks:
            original = flat[idx].item()
            flat[idx] = original + h
            up = total_loss().item()
            flat[idx] = original - h
            down = total_loss().item()
            flat[idx] = original
            numeric = (up - down) / (2 * h)
            analytic = grad.view(-1)[idx].item()
            assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-7), name
            checked += 1
    assert checked >= 30


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------


class ScriptedModel(TransformerLM):
    """Returns pre-set logits for the last position; used to test the decode loop."""

    def __init__(self, config, script):
        super().__init__(config)
        self.script = list(script)
        self.calls = 0

    def forward(self, seq, pad_id=0):
        row = torch.full((len(seq), self.config.vocab_size), -5.0)
        for token_id, value in self.script[min(self.calls, len(self.script) - 1)]:
            row[-1, token_id] = value
        self.calls += 1
        return row


def test_greedy_emits_token_then_stops_at_end_separator(vocab):
    end_id = vocab.special_id(vocab.specials.rationale[1])
    t = vocab.encode("wet")[0]
    m = ScriptedModel(tiny_config(vocab), [[(t, 5.0)], [(end_id, 5.0)]])
    context = build_baseline(make_instance(), vocab, LIMITS, include_rationale=False)
    assert generate_greedy(m, context, vocab) == [t]


def test_greedy_ties_break_toward_lowest_id(vocab):
    end_id = vocab.special_id(vocab.specials.rationale[1])
    m = ScriptedModel(tiny_config(vocab), [[(9, 5.0), (5, 5.0)], [(end_id, 5.0)]])
    context = build_baseline(make_instance(), vocab, LIMITS, include_rationale=False)
    assert generate_greedy(m, context, vocab) == [5]


def test_greedy_respects_max_new(vocab):
    t = vocab.encode("wet")[0]
    m = ScriptedModel(tiny_config(vocab), [[(t, 5.0)]])
    context = build_baseline(make_instance(), vocab, LIMITS, include_rationale=False)
    assert generate_greedy(m, context, vocab, max_new=0) == []
    m2 = ScriptedModel(tiny_config(vocab), [[(t, 5.0)]])
    assert generate_greedy(m2, context, vocab, max_new=4) == [t, t, t, t]


def test_greedy_requires_context_ending_at_begin_separator(model, vocab):
    full = build_baseline(make_instance(), vocab, LIMITS)
    with pytest.raises(ModelError, match="begin separator"):
        generate_greedy(model, full, vocab)


def test_greedy_is_deterministic(model, vocab):
    context = build_hybrid(make_instance(), make_features(), HybridSource.OBJECTS, vocab,
                           LIMITS, include_rationale=False)
    a = generate_greedy(model, context, vocab, max_new=8)
    b = generate_greedy(model, context, vocab, max_new=8)
    assert a == b


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_identical(tmp_path, model, vocab):
    seq = build_uniform(make_instance(), make_features(), UniformSource.SITUATION, vocab,
                        LIMITS)
    save_checkpoint(tmp_path / "ckpt", model, step=7, vocab_hash=vocab.fingerprint())
    restored, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta["step"] == 7
    assert meta["vocab_hash"] == vocab.fingerprint()
    assert meta["config"] == model.config.to_json()
    before = model.forward(seq, pad_id=vocab.pad_id)
    after = restored.forward(seq, pad_id=vocab.pad_id)
    assert torch.equal(before, after)


def test_checkpoint_blob_is_float32_little_endian(tmp_path, model):
    save_checkpoint(tmp_path / "ckpt", model)
    blob = (tmp_path / "ckpt" / "params.f32").read_bytes()
    assert len(blob) == 4 * model.parameter_count()
    fp1 = checkpoint_fingerprint(tmp_path / "ckpt")
    save_checkpoint(tmp_path / "ckpt2", model)
    assert checkpoint_fingerprint(tmp_path / "ckpt2") == fp1
