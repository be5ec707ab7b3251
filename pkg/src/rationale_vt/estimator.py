"""Scikit-learn style facade over the fusion model and trainer.

RationaleGenerator follows the estimator protocol (constructor stores
hyperparameters verbatim, fit learns state into trailing-underscore
attributes, predict maps instances to generated rationale strings) so it
composes with sklearn tooling like clone and get_params. The heavy lifting
stays in the fusion, model, and trainer modules; this class only wires them
together and owns sensible defaults for interactive use.
"""

from __future__ import annotations

import tempfile
from typing import Optional, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from rationale_vt.feature_store import (
    FeatureStore,
    LengthLimits,
    RationaleInstance,
    compute_length_limits,
    infer_feature_dims,
)
from rationale_vt.fusion import VARIANTS, build_sequence
from rationale_vt.model import ModelConfig, generate_greedy
from rationale_vt.text_codec import (
    DEFAULT_ROLE_INVENTORY,
    SpecialTokenInventory,
    Vocabulary,
    train_bpe,
)
from rationale_vt.trainer import TrainConfig, train
from rationale_vt.validation import ValidationError


def _default_vocab(instances: Sequence[RationaleInstance],
                   role_inventory: Sequence[str]) -> Vocabulary:
    corpus = []
    for inst in instances:
        corpus.extend([inst.question, inst.answer, inst.rationale])
    specials = SpecialTokenInventory().with_roles(list(role_inventory))
    target = len(specials.all_tokens()) + 256 + 100
    return train_bpe(corpus, target_size=target, specials=specials)


class RationaleGenerator(BaseEstimator):
    """Generates free-text rationales for question/answer pairs over images.

    fusion_mode selects how precomputed visual features enter the model:
    "baseline" ignores them, "uniform" writes them into the token stream as
    text, "hybrid" injects projected feature vectors. source picks the
    feature kind ("objects", "situation"/"situation_roles", "viscomet").
    """

    def __init__(self, fusion_mode="baseline", source=None, n_layers=4,
                 n_heads=4, d_model=128, dropout=0.1, epochs=5, batch_size=32,
                 learning_rate=5e-5, warmup_fraction=0.1, weight_decay=0.01,
                 grad_clip=1.0, seed=0, max_new_tokens=50, output_dir=None,
                 role_inventory=None):
        self.fusion_mode = fusion_mode
        self.source = source
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.seed = seed
        self.max_new_tokens = max_new_tokens
        self.output_dir = output_dir
        self.role_inventory = role_inventory

    def _check_variant(self):
        if (self.fusion_mode, self.source) not in VARIANTS:
            raise ValidationError(
                f"unknown fusion variant {(self.fusion_mode, self.source)!r}; "
                f"expected one of {VARIANTS}"
            )

    def fit(self, instances: Sequence[RationaleInstance],
            features: Optional[FeatureStore] = None,
            vocab: Optional[Vocabulary] = None,
            limits: Optional[LengthLimits] = None):
        self._check_variant()
        instances = list(instances)
        if not instances:
            raise ValidationError("fit needs at least one training instance")
        if self.fusion_mode != "baseline" and features is None:
            raise ValidationError(
                f"fusion_mode {self.fusion_mode!r} needs a feature store"
            )
        roles = self.role_inventory or DEFAULT_ROLE_INVENTORY
        self.vocab_ = vocab or _default_vocab(instances, roles)
        self.limits_ = limits or compute_length_limits(
            instances, self.vocab_, features=features
        )
        feature_dim, vc_dim = infer_feature_dims(features)
        model_config = ModelConfig(
            vocab_size=len(self.vocab_),
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            feature_dim=feature_dim,
            vc_dim=vc_dim,
            dropout=self.dropout,
            seed=self.seed,
        )
        out_dir = self.output_dir or tempfile.mkdtemp(prefix="rationale_vt_fit_")
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            seed=self.seed,
            output_dir=str(out_dir),
        )
        from rationale_vt.model import TransformerLM

        model = TransformerLM(model_config)
        self.result_ = train(
            model, instances, features, self.fusion_mode, self.source,
            train_config, self.vocab_, self.limits_,
        )
        self.model_ = model
        return self

    def predict(self, instances: Sequence[RationaleInstance],
                features: Optional[FeatureStore] = None) -> list[str]:
        check_is_fitted(self, "model_")
        if self.fusion_mode != "baseline" and features is None:
            raise ValidationError(
                f"fusion_mode {self.fusion_mode!r} needs a feature store"
            )
        self.model_.eval()
        out = []
        for inst in instances:
            fs = features.load_features(inst.image_id) if features is not None else None
            context = build_sequence(
                inst, self.vocab_, self.limits_, self.fusion_mode,
                source=self.source, features=fs, include_rationale=False,
            )
            token_ids = generate_greedy(
                self.model_, context, self.vocab_, max_new=self.max_new_tokens
            )
            out.append(self.vocab_.decode_text(token_ids))
        return out
