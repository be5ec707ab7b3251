"""Decoder-only transformer over fused sequences.

The embedding layer sums token, segment, and position tables, then adds a
projected visual embedding wherever a slot references the position. Region
slots go through feature and coordinate projections followed by layer norm;
inference-start slots go through their own projection without normalization.
The LM head is tied to the token embedding table and the loss is computed
only on positions whose target token carries the rationale mask.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from rationale_vt.fusion import FusedSequence, SlotKind
from rationale_vt.text_codec import Vocabulary
from rationale_vt.validation import ValidationError

CHECKPOINT_META = "meta.json"
CHECKPOINT_BLOB = "params.f32"


class ModelError(ValidationError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Toy-scale defaults keep the reference layer/head/width ratios."""

    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    n_segments: int = 4
    max_positions: int = 512
    feature_dim: int = 2048
    vc_dim: int = 768
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "n_segments",
                     "max_positions", "feature_dim", "vc_dim"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Padded tensors for a list of fused sequences.

    Visual slot payloads are flattened across the batch with (row, column)
    scatter indices so the model can project them in one shot.
    """

    token_ids: torch.Tensor      # [B, L] long
    segment_ids: torch.Tensor    # [B, L] long
    position_ids: torch.Tensor   # [B, L] long
    key_mask: torch.Tensor       # [B, L] bool, True on real tokens
    loss_mask: torch.Tensor      # [B, L] bool, rationale mask
    region_feats: torch.Tensor   # [R, feature_dim] float
    region_coords: torch.Tensor  # [R, 5] float
    region_index: torch.Tensor   # [R, 2] long (row, col)
    vc_vecs: torch.Tensor        # [S, vc_dim] float
    vc_index: torch.Tensor       # [S, 2] long

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(sequences: list[FusedSequence], pad_id: int,
            dtype: torch.dtype = torch.float32) -> Batch:
    if not sequences:
        raise ModelError("cannot collate an empty sequence list")
    max_len = max(len(s) for s in sequences)
    n = len(sequences)
    token_ids = torch.full((n, max_len), pad_id, dtype=torch.long)
    segment_ids = torch.zeros((n, max_len), dtype=torch.long)
    position_ids = torch.zeros((n, max_len), dtype=torch.long)
    key_mask = torch.zeros((n, max_len), dtype=torch.bool)
    loss_mask = torch.zeros((n, max_len), dtype=torch.bool)
    region_feats, region_coords, region_index = [], [], []
    vc_vecs, vc_index = [], []
    for row, seq in enumerate(sequences):
        L = len(seq)
        token_ids[row, :L] = torch.tensor(seq.token_ids, dtype=torch.long)
        segment_ids[row, :L] = torch.tensor(seq.segment_ids, dtype=torch.long)
        position_ids[row, :L] = torch.tensor(seq.position_ids, dtype=torch.long)
        key_mask[row, :L] = True
        loss_mask[row, :L] = torch.tensor(seq.rationale_mask, dtype=torch.bool)
        for slot in seq.visual_slots:
            if slot.kind in (SlotKind.ROI, SlotKind.WHOLE_IMAGE):
                region_feats.append(torch.tensor(np.asarray(slot.ref.feature), dtype=dtype))
                region_coords.append(torch.tensor(slot.ref.coords.as_array(), dtype=dtype))
                region_index.append((row, slot.index))
            else:
                vc_vecs.append(torch.tensor(np.asarray(slot.ref.vector), dtype=dtype))
                vc_index.append((row, slot.index))

    def stack(items, width):
        if items:
            return torch.stack(items)
        return torch.zeros((0, width), dtype=dtype)

    feat_width = region_feats[0].shape[0] if region_feats else 1
    vc_width = vc_vecs[0].shape[0] if vc_vecs else 1
    return Batch(
        token_ids=token_ids,
        segment_ids=segment_ids,
        position_ids=position_ids,
        key_mask=key_mask,
        loss_mask=loss_mask,
        region_feats=stack(region_feats, feat_width),
        region_coords=stack(region_coords, 5),
        region_index=torch.tensor(region_index, dtype=torch.long).reshape(-1, 2),
        vc_vecs=stack(vc_vecs, vc_width),
        vc_index=torch.tensor(vc_index, dtype=torch.long).reshape(-1, 2),
    )


class VisualProjector(nn.Module):
    """Maps region features (+ box coordinates) and inference-start vectors
    into the model width. Regions are layer-normalized after the sum; the
    inference-start projection is used as-is."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.feature_projection = nn.Linear(config.feature_dim, config.d_model)
        self.coordinate_projection = nn.Linear(5, config.d_model, bias=False)
        self.layer_norm = nn.LayerNorm(config.d_model)
        self.vc_projection = nn.Linear(config.vc_dim, config.d_model)

    def region(self, feats: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return self.layer_norm(self.feature_projection(feats) + self.coordinate_projection(coords))

    def vc(self, vecs: torch.Tensor) -> torch.Tensor:
        return self.vc_projection(vecs)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, L, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)

        def heads(t):
            return t.view(b, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        causal = torch.ones(L, L, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf"))
        att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.dropout(att)
        out = (att @ v).transpose(1, 2).contiguous().view(b, L, d)
        return self.dropout(self.proj(out))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, 4 * config.d_model),
            nn.GELU(),
            nn.Linear(4 * config.d_model, config.d_model),
            nn.Dropout(config.dropout),
        )

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), key_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.token_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.segment_emb = nn.Embedding(config.n_segments, config.d_model)
        self.position_emb = nn.Embedding(config.max_positions, config.d_model)
        self.projector = VisualProjector(config)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.drop = nn.Dropout(config.dropout)
        self.apply(self._init_weights)
        # residual projections get the depth-scaled init
        for name, p in self.named_parameters():
            if name.endswith("proj.weight") or name.endswith("mlp.2.weight"):
                nn.init.normal_(p, mean=0.0, std=0.02 / math.sqrt(2 * config.n_layers))

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    # -- embedding assembly ---------------------------------------------------

    def _check_batch(self, batch: Batch) -> None:
        L = batch.token_ids.shape[1]
        if L > self.config.max_positions:
            raise ModelError(
                f"sequence length {L} exceeds max_positions {self.config.max_positions}"
            )
        if int(batch.token_ids.max()) >= self.config.vocab_size:
            raise ModelError("token id outside the model vocabulary")
        if batch.region_feats.shape[0] and batch.region_feats.shape[1] != self.config.feature_dim:
            raise ModelError(
                f"region feature dim {batch.region_feats.shape[1]} != "
                f"config feature_dim {self.config.feature_dim}"
            )
        if batch.vc_vecs.shape[0] and batch.vc_vecs.shape[1] != self.config.vc_dim:
            raise ModelError(
                f"inference-start dim {batch.vc_vecs.shape[1]} != config vc_dim {self.config.vc_dim}"
            )

    def input_embeddings(self, batch: Batch) -> torch.Tensor:
        """Token + segment + position sums with visual embeddings scattered in."""
        self._check_batch(batch)
        x = (
            self.token_emb(batch.token_ids)
            + self.segment_emb(batch.segment_ids)
            + self.position_emb(batch.position_ids)
        )
        dtype = x.dtype
        if batch.region_feats.shape[0]:
            emb = self.projector.region(batch.region_feats.to(dtype),
                                        batch.region_coords.to(dtype))
            x = x.index_put(
                (batch.region_index[:, 0], batch.region_index[:, 1]), emb, accumulate=True
            )
        if batch.vc_vecs.shape[0]:
            emb = self.projector.vc(batch.vc_vecs.to(dtype))
            x = x.index_put(
                (batch.vc_index[:, 0], batch.vc_index[:, 1]), emb, accumulate=True
            )
        return x

    # -- forward / loss / decode ----------------------------------------------

    def forward_batch(self, batch: Batch) -> torch.Tensor:
        x = self.drop(self.input_embeddings(batch))
        for block in self.blocks:
            x = block(x, batch.key_mask)
        x = self.ln_f(x)
        return x @ self.token_emb.weight.t()

    def forward(self, seq: FusedSequence, pad_id: int = 0) -> torch.Tensor:
        """Logits [L, vocab_size] for one fused sequence."""
        dtype = self.token_emb.weight.dtype
        batch = collate([seq], pad_id=pad_id, dtype=dtype)
        return self.forward_batch(batch)[0, : len(seq)]

    def loss_batch(self, batch: Batch) -> torch.Tensor:
        logits = self.forward_batch(batch)
        return masked_lm_loss(
            logits[:, :-1], batch.token_ids[:, 1:], batch.loss_mask[:, 1:]
        )

    def loss(self, seq: FusedSequence, pad_id: int = 0) -> torch.Tensor:
        dtype = self.token_emb.weight.dtype
        return self.loss_batch(collate([seq], pad_id=pad_id, dtype=dtype))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over exactly the masked targets.

    `logits[..., t]` scores the token at `targets[..., t]`; callers align the
    shift. Targets outside the mask never touch the result, so rewriting a
    context target changes the loss by exactly zero.
    """
    if mask.sum() == 0:
        raise ModelError("loss needs at least one masked target position")
    flat_logits = logits.reshape(-1, logits.shape[-1])[mask.reshape(-1)]
    flat_targets = targets.reshape(-1)[mask.reshape(-1)]
    return F.cross_entropy(flat_logits, flat_targets)


@torch.no_grad()
def generate_greedy(model: TransformerLM, context: FusedSequence, vocab: Vocabulary,
                    max_new: int = 50) -> list[int]:
    """Argmax decoding from a context that ends at the rationale begin
    separator; stops at the end separator (excluded from the output) or after
    max_new tokens. Argmax breaks ties toward the lowest token id."""
    from rationale_vt.fusion import Segment, VisualSlot  # local to avoid import noise

    begin_id = vocab.special_id(vocab.specials.rationale[0])
    end_id = vocab.special_id(vocab.specials.rationale[1])
    if not context.token_ids or context.token_ids[-1] != begin_id:
        raise ModelError("generation context must end with the rationale begin separator")
    if any(context.rationale_mask):
        raise ModelError("generation context already contains rationale tokens")

    was_training = model.training
    model.eval()
    try:
        seq = FusedSequence(
            token_ids=list(context.token_ids),
            segment_ids=list(context.segment_ids),
            position_ids=list(context.position_ids),
            visual_slots=list(context.visual_slots),
            rationale_mask=list(context.rationale_mask),
            truncation_report=context.truncation_report,
        )
        whole_ref = None
        for slot in context.visual_slots:
            if slot.kind == SlotKind.WHOLE_IMAGE:
                whole_ref = slot.ref
        out: list[int] = []
        next_pos = seq.position_ids[-1] + 1
        while len(out) < max_new and len(seq) < model.config.max_positions:
            logits = model.forward(seq, pad_id=vocab.pad_id)
            next_id = int(torch.argmax(logits[-1]).item())
            if next_id == end_id:
                break
            out.append(next_id)
            seq.token_ids.append(next_id)
            seq.segment_ids.append(int(Segment.RATIONALE))
            seq.position_ids.append(next_pos)
            seq.rationale_mask.append(False)
            if whole_ref is not None:
                seq.visual_slots.append(
                    VisualSlot(index=len(seq) - 1, kind=SlotKind.WHOLE_IMAGE, ref=whole_ref)
                )
            next_pos += 1
    finally:
        if was_training:
            model.train()
    return out


# ---------------------------------------------------------------------------
# checkpoints: meta JSON + named-tensor index + little-endian float32 blob
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt_dir: str | Path, model: TransformerLM, step: int = 0,
                    vocab_hash: Optional[str] = None, extra: Optional[dict] = None) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(ckpt_dir / CHECKPOINT_BLOB, "wb") as blob:
        for name, param in sorted(model.state_dict().items()):
            arr = param.detach().cpu().numpy().astype("<f4")
            blob.write(arr.tobytes())
            tensors.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "numel": int(arr.size),
            })
            offset += int(arr.size)
    meta = {
        "config": model.config.to_json(),
        "vocab_hash": vocab_hash,
        "step": step,
        "tensors": tensors,
    }
    if extra:
        meta.update(extra)
    (ckpt_dir / CHECKPOINT_META).write_text(json.dumps(meta, indent=1))
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[TransformerLM, dict]:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / CHECKPOINT_META).read_text())
    config = ModelConfig(**meta["config"])
    model = TransformerLM(config)
    blob = np.fromfile(ckpt_dir / CHECKPOINT_BLOB, dtype="<f4")
    state = {}
    for entry in meta["tensors"]:
        chunk = blob[entry["offset"] : entry["offset"] + entry["numel"]]
        if chunk.size != entry["numel"]:
            raise ModelError(f"checkpoint blob truncated at tensor {entry['name']!r}")
        state[entry["name"]] = torch.from_numpy(
            chunk.reshape(entry["shape"]).copy()
        )
    model.load_state_dict(state)
    model.eval()
    return model, meta


def checkpoint_fingerprint(ckpt_dir: str | Path) -> str:
    """Hash of the parameter blob; used to compare checkpoints for identity."""
    blob = (Path(ckpt_dir) / CHECKPOINT_BLOB).read_bytes()
    return hashlib.sha256(blob).hexdigest()
