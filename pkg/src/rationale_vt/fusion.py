"""Fused model inputs: parallel token/segment/position streams plus visual slots.

Both fusion styles share one layout, [visual block][question][answer][rationale].
Uniform fusion renders a vision model's textual output as ordinary tokens inside
the visual block. Hybrid fusion injects projected feature vectors as sequence
slots riding on unk tokens at position zero; region slots also broadcast a
whole-image embedding onto every following text token.

Positions: order-less visual items (uniform object-label tokens, all region and
inference-start slots) sit at position zero; everything else counts up from 1.
Budgets from LengthLimits apply to element bodies, with begin/end delimiters
outside the budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from typing import Optional, Union

import numpy as np

from rationale_vt.feature_store import (
    CommonsenseInferences,
    LengthLimits,
    ObjectDetections,
    RationaleInstance,
    SituationFrame,
    VisualFeatureSet,
)
from rationale_vt.text_codec import Vocabulary
from rationale_vt.validation import ValidationError, check_box, check_vector


class FusionError(ValidationError):
    pass


class Segment(IntEnum):
    VISUAL = 0
    QUESTION = 1
    ANSWER = 2
    RATIONALE = 3


class SlotKind(str, Enum):
    ROI = "roi"
    WHOLE_IMAGE = "whole_image"
    VC_START = "vc_start"


class UniformSource(str, Enum):
    OBJECTS = "objects"
    SITUATION = "situation"
    VISCOMET = "viscomet"


class HybridSource(str, Enum):
    OBJECTS = "objects"
    SITUATION_ROLES = "situation_roles"
    VISCOMET = "viscomet"


VARIANTS: tuple[tuple[str, Optional[str]], ...] = (
    ("baseline", None),
    ("uniform", UniformSource.OBJECTS.value),
    ("uniform", UniformSource.SITUATION.value),
    ("uniform", UniformSource.VISCOMET.value),
    ("hybrid", HybridSource.OBJECTS.value),
    ("hybrid", HybridSource.SITUATION_ROLES.value),
    ("hybrid", HybridSource.VISCOMET.value),
)

VC_TOP_K = 5


@dataclass(frozen=True)
class CoordinateVector:
    """Normalized box corners plus the fraction of image area covered."""

    x1: float
    y1: float
    x2: float
    y2: float
    area: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2, self.area], dtype=np.float32)


def coordinate_vector(box, image_size) -> CoordinateVector:
    x1, y1, x2, y2 = check_box(box, image_size, "region box")
    w, h = image_size
    return CoordinateVector(
        x1=x1 / w,
        y1=y1 / h,
        x2=x2 / w,
        y2=y2 / h,
        area=((x2 - x1) * (y2 - y1)) / (w * h),
    )


@dataclass(frozen=True)
class RegionRef:
    """Feature vector plus normalized coordinates for one region of interest."""

    feature: np.ndarray
    coords: CoordinateVector


@dataclass(frozen=True)
class VCRef:
    """Inference-start embedding for one commonsense relation."""

    relation: str
    vector: np.ndarray


@dataclass(frozen=True)
class VisualSlot:
    index: int
    kind: SlotKind
    ref: Union[RegionRef, VCRef]


@dataclass
class TruncationReport:
    question_dropped: int = 0
    answer_dropped: int = 0
    rationale_dropped: int = 0
    object_labels_dropped: int = 0
    situation_dropped: int = 0
    vc_text_dropped: int = 0
    objects_dropped: int = 0
    roles_dropped: int = 0
    ungrounded_roles_skipped: int = 0

    def total_dropped(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))


@dataclass
class FusedSequence:
    token_ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    visual_slots: list[VisualSlot]
    rationale_mask: list[bool]
    truncation_report: TruncationReport = field(default_factory=TruncationReport)

    def __len__(self) -> int:
        return len(self.token_ids)

    def validate(self) -> None:
        n = len(self.token_ids)
        for name in ("segment_ids", "position_ids", "rationale_mask"):
            if len(getattr(self, name)) != n:
                raise FusionError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        for slot in self.visual_slots:
            if not (0 <= slot.index < n):
                raise FusionError(f"visual slot index {slot.index} outside sequence of length {n}")


def max_input_length(limits: LengthLimits, mode: str, source: Optional[str] = None) -> int:
    """Worst-case fused length for a configuration, from the element budgets.

    Each wrapped text element contributes its body budget plus two delimiters;
    hybrid slots contribute one position per region or relation.
    """
    total = (limits.max_question + 2) + (limits.max_answer + 2) + (limits.max_rationale + 2)
    if mode == "baseline":
        return total
    if mode == "uniform":
        source = UniformSource(source)
        if source is UniformSource.OBJECTS:
            return total + limits.max_object_labels + 2
        if source is UniformSource.SITUATION:
            return total + limits.max_situation + 2
        return total + limits.max_vc_text
    if mode == "hybrid":
        source = HybridSource(source)
        if source is HybridSource.OBJECTS:
            return total + limits.max_objects
        if source is HybridSource.SITUATION_ROLES:
            return total + limits.max_roles
        return total + len(CommonsenseInferences.RELATIONS)
    raise FusionError(f"unknown fusion mode {mode!r}")


# ---------------------------------------------------------------------------
# serialization of vision-model text outputs
# ---------------------------------------------------------------------------


def merge_object_labels(objects: ObjectDetections) -> str:
    """Space-joined labels, skipping people and repeat detections of a label."""
    seen: set[str] = set()
    kept: list[str] = []
    for det in objects.objects:
        key = det.label.strip().lower()
        if key == "person" or key in seen:
            continue
        seen.add(key)
        kept.append(det.label.strip())
    return " ".join(kept)


def serialize_situation_body(situation: SituationFrame, vocab: Vocabulary) -> list[int]:
    """Structured verb/role/place stream, without the outer situation delimiters."""
    inv = vocab.specials
    ids = [vocab.special_id(inv.verb[0])]
    ids += vocab.encode(situation.verb)
    ids.append(vocab.special_id(inv.verb[1]))
    for role in situation.roles:
        begin, end = inv.role_pair(role.name)
        ids.append(vocab.special_id(begin))
        ids += vocab.encode(role.noun)
        ids.append(vocab.special_id(end))
    if situation.place:
        ids.append(vocab.special_id(inv.place[0]))
        ids += vocab.encode(situation.place)
        ids.append(vocab.special_id(inv.place[1]))
    return ids


def serialize_inferences_body(
    inferences: CommonsenseInferences, vocab: Vocabulary, top_k: int = VC_TOP_K
) -> list[int]:
    """Merged inference stream; each inference opens with its relation token."""
    starts = vocab.specials.inference_starts
    ids: list[int] = []
    for start_token, relation in zip(starts, CommonsenseInferences.RELATIONS):
        start_id = vocab.special_id(start_token)
        for text in getattr(inferences, relation)[:top_k]:
            ids.append(start_id)
            ids += vocab.encode(text)
    return ids


def _clip(ids: list[int], limit: int) -> tuple[list[int], int]:
    return ids[:limit], max(0, len(ids) - limit)


# ---------------------------------------------------------------------------
# sequence assembly
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.token_ids: list[int] = []
        self.segment_ids: list[int] = []
        self.position_ids: list[int] = []
        self.mask: list[bool] = []
        self.slots: list[VisualSlot] = []
        self.next_position = 1

    def add(self, token_id: int, segment: Segment, at_zero: bool = False,
            masked: bool = False) -> int:
        if at_zero:
            position = 0
        else:
            position = self.next_position
            self.next_position += 1
        self.token_ids.append(token_id)
        self.segment_ids.append(int(segment))
        self.position_ids.append(position)
        self.mask.append(masked)
        return len(self.token_ids) - 1

    def add_special(self, token: str, segment: Segment, at_zero: bool = False,
                    masked: bool = False) -> int:
        return self.add(self.vocab.special_id(token), segment, at_zero=at_zero, masked=masked)

    def add_wrapped(self, pair: tuple[str, str], body: list[int], segment: Segment,
                    at_zero: bool = False, mask_body: bool = False) -> None:
        """One delimited element; when mask_body is set, the body and the end
        delimiter are marked for the loss, the begin delimiter never is."""
        self.add_special(pair[0], segment, at_zero=at_zero)
        for token_id in body:
            self.add(token_id, segment, at_zero=at_zero, masked=mask_body)
        self.add_special(pair[1], segment, at_zero=at_zero, masked=mask_body)

    def add_slot(self, kind: SlotKind, ref: Union[RegionRef, VCRef]) -> None:
        index = self.add(self.vocab.unk_id, Segment.VISUAL, at_zero=True)
        self.slots.append(VisualSlot(index=index, kind=kind, ref=ref))

    def finish(self, report: TruncationReport) -> FusedSequence:
        seq = FusedSequence(
            token_ids=self.token_ids,
            segment_ids=self.segment_ids,
            position_ids=self.position_ids,
            visual_slots=self.slots,
            rationale_mask=self.mask,
            truncation_report=report,
        )
        seq.validate()
        return seq


def _append_context(builder: _Builder, instance: RationaleInstance, limits: LengthLimits,
                    report: TruncationReport, include_rationale: bool) -> None:
    vocab = builder.vocab
    inv = vocab.specials

    body, report.question_dropped = _clip(vocab.encode(instance.question), limits.max_question)
    builder.add_wrapped(inv.question, body, Segment.QUESTION)

    body, report.answer_dropped = _clip(vocab.encode(instance.answer), limits.max_answer)
    builder.add_wrapped(inv.answer, body, Segment.ANSWER)

    if include_rationale:
        body, report.rationale_dropped = _clip(vocab.encode(instance.rationale),
                                               limits.max_rationale)
        builder.add_wrapped(inv.rationale, body, Segment.RATIONALE, mask_body=True)
    else:
        builder.add_special(inv.rationale[0], Segment.RATIONALE)


def build_baseline(instance: RationaleInstance, vocab: Vocabulary, limits: LengthLimits,
                   include_rationale: bool = True) -> FusedSequence:
    """Text-only sequence: question, answer, and (optionally) rationale."""
    builder = _Builder(vocab)
    report = TruncationReport()
    _append_context(builder, instance, limits, report, include_rationale)
    return builder.finish(report)


def build_uniform(instance: RationaleInstance, features: VisualFeatureSet,
                  source: Union[str, UniformSource], vocab: Vocabulary,
                  limits: LengthLimits, include_rationale: bool = True) -> FusedSequence:
    """Vision-model text rendered as a leading block of ordinary tokens.

    Object labels are order-less and sit at position zero; situation and
    inference text keep sequential positions.
    """
    source = UniformSource(source)
    builder = _Builder(vocab)
    report = TruncationReport()
    inv = vocab.specials

    if source is UniformSource.OBJECTS:
        if features.objects is None:
            raise FusionError(f"image {features.image_id!r} has no object detections")
        body = vocab.encode(merge_object_labels(features.objects))
        body, report.object_labels_dropped = _clip(body, limits.max_object_labels)
        builder.add_wrapped(inv.object_block, body, Segment.VISUAL, at_zero=True)
    elif source is UniformSource.SITUATION:
        if features.situation is None:
            raise FusionError(f"image {features.image_id!r} has no situation frame")
        body = serialize_situation_body(features.situation, vocab)
        body, report.situation_dropped = _clip(body, limits.max_situation)
        builder.add_wrapped(inv.situation_block, body, Segment.VISUAL)
    else:
        if features.inferences is None:
            raise FusionError(f"image {features.image_id!r} has no commonsense inferences")
        body = serialize_inferences_body(features.inferences, vocab)
        body, report.vc_text_dropped = _clip(body, limits.max_vc_text)
        for token_id in body:
            builder.add(token_id, Segment.VISUAL)

    _append_context(builder, instance, limits, report, include_rationale)
    return builder.finish(report)


def build_hybrid(instance: RationaleInstance, features: VisualFeatureSet,
                 source: Union[str, HybridSource], vocab: Vocabulary,
                 limits: LengthLimits, include_rationale: bool = True) -> FusedSequence:
    """Feature vectors as leading position-zero slots on unk tokens.

    Region sources additionally reference the whole-image embedding from every
    following text token; the inference-start source deliberately does not.
    """
    source = HybridSource(source)
    builder = _Builder(vocab)
    report = TruncationReport()
    whole_ref: Optional[RegionRef] = None

    if source in (HybridSource.OBJECTS, HybridSource.SITUATION_ROLES):
        od = features.objects
        if od is None:
            raise FusionError(
                f"image {features.image_id!r} has no object detections "
                "(needed for the whole-image embedding)"
            )
        dim = od.feature_dim
        whole_ref = RegionRef(
            feature=check_vector(od.whole_image, dim, "whole-image feature"),
            coords=coordinate_vector((0.0, 0.0, *od.image_size), od.image_size),
        )

    if source is HybridSource.OBJECTS:
        if not od.objects:
            raise FusionError(f"image {features.image_id!r} has zero detected regions")
        kept, report.objects_dropped = _clip(od.objects, limits.max_objects)
        for det in kept:
            ref = RegionRef(
                feature=check_vector(det.feature, dim, f"object {det.label!r} feature"),
                coords=coordinate_vector(det.box, od.image_size),
            )
            builder.add_slot(SlotKind.ROI, ref)
    elif source is HybridSource.SITUATION_ROLES:
        sf = features.situation
        if sf is None:
            raise FusionError(f"image {features.image_id!r} has no situation frame")
        grounded = [r for r in sf.roles if r.box is not None and r.feature is not None]
        report.ungrounded_roles_skipped = len(sf.roles) - len(grounded)
        if not grounded:
            raise FusionError(
                f"image {features.image_id!r} has no grounded situation roles"
            )
        kept, report.roles_dropped = _clip(grounded, limits.max_roles)
        for role in kept:
            ref = RegionRef(
                feature=check_vector(role.feature, dim, f"role {role.name!r} feature"),
                coords=coordinate_vector(role.box, od.image_size),
            )
            builder.add_slot(SlotKind.ROI, ref)
    else:
        ci = features.inferences
        if ci is None or ci.start_embeddings is None:
            raise FusionError(
                f"image {features.image_id!r} has no inference-start embeddings"
            )
        for relation in CommonsenseInferences.RELATIONS:
            builder.add_slot(
                SlotKind.VC_START,
                VCRef(relation=relation, vector=ci.start_embeddings[relation]),
            )

    text_start = len(builder.token_ids)
    _append_context(builder, instance, limits, report, include_rationale)

    if whole_ref is not None:
        for index in range(text_start, len(builder.token_ids)):
            builder.slots.append(VisualSlot(index=index, kind=SlotKind.WHOLE_IMAGE,
                                            ref=whole_ref))

    return builder.finish(report)


def build_sequence(instance: RationaleInstance, vocab: Vocabulary, limits: LengthLimits,
                   mode: str, source: Optional[str] = None,
                   features: Optional[VisualFeatureSet] = None,
                   include_rationale: bool = True) -> FusedSequence:
    """Single entry point over the seven configurations."""
    if mode == "baseline":
        return build_baseline(instance, vocab, limits, include_rationale)
    if features is None:
        raise FusionError(f"fusion mode {mode!r} needs visual features")
    if mode == "uniform":
        return build_uniform(instance, features, source, vocab, limits, include_rationale)
    if mode == "hybrid":
        return build_hybrid(instance, features, source, vocab, limits, include_rationale)
    raise FusionError(f"unknown fusion mode {mode!r}")
