"""Dataset instances and precomputed vision outputs: loading, validation, persistence.

Instances travel as JSONL manifests. Visual features are a JSONL index
(labels, boxes, blob offsets per image) next to a flat little-endian float32
blob, so persistence is language-neutral and bit-exact. Offsets and lengths
are counted in float32 elements, not bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from rationale_vt.validation import ValidationError, check_box, check_vector

INDEX_NAME = "features.idx.jsonl"
BLOB_NAME = "features.f32"

DEFAULT_FEATURE_DIM = 2048
DEFAULT_MAX_ROLES = 7


class Task(str, Enum):
    VCR = "vcr"
    ESNLIVE = "esnlive"
    VQAE = "vqae"


ESNLIVE_KEPT_LABELS = ("entailment", "contradiction")


class ManifestError(ValidationError):
    """Malformed instance manifest row; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class RationaleInstance:
    """One task example. `question` holds the hypothesis and `answer` the
    entailment label for the visual-entailment task."""

    instance_id: str
    image_id: str
    task: Task
    question: str
    answer: str
    rationale: str
    split: str  # "train" or "dev"


@dataclass
class RegionDetection:
    label: str
    box: tuple[float, float, float, float]
    feature: np.ndarray


@dataclass
class ObjectDetections:
    image_size: tuple[int, int]
    feature_dim: int
    objects: list[RegionDetection]
    whole_image: np.ndarray


@dataclass
class SituationRole:
    name: str
    noun: str
    box: Optional[tuple[float, float, float, float]] = None
    feature: Optional[np.ndarray] = None


@dataclass
class SituationFrame:
    verb: str
    roles: list[SituationRole]
    place: Optional[str] = None
    max_roles: int = DEFAULT_MAX_ROLES

    def __post_init__(self):
        if not self.verb:
            raise ValidationError("situation frame verb must be non-empty")
        if len(self.roles) > self.max_roles:
            raise ValidationError(
                f"situation frame has {len(self.roles)} roles, max is {self.max_roles}"
            )


@dataclass
class CommonsenseInferences:
    before: list[str]
    after: list[str]
    intent: list[str]
    start_embeddings: Optional[dict[str, np.ndarray]] = None  # keys: before/after/intent

    RELATIONS = ("before", "after", "intent")

    def __post_init__(self):
        if self.start_embeddings is not None:
            dims = {k: len(v) for k, v in self.start_embeddings.items()}
            if set(dims) != set(self.RELATIONS):
                raise ValidationError(
                    f"start embeddings must cover exactly {self.RELATIONS}, got {sorted(dims)}"
                )
            if len(set(dims.values())) != 1:
                raise ValidationError(f"start embeddings disagree on dimension: {dims}")

    @property
    def vc_dim(self) -> Optional[int]:
        if self.start_embeddings is None:
            return None
        return len(self.start_embeddings["before"])


@dataclass
class VisualFeatureSet:
    image_id: str
    objects: Optional[ObjectDetections] = None
    situation: Optional[SituationFrame] = None
    inferences: Optional[CommonsenseInferences] = None


@dataclass(frozen=True)
class LengthLimits:
    """Element budgets in subtokens (text) or regions (visual slots).

    Text budgets cover the element body; begin/end delimiters sit outside
    the budget. Defaults are the reference hyperparameter values.
    """

    max_question: int = 19
    max_answer: int = 23
    max_rationale: int = 50
    max_object_labels: int = 30
    max_situation: int = 17
    max_vc_text: int = 148
    max_objects: int = 28
    max_roles: int = 7

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, payload: dict) -> "LengthLimits":
        return cls(**payload)


# ---------------------------------------------------------------------------
# instance manifests
# ---------------------------------------------------------------------------

INSTANCE_FIELDS = ("instance_id", "image_id", "task", "question", "answer", "rationale", "split")


@dataclass
class InstanceLoadStats:
    total_rows: int = 0
    yielded: int = 0
    dropped_neutral: int = 0
    skipped_other_task: int = 0


def instance_to_row(inst: RationaleInstance) -> dict:
    row = {f: getattr(inst, f) for f in INSTANCE_FIELDS}
    row["task"] = inst.task.value
    return row


def write_instances(path: str | Path, instances: Iterable[RationaleInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_row(inst)) + "\n")


def load_instances(
    manifest_path: str | Path,
    task: Task,
    stats: Optional[InstanceLoadStats] = None,
) -> Iterator[RationaleInstance]:
    """Yield validated instances of `task` from a JSONL manifest.

    Rows for other tasks are skipped. For the visual-entailment task,
    neutral-labeled rows are dropped (and counted in `stats`): only
    entailment and contradiction examples reach training.
    """
    task = Task(task)
    stats = stats if stats is not None else InstanceLoadStats()
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            stats.total_rows += 1
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(line_no, f"invalid JSON: {exc}") from exc
            missing = [f for f in INSTANCE_FIELDS if f not in row]
            if missing:
                raise ManifestError(line_no, f"missing fields {missing}")
            try:
                row_task = Task(row["task"])
            except ValueError:
                raise ManifestError(line_no, f"unknown task {row['task']!r}") from None
            if row_task is not task:
                stats.skipped_other_task += 1
                continue
            if row["split"] not in ("train", "dev"):
                raise ManifestError(line_no, f"unknown split {row['split']!r}")
            if task is Task.ESNLIVE:
                label = row["answer"].strip().lower()
                if label == "neutral":
                    stats.dropped_neutral += 1
                    continue
                if label not in ESNLIVE_KEPT_LABELS:
                    raise ManifestError(line_no, f"unknown entailment label {row['answer']!r}")
                row["answer"] = label
            if row["split"] == "train" and not row["rationale"].strip():
                raise ManifestError(line_no, "train-split row has an empty rationale")
            stats.yielded += 1
            yield RationaleInstance(
                instance_id=str(row["instance_id"]),
                image_id=str(row["image_id"]),
                task=row_task,
                question=row["question"],
                answer=row["answer"],
                rationale=row["rationale"],
                split=row["split"],
            )


# ---------------------------------------------------------------------------
# feature persistence
# ---------------------------------------------------------------------------


class FeatureWriter:
    """Writes the JSONL index plus float32 blob for a set of images.

    Exclusive per directory; not safe for concurrent writers.
    """

    def __init__(self, feature_dir: str | Path):
        self.dir = Path(feature_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._index_fh = open(self.dir / INDEX_NAME, "w")
        self._blob_fh = open(self.dir / BLOB_NAME, "wb")
        self._offset = 0  # in float32 elements

    def _put_vec(self, vec: np.ndarray) -> list[int]:
        arr = np.ascontiguousarray(vec, dtype="<f4")
        self._blob_fh.write(arr.tobytes())
        ref = [self._offset, arr.shape[0]]
        self._offset += arr.shape[0]
        return ref

    def write(self, fs: VisualFeatureSet) -> None:
        row: dict = {"image_id": fs.image_id}
        if fs.objects is not None:
            od = fs.objects
            items = []
            for det in od.objects:
                check_box(det.box, od.image_size, f"object {det.label!r} box")
                vec = check_vector(det.feature, od.feature_dim, f"object {det.label!r} feature")
                items.append({"label": det.label, "box": list(det.box), "vec": self._put_vec(vec)})
            whole = check_vector(od.whole_image, od.feature_dim, "whole-image feature")
            row["objects"] = {
                "image_size": list(od.image_size),
                "feature_dim": od.feature_dim,
                "whole_image": self._put_vec(whole),
                "items": items,
            }
        if fs.situation is not None:
            sf = fs.situation
            roles = []
            for role in sf.roles:
                entry: dict = {"name": role.name, "noun": role.noun}
                if role.box is not None:
                    entry["box"] = list(role.box)
                if role.feature is not None:
                    entry["vec"] = self._put_vec(np.asarray(role.feature, dtype=np.float32))
                roles.append(entry)
            row["situation"] = {"verb": sf.verb, "place": sf.place, "roles": roles,
                                "max_roles": sf.max_roles}
        if fs.inferences is not None:
            ci = fs.inferences
            entry = {"before": ci.before, "after": ci.after, "intent": ci.intent}
            if ci.start_embeddings is not None:
                entry["start"] = {
                    rel: self._put_vec(ci.start_embeddings[rel])
                    for rel in CommonsenseInferences.RELATIONS
                }
            row["inferences"] = entry
        self._index_fh.write(json.dumps(row) + "\n")

    def close(self) -> None:
        self._index_fh.close()
        self._blob_fh.close()

    def __enter__(self) -> "FeatureWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_features(feature_dir: str | Path, sets: Iterable[VisualFeatureSet]) -> None:
    with FeatureWriter(feature_dir) as writer:
        for fs in sets:
            writer.write(fs)


class FeatureStore:
    """Read-only view over a feature directory; safe for concurrent reads.

    `reads` counts load_features calls so training modes that must not touch
    visual features can be audited.
    """

    def __init__(self, feature_dir: str | Path):
        self.dir = Path(feature_dir)
        index_path = self.dir / INDEX_NAME
        if not index_path.exists():
            raise ValidationError(f"missing feature index {index_path}")
        self._rows: dict[str, dict] = {}
        with open(index_path) as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    self._rows[row["image_id"]] = row
        self._blob = np.fromfile(self.dir / BLOB_NAME, dtype="<f4")
        self.reads = 0

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._rows

    def image_ids(self) -> list[str]:
        return list(self._rows)

    def _get_vec(self, ref: list[int], dim: Optional[int], what: str) -> np.ndarray:
        offset, length = ref
        if offset < 0 or offset + length > self._blob.shape[0]:
            raise ValidationError(
                f"{what}: blob reference ({offset}, {length}) exceeds blob size {self._blob.shape[0]}"
            )
        vec = self._blob[offset : offset + length]
        if dim is not None and length != dim:
            raise ValidationError(f"{what} has length {length}, declared dim is {dim}")
        return vec.copy()

    def load_features(self, image_id: str) -> VisualFeatureSet:
        """All feature kinds present for the image; absent kinds stay None."""
        self.reads += 1
        try:
            row = self._rows[image_id]
        except KeyError:
            raise ValidationError(f"no features indexed for image {image_id!r}") from None

        objects = None
        if "objects" in row:
            o = row["objects"]
            dim = int(o["feature_dim"])
            image_size = tuple(o["image_size"])
            dets = []
            for item in o["items"]:
                box = check_box(item["box"], image_size, f"object {item['label']!r} box")
                dets.append(
                    RegionDetection(
                        label=item["label"],
                        box=box,
                        feature=self._get_vec(item["vec"], dim, f"object {item['label']!r} feature"),
                    )
                )
            objects = ObjectDetections(
                image_size=(int(image_size[0]), int(image_size[1])),
                feature_dim=dim,
                objects=dets,
                whole_image=self._get_vec(o["whole_image"], dim, "whole-image feature"),
            )

        situation = None
        if "situation" in row:
            s = row["situation"]
            roles = []
            for r in s["roles"]:
                roles.append(
                    SituationRole(
                        name=r["name"],
                        noun=r["noun"],
                        box=tuple(r["box"]) if "box" in r else None,
                        feature=self._get_vec(r["vec"], None, f"role {r['name']!r} feature")
                        if "vec" in r
                        else None,
                    )
                )
            situation = SituationFrame(
                verb=s["verb"], roles=roles, place=s.get("place"),
                max_roles=int(s.get("max_roles", DEFAULT_MAX_ROLES)),
            )

        inferences = None
        if "inferences" in row:
            i = row["inferences"]
            start = None
            if "start" in i:
                start = {
                    rel: self._get_vec(i["start"][rel], None, f"{rel} start embedding")
                    for rel in CommonsenseInferences.RELATIONS
                }
            inferences = CommonsenseInferences(
                before=list(i["before"]), after=list(i["after"]), intent=list(i["intent"]),
                start_embeddings=start,
            )

        return VisualFeatureSet(
            image_id=image_id, objects=objects, situation=situation, inferences=inferences
        )


# ---------------------------------------------------------------------------
# corpus-derived length limits
# ---------------------------------------------------------------------------


def percentile_limit(lengths: list[int], percentile: float) -> int:
    """Smallest length >= the given fraction of the empirical distribution."""
    if not lengths:
        raise ValidationError("cannot take a percentile of an empty length list")
    if not (0 < percentile <= 1):
        raise ValidationError(f"percentile must be in (0, 1], got {percentile}")
    ordered = sorted(lengths)
    rank = max(1, math.ceil(percentile * len(ordered)))
    return ordered[rank - 1]


def compute_length_limits(
    instances: Iterable[RationaleInstance],
    vocab,
    percentile: float = 0.99,
    features: Optional[FeatureStore] = None,
    defaults: LengthLimits = LengthLimits(),
) -> LengthLimits:
    """Empirical per-element budgets at the given percentile.

    Text elements are measured in subtokens of their body (delimiters
    excluded). Visual elements are measured over the serialized text the
    fusion step would embed; when no feature store is supplied, the visual
    budgets keep their defaults.
    """
    instances = list(instances)
    if not instances:
        raise ValidationError("instance stream is empty")

    q_lens = [len(vocab.encode(i.question)) for i in instances]
    a_lens = [len(vocab.encode(i.answer)) for i in instances]
    r_lens = [len(vocab.encode(i.rationale)) for i in instances]

    updates = dict(
        max_question=percentile_limit(q_lens, percentile),
        max_answer=percentile_limit(a_lens, percentile),
        max_rationale=percentile_limit(r_lens, percentile),
    )

    if features is not None:
        from rationale_vt import fusion  # deferred: fusion depends on this module

        obj_lens, situ_lens, vc_lens = [], [], []
        obj_counts, role_counts = [], []
        for image_id in {i.image_id for i in instances}:
            if image_id not in features:
                continue
            fs = features.load_features(image_id)
            if fs.objects is not None:
                obj_lens.append(len(vocab.encode(fusion.merge_object_labels(fs.objects))))
                obj_counts.append(len(fs.objects.objects))
            if fs.situation is not None:
                situ_lens.append(len(fusion.serialize_situation_body(fs.situation, vocab)))
                role_counts.append(len(fs.situation.roles))
            if fs.inferences is not None:
                vc_lens.append(len(fusion.serialize_inferences_body(fs.inferences, vocab)))
        if obj_lens:
            updates["max_object_labels"] = max(1, percentile_limit(obj_lens, percentile))
        if situ_lens:
            updates["max_situation"] = max(1, percentile_limit(situ_lens, percentile))
        if vc_lens:
            updates["max_vc_text"] = max(1, percentile_limit(vc_lens, percentile))
        if obj_counts:
            updates["max_objects"] = max(1, percentile_limit(obj_counts, percentile))
        if role_counts:
            updates["max_roles"] = max(1, percentile_limit(role_counts, percentile))

    return replace(defaults, **updates)


def infer_feature_dims(features: Optional[FeatureStore],
                       default_feature: int = 2048,
                       default_vc: int = 768) -> tuple[int, int]:
    """Region and inference embedding widths as stored, falling back to defaults."""
    feature_dim, vc_dim = default_feature, default_vc
    if features is None:
        return feature_dim, vc_dim
    for image_id in features.image_ids():
        fs = features.load_features(image_id)
        if fs.objects is not None:
            feature_dim = fs.objects.feature_dim
        if fs.inferences is not None and fs.inferences.vc_dim is not None:
            vc_dim = fs.inferences.vc_dim
        break
    return feature_dim, vc_dim
