"""Deterministic synthetic corpus: instances, visual features, role file, images.

Everything derives from one seed, so two runs with the same seed produce
byte-identical files. The generated world is tiny but exercises every code
path: person and duplicate object labels, ungrounded situation roles, neutral
entailment rows that the loader must drop, and all three feature kinds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from rationale_vt.feature_store import (
    CommonsenseInferences,
    ObjectDetections,
    RationaleInstance,
    RegionDetection,
    SituationFrame,
    SituationRole,
    Task,
    VisualFeatureSet,
    write_features,
    write_instances,
)
from rationale_vt.text_codec import (
    DEFAULT_ROLE_INVENTORY,
    SpecialTokenInventory,
    Vocabulary,
    train_bpe,
)

OBJECT_LABELS = ["person", "dog", "food", "table", "chair", "cup", "bicycle", "tree"]
VERBS = ["dining", "cooking", "walking", "reading", "riding"]
PLACES = ["restaurant", "kitchen", "park", "library", "street"]
ROLE_NOUNS = ["people", "chef", "dog", "book", "bicycle", "meal", "cup"]
WORDS = [
    "the", "a", "is", "are", "why", "what", "because", "person", "dog", "food",
    "table", "wet", "street", "rain", "happy", "eating", "sitting", "holding",
    "near", "red", "green", "small", "big", "people", "outside", "inside",
]
ENTAILMENT_LABELS = ["entailment", "contradiction", "neutral"]


@dataclass
class FixturePaths:
    root: Path
    instances: Path
    feature_dir: Path
    roles: Path
    images_dir: Path
    n_instances: int
    n_images: int


def _phrase(rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(str(rng.choice(WORDS)) for _ in range(n))


def _instance(rng: np.random.Generator, task: Task, index: int,
              image_id: str) -> RationaleInstance:
    if task is Task.ESNLIVE:
        answer = str(ENTAILMENT_LABELS[int(rng.integers(0, 3))])
        question = _phrase(rng, 3, 7)
    elif task is Task.VQAE:
        answer = _phrase(rng, 1, 2)
        question = "what " + _phrase(rng, 2, 6)
    else:
        answer = _phrase(rng, 2, 5)
        question = "why " + _phrase(rng, 2, 6)
    return RationaleInstance(
        instance_id=f"{task.value}-{index:03d}",
        image_id=image_id,
        task=task,
        question=question,
        answer=answer,
        rationale=_phrase(rng, 4, 9),
        split="train" if rng.random() < 0.75 else "dev",
    )


def _feature_set(rng: np.random.Generator, image_id: str, feature_dim: int,
                 vc_dim: int, image_size: tuple[int, int],
                 roles: list[str]) -> VisualFeatureSet:
    w, h = image_size

    def box():
        x1 = float(rng.integers(0, w - 8))
        y1 = float(rng.integers(0, h - 8))
        x2 = float(rng.integers(int(x1) + 4, w))
        y2 = float(rng.integers(int(y1) + 4, h))
        return (x1, y1, x2, y2)

    def vec(dim):
        return rng.normal(size=dim).astype(np.float32)

    n_objects = int(rng.integers(2, 7))
    labels = [str(rng.choice(OBJECT_LABELS)) for _ in range(n_objects)]
    labels[0] = "person"  # people occur in every image, as in the source data
    if n_objects > 2:
        labels[-1] = labels[1]  # force a duplicate label
    detections = [RegionDetection(label=lbl, box=box(), feature=vec(feature_dim))
                  for lbl in labels]

    frame_roles = []
    n_roles = int(rng.integers(1, min(4, len(roles)) + 1))
    for name in rng.choice(roles, size=n_roles, replace=False):
        grounded = bool(rng.random() < 0.8) or not frame_roles  # first role grounded
        frame_roles.append(
            SituationRole(
                name=str(name),
                noun=str(rng.choice(ROLE_NOUNS)),
                box=box() if grounded else None,
                feature=vec(feature_dim) if grounded else None,
            )
        )

    inferences = CommonsenseInferences(
        before=[_phrase(rng, 2, 4) for _ in range(int(rng.integers(1, 7)))],
        after=[_phrase(rng, 2, 4) for _ in range(int(rng.integers(1, 7)))],
        intent=[_phrase(rng, 2, 4) for _ in range(int(rng.integers(1, 7)))],
        start_embeddings={rel: vec(vc_dim) for rel in CommonsenseInferences.RELATIONS},
    )

    return VisualFeatureSet(
        image_id=image_id,
        objects=ObjectDetections(
            image_size=image_size, feature_dim=feature_dim, objects=detections,
            whole_image=vec(feature_dim),
        ),
        situation=SituationFrame(
            verb=str(rng.choice(VERBS)), roles=frame_roles,
            place=str(rng.choice(PLACES)) if rng.random() < 0.8 else None,
        ),
        inferences=inferences,
    )


def _image(rng: np.random.Generator, path: Path, image_size: tuple[int, int]) -> None:
    w, h = image_size
    pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def generate_fixtures(out_dir: str | Path, seed: int = 0, n_per_task: int = 12,
                      feature_dim: int = 32, vc_dim: int = 16,
                      image_size: tuple[int, int] = (64, 48)) -> FixturePaths:
    """Write a complete synthetic dataset under out_dir and return its layout."""
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    roles = list(DEFAULT_ROLE_INVENTORY)

    instances: list[RationaleInstance] = []
    feature_sets: list[VisualFeatureSet] = []
    for task in (Task.VCR, Task.ESNLIVE, Task.VQAE):
        for index in range(n_per_task):
            image_id = f"{task.value}-img-{index:03d}"
            instances.append(_instance(rng, task, index, image_id))
            feature_sets.append(
                _feature_set(rng, image_id, feature_dim, vc_dim, image_size, roles)
            )
            _image(rng, images_dir / f"{image_id}.png", image_size)

    instances_path = out / "instances.jsonl"
    write_instances(instances_path, instances)
    feature_dir = out / "features"
    write_features(feature_dir, feature_sets)
    roles_path = out / "roles.txt"
    roles_path.write_text("\n".join(roles) + "\n")
    (out / "fixture_meta.json").write_text(json.dumps({
        "seed": seed,
        "n_per_task": n_per_task,
        "feature_dim": feature_dim,
        "vc_dim": vc_dim,
        "image_size": list(image_size),
    }, indent=1))
    return FixturePaths(
        root=out,
        instances=instances_path,
        feature_dir=feature_dir,
        roles=roles_path,
        images_dir=images_dir,
        n_instances=len(instances),
        n_images=len(feature_sets),
    )


def load_role_inventory(path: str | Path) -> list[str]:
    """Role names, one per line; blank lines and #-comments ignored."""
    roles = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            roles.append(line)
    return roles


def fixture_corpus(instances: list[RationaleInstance]) -> list[str]:
    """Training text for the subtoken vocabulary: instance text plus the word
    pools that feature serialization can produce."""
    corpus = []
    for inst in instances:
        corpus.extend([inst.question, inst.answer, inst.rationale])
    corpus.append(" ".join(OBJECT_LABELS + VERBS + PLACES + ROLE_NOUNS + WORDS))
    return corpus


def build_fixture_vocab(instances: list[RationaleInstance], role_inventory: list[str],
                        n_merges: int = 60) -> Vocabulary:
    inventory = SpecialTokenInventory.with_roles(role_inventory)
    reserved = len(inventory.all_tokens()) + 256
    return train_bpe(fixture_corpus(instances), target_size=reserved + n_merges,
                     specials=inventory)
