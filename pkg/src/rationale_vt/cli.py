"""Command line pipeline: fixtures, budgets, training, generation, evaluation.

Every subcommand writes a run manifest next to its output (command, resolved
parameters, seed, sha256 of each input, output paths, wall time) so any
artifact can be traced back to the exact invocation that produced it.

Exit codes: 0 on success, 1 on validation or IO failure (with a structured
JSON line on stderr), 2 on bad usage (argparse default).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from rationale_vt import __version__
from rationale_vt.feature_store import (
    FeatureStore,
    LengthLimits,
    Task,
    compute_length_limits,
    infer_feature_dims,
    load_instances,
)
from rationale_vt.fixtures import generate_fixtures, load_role_inventory
from rationale_vt.fusion import VARIANTS, build_sequence
from rationale_vt.judgments import (
    JudgmentRecord,
    LABELS,
    PlausibilityMode,
    aggregate_fidelity,
    aggregate_grammaticality,
    aggregate_plausibility,
    analyze_lengths,
    assemble_report,
    make_eval_items,
    plausibility_variation,
)
from rationale_vt.metrics import score_generations
from rationale_vt.model import (
    ModelConfig,
    TransformerLM,
    generate_greedy,
    load_checkpoint,
)
from rationale_vt.text_codec import (
    DEFAULT_ROLE_INVENTORY,
    SpecialTokenInventory,
    Vocabulary,
    train_bpe,
)
from rationale_vt.trainer import TrainConfig, train
from rationale_vt.validation import ValidationError


def default_home() -> Path:
    return Path(os.environ.get("RATIONALE_VT_HOME", "~/.rationale_vt")).expanduser()


def variant_string(mode: str, source: Optional[str]) -> str:
    return mode if source is None else f"{mode}:{source}"


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_path(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return _hash_file(path)
    digest = hashlib.sha256()
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(str(child.relative_to(path)).encode())
        digest.update(bytes.fromhex(_hash_file(child)))
    return digest.hexdigest()


def write_manifest(manifest_path: Path, command: str, params: dict,
                   inputs: dict[str, Path], outputs: Sequence[Path],
                   seed: Optional[int], started: float) -> Path:
    finished = time.time()
    manifest = {
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "params": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in params.items()},
        "inputs": {
            name: {"path": str(p), "sha256": _hash_path(Path(p))}
            for name, p in inputs.items()
            if p is not None
        },
        "outputs": [str(p) for p in outputs],
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": round(finished - started, 3),
    }
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                             encoding="utf-8")
    return manifest_path


def _manifest_for(out: Path) -> Path:
    out = Path(out)
    if out.suffix:
        return out.with_name(out.name + ".manifest.json")
    return out / "run_manifest.json"


def _load_limits(path: Path) -> LengthLimits:
    return LengthLimits.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fixtures(args) -> int:
    started = time.time()
    out = Path(args.out or default_home() / "fixtures")
    paths = generate_fixtures(out, seed=args.seed, n_per_task=args.n_per_task,
                              feature_dim=args.feature_dim, vc_dim=args.vc_dim)
    write_manifest(
        _manifest_for(out), "fixtures",
        {"out": out, "n_per_task": args.n_per_task,
         "feature_dim": args.feature_dim, "vc_dim": args.vc_dim},
        inputs={}, outputs=[paths.instances, paths.feature_dir, paths.roles,
                            paths.images_dir],
        seed=args.seed, started=started,
    )
    print(json.dumps({"instances": str(paths.instances),
                      "n_instances": paths.n_instances,
                      "n_images": paths.n_images}))
    return 0


def cmd_limits(args) -> int:
    started = time.time()
    vocab = Vocabulary.load(args.vocab)
    instances = list(load_instances(args.instances, Task(args.task)))
    features = FeatureStore(args.features) if args.features else None
    limits = compute_length_limits(instances, vocab, percentile=args.percentile,
                                   features=features)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(limits.to_json(), indent=2), encoding="utf-8")
    inputs = {"instances": Path(args.instances), "vocab": Path(args.vocab)}
    if args.features:
        inputs["features"] = Path(args.features)
    write_manifest(_manifest_for(out), "limits",
                   {"task": args.task, "percentile": args.percentile},
                   inputs=inputs, outputs=[out], seed=args.seed, started=started)
    print(json.dumps(limits.to_json()))
    return 0


def _resolve_vocab(args, instances, out_dir: Path) -> tuple[Vocabulary, Path]:
    if args.vocab and Path(args.vocab).exists():
        return Vocabulary.load(args.vocab), Path(args.vocab)
    roles = (load_role_inventory(args.roles) if args.roles
             else list(DEFAULT_ROLE_INVENTORY))
    corpus = []
    for inst in instances:
        corpus.extend([inst.question, inst.answer, inst.rationale])
    specials = SpecialTokenInventory().with_roles(roles)
    target = len(specials.all_tokens()) + 256 + args.bpe_merges
    vocab = train_bpe(corpus, target_size=target, specials=specials)
    vocab_path = out_dir / "vocab.json"
    vocab.save(vocab_path)
    return vocab, vocab_path


def cmd_train(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = Task(args.task)
    all_instances = list(load_instances(args.instances, task))
    instances = [i for i in all_instances if i.split == "train"]
    if not instances:
        raise ValidationError(f"no train-split instances for task {task.value!r}")

    features = FeatureStore(args.features) if args.features else None
    if args.mode != "baseline" and features is None:
        raise ValidationError(f"mode {args.mode!r} needs --features")

    vocab, vocab_path = _resolve_vocab(args, instances, out)
    if args.limits and Path(args.limits).exists():
        limits, limits_path = _load_limits(args.limits), Path(args.limits)
    else:
        limits = compute_length_limits(instances, vocab, features=features)
        limits_path = out / "limits.json"
        limits_path.write_text(json.dumps(limits.to_json(), indent=2),
                               encoding="utf-8")

    feature_dim, vc_dim = infer_feature_dims(features)
    model_config = ModelConfig(
        vocab_size=len(vocab),
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_model=args.d_model,
        max_positions=args.max_positions,
        feature_dim=feature_dim,
        vc_dim=vc_dim,
        dropout=args.dropout,
        seed=args.seed,
    )
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        warmup_fraction=args.warmup_fraction,
        weight_decay=args.weight_decay,
        grad_clip=args.grad_clip,
        seed=args.seed,
        eval_every=args.eval_every,
        output_dir=str(out),
    )
    model = TransformerLM(model_config)
    result = train(model, instances, features, args.mode, args.source,
                   train_config, vocab, limits)

    inputs = {"instances": Path(args.instances)}
    if args.features:
        inputs["features"] = Path(args.features)
    write_manifest(
        _manifest_for(out), "train",
        {"task": args.task, "mode": args.mode, "source": args.source,
         "variant": variant_string(args.mode, args.source),
         "model": model_config.__dict__, "train": train_config.to_json()},
        inputs=inputs,
        outputs=[result.final_checkpoint, result.best_checkpoint,
                 vocab_path, limits_path],
        seed=args.seed, started=started,
    )
    print(json.dumps({
        "variant": variant_string(args.mode, args.source),
        "steps": result.steps,
        "final_loss": result.final_loss,
        "final_checkpoint": str(result.final_checkpoint),
        "best_checkpoint": str(result.best_checkpoint),
    }))
    return 0


def cmd_generate(args) -> int:
    started = time.time()
    model, meta = load_checkpoint(args.checkpoint)
    model.eval()
    vocab = Vocabulary.load(args.vocab)
    if meta.get("vocab_hash") and meta["vocab_hash"] != vocab.fingerprint():
        raise ValidationError(
            "vocabulary fingerprint does not match the checkpoint"
        )
    limits = _load_limits(args.limits)
    task = Task(args.task)
    instances = [i for i in load_instances(args.instances, task)
                 if args.split in ("all", i.split)]
    if not instances:
        raise ValidationError(f"no {args.split!r}-split instances to decode")
    features = FeatureStore(args.features) if args.features else None
    if args.mode != "baseline" and features is None:
        raise ValidationError(f"mode {args.mode!r} needs --features")

    variant = variant_string(args.mode, args.source)
    rows = []
    for inst in instances:
        fs = features.load_features(inst.image_id) if features is not None else None
        context = build_sequence(inst, vocab, limits, args.mode,
                                 source=args.source, features=fs,
                                 include_rationale=False)
        token_ids = generate_greedy(model, context, vocab, max_new=args.max_new)
        rows.append({
            "instance_id": inst.instance_id,
            "image_id": inst.image_id,
            "task": inst.task.value,
            "variant": variant,
            "rationale": vocab.decode_text(token_ids),
            "reference": inst.rationale,
        })
    out = Path(args.out)
    _write_jsonl(out, rows)
    inputs = {"checkpoint": Path(args.checkpoint),
              "instances": Path(args.instances),
              "vocab": Path(args.vocab), "limits": Path(args.limits)}
    if args.features:
        inputs["features"] = Path(args.features)
    write_manifest(_manifest_for(out), "generate",
                   {"task": args.task, "mode": args.mode, "source": args.source,
                    "split": args.split, "max_new": args.max_new,
                    "variant": variant},
                   inputs=inputs, outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"variant": variant, "generated": len(rows),
                      "out": str(out)}))
    return 0


def cmd_score(args) -> int:
    started = time.time()
    rows = _read_jsonl(args.generations)
    if not rows:
        raise ValidationError(f"no generations in {args.generations}")
    variants = {row.get("variant") for row in rows}
    if args.variant:
        variant = args.variant
    elif len(variants) == 1 and None not in variants:
        variant = variants.pop()
    else:
        raise ValidationError(
            "generations carry no single variant tag; pass --variant"
        )
    candidates = [row["rationale"] for row in rows]
    references = [row["reference"] for row in rows]
    report = score_generations(candidates, references)
    payload = {"variant": variant, "n_pairs": len(rows),
               "instance_ids": [row["instance_id"] for row in rows],
               **report.to_json()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True),
                   encoding="utf-8")
    write_manifest(_manifest_for(out), "score", {"variant": variant},
                   inputs={"generations": Path(args.generations)},
                   outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"variant": variant, "scores": report.scores}))
    return 0


def cmd_make_tasks(args) -> int:
    started = time.time()
    from rationale_vt.annotation_service import write_items

    rows = _read_jsonl(args.generations)
    if not rows:
        raise ValidationError(f"no generations in {args.generations}")
    task = Task(args.task)
    instances_by_id = {
        i.instance_id: i for i in load_instances(args.instances, task)
    }
    prefix = args.image_url_prefix.rstrip("/")
    items = make_eval_items(
        [(row["instance_id"], row["rationale"]) for row in rows],
        instances_by_id,
        image_ref_fn=lambda image_id: f"{prefix}/{image_id}.png",
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_items(out, items)
    write_manifest(_manifest_for(out), "make-tasks",
                   {"task": args.task, "image_url_prefix": prefix},
                   inputs={"generations": Path(args.generations),
                           "instances": Path(args.instances)},
                   outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"items": len(items), "out": str(out)}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from rationale_vt.annotation_service import TaskStore, create_app, load_items

    items = load_items(args.tasks)
    store = TaskStore(items, log_dir=Path(args.log_dir))
    app = create_app(
        store,
        images_dir=Path(args.images) if args.images else None,
        ui_dir=Path(args.ui) if args.ui else None,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_simulate_judgments(args) -> int:
    """Synthetic worker pool for pipeline rehearsal without human annotators."""
    started = time.time()
    from rationale_vt.annotation_service import TaskStore, load_items

    items = load_items(args.tasks)
    store = TaskStore(items)
    rng = random.Random(args.seed)
    workers = [f"sim-worker-{i}" for i in range(args.workers)]
    live = list(workers)
    while live:
        worker = rng.choice(live)
        assignment = store.next_task(worker)
        if assignment is None:
            live.remove(worker)
            continue
        item, _ = assignment
        textual = rng.choices(LABELS, weights=(5, 2, 1, 2))[0]
        store.record_textual(item.item_id, worker, textual)
        store.image_ref(item.item_id, worker)
        offered = sorted(item.offered_phrases.all_phrases())
        n_picked = rng.randint(0, min(2, len(offered))) if offered else 0
        record = JudgmentRecord(
            item_id=item.item_id,
            worker_id=worker,
            textual_plausibility=textual,
            visual_plausibility=rng.choices(LABELS, weights=(5, 2, 1, 2))[0],
            grammatical=rng.choices(LABELS, weights=(8, 2, 1, 1))[0],
            unrelated_content=rng.choices(LABELS, weights=(1, 1, 2, 6))[0],
            unrelated_phrases=rng.sample(offered, n_picked),
            timestamp=float(1700000000 + store.seq),
        )
        store.submit(record)
    records = [r.to_json() for r in store.export_records()]
    out = Path(args.out)
    _write_jsonl(out, records)
    write_manifest(_manifest_for(out), "simulate-judgments",
                   {"workers": args.workers},
                   inputs={"tasks": Path(args.tasks)},
                   outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"judgments": len(records), "out": str(out)}))
    return 0


def cmd_aggregate(args) -> int:
    started = time.time()
    from rationale_vt.annotation_service import load_items

    records = [JudgmentRecord.from_json(row) for row in _read_jsonl(args.judgments)]
    if not records:
        raise ValidationError(f"no judgment records in {args.judgments}")
    items = load_items(args.tasks)

    fidelity = aggregate_fidelity(records, items)
    measures = {
        "visual_plausibility": aggregate_plausibility(records, PlausibilityMode.VISUAL),
        "textual_plausibility": aggregate_plausibility(records, PlausibilityMode.TEXTUAL),
        "grammaticality": aggregate_grammaticality(records),
        "fidelity_overall": fidelity.overall,
        "fidelity_entity": fidelity.entity,
        "fidelity_entity_detail": fidelity.entity_detail,
        "fidelity_action": fidelity.action,
    }
    variation = plausibility_variation(records)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        length_fn = lambda text: len(vocab.encode(text))
    else:
        length_fn = lambda text: len(text.split())
    lengths = analyze_lengths(items, records, length_fn=length_fn)
    payload = {
        "variant": args.variant,
        "measures": measures,
        "variation": variation.to_json(),
        "length_analysis": lengths,
        "exclusions": {
            "items_without_nouns": fidelity.items_without_nouns,
            "items_without_noun_phrases": fidelity.items_without_noun_phrases,
            "items_without_verb_phrases": fidelity.items_without_verb_phrases,
        },
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True),
                   encoding="utf-8")
    inputs = {"judgments": Path(args.judgments), "tasks": Path(args.tasks)}
    if args.vocab:
        inputs["vocab"] = Path(args.vocab)
    write_manifest(_manifest_for(out), "aggregate", {"variant": args.variant},
                   inputs=inputs, outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"variant": args.variant, "measures": measures}))
    return 0


def cmd_report(args) -> int:
    started = time.time()
    variant_measures: dict[str, dict] = {}
    for path in args.inputs:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        variant = payload.get("variant")
        if not variant:
            raise ValidationError(f"{path} carries no variant tag")
        measures = payload.get("scores") or payload.get("measures")
        if not isinstance(measures, dict):
            raise ValidationError(f"{path} has neither scores nor measures")
        variant_measures.setdefault(variant, {}).update(
            {k: v for k, v in measures.items() if not isinstance(v, (dict, list))}
        )
    table = assemble_report(variant_measures)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2, sort_keys=True), encoding="utf-8")
    write_manifest(_manifest_for(out), "report",
                   {"n_inputs": len(args.inputs)},
                   inputs={f"input_{i}": Path(p)
                           for i, p in enumerate(args.inputs)},
                   outputs=[out], seed=args.seed, started=started)
    print(json.dumps({"variants": len(table["rows"]),
                      "columns": table["columns"]}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rationale-vt",
        description="train and evaluate visually conditioned rationale generators",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="single RNG seed shared by every stochastic stage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", parents=[common],
                       help="generate a synthetic dataset with features and images")
    p.add_argument("--out", default=None)
    p.add_argument("--n-per-task", type=int, default=12)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--vc-dim", type=int, default=16)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("limits", parents=[common],
                       help="derive per-element token budgets from a corpus")
    p.add_argument("--instances", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--percentile", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_limits)

    p = sub.add_parser("train", parents=[common],
                       help="fit one fusion variant on the train split")
    p.add_argument("--instances", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--mode", required=True,
                   choices=sorted({m for m, _ in VARIANTS}))
    p.add_argument("--source", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--limits", default=None)
    p.add_argument("--roles", default=None)
    p.add_argument("--bpe-merges", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=5e-5)
    p.add_argument("--warmup-fraction", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--max-positions", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common],
                       help="greedy-decode rationales from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--mode", required=True,
                   choices=sorted({m for m, _ in VARIANTS}))
    p.add_argument("--source", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--limits", required=True)
    p.add_argument("--split", default="dev", choices=["train", "dev", "all"])
    p.add_argument("--max-new", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", parents=[common],
                       help="compute text-overlap measures for generations")
    p.add_argument("--generations", required=True)
    p.add_argument("--variant", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("make-tasks", parents=[common],
                       help="turn generations into annotation task items")
    p.add_argument("--generations", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--image-url-prefix", default="/images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_tasks)

    p = sub.add_parser("serve", parents=[common],
                       help="run the annotation HTTP service")
    p.add_argument("--tasks", required=True)
    p.add_argument("--log-dir", required=True)
    p.add_argument("--images", default=None)
    p.add_argument("--ui", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("simulate-judgments", parents=[common],
                       help="drive synthetic workers through the full protocol")
    p.add_argument("--tasks", required=True)
    p.add_argument("--workers", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_judgments)

    p = sub.add_parser("aggregate", parents=[common],
                       help="aggregate judgment records into study measures")
    p.add_argument("--judgments", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("report", parents=[common],
                       help="merge score and aggregate files into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
