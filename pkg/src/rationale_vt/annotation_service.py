"""Annotation task service: assignment with leases, two-stage reveal, export.

The store keeps every mutation in an append-only JSONL event log so a crashed
or restarted server reconstructs the exact same state by replay. Each item
collects at most three judgments, a worker touches an item at most once at a
time, and the image reference is only revealed after the worker has committed
a textual-plausibility answer for that item (the text-before-image protocol).

All mutations go through a single lock; reads never mutate, so replaying the
log yields bit-identical state regardless of when leases expired.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles

from rationale_vt.judgments import EvalItem, JudgmentError, JudgmentRecord, LABELS

LEASE_SECONDS = 30 * 60
JUDGMENTS_PER_ITEM = 3


class UnknownItemError(KeyError):
    pass


class ConflictError(Exception):
    """The item already holds its full complement of judgments."""


class OrderError(Exception):
    """A stage was requested before its prerequisite stage was completed."""


class TaskStore:
    """In-memory assignment state backed by an append-only event log.

    `clock` is injectable so tests can steer lease expiry deterministically.
    When `log_dir` is given, events.jsonl is replayed on construction and a
    snapshot.json is refreshed every `snapshot_every` events to bound recovery
    time; the log itself is never truncated.
    """

    def __init__(self, items: Sequence[EvalItem], log_dir: Optional[Path] = None,
                 clock: Callable[[], float] = time.time,
                 lease_seconds: float = LEASE_SECONDS,
                 snapshot_every: int = 25):
        ids = [item.item_id for item in items]
        if len(set(ids)) != len(ids):
            raise JudgmentError("duplicate item ids in task set")
        self.items: dict[str, EvalItem] = {item.item_id: item for item in items}
        self.order = ids
        self.clock = clock
        self.lease_seconds = lease_seconds
        self.snapshot_every = snapshot_every
        self.log_dir = Path(log_dir) if log_dir is not None else None

        self.completed: dict[str, list[JudgmentRecord]] = {i: [] for i in ids}
        self.leases: dict[str, dict[str, float]] = {i: {} for i in ids}
        self.textual: dict[str, dict[str, str]] = {i: {} for i in ids}
        self.seq = 0

        self._lock = threading.Lock()
        self._log_handle = None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.log_dir / "events.jsonl"
            if log_path.exists():
                self._replay(log_path)
            self._log_handle = log_path.open("a", encoding="utf-8")

    # -- event sourcing ------------------------------------------------------

    def _replay(self, log_path: Path) -> None:
        snapshot_path = self.log_dir / "snapshot.json"
        start_seq = 0
        if snapshot_path.exists():
            snap = json.loads(snapshot_path.read_text(encoding="utf-8"))
            self._restore_snapshot(snap)
            start_seq = self.seq
        with log_path.open(encoding="utf-8") as handle:
            for line in handle:
                event = json.loads(line)
                if event["seq"] <= start_seq:
                    continue
                self._apply(event)
                self.seq = event["seq"]

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "lease":
            self.leases[event["item_id"]][event["worker_id"]] = event["expires"]
        elif kind == "textual":
            self.textual[event["item_id"]][event["worker_id"]] = event["label"]
        elif kind == "judgment":
            record = JudgmentRecord.from_json(event["record"])
            self.completed[record.item_id].append(record)
            self.leases[record.item_id].pop(record.worker_id, None)
        else:
            raise JudgmentError(f"unknown event type {kind!r} in log")

    def _append(self, event: dict) -> None:
        self.seq += 1
        event = {"seq": self.seq, **event}
        self._apply(event)
        if self._log_handle is not None:
            self._log_handle.write(json.dumps(event, sort_keys=True) + "\n")
            self._log_handle.flush()
            if self.snapshot_every > 0 and self.seq % self.snapshot_every == 0:
                self._write_snapshot()

    def _write_snapshot(self) -> None:
        payload = {
            "seq": self.seq,
            "completed": {
                i: [r.to_json() for r in records]
                for i, records in self.completed.items()
            },
            "leases": self.leases,
            "textual": self.textual,
        }
        tmp = self.log_dir / "snapshot.json.tmp"
        tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
        tmp.replace(self.log_dir / "snapshot.json")

    def _restore_snapshot(self, snap: dict) -> None:
        self.seq = snap["seq"]
        for item_id, records in snap["completed"].items():
            self.completed[item_id] = [JudgmentRecord.from_json(r) for r in records]
        for item_id, leases in snap["leases"].items():
            self.leases[item_id] = dict(leases)
        for item_id, answers in snap["textual"].items():
            self.textual[item_id] = dict(answers)

    def state_digest(self) -> dict:
        """Canonical view of externally visible state, for replay testing."""
        return {
            "completed": {
                i: [r.to_json() for r in records]
                for i, records in self.completed.items()
            },
            "leases": {i: dict(v) for i, v in self.leases.items()},
            "textual": {i: dict(v) for i, v in self.textual.items()},
            "seq": self.seq,
        }

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None

    # -- assignment ----------------------------------------------------------

    def _active_leases(self, item_id: str, now: float) -> dict[str, float]:
        return {
            worker: expires
            for worker, expires in self.leases[item_id].items()
            if expires > now
        }

    def next_task(self, worker_id: str) -> Optional[tuple[EvalItem, float]]:
        """Assign the open item with the fewest completed judgments.

        A worker already holding a live lease gets the same item back with a
        renewed lease. Returns None when no item is available to this worker.
        """
        if not worker_id:
            raise JudgmentError("worker_id must be non-empty")
        with self._lock:
            now = self.clock()
            for item_id in self.order:
                if worker_id in self._active_leases(item_id, now):
                    return self._grant(item_id, worker_id, now)

            def openness(item_id: str) -> tuple[int, int]:
                return (
                    len(self.completed[item_id]),
                    len(self._active_leases(item_id, now)),
                )

            candidates = []
            for item_id in self.order:
                done = self.completed[item_id]
                if len(done) >= JUDGMENTS_PER_ITEM:
                    continue
                if any(r.worker_id == worker_id for r in done):
                    continue
                active = self._active_leases(item_id, now)
                if len(done) + len(active) >= JUDGMENTS_PER_ITEM:
                    continue
                candidates.append(item_id)
            if not candidates:
                return None
            candidates.sort(key=lambda i: (openness(i), self.order.index(i)))
            return self._grant(candidates[0], worker_id, now)

    def _grant(self, item_id: str, worker_id: str, now: float) -> tuple[EvalItem, float]:
        expires = now + self.lease_seconds
        self._append(
            {"type": "lease", "item_id": item_id, "worker_id": worker_id,
             "expires": expires}
        )
        return self.items[item_id], expires

    # -- two-stage reveal ------------------------------------------------------

    def record_textual(self, item_id: str, worker_id: str, label: str) -> None:
        if item_id not in self.items:
            raise UnknownItemError(item_id)
        if label not in LABELS:
            raise JudgmentError(f"label must be one of {LABELS}, got {label!r}")
        with self._lock:
            if worker_id not in self.leases[item_id]:
                raise OrderError(
                    f"worker {worker_id!r} was never assigned item {item_id!r}"
                )
            self._append(
                {"type": "textual", "item_id": item_id, "worker_id": worker_id,
                 "label": label}
            )

    def image_ref(self, item_id: str, worker_id: str) -> str:
        if item_id not in self.items:
            raise UnknownItemError(item_id)
        if worker_id not in self.textual[item_id]:
            raise OrderError(
                "image is only revealed after the textual answer is recorded"
            )
        return self.items[item_id].image_ref

    # -- judgment submission ----------------------------------------------------

    def submit(self, record: JudgmentRecord) -> dict:
        if record.item_id not in self.items:
            raise UnknownItemError(record.item_id)
        item = self.items[record.item_id]
        record.check_phrases(item)
        with self._lock:
            done = self.completed[record.item_id]
            for index, existing in enumerate(done):
                if existing.worker_id == record.worker_id:
                    # resubmission: hand back the original ack unchanged
                    return self._ack(record.item_id, record.worker_id, index)
            if len(done) >= JUDGMENTS_PER_ITEM:
                raise ConflictError(
                    f"item {record.item_id!r} already has "
                    f"{JUDGMENTS_PER_ITEM} judgments"
                )
            stored = self.textual[record.item_id].get(record.worker_id)
            if stored is None:
                raise OrderError(
                    "judgment submitted before the textual answer stage"
                )
            if stored != record.textual_plausibility:
                raise JudgmentError(
                    f"textual_plausibility {record.textual_plausibility!r} does "
                    f"not match the answer given before the reveal ({stored!r})"
                )
            self._append({"type": "judgment", "record": record.to_json()})
            sequence = len(self.completed[record.item_id]) - 1
            return self._ack(record.item_id, record.worker_id, sequence)

    @staticmethod
    def _ack(item_id: str, worker_id: str, sequence: int) -> dict:
        return {
            "status": "accepted",
            "item_id": item_id,
            "worker_id": worker_id,
            "sequence": sequence,
        }

    # -- export -----------------------------------------------------------------

    def export_records(self) -> Iterable[JudgmentRecord]:
        for item_id in self.order:
            yield from self.completed[item_id]

    def progress(self) -> dict:
        return {
            "items": len(self.items),
            "judgments": sum(len(v) for v in self.completed.values()),
            "full_items": sum(
                len(v) >= JUDGMENTS_PER_ITEM for v in self.completed.values()
            ),
        }


def load_items(path: Path) -> list[EvalItem]:
    items = []
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                items.append(EvalItem.from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise JudgmentError(f"bad task item at line {line_no}: {exc}") from exc
    return items


def write_items(path: Path, items: Sequence[EvalItem]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for item in items:
            handle.write(json.dumps(item.to_json(), sort_keys=True) + "\n")


def create_app(store: TaskStore, images_dir: Optional[Path] = None,
               ui_dir: Optional[Path] = None) -> FastAPI:
    """FastAPI wrapper exposing the assignment protocol over HTTP."""
    app = FastAPI(title="rationale annotation service")
    app.state.store = store

    @app.exception_handler(UnknownItemError)
    async def _unknown(request: Request, exc: UnknownItemError):
        return JSONResponse({"detail": f"unknown item {exc.args[0]!r}"}, status_code=404)

    @app.exception_handler(ConflictError)
    async def _conflict(request: Request, exc: ConflictError):
        return JSONResponse({"detail": str(exc)}, status_code=409)

    @app.exception_handler(OrderError)
    async def _order(request: Request, exc: OrderError):
        return JSONResponse({"detail": str(exc)}, status_code=403)

    @app.exception_handler(JudgmentError)
    async def _invalid(request: Request, exc: JudgmentError):
        return JSONResponse({"detail": str(exc)}, status_code=422)

    @app.get("/health")
    def health():
        return {"status": "ok", **store.progress()}

    @app.get("/task")
    def get_task(worker: str = Query(min_length=1)):
        assignment = store.next_task(worker)
        if assignment is None:
            return Response(status_code=204)
        item, expires = assignment
        # the image reference stays server-side until the textual stage is done
        return {
            "item_id": item.item_id,
            "question": item.question,
            "answer": item.answer,
            "rationale": item.rationale,
            "offered_phrases": item.offered_phrases.to_json(),
            "lease_expires": expires,
        }

    @app.post("/task/{item_id}/textual")
    async def post_textual(item_id: str, request: Request):
        payload = await request.json()
        store.record_textual(item_id, str(payload.get("worker_id", "")),
                             str(payload.get("label", "")))
        return {"status": "recorded", "item_id": item_id}

    @app.get("/task/{item_id}/full")
    def get_full(item_id: str, worker: str = Query(min_length=1)):
        ref = store.image_ref(item_id, worker)
        item = store.items[item_id]
        return {
            "item_id": item.item_id,
            "question": item.question,
            "answer": item.answer,
            "rationale": item.rationale,
            "offered_phrases": item.offered_phrases.to_json(),
            "image_url": ref,
        }

    @app.post("/task/{item_id}/judgment")
    async def post_judgment(item_id: str, request: Request):
        payload = await request.json()
        payload["item_id"] = item_id
        try:
            record = JudgmentRecord.from_json(payload)
        except TypeError as exc:
            raise JudgmentError(f"malformed judgment payload: {exc}") from exc
        return store.submit(record)

    @app.get("/export")
    def export():
        lines = [json.dumps(r.to_json(), sort_keys=True)
                 for r in store.export_records()]
        body = "\n".join(lines)
        if body:
            body += "\n"
        return PlainTextResponse(body, media_type="application/x-ndjson")

    if images_dir is not None and Path(images_dir).is_dir():
        app.mount("/images", StaticFiles(directory=str(images_dir)), name="images")
    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
