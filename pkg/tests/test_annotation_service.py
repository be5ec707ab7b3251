import json
import random

import pytest

from rationale_vt.annotation_service import (
    ConflictError,
    LEASE_SECONDS,
    OrderError,
    TaskStore,
    UnknownItemError,
    create_app,
    load_items,
    write_items,
)
from rationale_vt.judgments import EvalItem, JudgmentError, JudgmentRecord, PhraseLists


class FakeClock:
    def __init__(self, start=1000.0):
        self.t = start

    def now(self):
        return self.t

    def advance(self, seconds):
        self.t += seconds


def make_items(n=4):
    return [
        EvalItem(
            item_id=f"item-{i}",
            instance_id=f"inst-{i}",
            question="why is this happening",
            answer="because of the rain",
            rationale="the street is wet",
            image_ref=f"/images/img-{i}.png",
            offered_phrases=PhraseLists(
                nouns=["street"], noun_phrases=["the street"], verb_phrases=["is"]
            ),
        )
        for i in range(n)
    ]


def make_record(item_id, worker_id, textual="yes", **kwargs):
    fields = dict(
        item_id=item_id,
        worker_id=worker_id,
        textual_plausibility=textual,
        visual_plausibility="yes",
        grammatical="yes",
        unrelated_content="no",
        unrelated_phrases=[],
        timestamp=0.0,
    )
    fields.update(kwargs)
    return JudgmentRecord(**fields)


def full_flow(store, item_id, worker_id, textual="yes"):
    store.record_textual(item_id, worker_id, textual)
    store.image_ref(item_id, worker_id)
    return store.submit(make_record(item_id, worker_id, textual=textual))


# --- assignment --------------------------------------------------------------


def test_next_task_prefers_fewest_completed():
    clock = FakeClock()
    store = TaskStore(make_items(2), clock=clock.now)
    item, _ = store.next_task("w1")
    assert item.item_id == "item-0"
    full_flow(store, "item-0", "w1")
    # item-0 now has one judgment, so a fresh worker starts on item-1
    item, _ = store.next_task("w2")
    assert item.item_id == "item-1"


def test_same_worker_gets_same_item_while_leased():
    clock = FakeClock()
    store = TaskStore(make_items(3), clock=clock.now)
    first, expires_a = store.next_task("w1")
    clock.advance(60)
    second, expires_b = store.next_task("w1")
    assert second.item_id == first.item_id
    assert expires_b > expires_a


def test_lease_expiry_frees_capacity():
    clock = FakeClock()
    store = TaskStore(make_items(1), clock=clock.now)
    for w in ("w1", "w2", "w3"):
        assigned = store.next_task(w)
        assert assigned is not None
    assert store.next_task("w4") is None
    clock.advance(LEASE_SECONDS + 1)
    assigned = store.next_task("w4")
    assert assigned is not None and assigned[0].item_id == "item-0"


def test_worker_never_reassigned_completed_item():
    clock = FakeClock()
    store = TaskStore(make_items(1), clock=clock.now)
    store.next_task("w1")
    full_flow(store, "item-0", "w1")
    assert store.next_task("w1") is None


def test_exhausted_pool_returns_none():
    store = TaskStore(make_items(1))
    for w in ("w1", "w2", "w3"):
        store.next_task(w)
        full_flow(store, "item-0", w)
    assert store.next_task("w9") is None


def test_blank_worker_rejected():
    store = TaskStore(make_items(1))
    with pytest.raises(JudgmentError):
        store.next_task("")


# --- two-stage reveal ----------------------------------------------------------


def test_image_hidden_until_textual_stage():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    with pytest.raises(OrderError):
        store.image_ref("item-0", "w1")
    store.record_textual("item-0", "w1", "weak_no")
    assert store.image_ref("item-0", "w1") == "/images/img-0.png"


def test_textual_requires_assignment():
    store = TaskStore(make_items(1))
    with pytest.raises(OrderError):
        store.record_textual("item-0", "w1", "yes")


def test_textual_validates_label_and_item():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    with pytest.raises(JudgmentError):
        store.record_textual("item-0", "w1", "maybe")
    with pytest.raises(UnknownItemError):
        store.record_textual("nope", "w1", "yes")


# --- submission ------------------------------------------------------------------


def test_submit_happy_path_and_idempotent_resubmission():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    ack = full_flow(store, "item-0", "w1")
    assert ack == {"status": "accepted", "item_id": "item-0",
                   "worker_id": "w1", "sequence": 0}
    again = store.submit(make_record("item-0", "w1"))
    assert again == ack
    assert len(store.completed["item-0"]) == 1


def test_fourth_worker_conflicts():
    store = TaskStore(make_items(1))
    for w in ("w1", "w2", "w3"):
        store.next_task(w)
        full_flow(store, "item-0", w)
    store.leases["item-0"]["w4"] = store.clock() + 100
    store.record_textual("item-0", "w4", "yes")
    with pytest.raises(ConflictError):
        store.submit(make_record("item-0", "w4"))
    assert len(store.completed["item-0"]) == 3


def test_submit_unknown_item():
    store = TaskStore(make_items(1))
    with pytest.raises(UnknownItemError):
        store.submit(make_record("ghost", "w1"))


def test_submit_before_textual_stage():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    with pytest.raises(OrderError):
        store.submit(make_record("item-0", "w1"))


def test_submit_textual_answer_must_match_prereveal_answer():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    store.record_textual("item-0", "w1", "no")
    with pytest.raises(JudgmentError):
        store.submit(make_record("item-0", "w1", textual="yes"))


def test_submit_rejects_unoffered_phrase():
    store = TaskStore(make_items(1))
    store.next_task("w1")
    store.record_textual("item-0", "w1", "yes")
    with pytest.raises(JudgmentError):
        store.submit(make_record("item-0", "w1", unrelated_phrases=["the moon"]))


def test_export_round_trips_records():
    store = TaskStore(make_items(2))
    store.next_task("w1")
    full_flow(store, "item-0", "w1")
    records = list(store.export_records())
    assert len(records) == 1
    assert records[0].item_id == "item-0"


# --- persistence -----------------------------------------------------------------


def run_random_session(store, items, seed, n_workers=12, p_dup=0.2):
    """Drive workers through the full protocol in a random interleaving."""
    rng = random.Random(seed)
    clock = store.clock.__self__
    stages = {}
    acks = {}
    workers = [f"w{i}" for i in range(n_workers)]
    live = set(workers)
    while live:
        worker = rng.choice(sorted(live))
        if rng.random() < 0.15:
            clock.advance(rng.choice([10, 300, LEASE_SECONDS + 5]))
        state = stages.get(worker)
        if state is None:
            assignment = store.next_task(worker)
            if assignment is None:
                live.discard(worker)
                continue
            stages[worker] = ("leased", assignment[0].item_id)
        elif state[0] == "leased":
            label = rng.choice(["yes", "weak_yes", "weak_no", "no"])
            try:
                store.record_textual(state[1], worker, label)
            except OrderError:
                # lease record still exists; this only fires if never granted
                stages.pop(worker)
                continue
            stages[worker] = ("textual", state[1], label)
        elif state[0] == "textual":
            store.image_ref(state[1], worker)
            stages[worker] = ("seen", state[1], state[2])
        else:
            record = make_record(state[1], worker, textual=state[2])
            try:
                ack = store.submit(record)
            except ConflictError:
                stages.pop(worker)
                continue
            key = (state[1], worker)
            if key in acks:
                assert acks[key] == ack
            acks[key] = ack
            if rng.random() < p_dup:
                assert store.submit(record) == ack
            stages.pop(worker)
    return acks


def test_random_interleavings_respect_capacity(tmp_path):
    for seed in range(4):
        clock = FakeClock()
        items = make_items(6)
        log_dir = tmp_path / f"log-{seed}"
        store = TaskStore(items, log_dir=log_dir, clock=clock.now,
                          snapshot_every=7)
        run_random_session(store, items, seed)
        for item_id, records in store.completed.items():
            assert len(records) <= 3
            workers = [r.worker_id for r in records]
            assert len(set(workers)) == len(workers)
        store.close()

        replayed = TaskStore(items, log_dir=log_dir, clock=clock.now)
        assert replayed.state_digest() == store.state_digest()
        replayed.close()


def test_replay_without_snapshot_matches(tmp_path):
    clock = FakeClock()
    items = make_items(2)
    store = TaskStore(items, log_dir=tmp_path / "log", clock=clock.now,
                      snapshot_every=0)
    store.next_task("w1")
    full_flow(store, "item-0", "w1")
    second, _ = store.next_task("w2")
    store.record_textual(second.item_id, "w2", "no")
    store.close()
    assert not (tmp_path / "log" / "snapshot.json").exists()

    replayed = TaskStore(items, log_dir=tmp_path / "log", clock=clock.now)
    assert replayed.state_digest() == store.state_digest()
    assert replayed.textual[second.item_id]["w2"] == "no"
    replayed.close()


def test_snapshot_plus_tail_replay(tmp_path):
    clock = FakeClock()
    items = make_items(3)
    store = TaskStore(items, log_dir=tmp_path / "log", clock=clock.now,
                      snapshot_every=2)
    for w in ("w1", "w2"):
        item, _ = store.next_task(w)
        full_flow(store, item.item_id, w)
    store.close()
    assert (tmp_path / "log" / "snapshot.json").exists()

    replayed = TaskStore(items, log_dir=tmp_path / "log", clock=clock.now)
    assert replayed.state_digest() == store.state_digest()
    replayed.close()


def test_duplicate_item_ids_rejected():
    items = make_items(1) + make_items(1)
    with pytest.raises(JudgmentError):
        TaskStore(items)


def test_items_file_round_trip(tmp_path):
    items = make_items(3)
    path = tmp_path / "items.jsonl"
    write_items(path, items)
    assert load_items(path) == items
    path.write_text('{"item_id": "broken"}\n', encoding="utf-8")
    with pytest.raises(JudgmentError):
        load_items(path)


# --- HTTP layer --------------------------------------------------------------------


@pytest.fixture
def client(tmp_path):
    from fastapi.testclient import TestClient

    images = tmp_path / "images"
    images.mkdir()
    (images / "img-0.png").write_bytes(b"\x89PNG\r\n\x1a\nstub")
    store = TaskStore(make_items(2), clock=FakeClock().now)
    app = create_app(store, images_dir=images)
    with TestClient(app) as test_client:
        yield test_client


def http_flow(client, worker):
    task = client.get("/task", params={"worker": worker})
    if task.status_code == 204:
        return None
    body = task.json()
    assert "image_ref" not in body and "image_url" not in body
    item_id = body["item_id"]
    assert client.post(f"/task/{item_id}/textual",
                       json={"worker_id": worker, "label": "yes"}).status_code == 200
    full = client.get(f"/task/{item_id}/full", params={"worker": worker})
    assert full.status_code == 200
    assert full.json()["image_url"].startswith("/images/")
    record = make_record(item_id, worker).to_json()
    ack = client.post(f"/task/{item_id}/judgment", json=record)
    assert ack.status_code == 200
    return item_id, ack.json()


def test_health_endpoint(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["items"] == 2


def test_task_payload_hides_image_until_reveal(client):
    task = client.get("/task", params={"worker": "w1"}).json()
    item_id = task["item_id"]
    premature = client.get(f"/task/{item_id}/full", params={"worker": "w1"})
    assert premature.status_code == 403
    client.post(f"/task/{item_id}/textual",
                json={"worker_id": "w1", "label": "weak_yes"})
    assert client.get(f"/task/{item_id}/full",
                      params={"worker": "w1"}).status_code == 200


def test_http_full_flow_and_idempotent_ack(client):
    item_id, ack = http_flow(client, "w1")
    record = make_record(item_id, "w1").to_json()
    again = client.post(f"/task/{item_id}/judgment", json=record)
    assert again.json() == ack


def test_http_error_codes(client):
    assert client.get("/task").status_code == 422
    assert client.get("/task/nope/full", params={"worker": "w1"}).status_code == 404
    assert client.post("/task/nope/textual",
                       json={"worker_id": "w1", "label": "yes"}).status_code == 404
    task = client.get("/task", params={"worker": "w1"}).json()
    bad = client.post(f"/task/{task['item_id']}/textual",
                      json={"worker_id": "w1", "label": "dunno"})
    assert bad.status_code == 422


def test_http_fourth_worker_conflict(client):
    for w in ("w1", "w2", "w3", "w4", "w5", "w6"):
        assert http_flow(client, w) is not None
    # every item is now full; force an extra worker through the stages
    store = client.app.state.store
    item_id = store.order[0]
    store.leases[item_id]["w7"] = store.clock() + 100
    client.post(f"/task/{item_id}/textual",
                json={"worker_id": "w7", "label": "yes"})
    conflict = client.post(f"/task/{item_id}/judgment",
                           json=make_record(item_id, "w7").to_json())
    assert conflict.status_code == 409


def test_http_export_and_static(client):
    http_flow(client, "w1")
    export = client.get("/export")
    lines = [l for l in export.text.splitlines() if l]
    assert len(lines) == 1
    parsed = JudgmentRecord.from_json(json.loads(lines[0]))
    assert parsed.worker_id == "w1"
    image = client.get("/images/img-0.png")
    assert image.status_code == 200
    assert image.content.startswith(b"\x89PNG")


def test_http_exhaustion_returns_204(client):
    workers = [f"w{i}" for i in range(10)]
    results = [http_flow(client, w) for w in workers]
    assert any(r is None for r in results)
    assert client.get("/task", params={"worker": "fresh"}).status_code == 204
