from __future__ import annotations

import json
import math

import pytest

from bolt import store
from bolt.core import Censored, Domain, Exact, Observation, Trajectory
from bolt.encode import EditedSeq, JoinOp, JoinPlan
from bolt.oracle import gen_workload, heuristic_plan
from bolt.policy import FinetuneRecord, train_ngram


def sample_traj():
    p = JoinPlan((1, 0, 2), (JoinOp.HASH_JOIN, JoinOp.NESTED_LOOP))
    return Trajectory("q0001", [Observation(p, Exact(0.1), 1), Observation(p, Censored(1e300), 2)], 42)


def test_canonical_json_format():
    assert store.canonical_json({"b": 1, "a": [0.1, 2.0, True, None, "x"]}) == \
        '{"a":[0.10000000000000001,2.0,true,null,"x"],"b":1}'
    assert store.canonical_json(math.inf) == "Infinity"
    for x in (0.1, 1 / 3, 1e-300, 123456789.123, -2.5e17):
        assert float(store.canonical_json(x)) == x
    with pytest.raises(TypeError):
        store.canonical_json({1: 2})


def test_json_document_round_trip_and_corruption(tmp_path):
    path = tmp_path / "doc.json"
    store.save_json(path, "thing", {"x": [1, 2.5]})
    assert store.load_json(path, "thing") == {"x": [1, 2.5]}
    data = bytearray(path.read_bytes())
    i = data.index(b"2.5")
    data[i] = ord("3")
    path.write_bytes(bytes(data))
    with pytest.raises(store.CorruptFile):
        store.load_json(path, "thing")
    path.write_text("{not json")
    with pytest.raises(store.CorruptFile):
        store.load_json(path, "thing")


def test_kind_and_version_checked(tmp_path):
    path = tmp_path / "doc.json"
    store.save_json(path, "thing", {})
    with pytest.raises(store.CorruptFile):
        store.load_json(path, "other")
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(store.SchemaVersionMismatch):
        store.load_json(path, "thing")


def test_trajectory_round_trip(tmp_path):
    path = tmp_path / "t.jsonl"
    t = sample_traj()
    store.save_trajectory(path, t)
    assert store.load_trajectory(path) == t
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {
        "call": 1,
        "candidate": {"kind": "plan", "ops": [0, 1], "order": [1, 0, 2]},
        "outcome": {"kind": "exact", "value": 0.1},
    }
    first = path.read_bytes()
    store.save_trajectory(path, store.load_trajectory(path))
    assert path.read_bytes() == first


def test_flipped_byte_in_jsonl(tmp_path):
    path = tmp_path / "t.jsonl"
    store.save_trajectory(path, sample_traj())
    data = bytearray(path.read_bytes())
    data[data.index(b'"call":2') + 7] = ord("3")
    path.write_bytes(bytes(data))
    with pytest.raises(store.CorruptFile):
        store.load_trajectory(path)


def test_finetune_export_is_plain_messages(tmp_path):
    w = gen_workload(Domain.QUERY, 3, 0, n_relations=4)
    recs = [FinetuneRecord.for_candidate(Domain.QUERY, t.context_text, heuristic_plan(t)) for t in w.tasks]
    path = tmp_path / "ft.jsonl"
    store.save_finetune(path, recs)
    for line in path.read_text().splitlines():
        obj = json.loads(line)
        assert list(obj) == ["messages"]
        assert [m["role"] for m in obj["messages"]] == ["system", "user", "assistant"]
        assert all(set(m) == {"role", "content"} and isinstance(m["content"], str) for m in obj["messages"])
    assert store.load_finetune(path) == recs


def test_workload_and_policy_round_trip(tmp_path):
    w = gen_workload(Domain.SEQUENCE, 4, 2)
    store.save_workload(tmp_path / "w.json", w)
    assert store.load_workload(tmp_path / "w.json") == w
    recs = [FinetuneRecord.for_candidate(Domain.SEQUENCE, t.seed, EditedSeq(t.seed)) for t in w.tasks]
    pol = train_ngram(recs, name="BOLT-4")
    store.save_policy(tmp_path / "p.json", pol)
    assert store.load_policy(tmp_path / "p.json").to_dict() == pol.to_dict()


def test_manifest_lineage_must_grow():
    with pytest.raises(ValueError):
        store.RunManifest("r", "a", "b", {}, 2, [["BOLT-20", 20], ["BOLT-20", 20]])


def test_run_lock_is_exclusive(tmp_path):
    with store.run_lock(tmp_path):
        with pytest.raises(store.RunLocked):
            with store.run_lock(tmp_path):
                pass
    with store.run_lock(tmp_path):
        pass
