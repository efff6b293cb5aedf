import copy
import json
import shutil

import pytest

from cdsframe.errors import AuditInconclusive, Forbidden, IntegrityAlarm, KeyExhausted, NotFound, StoreFailed
from cdsframe.crypto import EncryptedFragment
from cdsframe.sim import SimHarness


def test_store_builds_manifest(harness):
    fid = harness.ttp.handle_store("cust", "doc.bin", harness.data_rng.randbytes(1000))
    m = harness.ttp.manifests.load(fid)
    assert m.fragment_count == 6 and m.original_length == 1000 and m.fragment_size == 190
    assert len(m.stored_macs) == 16 and all(len(row) == 6 for row in m.stored_macs)
    assert m.keypair.bits == 2048 and not any(m.mac_keys.used)
    assert len(fid) == 32 and int(fid, 16) >= 0


def test_empty_file(harness):
    fid = harness.ttp.handle_store("cust", "empty", b"")
    m = harness.ttp.manifests.load(fid)
    assert m.fragment_count == 1 and len(m.stored_macs) == 16 and len(m.stored_macs[0]) == 1
    assert harness.ttp.handle_retrieve("cust", fid) == ("empty", b"")


def test_provider_down_leaves_no_manifest(harness):
    harness.provider_link.down = True
    with pytest.raises(StoreFailed):
        harness.ttp.handle_store("cust", "x", b"data")
    assert list((harness.workdir / "ttp").iterdir()) == []


def test_provider_rejection_rolls_back(harness):
    # occupy the id the TTP is about to draw so the provider answers CONFLICT
    upcoming = copy.deepcopy(harness.ttp.rng).randbytes(16).hex()
    harness.provider.store_fragments(upcoming, [EncryptedFragment(0, b"squatter")])
    with pytest.raises(StoreFailed, match="CONFLICT|already stored"):
        harness.ttp.handle_store("cust", "y", b"other")
    assert list((harness.workdir / "ttp").iterdir()) == []


def test_duplicate_stores_get_distinct_ids(harness):
    a = harness.ttp.handle_store("cust", "x", b"same bytes")
    b = harness.ttp.handle_store("cust", "x", b"same bytes")
    assert a != b


def test_retrieve_roundtrip_and_access_control(harness):
    data = harness.data_rng.randbytes(4096)
    fid = harness.ttp.handle_store("cust", "big", data)
    assert harness.ttp.handle_retrieve("cust", fid) == ("big", data)
    with pytest.raises(Forbidden):
        harness.ttp.handle_retrieve("intruder", fid)
    with pytest.raises(NotFound):
        harness.ttp.handle_retrieve("cust", "0" * 32)


def test_retrieve_raises_alarm_on_tampered_or_missing_fragments(harness):
    fid = harness.ttp.handle_store("cust", "f", b"z" * 500)
    harness.provider.tamper(fid, 1, 0, 1)
    with pytest.raises(IntegrityAlarm):
        harness.ttp.handle_retrieve("cust", fid)
    harness.provider.tamper(fid, 1, 0, 1)
    assert harness.ttp.handle_retrieve("cust", fid)[1] == b"z" * 500
    (harness.workdir / "provider" / fid / "2").unlink()
    with pytest.raises(IntegrityAlarm):
        harness.ttp.handle_retrieve("cust", fid)


def test_check_detects_tamper_and_burns_keys(harness):
    fid = harness.ttp.handle_store("cust", "f", harness.data_rng.randbytes(1000))
    r = harness.ttp.handle_check("cust", fid)
    assert (r.ok, r.corrupted_indices, r.key_index) == (True, [], 0)
    harness.provider.tamper(fid, 3, 100, 0xFF)
    r = harness.ttp.handle_check("cust", fid)
    assert (r.ok, r.corrupted_indices, r.key_index) == (False, [3], 1)
    assert harness.ttp.manifests.load(fid).mac_keys.used[:3] == [True, True, False]


def test_check_on_vanished_file_reports_every_fragment(harness):
    fid = harness.ttp.handle_store("cust", "f", b"q" * 400)
    shutil.rmtree(harness.workdir / "provider" / fid)
    r = harness.ttp.handle_check("cust", fid)
    assert not r.ok and r.corrupted_indices == [0, 1, 2]


def test_key_exhaustion_and_restart(tmp_path):
    h = SimHarness(seed=5, workdir=tmp_path, mac_keys=3)
    fid = h.ttp.handle_store("cust", "f", b"abc")
    h.ttp.handle_check("cust", fid)
    h.restart_ttp()
    assert h.ttp.manifests.load(fid).mac_keys.used == [True, False, False]
    h.ttp.handle_check("cust", fid)
    h.ttp.handle_check("cust", fid)
    with pytest.raises(KeyExhausted, match="re-store"):
        h.ttp.handle_check("cust", fid)


def test_timeout_is_inconclusive_but_burns_the_key(harness):
    fid = harness.ttp.handle_store("cust", "f", b"abc")
    harness.provider_link.drop_replies = True
    with pytest.raises(AuditInconclusive):
        harness.ttp.handle_check("cust", fid)
    harness.provider_link.drop_replies = False
    assert harness.ttp.manifests.load(fid).mac_keys.used[0] is True
    assert harness.ttp.handle_check("cust", fid).key_index == 1


def test_check_moves_no_file_data(harness):
    data = harness.data_rng.randbytes(2000)
    fid = harness.ttp.handle_store("cust", "f", data)
    mark = len(harness.transcript.records)
    harness.ttp.handle_check("cust", fid)
    envs = [e for _, _, e in list(harness.transcript.envelopes())[mark:]]
    assert [e.type for e in envs] == ["MA2_MAC_CHALLENGE", "MA2_MAC_RESP"]
    assert sum(len(f) for _, _, f in harness.transcript.records[mark:]) < 2000


def test_manifest_files_hold_no_fragment_bytes(harness):
    data = harness.data_rng.randbytes(800)
    fid = harness.ttp.handle_store("cust", "f", data)
    d = harness.workdir / "ttp" / fid
    assert sorted(p.name for p in d.iterdir()) == ["keys", "manifest"]
    record = json.loads((d / "manifest").read_text())
    assert set(record) == {"file_id", "customer_id", "file_name", "original_length", "fragment_size",
                           "fragment_count", "keypair", "stored_macs"}
    stored = b"".join(p.read_bytes() for p in (harness.workdir / "provider" / fid).iterdir())
    blob = (d / "manifest").read_bytes() + (d / "keys").read_bytes()
    for i in range(0, len(stored) - 8, 8):
        assert stored[i:i + 8] not in blob
