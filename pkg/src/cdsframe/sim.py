"""Deterministic in-process simulation of gateway, TTP and provider.

All three services run in one process, wired by in-memory links that carry
the same frames as TCP.  Every random draw comes from streams derived from
the scenario seed, so a scenario replays to a byte-identical transcript.

Scenario files are JSON objects::

    {"name": "...", "seed": 7,
     "script": [{"op": "register", "user": "alice", "password": "pw"}, ...],
     "expectations": [{"step": 0, "expect": {"status": "ok"}}, ...]}

Each script step produces an outcome dict; an expectation names a step and
the subset of outcome fields that must match.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import random
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import crypto
from .client import ClientSession
from .errors import CDSError, RemoteError
from .gateway import GatewayConfig, GatewayService
from .protocol import HEADER, MESSAGE_TYPES, Envelope, decode_frame, encode_frame
from .provider import ProviderConfig, ProviderService
from .transport import MemoryLink, Transcript
from .trust import ActionClass, TrustConfig
from .ttp import TtpConfig, TtpService

SCENARIO_DIR = Path(__file__).parent / "scenarios"
TRUST_TOLERANCE = 1e-12


@dataclass
class Scenario:
    name: str
    seed: int
    script: List[Dict[str, Any]]
    expectations: List[Dict[str, Any]] = field(default_factory=list)
    settings: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "Scenario":
        return cls(obj["name"], int(obj.get("seed", 0)), list(obj["script"]),
                   list(obj.get("expectations", [])), dict(obj.get("settings", {})))

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    outcomes: List[Dict[str, Any]]
    transcript: Transcript
    failure: Optional[str] = None
    failed_step: Optional[int] = None
    leaks: List[str] = field(default_factory=list)


class SimHarness:
    """Wires the three services over in-memory links under one seed."""

    def __init__(self, seed: int, workdir, *, fragment_size: int = crypto.DEFAULT_FRAGMENT_SIZE,
                 key_bits: int = crypto.DEFAULT_KEY_BITS, mac_keys: int = 16,
                 hash_iterations: int = 10_000, trust: Optional[TrustConfig] = None):
        self.seed = seed
        self.workdir = Path(workdir)
        self.transcript = Transcript()
        self._rngs = {name: random.Random(f"{seed}/{name}") for name in ("gateway", "ttp", "client", "data")}
        self.ttp_config = TtpConfig(root=self.workdir / "ttp", fragment_size=fragment_size,
                                    key_bits=key_bits, mac_keys=mac_keys)
        self.gateway_config = GatewayConfig(state_dir=self.workdir / "gateway",
                                            hash_iterations=hash_iterations, trust=trust or TrustConfig())
        self.provider = ProviderService(ProviderConfig(root=self.workdir / "provider", test_mode=True))
        self.provider_link = MemoryLink("ttp~provider", self.provider, self.transcript)
        self.adversary_link = MemoryLink("adversary~provider", self.provider, self.transcript)
        self._build_ttp()
        self._build_gateway()

    def _build_ttp(self):
        self.ttp = TtpService(self.ttp_config, self.provider_link, self._rngs["ttp"])
        self.ttp_link = MemoryLink("gateway~ttp", self.ttp, self.transcript)

    def _build_gateway(self):
        link = getattr(self, "ttp_link", None)
        self.gateway = GatewayService(self.gateway_config, link, self._rngs["gateway"])
        self.client_link = MemoryLink("client~gateway", self.gateway, self.transcript)

    @property
    def data_rng(self) -> random.Random:
        return self._rngs["data"]

    def restart_ttp(self) -> None:
        """Rebuild the TTP from its on-disk state; links keep their names."""
        down = self.ttp_link.down
        self._build_ttp()
        self.ttp_link.down = down
        self.gateway.ttp = self.ttp_link

    def restart_gateway(self) -> None:
        self._build_gateway()

    def new_client(self) -> ClientSession:
        sid = f"c-{self._rngs['client'].randbytes(6).hex()}"
        return ClientSession(self.client_link(), session_id=sid)

    def tamper(self, file_id: str, index: int, byte_offset: int, xor_value: int) -> None:
        env = Envelope("MA2_TAMPER", f"adv-{self._rngs['client'].randbytes(4).hex()}", 1,
                       {"file_id": file_id, "index": index, "byte_offset": byte_offset, "xor_value": xor_value})
        with self.adversary_link() as conn:
            conn.call(env)

    def stored_files(self, which: str = "provider"):
        root = self.workdir / which
        return [p for p in sorted(root.rglob("*")) if p.is_file()]


def plaintext_leaks(plaintexts: List[bytes], files, window: int = 8) -> List[str]:
    """Files containing any ``window``-byte slice of any plaintext."""
    windows = set()
    for pt in plaintexts:
        for i in range(len(pt) - window + 1):
            windows.add(pt[i:i + window])
    if not windows:
        return []
    hits = []
    for path in files:
        blob = Path(path).read_bytes()
        if any(blob[i:i + window] in windows for i in range(len(blob) - window + 1)):
            hits.append(str(path))
    return hits


class _Runner:
    def __init__(self, harness: SimHarness):
        self.h = harness
        self.session: Optional[ClientSession] = None
        self.files: Dict[str, str] = {}
        self.data: Dict[str, bytes] = {}
        self.plaintexts: List[bytes] = []
        self.customer_id: Optional[str] = None

    def _need_session(self) -> ClientSession:
        if self.session is None:
            self.session = self.h.new_client()
        return self.session

    def _trust(self) -> Dict[str, Any]:
        if self.customer_id is None:
            return {}
        s = self.h.gateway.trust.get(self.customer_id)
        return {"trust": s.trust_degree, "category": s.category.value}

    def run(self, step: Dict[str, Any]) -> Dict[str, Any]:
        op = step["op"]
        try:
            out = getattr(self, f"op_{op}")(step)
            out.setdefault("status", "ok")
        except RemoteError as exc:
            out = {"status": "error", "code": exc.code}
        except CDSError as exc:
            out = {"status": "error", "code": exc.code}
        out.update(self._trust())
        return out

    def op_register(self, step):
        self.session = self.h.new_client()
        self.customer_id = self.session.register(step["user"], step["password"])
        return {}

    def op_login(self, step):
        self.session = self.h.new_client()
        self.customer_id = self.session.login(step["user"], step["password"])
        return {}

    def op_put(self, step):
        if "text" in step:
            data = step["text"].encode()
        else:
            data = self.h.data_rng.randbytes(int(step["size"]))
        label = step.get("as", step.get("name", "file"))
        # scanned for leaks even if the store fails half way
        self.plaintexts.append(data)
        file_id = self._need_session().put(step.get("name", label), data)
        self.files[label], self.data[label] = file_id, data
        return {"fragments": self.h.ttp.manifests.load(file_id).fragment_count}

    def _file_id(self, step) -> str:
        return self.files.get(step["file"], step["file"])

    def op_get(self, step):
        name, data = self._need_session().get(self._file_id(step))
        expected = self.data.get(step["file"])
        return {"roundtrip": expected is not None and data == expected, "length": len(data)}

    def op_check(self, step):
        ok, bad = self._need_session().check(self._file_id(step))
        return {"ok": ok, "corrupted": bad}

    def op_tamper(self, step):
        self.h.tamper(self._file_id(step), int(step["index"]), int(step.get("offset", 0)), int(step.get("xor", 1)))
        return {}

    def op_malformed(self, step):
        """Push a garbage frame down the current customer session."""
        kind = step.get("kind", "json")
        sess = self._need_session()
        seq = sess.state.next_seq_out
        if kind == "json":
            body = b"{not json"
        elif kind == "type":
            body = json.dumps({"type": "BOGUS", "session_id": sess.state.session_id,
                               "seq": seq, "payload": {}}).encode()
        else:
            raise ValueError(f"unknown malformed kind {kind!r}")
        reply = decode_frame(sess.connection.send_frame(HEADER.pack(len(body)) + body))
        return {"status": "error" if reply.is_error else "ok", "code": reply.payload.get("code")}

    def op_violate(self, step):
        """Send a legal frame that breaks the session FSM (re-auth while authenticated)."""
        sess = self._need_session()
        env = Envelope(step.get("type", "AUTH_REQ"), sess.state.session_id, sess.state.next_seq_out,
                       step.get("payload", {"username": "x", "password": "y"}))
        sess.state = dataclasses.replace(sess.state, next_seq_out=env.seq + 1)
        reply = sess.connection.request(env)
        return {"status": "error" if reply.is_error else "ok", "code": reply.payload.get("code")}

    def op_trust_actions(self, step):
        for name in step["classes"]:
            self.h.gateway.trust.record(self.customer_id, ActionClass(name), "scripted")
        return {}

    def op_provider_down(self, step):
        self.h.provider_link.down = True
        return {}

    def op_provider_up(self, step):
        self.h.provider_link.down = False
        return {}

    def op_ttp_down(self, step):
        self.h.ttp_link.down = True
        return {}

    def op_ttp_up(self, step):
        self.h.ttp_link.down = False
        return {}

    def op_restart_ttp(self, step):
        self.h.restart_ttp()
        return {}

    def op_restart_gateway(self, step):
        self.h.restart_gateway()
        self.session = None
        return {}


def _matches(expected: Dict[str, Any], actual: Dict[str, Any]) -> Optional[str]:
    for key, want in expected.items():
        got = actual.get(key)
        if key == "trust" and isinstance(got, float):
            if abs(got - want) > TRUST_TOLERANCE:
                return f"{key}: expected {want!r}, got {got!r}"
        elif got != want:
            return f"{key}: expected {want!r}, got {got!r}"
    return None


def run_scenario(scenario: Scenario, workdir=None) -> ScenarioResult:
    """Execute every script step in order, checking expectations as they fall due."""
    with tempfile.TemporaryDirectory(prefix=f"cds-{scenario.name}-") as tmp:
        harness = SimHarness(scenario.seed, Path(workdir or tmp), **scenario.settings)
        runner = _Runner(harness)
        due: Dict[int, List[Dict[str, Any]]] = {}
        for exp in scenario.expectations:
            due.setdefault(int(exp["step"]), []).append(exp["expect"])
        outcomes: List[Dict[str, Any]] = []
        result = ScenarioResult(scenario.name, True, outcomes, harness.transcript)
        for i, step in enumerate(scenario.script):
            outcome = runner.run(step)
            outcomes.append(outcome)
            for want in due.get(i, []):
                problem = _matches(want, outcome)
                if problem and result.passed:
                    result.passed = False
                    result.failed_step = i
                    result.failure = f"step {i} ({step['op']}): {problem}"
        result.leaks = plaintext_leaks(runner.plaintexts, harness.stored_files("provider") + harness.stored_files("ttp"))
        if result.leaks and result.passed:
            result.passed = False
            result.failure = f"plaintext found at rest in {result.leaks[0]}"
        return result


def list_scenarios(directory: Path = SCENARIO_DIR) -> List[Path]:
    return sorted(Path(directory).glob("*.json"))


def load_scenario(name: str, directory: Path = SCENARIO_DIR) -> Scenario:
    path = Path(name)
    if not path.suffix:
        path = Path(directory) / f"{name}.json"
    return Scenario.load(path)


# ---------------------------------------------------------------------------
# decoder fuzzing
# ---------------------------------------------------------------------------

@dataclass
class FuzzReport:
    total: int
    crashes: int
    outcomes: Dict[str, int]
    first_crash: Optional[bytes] = None


def _seed_frames() -> List[bytes]:
    frames = []
    for i, mtype in enumerate(sorted(MESSAGE_TYPES)):
        payload = {}
        for name, kind in MESSAGE_TYPES[mtype].items():
            payload[name] = {str: "x", int: 1, bool: True, list: []}[kind]
        frames.append(encode_frame(Envelope(mtype, f"s{i}", i, payload)))
    return frames


def fuzz_decoder(n: int, seed: int = 0) -> FuzzReport:
    """Feed ``n`` hostile byte strings to ``decode_frame``; count non-protocol exceptions."""
    rng = random.Random(seed)
    seeds = _seed_frames()
    outcomes: Dict[str, int] = {}
    crashes = 0
    first = None
    for i in range(n):
        mode = i % 3
        if mode == 0:
            blob = rng.randbytes(rng.randrange(0, 48))
        elif mode == 1:
            body = rng.randbytes(rng.randrange(0, 48))
            blob = HEADER.pack(len(body) + rng.choice((0, 0, 0, 1, -1 if body else 0))) + body
        else:
            blob = bytearray(rng.choice(seeds))
            for _ in range(rng.randrange(1, 4)):
                blob[rng.randrange(len(blob))] = rng.randrange(256)
            if rng.random() < 0.2:
                blob = blob[:rng.randrange(len(blob) + 1)]
            blob = bytes(blob)
        try:
            decode_frame(blob)
            label = "ok"
        except CDSError as exc:
            label = type(exc).__name__
        except Exception:  # noqa: BLE001 - anything else is a decoder bug
            crashes += 1
            label = "CRASH"
            if first is None:
                first = blob
        outcomes[label] = outcomes.get(label, 0) + 1
    return FuzzReport(n, crashes, outcomes, first)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cds-sim", description="Run deterministic CDS scenarios.")
    group = ap.add_mutually_exclusive_group(required=True)
    group.add_argument("--scenario", help="scenario name (under scenarios/) or path to a JSON file")
    group.add_argument("--all", action="store_true", help="run every bundled scenario")
    group.add_argument("--fuzz", type=int, metavar="N", help="fuzz the frame decoder with N inputs")
    ap.add_argument("--seed", type=int, help="override the scenario seed")
    ap.add_argument("--dir", type=Path, default=SCENARIO_DIR, help="scenario directory")
    ap.add_argument("--transcript", type=Path, help="write the transcript of a single scenario here")
    args = ap.parse_args(argv)

    if args.fuzz is not None:
        report = fuzz_decoder(args.fuzz, args.seed or 0)
        print(f"fuzzed {report.total} inputs: {report.crashes} crashes; {report.outcomes}")
        return 0 if report.crashes == 0 else 1

    paths = list_scenarios(args.dir) if args.all else [None]
    failed = 0
    for path in paths:
        sc = Scenario.load(path) if path else load_scenario(args.scenario, args.dir)
        if args.seed is not None:
            sc.seed = args.seed
        res = run_scenario(sc)
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {sc.name} (seed {sc.seed}, {len(res.transcript.records)} frames)"
              + ("" if res.passed else f": {res.failure}"))
        failed += not res.passed
        if args.transcript and not args.all:
            args.transcript.write_bytes(res.transcript.dump())
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
