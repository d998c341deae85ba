"""Parameterized mock-cloud connector for fault and latency injection.

Data lives in a local directory (same layout as the POSIX connector) but
every access pays a configurable per-file latency, flows through a shared
bandwidth cap and ops quota, and can fail with deterministic, seeded
faults. The per-file latency is the knob the performance-model benchmarks
recover as the fixed per-file overhead.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ..errors import AuthFailed, BackendThrottled, IOFault
from ..throttle import BandwidthGate, TokenBucket, precise_sleep
from .base import CommandKind, Connector, Credential, require_config
from .posix import PosixSession


@dataclass(frozen=True)
class MockCloudProfile:
    """Injected behavior; deterministic for a given seed and op sequence."""

    per_op_latency: float = 0.0  # seconds per file open/create and per stat
    bandwidth_cap: float | None = None  # bytes/second, None = unlimited
    quota: float | None = None  # ops/second, None = unlimited
    quota_burst: int = 1
    failure_rate: float = 0.0  # probability of an IOFault per block op
    seed: int = 0

    @classmethod
    def from_config(cls, config: dict[str, str]) -> "MockCloudProfile":
        def fget(key, default=None):
            return float(config[key]) if key in config else default

        return cls(
            per_op_latency=fget("latency_ms", 0.0) / 1000.0,
            bandwidth_cap=fget("bandwidth_bps"),
            quota=fget("quota_ops"),
            quota_burst=int(config.get("quota_burst", "1")),
            failure_rate=fget("failure_rate", 0.0),
            seed=int(config.get("seed", "0")),
        )


class _MockState:
    """Shared per-root state: buckets and deterministic fault counters."""

    def __init__(self, profile: MockCloudProfile):
        self.profile = profile
        self.gate = BandwidthGate(profile.bandwidth_cap) if profile.bandwidth_cap else None
        self.quota = TokenBucket(profile.quota, profile.quota_burst) if profile.quota else None
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    def fault_fires(self, path: str, op: str) -> bool:
        p = self.profile
        if p.failure_rate <= 0.0:
            return False
        key = f"{op}:{path}"
        with self._lock:
            n = self._counters.get(key, 0)
            self._counters[key] = n + 1
        digest = hashlib.sha256(f"{p.seed}|{path}|{op}|{n}".encode()).digest()
        fraction = int.from_bytes(digest[:8], "big") / 2**64
        return fraction < p.failure_rate


class MockCloudSession(PosixSession):
    def __init__(self, root: Path, credential: Credential, state: _MockState):
        super().__init__(root, credential)
        self._mock = state

    def _latency(self) -> None:
        delay = self._mock.profile.per_op_latency
        if delay > 0:
            precise_sleep(delay)

    def _take_quota_or_raise(self) -> None:
        bucket = self._mock.quota
        if bucket is not None and not bucket.try_take():
            raise BackendThrottled("mock-cloud ops quota exceeded")

    def _admit_block(self, path: str, op: str, length: int) -> int:
        """Per-block pacing. Returns how many throttle waits were needed."""
        waits = 0
        bucket = self._mock.quota
        if bucket is not None:
            while not bucket.try_take():
                waits += 1
                time.sleep(max(bucket.wait_time(), 0.001))
        if self._mock.gate is not None:
            self._mock.gate.take(length)
        if self._mock.fault_fires(path, op):
            raise IOFault(f"injected fault on {op} {path!r}")
        return waits

    def do_stat(self, path):
        self._latency()
        self._take_quota_or_raise()
        return super().do_stat(path)

    def do_command(self, kind: CommandKind, *args: str) -> str:
        if kind is CommandKind.CHECKSUM:
            self._latency()  # checksum opens the file
        self._take_quota_or_raise()
        return super().do_command(kind, *args)

    def do_send(self, path, host, sink):
        self._latency()  # file open
        retries = [0]

        def paced_sink(offset, payload):
            retries[0] += self._admit_block(path, "read", len(payload))
            sink(offset, payload)

        outcome = super().do_send(path, host, paced_sink)
        outcome.throttle_retries += retries[0]
        return outcome

    def do_recv(self, path, host, source):
        self._latency()  # file create/open
        retries = [0]

        def paced_source():
            for offset, payload in source:
                retries[0] += self._admit_block(path, "write", len(payload))
                yield offset, payload

        outcome = super().do_recv(path, host, paced_source())
        outcome.throttle_retries += retries[0]
        return outcome


class MockCloudConnector(Connector):
    name = "mockcloud"

    def __init__(self, profile: MockCloudProfile | None = None):
        self._profile = profile
        self._states: dict[str, tuple[Path, _MockState]] = {}
        self._lock = threading.Lock()

    def _state_for(self, root: str, config: dict[str, str]) -> tuple[Path, _MockState]:
        with self._lock:
            cached = self._states.get(root)
            if cached is None:
                os.makedirs(root, exist_ok=True)
                profile = self._profile or MockCloudProfile.from_config(config)
                cached = (Path(root).resolve(), _MockState(profile))
                self._states[root] = cached
            return cached

    def start(self, storage_config: dict[str, str], credential: Credential) -> MockCloudSession:
        require_config(storage_config, "root")
        if storage_config.get("auth_mode", "accept") == "reject":
            raise AuthFailed("mock-cloud configured to reject access")
        resolved, state = self._state_for(storage_config["root"], storage_config)
        return MockCloudSession(resolved, credential, state)


def mockcloud_connector(profile: MockCloudProfile | None = None) -> MockCloudConnector:
    return MockCloudConnector(profile)
