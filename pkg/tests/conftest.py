import hashlib
import os
import random
from pathlib import Path

import pytest

from xferkit.connectors import LOCAL_USER
from xferkit.simserver import LinkProfile, ObjectStoreServer


def write_random_tree(root: Path, files: dict[str, int], seed: int = 0) -> dict[str, str]:
    """Create files (relative path -> size) under root; returns path -> sha256."""
    rng = random.Random(seed)
    digests = {}
    for rel, size in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = rng.randbytes(size)
        path.write_bytes(payload)
        digests[rel] = hashlib.sha256(payload).hexdigest()
    return digests


def tree_digests(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            rel = path.relative_to(root).as_posix()
            out[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture
def local_user():
    return LOCAL_USER


@pytest.fixture
def sim_server(tmp_path):
    server = ObjectStoreServer(str(tmp_path / "simstore")).start()
    yield server
    server.stop()


@pytest.fixture
def shaped_sim(tmp_path):
    profiles = {
        "local-dtn": LinkProfile(rtt=0.05, applies_to="local-dtn"),
        "cloud-dtn": LinkProfile(rtt=0.001, applies_to="cloud-dtn"),
    }
    server = ObjectStoreServer(str(tmp_path / "shapedstore"), profiles).start()
    yield server
    server.stop()
