"""xferkit: managed data transfer across diverse storage systems."""

__version__ = "0.1.0"

from .connectors import (Credential, CredentialKind, HostContext,
                         MockCloudProfile, ObjectStoreConfig, StatEntry,
                         get_connector, register_connector)
from .engine import (Engine, FileRecord, FileState, Integrity, LocalEndpoint,
                     TaskState, TransferSpec, TransferTask, verify_file)
from .ranges import ByteRangeSet

__all__ = [
    "ByteRangeSet", "Credential", "CredentialKind", "Engine", "FileRecord",
    "FileState", "HostContext", "Integrity", "LocalEndpoint",
    "MockCloudProfile", "ObjectStoreConfig", "StatEntry", "TaskState",
    "TransferSpec", "TransferTask", "get_connector", "register_connector",
    "verify_file", "__version__",
]
