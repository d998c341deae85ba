"""Connector registry: backends are looked up by name string."""

from __future__ import annotations

from ..errors import ConfigInvalid
from .base import (DEFAULT_BLOCKSIZE, MIN_BLOCKSIZE, LOCAL_USER, CommandKind,
                   Connector, Credential, CredentialKind, EntryKind,
                   HostContext, Session, StatEntry, TransferOutcome)
from .mockcloud import MockCloudConnector, MockCloudProfile, mockcloud_connector
from .objectstore import (ObjectStoreConfig, ObjectStoreConnector,
                          object_connector)
from .posix import PosixConnector, file_digest

_registry: dict[str, Connector] = {}


def register_connector(name: str, connector: Connector) -> None:
    _registry[name] = connector


def get_connector(name: str) -> Connector:
    try:
        return _registry[name]
    except KeyError:
        raise ConfigInvalid(f"unknown connector {name!r}; "
                            f"registered: {sorted(_registry)}")


def connector_names() -> list[str]:
    return sorted(_registry)


register_connector("posix", PosixConnector())
register_connector("object", ObjectStoreConnector())
register_connector("mockcloud", MockCloudConnector())

__all__ = [
    "CommandKind", "Connector", "Credential", "CredentialKind",
    "DEFAULT_BLOCKSIZE", "EntryKind", "HostContext", "LOCAL_USER",
    "MIN_BLOCKSIZE", "MockCloudConnector", "MockCloudProfile",
    "ObjectStoreConfig", "ObjectStoreConnector", "PosixConnector",
    "Session", "StatEntry", "TransferOutcome", "connector_names",
    "file_digest", "get_connector", "mockcloud_connector",
    "object_connector", "register_connector",
]
