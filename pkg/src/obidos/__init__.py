"""Selective hybrid ETL over hierarchical data sources, driven by replicasets."""

from .errors import ObidosError
from .etl import EagerEtl, Engine, LazyEtl, LoadReport, is_null
from .model import (
    DEFAULT_SCHEMA,
    ROOT,
    EntryPath,
    GranularitySchema,
    MetadataRecord,
    Predicate,
    QueryOutcome,
    ReplicaSet,
    UserQuery,
    VirtualReplica,
)
from .repository import Repository
from .source import FilesystemSource, RemoteProfile, RemoteSource, generate_synthetic_source

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SCHEMA",
    "ROOT",
    "EagerEtl",
    "Engine",
    "EntryPath",
    "FilesystemSource",
    "GranularitySchema",
    "LazyEtl",
    "LoadReport",
    "MetadataRecord",
    "ObidosError",
    "Predicate",
    "QueryOutcome",
    "RemoteProfile",
    "RemoteSource",
    "ReplicaSet",
    "Repository",
    "UserQuery",
    "VirtualReplica",
    "generate_synthetic_source",
    "is_null",
]
