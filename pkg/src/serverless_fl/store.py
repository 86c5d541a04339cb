"""Parameter store: versioned global models with chunking, scoped credentials,
per-round client results, and persistent invocation counters.

The backing storage is an in-process map (optionally mirrored to disk); the
access-control and chunking contracts are what matter. Writes commit by
flipping a version pointer only after every chunk is stored, so readers never
observe a half-written model.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .nn import ParameterSet, deserialize_parameters, serialize_parameters

__all__ = [
    "DOC_SIZE_LIMIT",
    "AuthenticationError",
    "AuthorizationError",
    "CorruptionError",
    "StaleRoundError",
    "StoreCredential",
    "ClientResult",
    "ParameterStore",
]

DOC_SIZE_LIMIT = 16 * 1024 * 1024


class AuthenticationError(Exception):
    """Credential unknown, expired, or revoked."""


class AuthorizationError(Exception):
    """Credential valid but not scoped for the attempted operation."""


class CorruptionError(Exception):
    """Stored bytes fail their checksum."""


class StaleRoundError(Exception):
    """Result submitted for a round that is no longer current."""


# Scope atoms: ("admin",), ("read_global", session), ("aggregate", session),
# ("write_result", session, client_id).
@dataclass(frozen=True)
class StoreCredential:
    principal: str
    scopes: frozenset
    expiry: float

    def has(self, *scope) -> bool:
        return ("admin",) in self.scopes or tuple(scope) in self.scopes


@dataclass(frozen=True)
class ClientResult:
    session_id: str
    round: int
    client_id: str
    params: ParameterSet
    cardinality: int
    test_metrics: tuple[float, float, int] | None = None  # (loss, accuracy, test_cardinality)

    def __post_init__(self):
        if self.cardinality <= 0:
            raise ValueError("cardinality must be positive")


@dataclass
class _ChunkedBlob:
    blob_id: str
    chunk_ids: list[str]
    total_bytes: int
    checksum: bytes


class MaterializationMeter:
    """Counts ClientResult payloads that are live in memory at once."""

    def __init__(self):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0

    def acquire(self, n: int = 1):
        with self._lock:
            self.live += n
            self.peak = max(self.peak, self.live)

    def release(self, n: int = 1):
        with self._lock:
            self.live -= n

    def reset(self):
        with self._lock:
            self.live = 0
            self.peak = 0


class _MeteredResult:
    """A deserialized ClientResult that releases its meter slot when done."""

    def __init__(self, result: ClientResult, meter: MaterializationMeter):
        self.result = result
        self._meter = meter
        self._released = False

    def release(self):
        if not self._released:
            self._released = True
            self.result = None
            self._meter.release()


class ParameterStore:
    def __init__(
        self,
        doc_size_limit: int = DOC_SIZE_LIMIT,
        clock=time.time,
        directory: str | Path | None = None,
    ):
        if doc_size_limit < 1:
            raise ValueError("doc_size_limit must be positive")
        self.doc_size_limit = doc_size_limit
        self.clock = clock
        self.directory = Path(directory) if directory else None
        self._lock = threading.RLock()
        self._chunks: dict[str, bytes] = {}
        # session -> version -> (_ChunkedBlob, model_version_metadata)
        self._globals: dict[str, dict[int, _ChunkedBlob]] = {}
        self._latest: dict[str, int] = {}
        self._specs: dict[str, dict] = {}
        # (session, round) -> client_id -> (meta dict, serialized params)
        self._results: dict[tuple[str, int], dict[str, tuple[dict, bytes]]] = {}
        self._current_round: dict[str, int] = {}
        self._credentials: dict[str, StoreCredential] = {}
        self._counters: dict[str, int] = {}
        self._ids = itertools.count()
        self.meter = MaterializationMeter()
        admin = StoreCredential("store-admin", frozenset({("admin",)}), float("inf"))
        self._credentials[admin.principal] = admin
        self._admin = admin

    # -- credentials ------------------------------------------------------

    @property
    def admin_credential(self) -> StoreCredential:
        return self._admin

    def _check(self, cred: StoreCredential, *scope):
        with self._lock:
            live = self._credentials.get(cred.principal)
        if live is None or live is not cred and live != cred:
            raise AuthenticationError(f"unknown or revoked credential {cred.principal!r}")
        if self.clock() >= cred.expiry:
            raise AuthenticationError(f"credential {cred.principal!r} expired")
        if not cred.has(*scope):
            raise AuthorizationError(
                f"credential {cred.principal!r} lacks scope {scope!r}"
            )

    def issue_credential(
        self, admin: StoreCredential, session: str, role: str, ttl: float,
        client_id: str | None = None,
    ) -> StoreCredential:
        """role 'client' gets read-global + write-own-result; 'aggregator' gets
        read-global + aggregate scope."""
        self._check(admin, "admin")
        if role == "client":
            if client_id is None:
                raise ValueError("client credentials need a client_id")
            scopes = {("read_global", session), ("write_result", session, client_id)}
            principal = f"client:{session}:{client_id}:{next(self._ids)}"
        elif role == "aggregator":
            scopes = {("read_global", session), ("aggregate", session)}
            principal = f"aggregator:{session}:{next(self._ids)}"
        else:
            raise ValueError(f"unknown role {role!r}")
        cred = StoreCredential(principal, frozenset(scopes), self.clock() + ttl)
        with self._lock:
            self._credentials[principal] = cred
        return cred

    def revoke_credential(self, admin: StoreCredential, principal: str):
        self._check(admin, "admin")
        with self._lock:
            self._credentials.pop(principal, None)

    # -- session metadata -------------------------------------------------

    def put_session_spec(self, cred: StoreCredential, session: str, spec: dict):
        self._check(cred, "admin")
        with self._lock:
            self._specs[session] = dict(spec)

    def get_session_spec(self, cred: StoreCredential, session: str) -> dict:
        self._check(cred, "read_global", session)
        with self._lock:
            if session not in self._specs:
                raise KeyError(f"no spec for session {session!r}")
            return dict(self._specs[session])

    def begin_round(self, cred: StoreCredential, session: str, round_no: int):
        self._check(cred, "admin")
        with self._lock:
            self._current_round[session] = round_no

    # -- chunked blobs ----------------------------------------------------

    def _store_blob(self, session: str, payload: bytes) -> _ChunkedBlob:
        blob_id = f"blob-{next(self._ids)}"
        chunk_ids = []
        staged = {}
        for i in range(0, max(len(payload), 1), self.doc_size_limit):
            chunk = payload[i : i + self.doc_size_limit]
            cid = f"{blob_id}/chunk_{len(chunk_ids)}"
            staged[cid] = chunk
            chunk_ids.append(cid)
        blob = _ChunkedBlob(blob_id, chunk_ids, len(payload), hashlib.sha256(payload).digest())
        with self._lock:
            self._chunks.update(staged)
        if self.directory is not None:
            d = self.directory / "sessions" / session / "global" / blob_id
            d.mkdir(parents=True, exist_ok=True)
            for k, cid in enumerate(chunk_ids):
                (d / f"chunk_{k}.bin").write_bytes(staged[cid])
            (d / "manifest.json").write_text(json.dumps({
                "blob_id": blob_id,
                "chunks": len(chunk_ids),
                "total_bytes": blob.total_bytes,
                "checksum": blob.checksum.hex(),
            }))
        return blob

    def _load_blob(self, blob: _ChunkedBlob) -> bytes:
        with self._lock:
            payload = b"".join(self._chunks[cid] for cid in blob.chunk_ids)
        if len(payload) != blob.total_bytes or hashlib.sha256(payload).digest() != blob.checksum:
            raise CorruptionError(f"blob {blob.blob_id} failed checksum verification")
        return payload

    # -- global model -----------------------------------------------------

    def put_global_model(self, cred: StoreCredential, session: str, params: ParameterSet) -> int:
        try:
            self._check(cred, "admin")
        except AuthorizationError:
            self._check(cred, "aggregate", session)
        payload = serialize_parameters(params)
        blob = self._store_blob(session, payload)
        with self._lock:
            versions = self._globals.setdefault(session, {})
            version = self._latest.get(session, -1) + 1
            versions[version] = blob
            self._latest[session] = version  # commit point
        if self.directory is not None:
            pointer = self.directory / "sessions" / session / "global" / "latest.json"
            pointer.parent.mkdir(parents=True, exist_ok=True)
            pointer.write_text(json.dumps({"version": version, "blob_id": blob.blob_id}))
        return version

    def get_global_model(self, cred: StoreCredential, session: str) -> tuple[ParameterSet, int]:
        self._check(cred, "read_global", session)
        with self._lock:
            if session not in self._latest:
                raise KeyError(f"no global model for session {session!r}")
            version = self._latest[session]
            blob = self._globals[session][version]
        payload = self._load_blob(blob)
        return deserialize_parameters(payload, version), version

    # -- client results ---------------------------------------------------

    def put_client_result(self, cred: StoreCredential, result: ClientResult):
        self._check(cred, "write_result", result.session_id, result.client_id)
        with self._lock:
            current = self._current_round.get(result.session_id)
        if current is not None and result.round != current:
            raise StaleRoundError(
                f"round {result.round} is not current ({current}) for session {result.session_id!r}"
            )
        meta = {
            "session_id": result.session_id,
            "round": result.round,
            "client_id": result.client_id,
            "cardinality": result.cardinality,
            "test_metrics": result.test_metrics,
        }
        payload = serialize_parameters(result.params)
        with self._lock:
            bucket = self._results.setdefault((result.session_id, result.round), {})
            bucket[result.client_id] = (meta, payload)

    def get_client_result(
        self, cred: StoreCredential, session: str, round_no: int, client_id: str
    ) -> ClientResult:
        self._check(cred, "aggregate", session)
        with self._lock:
            meta, payload = self._results[(session, round_no)][client_id]
        return self._deserialize_result(meta, payload)

    def _deserialize_result(self, meta: dict, payload: bytes) -> ClientResult:
        tm = meta["test_metrics"]
        return ClientResult(
            meta["session_id"], meta["round"], meta["client_id"],
            deserialize_parameters(payload), meta["cardinality"],
            tuple(tm) if tm is not None else None,
        )

    def list_round_clients(self, cred: StoreCredential, session: str, round_no: int) -> list[str]:
        self._check(cred, "aggregate", session)
        with self._lock:
            return sorted(self._results.get((session, round_no), {}))

    def stream_round_results(
        self, cred: StoreCredential, session: str, round_no: int, batch_size: int,
        client_ids: list[str] | None = None,
    ):
        """Yields batches of _MeteredResult; callers release() each when done.

        Results stay serialized until their batch is built, so at most
        batch_size payloads are live per step (plus whatever the caller holds).
        """
        self._check(cred, "aggregate", session)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        with self._lock:
            bucket = dict(self._results.get((session, round_no), {}))
        ids = sorted(bucket) if client_ids is None else [c for c in sorted(bucket) if c in set(client_ids)]
        for i in range(0, len(ids), batch_size):
            batch = []
            for cid in ids[i : i + batch_size]:
                meta, payload = bucket[cid]
                self.meter.acquire()
                batch.append(_MeteredResult(self._deserialize_result(meta, payload), self.meter))
            yield batch

    # -- invocation counters ---------------------------------------------

    def check_and_increment_counter(self, client_id: str, max_invocations: int) -> bool:
        """Atomically counts an invocation attempt; False once the budget is spent."""
        key = f"invocations:{client_id}"
        with self._lock:
            count = self._counters.get(key, 0)
            if count >= max_invocations:
                return False
            self._counters[key] = count + 1
            return True

    def invocation_count(self, client_id: str) -> int:
        with self._lock:
            return self._counters.get(f"invocations:{client_id}", 0)

    # -- integrity --------------------------------------------------------

    @staticmethod
    def load_global_model_from_dir(directory: str | Path, session: str):
        """Reads the latest committed global model from a store directory."""
        base = Path(directory) / "sessions" / session / "global"
        pointer = json.loads((base / "latest.json").read_text())
        blob_dir = base / pointer["blob_id"]
        manifest = json.loads((blob_dir / "manifest.json").read_text())
        payload = b"".join(
            (blob_dir / f"chunk_{k}.bin").read_bytes() for k in range(manifest["chunks"])
        )
        if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
            raise CorruptionError(f"stored model for session {session!r} failed checksum")
        return deserialize_parameters(payload, pointer["version"]), pointer["version"]

    def state_hash(self) -> str:
        """Digest over all committed content; used to prove fail-closed behaviour."""
        h = hashlib.sha256()
        with self._lock:
            for session in sorted(self._latest):
                h.update(session.encode())
                h.update(str(self._latest[session]).encode())
                blob = self._globals[session][self._latest[session]]
                h.update(blob.checksum)
            for key in sorted(self._results):
                h.update(repr(key).encode())
                for cid in sorted(self._results[key]):
                    meta, payload = self._results[key][cid]
                    h.update(cid.encode())
                    h.update(json.dumps(meta, sort_keys=True, default=str).encode())
                    h.update(hashlib.sha256(payload).digest())
            for key in sorted(self._counters):
                h.update(f"{key}={self._counters[key]}".encode())
        return h.hexdigest()
