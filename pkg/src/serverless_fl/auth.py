"""Signed invocation tokens with scopes and expiry.

Tokens are JWT-shaped (three base64url segments over a canonical JSON payload)
and signed with Ed25519. Verification keys are distributed through a registry
lookup with a fetch counter so warm-instance caching is observable.
"""

from __future__ import annotations

import base64
import json
import secrets
import time
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

__all__ = [
    "SigningKeyPair",
    "InvocationToken",
    "ClientAuthPolicy",
    "ValidationResult",
    "TokenIssuer",
    "KeyRegistry",
    "CachedVerifier",
    "validate_token",
    "AuthenticationError",
]

DEFAULT_TOKEN_TTL_S = 15 * 60


class AuthenticationError(Exception):
    pass


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class SigningKeyPair:
    key_id: str
    private: Ed25519PrivateKey
    public: Ed25519PublicKey

    @classmethod
    def generate(cls, key_id: str) -> "SigningKeyPair":
        private = Ed25519PrivateKey.generate()
        return cls(key_id, private, private.public_key())


@dataclass(frozen=True)
class InvocationToken:
    issuer: str
    subject: str
    scopes: frozenset[str]
    issued_at: float
    expiry: float
    key_id: str
    nonce: str
    encoded: str  # full header.payload.signature string


@dataclass(frozen=True)
class ClientAuthPolicy:
    trusted_issuer: str
    required_scopes: frozenset[str]
    extra_api_token: str | None = None


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    reason: str | None = None  # bad_signature | expired | insufficient_scope |
    #                            wrong_issuer | missing_api_token
    token: InvocationToken | None = None

    def __bool__(self):
        return self.ok


class TokenIssuer:
    """Issues scoped tokens for registered server credentials."""

    def __init__(self, issuer: str, keypair: SigningKeyPair, clock=time.time,
                 ttl_s: float = DEFAULT_TOKEN_TTL_S):
        self.issuer = issuer
        self.keypair = keypair
        self.clock = clock
        self.ttl_s = ttl_s
        self._server_credentials: dict[str, str] = {}

    def register_credentials(self, subject: str, secret: str):
        self._server_credentials[subject] = secret

    def fetch_token(self, subject: str, secret: str,
                    scopes: set[str] = frozenset({"invoke:clients"})) -> InvocationToken:
        if self._server_credentials.get(subject) != secret:
            raise AuthenticationError(f"bad credentials for {subject!r}")
        now = self.clock()
        nonce = secrets.token_hex(8)
        header = {"key_id": self.keypair.key_id, "typ": "invocation"}
        payload = {
            "iss": self.issuer,
            "sub": subject,
            "scopes": sorted(scopes),
            "iat": now,
            "exp": now + self.ttl_s,
            "nonce": nonce,
        }
        signing_input = f"{_b64(_canonical(header))}.{_b64(_canonical(payload))}"
        signature = self.keypair.private.sign(signing_input.encode("ascii"))
        encoded = f"{signing_input}.{_b64(signature)}"
        return InvocationToken(
            self.issuer, subject, frozenset(scopes), now, now + self.ttl_s,
            self.keypair.key_id, nonce, encoded,
        )


class KeyRegistry:
    """Public-key distribution endpoint; fetches are counted."""

    def __init__(self):
        self._keys: dict[str, Ed25519PublicKey] = {}
        self.fetch_count = 0

    def register(self, key_id: str, public: Ed25519PublicKey):
        self._keys[key_id] = public

    def fetch(self, key_id: str) -> Ed25519PublicKey | None:
        self.fetch_count += 1
        return self._keys.get(key_id)


class CachedVerifier:
    """Per-instance cache in front of the key registry.

    Lives in a function instance's namespace cache: the first validation on a
    fresh instance fetches the key, every later one on the same instance does
    not. A key_id it has not seen (key rotation) forces exactly one refetch.
    """

    def __init__(self, registry: KeyRegistry):
        self.registry = registry
        self._cache: dict[str, Ed25519PublicKey] = {}

    def key_for(self, key_id: str) -> Ed25519PublicKey | None:
        if key_id not in self._cache:
            key = self.registry.fetch(key_id)
            if key is None:
                return None
            self._cache[key_id] = key
        return self._cache[key_id]


def validate_token(
    encoded: str,
    policy: ClientAuthPolicy,
    key_lookup,
    now: float,
    api_token: str | None = None,
) -> ValidationResult:
    """Accepts iff the signature verifies under the trusted issuer's key, the
    token is unexpired, scopes cover the policy, and any configured extra API
    token matches. Rejection is a value, never an exception.

    `key_lookup` maps key_id -> public key (a KeyRegistry.fetch or a
    CachedVerifier.key_for bound method).
    """
    try:
        header_b64, payload_b64, signature_b64 = encoded.split(".")
        header = json.loads(_unb64(header_b64))
        payload = json.loads(_unb64(payload_b64))
        signature = _unb64(signature_b64)
        key_id = header["key_id"]
        issuer = payload["iss"]
        scopes = frozenset(payload["scopes"])
        exp = float(payload["exp"])
        iat = float(payload["iat"])
    except Exception:
        return ValidationResult(False, "bad_signature")

    # Only the canonical encoding is valid; semantically-equivalent re-encodings
    # (whitespace, key order, base64 padding-bit tricks) are rejected outright.
    if (
        _b64(_canonical(header)) != header_b64
        or _b64(_canonical(payload)) != payload_b64
        or _b64(signature) != signature_b64
        or len(signature) != 64
    ):
        return ValidationResult(False, "bad_signature")

    if issuer != policy.trusted_issuer:
        return ValidationResult(False, "wrong_issuer")
    public = key_lookup(key_id)
    if public is None:
        return ValidationResult(False, "bad_signature")
    signing_input = f"{header_b64}.{payload_b64}".encode("ascii")
    try:
        public.verify(signature, signing_input)
    except InvalidSignature:
        return ValidationResult(False, "bad_signature")
    if now >= exp:
        return ValidationResult(False, "expired")
    if not scopes >= policy.required_scopes:
        return ValidationResult(False, "insufficient_scope")
    if policy.extra_api_token is not None and api_token != policy.extra_api_token:
        return ValidationResult(False, "missing_api_token")
    token = InvocationToken(
        issuer, payload.get("sub", ""), scopes, iat, exp, key_id,
        payload.get("nonce", ""), encoded,
    )
    return ValidationResult(True, None, token)
