import random
import time

import pytest

from serverless_fl.auth import (
    AuthenticationError,
    CachedVerifier,
    ClientAuthPolicy,
    KeyRegistry,
    SigningKeyPair,
    TokenIssuer,
    validate_token,
)
from serverless_fl.fabric import ManualClock

POLICY_SCOPES = frozenset({"invoke:clients"})


@pytest.fixture
def setup():
    clock = ManualClock(start=1000.0)
    keypair = SigningKeyPair.generate("key-1")
    issuer = TokenIssuer("auth-server", keypair, clock=clock)
    issuer.register_credentials("controller", "s3cret")
    registry = KeyRegistry()
    registry.register("key-1", keypair.public)
    policy = ClientAuthPolicy("auth-server", POLICY_SCOPES)
    return clock, issuer, registry, policy


def fetch(issuer):
    return issuer.fetch_token("controller", "s3cret")


class TestFetchToken:
    def test_valid_credentials_issue_scoped_token(self, setup):
        clock, issuer, registry, policy = setup
        token = fetch(issuer)
        assert token.scopes == {"invoke:clients"}
        result = validate_token(token.encoded, policy, registry.fetch, clock())
        assert result.ok

    def test_bad_credentials_rejected(self, setup):
        _, issuer, _, _ = setup
        with pytest.raises(AuthenticationError):
            issuer.fetch_token("controller", "wrong")

    def test_two_fetches_distinct_but_both_valid(self, setup):
        clock, issuer, registry, policy = setup
        a, b = fetch(issuer), fetch(issuer)
        assert a.encoded != b.encoded
        assert a.nonce != b.nonce
        assert validate_token(a.encoded, policy, registry.fetch, clock()).ok
        assert validate_token(b.encoded, policy, registry.fetch, clock()).ok


class TestValidateToken:
    def test_flipped_byte_is_bad_signature(self, setup):
        clock, issuer, registry, policy = setup
        encoded = fetch(issuer).encoded
        idx = encoded.index(".") + 3  # inside the payload segment
        flipped = encoded[:idx] + ("A" if encoded[idx] != "A" else "B") + encoded[idx + 1:]
        result = validate_token(flipped, policy, registry.fetch, clock())
        assert not result.ok
        assert result.reason == "bad_signature"

    def test_expired(self, setup):
        clock, issuer, registry, policy = setup
        encoded = fetch(issuer).encoded
        clock.advance(16 * 60)
        assert validate_token(encoded, policy, registry.fetch, clock()).reason == "expired"

    def test_insufficient_scope(self, setup):
        clock, issuer, registry, _ = setup
        token = issuer.fetch_token("controller", "s3cret", scopes={"evaluate"})
        policy = ClientAuthPolicy("auth-server", POLICY_SCOPES)
        assert validate_token(token.encoded, policy, registry.fetch, clock()).reason == \
            "insufficient_scope"

    def test_wrong_issuer(self, setup):
        clock, issuer, registry, _ = setup
        policy = ClientAuthPolicy("someone-else", POLICY_SCOPES)
        assert validate_token(fetch(issuer).encoded, policy, registry.fetch, clock()).reason == \
            "wrong_issuer"

    def test_missing_api_token(self, setup):
        clock, issuer, registry, _ = setup
        policy = ClientAuthPolicy("auth-server", POLICY_SCOPES, extra_api_token="pepper")
        encoded = fetch(issuer).encoded
        assert validate_token(encoded, policy, registry.fetch, clock()).reason == \
            "missing_api_token"
        assert validate_token(encoded, policy, registry.fetch, clock(), api_token="pepper").ok

    def test_unknown_key_rejected(self, setup):
        clock, issuer, _, policy = setup
        empty = KeyRegistry()
        assert validate_token(fetch(issuer).encoded, policy, empty.fetch, clock()).reason == \
            "bad_signature"

    def test_foreign_key_rejected(self, setup):
        clock, issuer, _, policy = setup
        forged = KeyRegistry()
        forged.register("key-1", SigningKeyPair.generate("key-1").public)
        assert validate_token(fetch(issuer).encoded, policy, forged.fetch, clock()).reason == \
            "bad_signature"


class TestSoundnessFuzz:
    def test_mutated_tokens_never_accepted(self, setup):
        clock, issuer, registry, policy = setup
        encoded = fetch(issuer).encoded
        rng = random.Random(0)
        alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_."
        accepted = 0
        for _ in range(2000):
            kind = rng.randrange(3)
            if kind == 0:  # point mutation
                idx = rng.randrange(len(encoded))
                c = rng.choice(alphabet)
                mutant = encoded[:idx] + c + encoded[idx + 1:]
                if mutant == encoded:
                    continue
            elif kind == 1:  # random garbage of similar shape
                mutant = ".".join(
                    "".join(rng.choice(alphabet[:-1]) for _ in range(rng.randrange(1, 60)))
                    for _ in range(3)
                )
            else:  # segment shuffle
                parts = encoded.split(".")
                rng.shuffle(parts)
                mutant = ".".join(parts)
                if mutant == encoded:
                    continue
            if validate_token(mutant, policy, registry.fetch, clock()).ok:
                accepted += 1
        assert accepted == 0

    def test_completeness(self, setup):
        clock, issuer, registry, policy = setup
        for _ in range(50):
            assert validate_token(fetch(issuer).encoded, policy, registry.fetch, clock()).ok


class TestKeyCaching:
    def test_warm_validations_fetch_once(self, setup):
        clock, issuer, registry, policy = setup
        verifier = CachedVerifier(registry)
        for _ in range(5):
            assert validate_token(fetch(issuer).encoded, policy, verifier.key_for, clock()).ok
        assert registry.fetch_count == 1

    def test_cold_instance_fetches_again(self, setup):
        clock, issuer, registry, policy = setup
        for _ in range(2):  # each fresh verifier models a cold instance
            verifier = CachedVerifier(registry)
            validate_token(fetch(issuer).encoded, policy, verifier.key_for, clock())
        assert registry.fetch_count == 2

    def test_key_rotation_forces_single_refetch(self, setup):
        clock, _, registry, policy = setup
        verifier = CachedVerifier(registry)
        issuer1 = TokenIssuer("auth-server", SigningKeyPair.generate("key-1"), clock=clock)
        issuer1.register_credentials("controller", "x")
        registry.register("key-1", issuer1.keypair.public)
        validate_token(issuer1.fetch_token("controller", "x").encoded, policy,
                       verifier.key_for, clock())
        rotated = SigningKeyPair.generate("key-2")
        registry.register("key-2", rotated.public)
        issuer2 = TokenIssuer("auth-server", rotated, clock=clock)
        issuer2.register_credentials("controller", "x")
        baseline = registry.fetch_count
        for _ in range(4):
            assert validate_token(issuer2.fetch_token("controller", "x").encoded, policy,
                                  verifier.key_for, clock()).ok
        assert registry.fetch_count == baseline + 1


def test_validation_latency_under_5ms(setup):
    clock, issuer, registry, policy = setup
    verifier = CachedVerifier(registry)
    encoded = fetch(issuer).encoded
    validate_token(encoded, policy, verifier.key_for, clock())  # warm the cache
    timings = []
    for _ in range(50):
        t0 = time.perf_counter()
        validate_token(encoded, policy, verifier.key_for, clock())
        timings.append(time.perf_counter() - t0)
    timings.sort()
    assert timings[len(timings) // 2] < 0.005
