#!/usr/bin/env python3
"""Reference oracle for the crypto test vectors.

Re-implements, independently of the Rust crate, the canonical encoding, the
state hashing, the RNG key-stream derivation, and Ed25519 signing, then
writes frozen vectors to crates/core/testdata/test_vectors.json. The crate's
`vectors` test asserts byte equality against this file.

Regenerate with:  python3 tools/gen_test_vectors.py
"""

import hashlib
import json
import pathlib

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives import serialization

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/testdata/test_vectors.json"


# --- canonical encoding ------------------------------------------------------
# integers: 8-byte big-endian, no prefix
# byte strings: 4-byte big-endian byte count, then the bytes
# lists: 4-byte big-endian element count, then the encoded elements

def enc(value) -> bytes:
    if isinstance(value, int):
        assert 0 <= value < 2**64
        return value.to_bytes(8, "big")
    if isinstance(value, (bytes, bytearray)):
        return len(value).to_bytes(4, "big") + bytes(value)
    if isinstance(value, list):
        return len(value).to_bytes(4, "big") + b"".join(enc(v) for v in value)
    raise TypeError(type(value))


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_state(state, nonce: bytes) -> bytes:
    return sha256(enc(state) + nonce)


# --- RNG stream --------------------------------------------------------------
# The engine RNG is ChaCha20 keyed with sha256("chanforge.rng.v1" || be64(seed)),
# zero nonce, counter starting at zero; reads consume the raw key stream.

def rng_stream(master_seed: int, n: int) -> bytes:
    key = sha256(b"chanforge.rng.v1" + master_seed.to_bytes(8, "big"))
    cipher = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None)
    return cipher.encryptor().update(bytes(n))


def ed25519_vkey(seed: bytes) -> bytes:
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    return sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def ed25519_sign(seed: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(seed).sign(message)


def sign_digest(seed: bytes, digest: bytes, counter: int) -> bytes:
    # signatures bind the counter: sign(digest || be64(counter))
    return ed25519_sign(seed, digest + counter.to_bytes(8, "big"))


def main() -> None:
    vectors = {}

    # key pairs from fixed seeds
    vectors["keypairs"] = [
        {"seed": (bytes([b] * 32)).hex(), "vkey": ed25519_vkey(bytes([b] * 32)).hex()}
        for b in (0, 7, 42)
    ]

    # first key pair drawn from the engine RNG stream at master seed 42:
    # the engine consumes 16 bytes (a UUTID) and then 32 bytes (the key seed)
    # per party, in declaration order
    stream = rng_stream(42, 3 * 48)
    parties = []
    for k in range(3):
        chunk = stream[k * 48:(k + 1) * 48]
        uutid, key_seed = chunk[:16], chunk[16:48]
        parties.append(
            {
                "uutid": uutid.hex(),
                "key_seed": key_seed.hex(),
                "vkey": ed25519_vkey(key_seed).hex(),
            }
        )
    vectors["rng_master_42"] = parties

    # canonical encodings
    update_state = [
        0x30,  # message kind byte for 'update'
        bytes(range(16)),  # channel id
        3,  # state counter
        [[90, 0], [110, 0]],  # balances ((coins, packets) per party)
        bytes([0xAA] * 16),  # nonce field inside the body
        sha256(b"previous"),  # prior hstate reference
        7,  # timer
    ]
    vectors["encodings"] = [
        {"name": "empty-list", "value": "[]", "encoding": enc([]).hex()},
        {"name": "single-u64", "value": "[1]", "encoding": enc([1]).hex()},
        {
            "name": "nested",
            "value": "[2, b'ab', [3]]",
            "encoding": enc([2, b"ab", [3]]).hex(),
        },
        {
            "name": "worked-update",
            "value": "update message body of the worked trade",
            "encoding": enc(update_state).hex(),
            "digest": sha256(enc(update_state)).hex(),
        },
    ]

    # nonce-committed state hashes
    msc_init_state = [b"msc-init"]
    vectors["hashes"] = [
        {
            "name": "msc-init-zero-nonce",
            "nonce": (bytes(16)).hex(),
            "digest": hash_state(msc_init_state, bytes(16)).hex(),
        },
        {
            "name": "msc-init-nonce-1",
            "nonce": (bytes([1] * 16)).hex(),
            "digest": hash_state(msc_init_state, bytes([1] * 16)).hex(),
        },
    ]

    # counter-bound signatures
    seed7 = bytes([7] * 32)
    digest = sha256(b"abc")
    vectors["signatures"] = [
        {
            "seed": seed7.hex(),
            "digest": digest.hex(),
            "counter": c,
            "signature": sign_digest(seed7, digest, c).hex(),
        }
        for c in (0, 3, 2**32)
    ]

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(vectors, indent=2) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
