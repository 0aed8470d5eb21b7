import hashlib
import hmac
import random

import numpy as np
import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmgrid.chunks import (
    HEADER_LEN,
    ChunkCipher,
    ChunkId,
    EncryptedChunk,
    KeyRing,
    Rect,
    bench_encryption,
    decrypt_chunk,
    derive_key,
    encrypt_chunk,
    invert_order,
    apply_order,
    make_grid,
    permute_order,
    reassemble,
    split_slice,
)
from hmmgrid.errors import (
    ArgumentError,
    AssemblyError,
    AuthenticationError,
    MalformedPayload,
    NonceReuse,
)


def fisher_yates_oracle(n, seed):
    """Keyed shuffle built from a precomputed HMAC byte stream."""
    stream = b"".join(hmac.new(seed, i.to_bytes(8, "big"), hashlib.sha256).digest()
                      for i in range(4 * n + 8))
    words = [int.from_bytes(stream[i:i + 8], "big") for i in range(0, len(stream), 8)]
    perm, pos = list(range(n)), 0
    for i in range(n - 1, 0, -1):
        while True:
            w = words[pos]
            pos += 1
            if w < 2 ** 64 - 2 ** 64 % (i + 1):
                break
        j = w % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# --- grid ------------------------------------------------------------------------

def test_grid_even_split():
    g = make_grid((512, 512), 4)
    assert len(g) == 16
    assert {(r.w, r.h) for r in g.rects} == {(128, 128)}


def test_grid_remainder_goes_last():
    g = make_grid((100, 100), 9)
    widths = [g.rect(0, c).w for c in range(9)]
    assert widths == [11] * 8 + [12]
    assert g.rect(8, 8) == Rect(88, 88, 12, 12)


def test_grid_single_chunk():
    g = make_grid((7, 5), 1)
    assert g.rects == (Rect(0, 0, 5, 7),)


def test_grid_too_fine():
    with pytest.raises(ArgumentError):
        make_grid((4, 4), 5)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 9), st.integers(9, 70), st.integers(9, 70))
def test_grid_tiles_exactly(k, h, w):
    g = make_grid((h, w), k)
    cover = np.zeros((h, w), dtype=int)
    for r in g.rects:
        cover[r.y:r.y + r.h, r.x:r.x + r.w] += 1
    assert np.all(cover == 1)


def test_split_reassemble_roundtrip(rng):
    img = rng.integers(0, 65536, size=(53, 47), dtype=np.uint16)
    g = make_grid(img.shape, 5)
    chunks = split_slice(img, g, 3)
    random.Random(1).shuffle(chunks)
    np.testing.assert_array_equal(reassemble(chunks, g), img)


def test_reassemble_missing_chunk(rng):
    img = rng.integers(0, 9, size=(20, 20), dtype=np.uint16)
    g = make_grid(img.shape, 3)
    with pytest.raises(AssemblyError):
        reassemble(split_slice(img, g)[1:], g)


def test_reassemble_duplicate_chunk(rng):
    img = rng.integers(0, 9, size=(20, 20), dtype=np.uint16)
    g = make_grid(img.shape, 2)
    chunks = split_slice(img, g)
    with pytest.raises(AssemblyError):
        reassemble(chunks + chunks[:1], g)


# --- keys ---------------------------------------------------------------------------

def test_pbkdf2_matches_independent_implementation():
    salt = bytes(range(16))
    sec = derive_key(b"hunter2", salt, 10_000)
    kdf = PBKDF2HMAC(algorithm=hashes.SHA256(), length=32, salt=salt, iterations=10_000)
    assert sec.key == kdf.derive(b"hunter2")
    assert sec.perm_seed == hmac.new(sec.key, b"vsg/perm", hashlib.sha256).digest()


def test_derive_key_rejects_weak_settings():
    with pytest.raises(ArgumentError):
        derive_key(b"pw", b"\0" * 16, 9_999)
    with pytest.raises(ArgumentError):
        derive_key(b"", b"\0" * 16, 10_000)
    with pytest.raises(ArgumentError):
        derive_key(b"pw", b"\0" * 8, 10_000)


def test_keyring_reuses_derivations(secret):
    ring = KeyRing(b"correct horse", 10_000)
    a = ring.for_salt(secret.salt)
    assert a.key == secret.key
    assert ring.for_salt(secret.salt) is a
    assert ring.fresh().salt != ring.fresh().salt


def test_secret_repr_hides_key(secret):
    assert secret.key.hex() not in repr(secret)
    assert "horse" not in repr(secret)


# --- AEAD ---------------------------------------------------------------------------

@pytest.fixture
def sealed(secret, rng):
    img = rng.integers(0, 65536, size=(32, 32), dtype=np.uint16)
    g = make_grid(img.shape, 3)
    chunk = split_slice(img, g, 2)[4]
    return ChunkCipher(secret).encrypt(chunk), chunk


def test_aead_roundtrip(secret, sealed):
    ec, chunk = sealed
    assert decrypt_chunk(ec, secret) == chunk
    assert EncryptedChunk.from_bytes(ec.to_bytes()) == ec
    assert len(ec.to_bytes()) == HEADER_LEN + len(chunk.payload) + 16


def test_aead_ciphertext_bit_flip(secret, sealed):
    ec, _ = sealed
    ct = bytearray(ec.ciphertext)
    ct[5] ^= 0x01
    bad = EncryptedChunk(ec.chunk_id, ec.rect, ec.salt, ec.nonce, bytes(ct))
    with pytest.raises(AuthenticationError):
        decrypt_chunk(bad, secret)


def test_aead_header_is_authenticated(secret, sealed):
    ec, _ = sealed
    variants = [
        EncryptedChunk(ec.chunk_id, Rect(ec.rect.x + 1, ec.rect.y, ec.rect.w, ec.rect.h),
                       ec.salt, ec.nonce, ec.ciphertext),
        EncryptedChunk(ChunkId(9, ec.chunk_id.row, ec.chunk_id.col), ec.rect,
                       ec.salt, ec.nonce, ec.ciphertext),
        EncryptedChunk(ec.chunk_id, ec.rect, ec.salt, bytes(12), ec.ciphertext),
    ]
    for bad in variants:
        with pytest.raises(AuthenticationError):
            decrypt_chunk(bad, secret)


def test_aead_context_binding(secret, sealed):
    _, chunk = sealed
    ec = encrypt_chunk(chunk, secret, bytes(11) + b"\1", b"vsg/vol|j0|0|")
    assert decrypt_chunk(ec, secret, b"vsg/vol|j0|0|") == chunk
    with pytest.raises(AuthenticationError):
        decrypt_chunk(ec, secret, b"vsg/vol|j0|1|")


def test_wrong_password_rejected(sealed, secret):
    ec, _ = sealed
    other = derive_key(b"wrong", secret.salt, 10_000)
    with pytest.raises(AuthenticationError):
        decrypt_chunk(ec, other)


def test_nonce_reuse_refused(secret, sealed):
    _, chunk = sealed
    cipher = ChunkCipher(secret, prefix=b"\0\0\0\1")
    n = cipher.next_nonce()
    cipher.encrypt(chunk, nonce=n)
    with pytest.raises(NonceReuse):
        cipher.encrypt(chunk, nonce=n)


def test_counter_nonces_distinct(secret, sealed):
    _, chunk = sealed
    cipher = ChunkCipher(secret)
    nonces = {cipher.encrypt(chunk).nonce for _ in range(500)}
    assert len(nonces) == 500


def test_truncated_record_malformed(sealed):
    ec, _ = sealed
    buf = ec.to_bytes()
    for cut in (0, HEADER_LEN - 1, len(buf) - 1):
        with pytest.raises(MalformedPayload):
            EncryptedChunk.from_bytes(buf[:cut])


def test_no_plaintext_runs_in_ciphertext(secret):
    img = np.arange(64 * 64, dtype=np.uint16).reshape(64, 64)
    chunks = split_slice(img, make_grid(img.shape, 2))
    cipher = ChunkCipher(secret)
    wire = b"".join(cipher.encrypt(c).to_bytes() for c in chunks)
    raw = img.astype("<u2").tobytes()
    for i in range(0, len(raw) - 64, 64):
        assert raw[i:i + 64] not in wire


# --- keyed order ----------------------------------------------------------------------

def test_permutation_matches_oracle():
    for n in (1, 2, 3, 16, 81, 300):
        for seed in (bytes(32), b"\x07" * 32, hashlib.sha256(str(n).encode()).digest()):
            assert permute_order(n, seed) == fisher_yates_oracle(n, seed)


def test_permutation_frozen_value():
    assert permute_order(16, bytes(32)) == [6, 5, 12, 7, 0, 15, 2, 8, 3, 10, 14, 11, 13, 9, 1, 4]


def test_permutation_depends_on_key(secret):
    other = derive_key(b"other", secret.salt, 10_000)
    assert permute_order(81, secret) != permute_order(81, other)
    assert permute_order(81, secret) == permute_order(81, secret)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.binary(min_size=32, max_size=32))
def test_permutation_is_bijection(n, seed):
    perm = permute_order(n, seed)
    assert sorted(perm) == list(range(n))
    items = list(range(100, 100 + n))
    sent = apply_order(items, perm)
    inv = invert_order(perm)
    assert [sent[inv[i]] for i in range(n)] == items


# --- benchmark ----------------------------------------------------------------------------

def test_bench_rows(rng):
    img = rng.integers(0, 65536, size=(128, 128), dtype=np.uint16)
    rows = bench_encryption(img, [1, 3, 5, 7, 9], reps=3)
    assert [r.chunks for r in rows] == [1, 9, 25, 49, 81]
    assert all(r.total_ms > 0 and len(r.samples_ms) == 3 for r in rows)
