"""Chunk grids, password-derived keys, AEAD chunk encryption and keyed ordering.

Each slice is tiled into a k x k grid.  Every tile is sealed with AES-256-GCM
under a PBKDF2-HMAC-SHA256 key; the tile's id and rectangle travel in the
clear but are bound as associated data, so the receiver never has to trust
arrival order to place a tile.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import ArgumentError, AssemblyError, AuthenticationError, MalformedPayload, NonceReuse

SALT_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16
KEY_LEN = 32
DEFAULT_ITERATIONS = 100_000
MIN_ITERATIONS = 10_000
PERM_LABEL = b"vsg/perm"

# slice_index u32, row u16, col u16, x u16, y u16, w u16, h u16, salt, nonce, ct_len u32
_HEADER = struct.Struct(">IHHHHHH16s12sI")
HEADER_LEN = _HEADER.size


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass(frozen=True)
class ChunkGrid:
    k: int
    height: int
    width: int
    rects: tuple[Rect, ...]

    def __len__(self):
        return len(self.rects)

    def rect(self, row: int, col: int) -> Rect:
        return self.rects[row * self.k + col]


def make_grid(slice_dims: tuple[int, int], k: int) -> ChunkGrid:
    """Tile a ``(height, width)`` slice into k x k rectangles, row-major.

    Every chunk is ``floor(dim / k)`` wide/high except the last row and column,
    which absorb the remainder.
    """
    height, width = (int(d) for d in slice_dims)
    if k < 1:
        raise ArgumentError(f"grid order must be >= 1, got {k}")
    if height < k or width < k:
        raise ArgumentError(f"a {k}x{k} grid does not fit a {height}x{width} slice")
    bh, bw = height // k, width // k
    rects = []
    for r in range(k):
        h = bh if r < k - 1 else height - bh * (k - 1)
        for c in range(k):
            w = bw if c < k - 1 else width - bw * (k - 1)
            rects.append(Rect(c * bw, r * bh, w, h))
    return ChunkGrid(k, height, width, tuple(rects))


@dataclass(frozen=True)
class ChunkId:
    slice_index: int
    row: int
    col: int


@dataclass(frozen=True)
class PlainChunk:
    chunk_id: ChunkId
    rect: Rect
    payload: bytes


@dataclass(frozen=True)
class EncryptedChunk:
    chunk_id: ChunkId
    rect: Rect
    salt: bytes
    nonce: bytes
    ciphertext: bytes

    def header(self) -> bytes:
        cid, r = self.chunk_id, self.rect
        return _HEADER.pack(cid.slice_index, cid.row, cid.col, r.x, r.y, r.w, r.h,
                            self.salt, self.nonce, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncryptedChunk":
        if len(buf) < HEADER_LEN:
            raise MalformedPayload(f"chunk record is {len(buf)} bytes, header needs {HEADER_LEN}")
        z, row, col, x, y, w, h, salt, nonce, n = _HEADER.unpack_from(buf)
        if len(buf) - HEADER_LEN != n:
            raise MalformedPayload(f"chunk declares {n} ciphertext bytes, has {len(buf) - HEADER_LEN}")
        if n < TAG_LEN:
            raise MalformedPayload("ciphertext shorter than the authentication tag")
        return cls(ChunkId(z, row, col), Rect(x, y, w, h), salt, nonce, bytes(buf[HEADER_LEN:]))


def split_slice(image: np.ndarray, grid: ChunkGrid, slice_index: int = 0) -> list[PlainChunk]:
    image = np.ascontiguousarray(image)
    if image.shape != (grid.height, grid.width):
        raise ArgumentError(f"slice shape {image.shape} does not match grid "
                            f"{(grid.height, grid.width)}")
    le = image.astype(image.dtype.newbyteorder("<"), copy=False)
    chunks = []
    for i, r in enumerate(grid.rects):
        tile = le[r.y:r.y + r.h, r.x:r.x + r.w]
        chunks.append(PlainChunk(ChunkId(slice_index, i // grid.k, i % grid.k), r, tile.tobytes()))
    return chunks


def reassemble(chunks, grid: ChunkGrid, dtype="<u2") -> np.ndarray:
    """Rebuild one slice from its chunks, placing each by its rectangle."""
    dtype = np.dtype(dtype)
    out = np.empty((grid.height, grid.width), dtype=dtype)
    seen = set()
    for ch in chunks:
        pos = (ch.chunk_id.row, ch.chunk_id.col)
        if not (0 <= pos[0] < grid.k and 0 <= pos[1] < grid.k):
            raise AssemblyError(f"chunk position {pos} outside the {grid.k}x{grid.k} grid")
        if pos in seen:
            raise AssemblyError(f"duplicate chunk {pos}")
        r = grid.rect(*pos)
        if ch.rect != r:
            raise AssemblyError(f"chunk {pos} rect {ch.rect} disagrees with grid rect {r}")
        if len(ch.payload) != r.area * dtype.itemsize:
            raise AssemblyError(f"chunk {pos} payload has {len(ch.payload)} bytes")
        seen.add(pos)
        out[r.y:r.y + r.h, r.x:r.x + r.w] = np.frombuffer(ch.payload, dtype=dtype).reshape(r.h, r.w)
    if len(seen) != len(grid):
        raise AssemblyError(f"{len(grid) - len(seen)} of {len(grid)} chunks missing")
    return out


# --- keys ----------------------------------------------------------------------

@dataclass(frozen=True, repr=False)
class SessionSecret:
    password: bytes
    salt: bytes
    key: bytes
    perm_seed: bytes
    iterations: int = DEFAULT_ITERATIONS

    def __repr__(self):
        return f"SessionSecret(salt={self.salt.hex()})"


def derive_key(password: bytes | str, salt: bytes | None = None,
               iterations: int = DEFAULT_ITERATIONS) -> SessionSecret:
    if isinstance(password, str):
        password = password.encode()
    if not password:
        raise ArgumentError("password must not be empty")
    if salt is None:
        salt = os.urandom(SALT_LEN)
    if len(salt) != SALT_LEN:
        raise ArgumentError(f"salt must be {SALT_LEN} bytes")
    if iterations < MIN_ITERATIONS:
        raise ArgumentError(f"iterations must be >= {MIN_ITERATIONS}")
    key = hashlib.pbkdf2_hmac("sha256", password, salt, iterations, KEY_LEN)
    perm_seed = hmac.new(key, PERM_LABEL, hashlib.sha256).digest()
    return SessionSecret(password, bytes(salt), key, perm_seed, iterations)


class KeyRing:
    """Password holder that derives (and caches) keys for salts seen on the wire."""

    def __init__(self, password: bytes | str, iterations: int = DEFAULT_ITERATIONS):
        self.password = password.encode() if isinstance(password, str) else password
        if not self.password:
            raise ArgumentError("password must not be empty")
        self.iterations = iterations
        self._cache: dict[tuple[bytes, int], SessionSecret] = {}
        self._lock = threading.Lock()

    def for_salt(self, salt: bytes, iterations: int | None = None) -> SessionSecret:
        iterations = iterations or self.iterations
        with self._lock:
            sec = self._cache.get((salt, iterations))
        if sec is None:
            sec = derive_key(self.password, salt, iterations)
            with self._lock:
                self._cache[(salt, iterations)] = sec
        return sec

    def fresh(self, iterations: int | None = None) -> SessionSecret:
        iterations = iterations or self.iterations
        sec = derive_key(self.password, os.urandom(SALT_LEN), iterations)
        with self._lock:
            self._cache[(sec.salt, iterations)] = sec
        return sec


# --- AEAD ------------------------------------------------------------------------

def _aad(chunk_id: ChunkId, rect: Rect, salt: bytes, nonce: bytes, context: bytes) -> bytes:
    head = _HEADER.pack(chunk_id.slice_index, chunk_id.row, chunk_id.col,
                        rect.x, rect.y, rect.w, rect.h, salt, nonce, 0)
    return context + head[:-4]


def encrypt_chunk(chunk: PlainChunk, secret: SessionSecret, nonce: bytes,
                  context: bytes = b"") -> EncryptedChunk:
    if len(nonce) != NONCE_LEN:
        raise ArgumentError(f"nonce must be {NONCE_LEN} bytes")
    aad = _aad(chunk.chunk_id, chunk.rect, secret.salt, nonce, context)
    ct = AESGCM(secret.key).encrypt(nonce, chunk.payload, aad)
    return EncryptedChunk(chunk.chunk_id, chunk.rect, secret.salt, bytes(nonce), ct)


def decrypt_chunk(ec: EncryptedChunk, secret: SessionSecret, context: bytes = b"") -> PlainChunk:
    if ec.salt != secret.salt:
        raise AuthenticationError("chunk salt does not match the session key")
    if len(ec.nonce) != NONCE_LEN:
        raise AuthenticationError("bad nonce length")
    aad = _aad(ec.chunk_id, ec.rect, ec.salt, ec.nonce, context)
    try:
        pt = AESGCM(secret.key).decrypt(ec.nonce, ec.ciphertext, aad)
    except InvalidTag:
        raise AuthenticationError(f"chunk {ec.chunk_id} failed authentication") from None
    return PlainChunk(ec.chunk_id, ec.rect, pt)


class ChunkCipher:
    """Per-session encryptor: 4-byte random prefix + 8-byte counter nonces.

    The counter is the only synchronized state; explicit nonces passed to
    :meth:`encrypt` are checked against every nonce already used.
    """

    def __init__(self, secret: SessionSecret, prefix: bytes | None = None, context: bytes = b""):
        self.secret = secret
        self.context = context
        self.prefix = os.urandom(4) if prefix is None else prefix
        if len(self.prefix) != 4:
            raise ArgumentError("nonce prefix must be 4 bytes")
        self._counter = 0
        self._used: set[bytes] = set()
        self._lock = threading.Lock()

    def next_nonce(self) -> bytes:
        with self._lock:
            while True:
                nonce = self.prefix + self._counter.to_bytes(8, "big")
                self._counter += 1
                if nonce not in self._used:
                    return nonce

    def encrypt(self, chunk: PlainChunk, nonce: bytes | None = None,
                context: bytes | None = None) -> EncryptedChunk:
        if nonce is None:
            nonce = self.next_nonce()
        with self._lock:
            if nonce in self._used:
                raise NonceReuse(f"nonce {nonce.hex()} already used in this session")
            self._used.add(nonce)
        return encrypt_chunk(chunk, self.secret, nonce,
                             self.context if context is None else context)

    def decrypt(self, ec: EncryptedChunk, context: bytes | None = None) -> PlainChunk:
        return decrypt_chunk(ec, self.secret, self.context if context is None else context)


# --- keyed transmission order ------------------------------------------------------

class _KeyStream:
    """HMAC-SHA256 counter-mode stream of 64-bit words."""

    def __init__(self, seed: bytes):
        self.seed = seed
        self.counter = 0
        self.buf = b""

    def word(self) -> int:
        if len(self.buf) < 8:
            self.buf += hmac.new(self.seed, self.counter.to_bytes(8, "big"), hashlib.sha256).digest()
            self.counter += 1
        w, self.buf = self.buf[:8], self.buf[8:]
        return int.from_bytes(w, "big")

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            w = self.word()
            if w < limit:
                return w % n


def permute_order(n_chunks: int, secret: SessionSecret | bytes) -> list[int]:
    """Transmission order: position i carries chunk ``perm[i]``."""
    if n_chunks < 1:
        raise ArgumentError("need at least one chunk")
    seed = secret.perm_seed if isinstance(secret, SessionSecret) else secret
    stream = _KeyStream(seed)
    perm = list(range(n_chunks))
    for i in range(n_chunks - 1, 0, -1):
        j = stream.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def invert_order(perm) -> list[int]:
    inv = [0] * len(perm)
    for pos, idx in enumerate(perm):
        inv[idx] = pos
    return inv


def apply_order(items, perm) -> list:
    return [items[i] for i in perm]


# --- benchmark ----------------------------------------------------------------------

@dataclass
class BenchRow:
    k: int
    chunks: int
    total_ms: float
    per_chunk_us: float
    samples_ms: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"k": self.k, "chunks": self.chunks, "total_ms": self.total_ms,
                "per_chunk_us": self.per_chunk_us}


def bench_encryption(image: np.ndarray, k_values, reps: int = 30,
                     secret: SessionSecret | None = None) -> list[BenchRow]:
    """Median wall-clock time to seal every chunk of one slice, per grid order."""
    k_values = list(k_values)
    if not k_values:
        raise ArgumentError("k_values must not be empty")
    if secret is None:
        secret = derive_key(b"bench", b"\0" * SALT_LEN, MIN_ITERATIONS)
    rows = []
    for k in k_values:
        chunks = split_slice(image, make_grid(image.shape, k))
        cipher = ChunkCipher(secret)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for ch in chunks:
                cipher.encrypt(ch)
            samples.append((time.perf_counter() - t0) * 1e3)
        med = statistics.median(samples)
        rows.append(BenchRow(k, len(chunks), med, med * 1e3 / len(chunks), samples))
    return rows


def bench_report_json(rows) -> str:
    return json.dumps([r.to_json() for r in rows], indent=2)
