"""Circular (ECFP-style) bit fingerprints and Tanimoto similarity."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .smiles import BOND_CODE, MolGraph, SmilesError, canonicalize, parse_smiles

ALLOWED_NBITS = (256, 512, 1024, 2048, 4096)
_HASH_KEY = b"fedretro-ecfp-v1"
_MASK64 = (1 << 64) - 1


class LengthMismatch(ValueError):
    pass


class BadDimension(ValueError):
    pass


@dataclass(frozen=True)
class BitFingerprint:
    """Fixed-length bitset stored as a Python int (bit ``j`` is ``(bits >> j) & 1``)."""

    nbits: int
    bits: int = 0
    popcount: int = field(init=False)

    def __post_init__(self):
        if self.nbits not in ALLOWED_NBITS:
            raise BadDimension(f"nbits must be one of {ALLOWED_NBITS}, got {self.nbits}")
        if self.bits < 0 or self.bits >> self.nbits:
            raise ValueError("bits outside the fingerprint length")
        object.__setattr__(self, "popcount", self.bits.bit_count())

    @classmethod
    def from_indices(cls, nbits: int, indices) -> BitFingerprint:
        bits = 0
        for j in indices:
            bits |= 1 << int(j)
        return cls(nbits, bits)

    def on_bits(self) -> list[int]:
        out, b, j = [], self.bits, 0
        while b:
            if b & 1:
                out.append(j)
            b >>= 1
            j += 1
        return out

    def to_array(self) -> np.ndarray:
        raw = self.bits.to_bytes(self.nbits // 8, "little")
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little").astype(np.float64)

    def __or__(self, other: BitFingerprint) -> BitFingerprint:
        if self.nbits != other.nbits:
            raise LengthMismatch("fingerprint lengths differ")
        return BitFingerprint(self.nbits, self.bits | other.bits)


@dataclass(frozen=True)
class FingerprintConfig:
    radius: int = 2
    nbits: int = 2048

    def __post_init__(self):
        if not 0 <= self.radius <= 4:
            raise ValueError("radius must be in [0, 4]")
        if self.nbits not in ALLOWED_NBITS:
            raise BadDimension(f"nbits must be one of {ALLOWED_NBITS}")


def stable_hash(*items: int) -> int:
    """Platform-independent keyed 64-bit hash of a sequence of integers."""
    data = struct.pack(f"<{len(items)}Q", *(x & _MASK64 for x in items))
    return int.from_bytes(hashlib.blake2b(data, digest_size=8, key=_HASH_KEY).digest(), "little")


_ELEMENT_CODE = {e: i + 1 for i, e in enumerate(("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H"))}


def atom_invariant(mol: MolGraph, i: int) -> int:
    a = mol.atoms[i]
    return stable_hash(_ELEMENT_CODE[a.element], a.formal_charge, mol.degree(i), int(a.aromatic), a.h_count)


def atom_environments(mol: MolGraph, radius: int) -> list[list[int]]:
    """Per-radius list of per-atom environment hashes (index ``r`` holds radius ``r``)."""
    current = [atom_invariant(mol, i) for i in range(len(mol.atoms))]
    layers = [current]
    adj = mol.adjacency
    for _ in range(radius):
        nxt = []
        for i in range(len(current)):
            pairs = sorted((BOND_CODE[mol.bonds[bi].order], current[w]) for w, bi in adj[i])
            flat = [current[i]]
            for order, h in pairs:
                flat += [order, h]
            nxt.append(stable_hash(*flat))
        current = nxt
        layers.append(current)
    return layers


def ecfp(mol: MolGraph, radius: int = 2, nbits: int = 2048) -> BitFingerprint:
    if not 0 <= radius <= 4:
        raise ValueError("radius must be in [0, 4]")
    bits = 0
    for layer in atom_environments(mol, radius):
        for h in layer:
            bits |= 1 << (h % nbits)
    return BitFingerprint(nbits, bits)


def tanimoto(a: BitFingerprint, b: BitFingerprint) -> float:
    if a.nbits != b.nbits:
        raise LengthMismatch(f"cannot compare {a.nbits}-bit and {b.nbits}-bit fingerprints")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


@lru_cache(maxsize=200_000)
def smiles_fingerprint(text: str, radius: int = 2, nbits: int = 2048) -> BitFingerprint:
    """Fingerprint of the canonical form of ``text`` (all fragments together)."""
    return ecfp(parse_smiles(canonicalize(text)), radius, nbits)


def molecule_similarity(pred: str, truth: str, cfg: FingerprintConfig = FingerprintConfig()) -> float:
    """Tanimoto similarity of predicted and true reactant sets; 0.0 if ``pred`` does not parse."""
    f_truth = smiles_fingerprint(truth, cfg.radius, cfg.nbits)
    try:
        f_pred = smiles_fingerprint(pred, cfg.radius, cfg.nbits)
    except SmilesError:
        return 0.0
    return tanimoto(f_pred, f_truth)


def fold(fp: BitFingerprint, dim: int = 256) -> np.ndarray:
    """OR-fold to ``dim`` entries: entry ``j`` is set iff any bit ``j + m*dim`` is."""
    if dim <= 0 or fp.nbits % dim:
        raise BadDimension(f"dim {dim} does not divide {fp.nbits}")
    arr = fp.to_array().reshape(-1, dim)
    return arr.max(axis=0)


@lru_cache(maxsize=200_000)
def _folded_cached(text: str, radius: int, nbits: int, dim: int) -> np.ndarray:
    out = fold(smiles_fingerprint(text, radius, nbits), dim)
    out.setflags(write=False)
    return out


def folded_smiles(text: str, cfg: FingerprintConfig, dim: int) -> np.ndarray:
    """Folded fingerprint of ``text``; all zeros when it does not parse."""
    try:
        return _folded_cached(text, cfg.radius, cfg.nbits, dim)
    except SmilesError:
        return np.zeros(dim)
