import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedretro.fingerprint import (ALLOWED_NBITS, BadDimension, BitFingerprint, FingerprintConfig, LengthMismatch,
                                  ecfp, fold, folded_smiles, molecule_similarity, smiles_fingerprint, stable_hash,
                                  tanimoto)
from fedretro.smiles import parse_smiles, write_smiles

from molgen import random_molecule, random_order
from oracles import naive_tanimoto


def test_single_carbon_radius_zero_sets_one_bit():
    assert ecfp(parse_smiles("C"), 0, 2048).popcount == 1


def test_permutation_invariance():
    assert smiles_fingerprint("CCO") == smiles_fingerprint("OCC")
    rng = random.Random(0)
    for _ in range(50):
        mol = random_molecule(rng, stereo=False)
        a = ecfp(mol, 2, 1024)
        b = ecfp(parse_smiles(write_smiles(mol, random_order(rng, mol))), 2, 1024)
        assert a == b


def test_radius_grows_bit_set():
    mol = parse_smiles("CC(=O)OCC")
    prev = set()
    for r in range(4):
        bits = set(ecfp(mol, r, 2048).on_bits())
        assert prev <= bits
        prev = bits


def test_hash_and_bits_are_frozen():
    # frozen values: a change here silently changes every fingerprint
    assert stable_hash(1, 2, 3) == 6890116449951872287
    assert ecfp(parse_smiles("CC(=O)OCC"), 2, 2048).on_bits() == [
        56, 69, 173, 392, 488, 554, 584, 585, 603, 851, 887, 1010, 1059, 1470, 1615, 1888, 1961]
    assert stable_hash(1, 2, 3) != stable_hash(3, 2, 1)
    assert stable_hash(-1) == stable_hash(2**64 - 1)


def test_bad_nbits():
    with pytest.raises(BadDimension):
        BitFingerprint(1000, 0)
    with pytest.raises(BadDimension):
        FingerprintConfig(nbits=100)


def test_tanimoto_examples():
    a = BitFingerprint.from_indices(256, [1, 2, 3])
    b = BitFingerprint.from_indices(256, [2, 3, 4])
    assert tanimoto(a, b) == 0.5
    assert tanimoto(a, a) == 1.0
    empty = BitFingerprint(256)
    assert tanimoto(empty, empty) == 1.0
    assert tanimoto(a, empty) == 0.0


def test_tanimoto_length_mismatch():
    with pytest.raises(LengthMismatch):
        tanimoto(BitFingerprint(256), BitFingerprint(512))


@given(st.sets(st.integers(0, 255)), st.sets(st.integers(0, 255)))
def test_tanimoto_matches_set_oracle(a, b):
    fa, fb = BitFingerprint.from_indices(256, a), BitFingerprint.from_indices(256, b)
    assert tanimoto(fa, fb) == naive_tanimoto(a, b)
    assert tanimoto(fa, fb) == tanimoto(fb, fa)


def test_molecule_similarity():
    cfg = FingerprintConfig()
    assert molecule_similarity("OCC", "CCO", cfg) == 1.0
    assert molecule_similarity("C(", "CCO", cfg) == 0.0
    s = molecule_similarity("CCN", "CCO", cfg)
    assert 0.0 < s < 1.0


def test_fold_examples():
    fp = BitFingerprint.from_indices(2048, [300])
    v = fold(fp, 256)
    assert v.shape == (256,) and v[44] == 1.0 and v.sum() == 1.0
    fp = BitFingerprint.from_indices(2048, [5, 5 + 256, 5 + 512])
    assert fold(fp, 256).sum() == 1.0
    full = BitFingerprint.from_indices(2048, range(7))
    assert np.array_equal(fold(full, 2048), full.to_array())


def test_fold_bad_dim():
    with pytest.raises(BadDimension):
        fold(BitFingerprint(2048), 300)


def test_fold_matches_or_definition():
    rng = np.random.default_rng(1)
    for nbits in ALLOWED_NBITS:
        idx = rng.choice(nbits, size=40, replace=False)
        fp = BitFingerprint.from_indices(nbits, idx)
        expect = np.zeros(256)
        for j in idx:
            expect[j % 256] = 1.0
        assert np.array_equal(fold(fp, 256), expect)


def test_folded_smiles_unparseable_is_zero_and_cached_is_readonly():
    cfg = FingerprintConfig()
    assert not folded_smiles("C(", cfg, 256).any()
    v = folded_smiles("CCO", cfg, 256)
    with pytest.raises(ValueError):
        v[0] = 5.0
