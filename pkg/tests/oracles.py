"""Independent reference implementations the suite checks the package against.

None of these share code paths with the package beyond data types.
"""

from __future__ import annotations

import math

import networkx as nx
import numpy as np

from fedretro.smiles import Atom, Bond, MolGraph, canonicalize, parse_smiles, write_smiles


# ---- graphs ---------------------------------------------------------------

def to_networkx(mol: MolGraph) -> nx.Graph:
    g = nx.Graph()
    for i, a in enumerate(mol.atoms):
        g.add_node(i, label=(a.element, a.aromatic, a.formal_charge, a.h_count, a.isotope))
    for b in mol.bonds:
        g.add_edge(b.begin, b.end, order=b.order)
    return g


def same_graph(a: MolGraph, b: MolGraph) -> bool:
    """Labelled-graph isomorphism ignoring stereo annotations."""
    return nx.is_isomorphic(
        to_networkx(a), to_networkx(b),
        node_match=lambda x, y: x["label"] == y["label"],
        edge_match=lambda x, y: x["order"] == y["order"],
    )


# ---- similarity and weights -------------------------------------------------

def naive_tanimoto(a: set[int], b: set[int]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def ckiw_reference(S, mu: float, tau: float) -> list[list[float]]:
    K = len(S)
    if K == 1:
        return [[1.0]]
    W = [[0.0] * K for _ in range(K)]
    for i in range(K):
        denom = sum(math.exp(S[i][j] / tau) for j in range(K) if j != i)
        for k in range(K):
            W[i][k] = mu if k == i else (1 - mu) * math.exp(S[i][k] / tau) / denom
    return W


# ---- metrics ----------------------------------------------------------------

def naive_topk(pred_strings: list[list[str]], truths: list[str], K: int) -> float:
    """Plain string comparison; inputs are assumed canonical already."""
    hits = sum(1 for preds, t in zip(pred_strings, truths) if t in preds[:K])
    return hits / len(truths) if truths else 0.0


# ---- gradients --------------------------------------------------------------

def central_difference(f, x: np.ndarray, idx, h: float = 1e-4) -> np.ndarray:
    out = np.empty(len(idx))
    for n, j in enumerate(idx):
        orig = x[j]
        x[j] = orig + h
        up = f(x)
        x[j] = orig - h
        down = f(x)
        x[j] = orig
        out[n] = (up - down) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---- forward reaction templates on graphs ----------------------------------

def _merge(frags: list[MolGraph]) -> tuple[list[Atom], list[tuple[int, int, str]]]:
    atoms, bonds = [], []
    for f in frags:
        base = len(atoms)
        atoms.extend(f.atoms)
        bonds.extend((base + b.begin, base + b.end, b.order) for b in f.bonds)
    return atoms, bonds


def _neighbors(bonds, i):
    return [(b if a == i else a, o) for a, b, o in bonds if i in (a, b)]


def _hydroxyl_carbon(atoms, bonds, element="O", acyl=None):
    """(X, C): a terminal X attached by a single bond to carbon C; ``acyl`` filters on C=O."""
    for i, a in enumerate(atoms):
        if a.element != element or a.formal_charge:
            continue
        nb = _neighbors(bonds, i)
        if len(nb) != 1 or nb[0][1] != "single" or atoms[nb[0][0]].element != "C":
            continue
        c = nb[0][0]
        is_acyl = any(atoms[w].element == "O" and o == "double" for w, o in _neighbors(bonds, c))
        if acyl is None or acyl == is_acyl:
            return i, c
    return None


def _rebuild(atoms, bonds, drop: set[int], new_bond: tuple[int, int]) -> str:
    keep = [i for i in range(len(atoms)) if i not in drop]
    remap = {old: new for new, old in enumerate(keep)}
    out_bonds = [Bond(remap[a], remap[b], o) for a, b, o in bonds if a in remap and b in remap]
    out_bonds.append(Bond(remap[new_bond[0]], remap[new_bond[1]]))
    mol = MolGraph(tuple(atoms[i] for i in keep), tuple(out_bonds))
    return canonicalize(write_smiles(mol))


def forward_template(family_name: str, reactants: str) -> str:
    """Apply a named reaction template to reactant SMILES, independently of the generator."""
    mol = parse_smiles(reactants)
    frags = [mol.subgraph(f) for f in mol.fragments()]
    if len(frags) != 2:
        raise ValueError("templates take two reactants")
    for a_frag, b_frag in (frags, frags[::-1]):
        atoms, bonds = _merge([a_frag, b_frag])
        n_a = len(a_frag.atoms)
        in_a = lambda i: i < n_a  # noqa: E731
        if family_name in ("esterification", "amide_formation"):
            acid = _hydroxyl_carbon(atoms, bonds, "O", acyl=True)
            nuc = _hydroxyl_carbon(atoms, bonds, "O" if family_name == "esterification" else "N", acyl=False)
            if acid and nuc and in_a(acid[0]) and not in_a(nuc[0]):
                return _rebuild(atoms, bonds, {acid[0]}, (acid[1], nuc[0]))
        elif family_name == "halogenation":
            if len(a_frag.atoms) == 1 and a_frag.atoms[0].element == "Br":
                alcohol = _hydroxyl_carbon(atoms, bonds, "O", acyl=False)
                if alcohol:
                    return _rebuild(atoms, bonds, {alcohol[0]}, (0, alcohol[1]))
        elif family_name == "ether_formation":
            halide = _hydroxyl_carbon(atoms, bonds, "Br")
            alcohol = _hydroxyl_carbon(atoms, bonds, "O", acyl=False)
            if halide and alcohol and in_a(halide[0]) and not in_a(alcohol[0]):
                return _rebuild(atoms, bonds, {halide[0]}, (halide[1], alcohol[0]))
        else:
            raise ValueError(family_name)
    raise ValueError(f"{family_name} does not apply to {reactants}")
