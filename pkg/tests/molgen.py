"""Random molecule generation shared by the property tests."""

import random

from fedretro.smiles import Atom, Bond, MolGraph

_PLAIN = ["C", "C", "C", "N", "O", "S", "F", "Cl", "Br", "P", "B", "I"]
_AROMATIC = ["C", "C", "N", "O", "S"]


def random_molecule(rng: random.Random, max_atoms: int = 12, rings: int = 2,
                    fragments: int = 2, stereo: bool = True) -> MolGraph:
    """A random labeled multigraph exercising the full supported subset."""
    atoms = []
    bonds = []
    pairs = set()
    n_frag = rng.randint(1, fragments)
    for _ in range(n_frag):
        size = rng.randint(1, max_atoms)
        base = len(atoms)
        for k in range(size):
            aromatic = rng.random() < 0.2
            element = rng.choice(_AROMATIC if aromatic else _PLAIN)
            bracket = rng.random() < 0.25
            atoms.append(Atom(
                element,
                aromatic,
                formal_charge=rng.choice([0, 0, 0, 1, -1, 2]) if bracket else 0,
                explicit_h=rng.randint(0, 3) if bracket else None,
                isotope=rng.choice([None, None, 13, 2]) if bracket else None,
            ))
            if k:
                other = base + rng.randrange(k)
                bonds.append(_random_bond(rng, other, base + k, atoms))
                pairs.add(frozenset((other, base + k)))
        for _ in range(rng.randint(0, rings)):
            if size < 3:
                break
            a, b = rng.sample(range(base, base + size), 2)
            if frozenset((a, b)) in pairs:
                continue
            pairs.add(frozenset((a, b)))
            bonds.append(_random_bond(rng, a, b, atoms))
    mol = MolGraph(tuple(atoms), tuple(bonds))
    if not stereo:
        return mol
    # sprinkle chirality on bracket-able atoms with >= 3 neighbors
    atoms = list(mol.atoms)
    refs = [None] * len(atoms)
    for i, a in enumerate(atoms):
        nbrs = [w for w, _ in mol.adjacency[i]]
        h = a.explicit_h if a.explicit_h is not None else 0
        if len(nbrs) + min(h, 1) >= 3 and h <= 1 and rng.random() < 0.5:
            atoms[i] = Atom(a.element, a.aromatic, a.formal_charge, h, a.isotope,
                            rng.choice(["clockwise", "counterclockwise"]))
            order = nbrs + [-1] * h
            rng.shuffle(order)
            refs[i] = tuple(order)
    return MolGraph(tuple(atoms), mol.bonds, stereo_refs=tuple(refs))


def _random_bond(rng, a, b, atoms):
    if atoms[a].aromatic and atoms[b].aromatic:
        order = rng.choice(["aromatic", "aromatic", "single"])
    else:
        order = rng.choice(["single", "single", "single", "double", "triple", "aromatic"])
    stereo = "none"
    if order == "single" and rng.random() < 0.1:
        stereo = rng.choice(["up", "down"])
    if rng.random() < 0.5:
        a, b = b, a
    return Bond(a, b, order, stereo)


def random_order(rng: random.Random, mol: MolGraph) -> list[int]:
    order = list(range(len(mol.atoms)))
    rng.shuffle(order)
    return order
