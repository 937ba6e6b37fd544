"""SMILES subset: parsing, writing, canonicalization and tokenization.

Supported grammar is the organic subset plus bracket atoms carrying isotope,
chirality (``@``/``@@``), hydrogen count, charge and an atom-map class (the
map class is accepted and discarded). Chirality and ``/``/``\\`` bond marks
are carried as annotations; they are re-expressed consistently when atoms
are re-ordered but never interpreted geometrically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

SUPPORTED_ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H")
AROMATIC_ELEMENTS = frozenset({"B", "C", "N", "O", "P", "S"})
ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})

BOND_ORDERS = ("single", "double", "triple", "aromatic")
BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic", "/": "single", "\\": "single"}
_ORDER_SYMBOL = {"single": "-", "double": "=", "triple": "#", "aromatic": ":"}

CHIRALITIES = ("none", "clockwise", "counterclockwise")
_FLIP = {"clockwise": "counterclockwise", "counterclockwise": "clockwise", "none": "none"}

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
SEP = "."
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)

MAX_TIED_CANDIDATES = 64
_IMPLICIT_H = -1  # neighbor-order sentinel for a bracket hydrogen


class SmilesError(ValueError):
    """Base class for SMILES errors; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class SmilesSyntaxError(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnbalancedBranch(SmilesError):
    pass


class UnsupportedElement(SmilesError):
    pass


class TokenError(SmilesError):
    pass


class EmptyMolecule(SmilesError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    isotope: int | None = None
    chirality: str = "none"

    def __post_init__(self):
        if self.element not in SUPPORTED_ELEMENTS:
            raise UnsupportedElement(f"unsupported element {self.element!r}")
        if self.aromatic and self.element not in AROMATIC_ELEMENTS:
            raise UnsupportedElement(f"element {self.element!r} cannot be aromatic")
        if not -4 <= self.formal_charge <= 4:
            raise SmilesSyntaxError(f"formal charge {self.formal_charge} out of range")
        if self.explicit_h is not None and self.explicit_h < 0:
            raise SmilesSyntaxError("negative hydrogen count")
        if self.isotope is not None and self.isotope < 0:
            raise SmilesSyntaxError("negative isotope")
        if self.chirality not in CHIRALITIES:
            raise ValueError(f"bad chirality {self.chirality!r}")

    @property
    def heavy(self) -> bool:
        return self.element != "H"

    @property
    def h_count(self) -> int:
        return self.explicit_h or 0


@dataclass(frozen=True)
class Bond:
    """A bond; ``stereo`` is relative to the direction ``begin -> end``."""

    begin: int
    end: int
    order: str = "single"
    stereo: str = "none"

    def __post_init__(self):
        if self.begin == self.end:
            raise SmilesSyntaxError("bond endpoints must differ")
        if self.order not in BOND_ORDERS:
            raise ValueError(f"bad bond order {self.order!r}")
        if self.stereo not in ("none", "up", "down"):
            raise ValueError(f"bad bond stereo {self.stereo!r}")

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)

    def other(self, i: int) -> int:
        return self.end if i == self.begin else self.begin


@dataclass(frozen=True)
class MolGraph:
    """Molecular multigraph: atoms, bonds and per-atom fragment labels.

    ``stereo_refs`` records, for each chiral atom, the neighbor order the
    chirality label refers to (``-1`` stands for a bracket hydrogen).
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    fragment_ids: tuple[int, ...] = ()
    stereo_refs: tuple[tuple[int, ...] | None, ...] = ()

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.begin < n and 0 <= b.end < n):
                raise ValueError("bond endpoint out of range")
            key = frozenset(b.endpoints)
            if key in seen:
                raise SmilesSyntaxError(f"duplicate bond between atoms {b.begin} and {b.end}")
            seen.add(key)
        if not self.fragment_ids or len(self.fragment_ids) != n:
            object.__setattr__(self, "fragment_ids", _components(n, self.bonds))
        if len(self.stereo_refs) != n:
            object.__setattr__(self, "stereo_refs", (None,) * n)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom: ``(neighbor, bond_index)`` pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for bi, b in enumerate(self.bonds):
            adj[b.begin].append((b.end, bi))
            adj[b.end].append((b.begin, bi))
        return tuple(tuple(a) for a in adj)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    @property
    def n_fragments(self) -> int:
        return len(set(self.fragment_ids))

    def fragments(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for i, f in enumerate(self.fragment_ids):
            groups.setdefault(f, []).append(i)
        return [groups[f] for f in sorted(groups)]

    def subgraph(self, atom_indices: Sequence[int]) -> MolGraph:
        remap = {old: new for new, old in enumerate(atom_indices)}
        atoms = tuple(self.atoms[i] for i in atom_indices)
        bonds = tuple(
            Bond(remap[b.begin], remap[b.end], b.order, b.stereo)
            for b in self.bonds
            if b.begin in remap and b.end in remap
        )
        refs = []
        for i in atom_indices:
            r = self.stereo_refs[i]
            if r is not None and all(x == _IMPLICIT_H or x in remap for x in r):
                r = tuple(x if x == _IMPLICIT_H else remap[x] for x in r)
            else:
                r = None
            refs.append(r)
        return MolGraph(atoms, bonds, stereo_refs=tuple(refs))


def _components(n: int, bonds: Iterable[Bond]) -> tuple[int, ...]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for b in bonds:
        ra, rb = find(b.begin), find(b.end)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    labels: dict[int, int] = {}
    out = []
    for i in range(n):
        r = find(i)
        if r not in labels:
            labels[r] = len(labels)
        out.append(labels[r])
    return tuple(out)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_ALL_ELEMENT_SYMBOLS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge
    As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm
    Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U
    Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: list[Bond] = []
        self.pairs: set[frozenset] = set()
        self.refs: list[list[int | None]] = []

    def error(self, cls, msg, pos=None):
        raise cls(msg, self.pos if pos is None else pos)

    def add_bond(self, a: int, b: int, symbol: str | None, pos: int):
        if a == b:
            self.error(SmilesSyntaxError, "ring closure bonds an atom to itself", pos)
        key = frozenset((a, b))
        if key in self.pairs:
            self.error(SmilesSyntaxError, "duplicate bond", pos)
        self.pairs.add(key)
        if symbol is None:
            both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order, stereo = ("aromatic" if both_aromatic else "single"), "none"
        else:
            order = _BOND_SYMBOLS[symbol]
            stereo = {"/": "up", "\\": "down"}.get(symbol, "none")
        self.bonds.append(Bond(a, b, order, stereo))

    def parse(self) -> MolGraph:
        text = self.text
        n = len(text)
        prev: int | None = None
        bond_sym: str | None = None
        bond_pos = 0
        branches: list[tuple[int, int]] = []
        rings: dict[int, tuple[int, str | None, int, int]] = {}
        # what the previous token was, to reject e.g. "()" or "(." or "C(=)"
        last = "start"
        while self.pos < n:
            ch = text[self.pos]
            start = self.pos
            if ch == "(":
                if prev is None or last in ("open", "bond"):
                    self.error(UnbalancedBranch if prev is None else SmilesSyntaxError, "branch without a preceding atom")
                branches.append((prev, start))
                self.pos += 1
                last = "open"
            elif ch == ")":
                if not branches:
                    self.error(UnbalancedBranch, "unmatched ')'")
                if last in ("open", "bond"):
                    self.error(SmilesSyntaxError, "empty branch or dangling bond")
                prev, _ = branches.pop()
                self.pos += 1
                last = "close"
            elif ch == ".":
                if bond_sym is not None or last in ("start", "dot", "open"):
                    self.error(SmilesSyntaxError, "misplaced '.'")
                if branches:
                    self.error(UnbalancedBranch, "'.' inside a branch")
                prev = None
                self.pos += 1
                last = "dot"
            elif ch in _BOND_SYMBOLS:
                if prev is None or bond_sym is not None:
                    self.error(SmilesSyntaxError, "misplaced bond symbol")
                bond_sym, bond_pos = ch, start
                self.pos += 1
                last = "bond"
            elif ch.isdigit() or ch == "%":
                if prev is None or last in ("open", "close", "dot"):
                    self.error(SmilesSyntaxError, "ring closure without a preceding atom")
                if ch == "%":
                    digits = text[self.pos + 1:self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.error(SmilesSyntaxError, "'%' must be followed by two digits")
                    num = int(digits)
                    self.pos += 3
                else:
                    num = int(ch)
                    self.pos += 1
                if num in rings:
                    other, other_sym, other_pos, slot = rings.pop(num)
                    if other_sym is not None and bond_sym is not None and other_sym != bond_sym:
                        self.error(SmilesSyntaxError, "conflicting ring-closure bond symbols", start)
                    if bond_sym is not None:
                        self.add_bond(prev, other, bond_sym, start)
                    else:
                        self.add_bond(other, prev, other_sym, start)
                    self.refs[other][slot] = prev
                    self.refs[prev].append(other)
                else:
                    rings[num] = (prev, bond_sym, start, len(self.refs[prev]))
                    self.refs[prev].append(None)
                bond_sym = None
                last = "ring"
            else:
                atom = self.parse_atom()
                idx = len(self.atoms)
                self.atoms.append(atom)
                self.refs.append([])
                if prev is not None:
                    self.add_bond(prev, idx, bond_sym, bond_pos)
                    self.refs[prev].append(idx)
                    self.refs[idx].append(prev)
                if atom.chirality != "none" and atom.h_count:
                    self.refs[idx].extend([_IMPLICIT_H] * atom.h_count)
                bond_sym = None
                prev = idx
                last = "atom"
        if bond_sym is not None:
            self.error(SmilesSyntaxError, "dangling bond symbol", bond_pos)
        if branches:
            self.error(UnbalancedBranch, "unclosed '('", branches[-1][1])
        if rings:
            num, (_, _, p, _) = min(rings.items(), key=lambda kv: kv[1][2])
            self.error(UnclosedRing, f"ring closure {num} never closed", p)
        if not self.atoms:
            self.error(SmilesSyntaxError, "no atoms", 0)
        refs = tuple(
            tuple(r) if a.chirality != "none" else None for a, r in zip(self.atoms, self.refs)
        )
        return MolGraph(tuple(self.atoms), tuple(self.bonds), stereo_refs=refs)

    def parse_atom(self) -> Atom:
        text, start = self.text, self.pos
        ch = text[start]
        if ch == "[":
            return self.parse_bracket()
        two = text[start:start + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return Atom(two)
        if ch in ORGANIC_SUBSET:
            self.pos += 1
            return Atom(ch)
        if ch in ("b", "c", "n", "o", "p", "s"):
            self.pos += 1
            return Atom(ch.upper(), aromatic=True)
        if ch.isalpha() or ch == "*":
            self.error(UnsupportedElement, f"unsupported atom {ch!r}")
        self.error(SmilesSyntaxError, f"unexpected character {ch!r}")

    def parse_bracket(self) -> Atom:
        text = self.text
        start = self.pos
        end = text.find("]", start)
        if end < 0:
            self.error(SmilesSyntaxError, "unclosed '['", start)
        body = text[start + 1:end]
        if "[" in body:
            self.error(SmilesSyntaxError, "nested '['", start + 1 + body.index("["))
        i = 0

        def here():
            return start + 1 + i

        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        isotope = int(body[i:j]) if j > i else None
        i = j
        if i >= len(body) or not body[i].isalpha():
            self.error(SmilesSyntaxError, "bracket atom without element", here())
        aromatic = body[i].islower()
        if aromatic:
            sym = body[i]
            i += 1
            if i < len(body) and body[i].islower():
                self.error(UnsupportedElement, f"unsupported aromatic atom {body[i - 1:i + 1]!r}", here() - 1)
            if sym.upper() not in AROMATIC_ELEMENTS:
                self.error(UnsupportedElement, f"unsupported aromatic atom {sym!r}", here() - 1)
            element = sym.upper()
        else:
            sym = body[i]
            i += 1
            if i < len(body) and body[i].islower():
                sym += body[i]
                i += 1
            if sym not in SUPPORTED_ELEMENTS:
                cls = UnsupportedElement if (sym in _ALL_ELEMENT_SYMBOLS or sym[0].isupper()) else SmilesSyntaxError
                self.error(cls, f"unsupported element {sym!r}", here() - len(sym))
            element = sym
        chirality = "none"
        if body.startswith("@@", i):
            chirality, i = "clockwise", i + 2
        elif body.startswith("@", i):
            chirality, i = "counterclockwise", i + 1
            if i < len(body) and body[i] in "TASO":
                self.error(SmilesSyntaxError, "extended chirality classes are not supported", here())
        hcount = 0
        if i < len(body) and body[i] == "H":
            i += 1
            j = i
            while j < len(body) and body[j].isdigit():
                j += 1
            hcount = int(body[i:j]) if j > i else 1
            i = j
        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            s = body[i]
            i += 1
            j = i
            while j < len(body) and body[j].isdigit():
                j += 1
            if j > i:
                charge = sign * int(body[i:j])
                i = j
            else:
                mag = 1
                while i < len(body) and body[i] == s:
                    mag += 1
                    i += 1
                charge = sign * mag
            if not -4 <= charge <= 4:
                self.error(SmilesSyntaxError, f"charge {charge} out of range", here())
        if i < len(body) and body[i] == ":":
            i += 1
            j = i
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == i:
                self.error(SmilesSyntaxError, "atom map without a number", here())
            i = j
        if i != len(body):
            self.error(SmilesSyntaxError, f"unexpected {body[i]!r} in bracket atom", here())
        self.pos = end + 1
        if len(str(hcount)) > 3 or (isotope is not None and isotope > 999):
            self.error(SmilesSyntaxError, "implausible bracket atom", start)
        return Atom(element, aromatic, charge, hcount, isotope, chirality)


def parse_smiles(text: str) -> MolGraph:
    """Parse ``text`` into a :class:`MolGraph`.

    Raises a :class:`SmilesError` subclass carrying the offending position.
    """
    if not isinstance(text, str):
        raise SmilesSyntaxError("SMILES must be a string", 0)
    if not text:
        raise SmilesSyntaxError("empty SMILES", 0)
    if not text.isascii():
        bad = next(i for i, c in enumerate(text) if ord(c) > 127)
        raise SmilesSyntaxError("non-ASCII character", bad)
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------

def _atom_text(atom: Atom, chirality: str) -> str:
    if (
        atom.element in ORGANIC_SUBSET
        and atom.formal_charge == 0
        and atom.explicit_h is None
        and atom.isotope is None
        and chirality == "none"
    ):
        return atom.element.lower() if atom.aromatic else atom.element
    out = ["["]
    if atom.isotope is not None:
        out.append(str(atom.isotope))
    out.append(atom.element.lower() if atom.aromatic else atom.element)
    if chirality == "counterclockwise":
        out.append("@")
    elif chirality == "clockwise":
        out.append("@@")
    if atom.h_count:
        out.append("H" if atom.h_count == 1 else f"H{atom.h_count}")
    q = atom.formal_charge
    if q:
        out.append(("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else ""))
    out.append("]")
    return "".join(out)


def _bond_text(mol: MolGraph, bond: Bond, frm: int) -> str:
    if bond.stereo != "none":
        up = bond.stereo == "up"
        if frm != bond.begin:
            up = not up
        return "/" if up else "\\"
    a, b = mol.atoms[bond.begin], mol.atoms[bond.end]
    both_aromatic = a.aromatic and b.aromatic
    if bond.order == "single":
        return "-" if both_aromatic else ""
    if bond.order == "aromatic":
        return "" if both_aromatic else ":"
    return _ORDER_SYMBOL[bond.order]


def _parity(seq_a: Sequence[int], seq_b: Sequence[int]) -> int:
    """Parity (0 even, 1 odd) of the permutation taking ``seq_a`` to ``seq_b``."""
    # duplicate sentinels (several bracket H) make the permutation ambiguous; such
    # centres are not stereogenic, so any consistent answer will do
    pos = {}
    for i, x in enumerate(seq_b):
        pos.setdefault(x, []).append(i)
    perm = [pos[x].pop(0) for x in seq_a]
    seen = [False] * len(perm)
    parity = 0
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        parity ^= (length - 1) & 1
    return parity


def write_smiles(mol: MolGraph, order: Sequence[int] | None = None) -> str:
    """Serialize ``mol``; ``order`` is an atom priority sequence.

    Each fragment starts at its first atom in ``order`` and neighbors are
    visited in ``order`` priority. Fragments are emitted in order of their
    first atom.
    """
    n = len(mol.atoms)
    if n == 0:
        raise EmptyMolecule("molecule has no atoms")
    if order is None:
        order = range(n)
    order = list(order)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the atom indices")
    rank = [0] * n
    for r, a in enumerate(order):
        rank[a] = r
    adj = mol.adjacency
    nbrs = [sorted(adj[i], key=lambda p: rank[p[0]]) for i in range(n)]

    visited = [False] * n
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    parent_bond = [-1] * n
    parent = [-1] * n
    ring_bonds: set[int] = set()
    opens: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    closes: list[list[tuple[int, int]]] = [[] for _ in range(n)]

    def dfs(root):
        visited[root] = True
        stack = [(root, iter(nbrs[root]))]
        while stack:
            v, it = stack[-1]
            advanced = False
            for w, bi in it:
                if bi == parent_bond[v] or bi in ring_bonds:
                    continue
                if visited[w]:
                    ring_bonds.add(bi)
                    opens[w].append((v, bi))
                    closes[v].append((w, bi))
                    continue
                visited[w] = True
                parent[w], parent_bond[w] = v, bi
                children[v].append((w, bi))
                stack.append((w, iter(nbrs[w])))
                advanced = True
                break
            if not advanced:
                stack.pop()

    roots = []
    for a in order:
        if not visited[a]:
            roots.append(a)
            dfs(a)

    out: list[str] = []
    free_digits: list[int] = []
    next_digit = [1]
    digit_of: dict[int, int] = {}

    def take_digit():
        if free_digits:
            free_digits.sort()
            return free_digits.pop(0)
        d = next_digit[0]
        next_digit[0] += 1
        return d

    def digit_text(d):
        return str(d) if d < 10 else f"%{d:02d}"

    def emit(v):
        atom = mol.atoms[v]
        closing = sorted(closes[v], key=lambda p: rank[p[0]])
        opening = sorted(opens[v], key=lambda p: rank[p[0]])
        chir = atom.chirality
        refs = mol.stereo_refs[v]
        if chir != "none" and refs is not None:
            out_order = []
            if parent[v] >= 0:
                out_order.append(parent[v])
            if atom.h_count:
                out_order.extend([_IMPLICIT_H] * atom.h_count)
            out_order += [w for w, _ in closing] + [w for w, _ in opening] + [w for w, _ in children[v]]
            if sorted(out_order) == sorted(refs) and _parity(refs, out_order):
                chir = _FLIP[chir]
        parts = [_atom_text(atom, chir)]
        released = []
        for w, bi in closing:
            d = digit_of.pop(bi)
            parts.append(digit_text(d))
            released.append(d)
        for w, bi in opening:
            d = take_digit()
            digit_of[bi] = d
            parts.append(_bond_text(mol, mol.bonds[bi], v) + digit_text(d))
        free_digits.extend(released)
        return "".join(parts)

    def write_tree(root):
        stack: list = [("atom", root)]
        while stack:
            kind, item = stack.pop()
            if kind == "text":
                out.append(item)
                continue
            v = item
            out.append(emit(v))
            kids = children[v]
            tail = []
            for idx, (w, bi) in enumerate(kids):
                last = idx == len(kids) - 1
                if not last:
                    tail.append(("text", "("))
                tail.append(("text", _bond_text(mol, mol.bonds[bi], v)))
                tail.append(("atom", w))
                if not last:
                    tail.append(("text", ")"))
            stack.extend(reversed(tail))

    for k, r in enumerate(roots):
        if k:
            out.append(".")
        write_tree(r)
    return "".join(out)


# --------------------------------------------------------------------------
# canonicalization
# --------------------------------------------------------------------------

diagnostics = {"tie_break_fallbacks": 0}


def _initial_invariants(mol: MolGraph) -> list[tuple]:
    return [
        (
            a.element,
            a.formal_charge,
            mol.degree(i),
            a.aromatic,
            -1 if a.explicit_h is None else a.explicit_h,
            -1 if a.isotope is None else a.isotope,
        )
        for i, a in enumerate(mol.atoms)
    ]


def _rank_keys(keys: Sequence) -> list[int]:
    """Rank = number of atoms with a strictly smaller key (ties share a rank)."""
    idx = sorted(range(len(keys)), key=lambda i: keys[i])
    ranks = [0] * len(keys)
    for pos, i in enumerate(idx):
        if pos and keys[i] == keys[idx[pos - 1]]:
            ranks[i] = ranks[idx[pos - 1]]
        else:
            ranks[i] = pos
    return ranks


def _refine(mol: MolGraph, ranks: list[int]) -> list[int]:
    adj = mol.adjacency
    bonds = mol.bonds
    n_classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((ranks[w], BOND_CODE[bonds[bi].order]) for w, bi in adj[i])))
            for i in range(len(ranks))
        ]
        ranks = _rank_keys(keys)
        k = len(set(ranks))
        if k == n_classes:
            return ranks
        n_classes = k


def _individualize(ranks: list[int], atom: int) -> list[int]:
    r = ranks[atom]
    return [x + 1 if (x == r and i != atom) else x for i, x in enumerate(ranks)]


def _first_tied_cell(ranks: list[int]) -> list[int] | None:
    counts: dict[int, list[int]] = {}
    for i, r in enumerate(ranks):
        counts.setdefault(r, []).append(i)
    tied = [r for r, members in counts.items() if len(members) > 1]
    if not tied:
        return None
    return counts[min(tied)]


def canonical_ranks(mol: MolGraph) -> tuple[list[int], str]:
    """Canonical atom ranks of a single-fragment molecule and its string.

    Ranks come from iterative neighborhood refinement; remaining ties are
    split by individualization, keeping the candidate with the smallest
    output string.
    """
    ranks = _refine(mol, _rank_keys(_initial_invariants(mol)))
    has_stereo = any(a.chirality != "none" for a in mol.atoms) or any(b.stereo != "none" for b in mol.bonds)
    # refinement reaches the orbit partition on forests, so any tied atom is as good as another
    is_tree = len(mol.bonds) == len(mol.atoms) - mol.n_fragments and not has_stereo

    def leaf_string(r):
        order = sorted(range(len(r)), key=r.__getitem__)
        return write_smiles(mol, order)

    best: tuple[str, list[int]] | None = None
    leaves = 0
    overflow = False
    stack = [ranks]
    while stack:
        r = stack.pop()
        cell = _first_tied_cell(r)
        if cell is None:
            s = leaf_string(r)
            leaves += 1
            if best is None or s < best[0]:
                best = (s, r)
            continue
        if is_tree:
            stack.append(_refine(mol, _individualize(r, cell[0])))
            continue
        if leaves + len(stack) + len(cell) > MAX_TIED_CANDIDATES:
            overflow = True
            break
        for atom in reversed(cell):
            stack.append(_refine(mol, _individualize(r, atom)))
    if overflow:
        diagnostics["tie_break_fallbacks"] += 1
        log.warning("canonical tie-break exceeded %d candidates; using input order", MAX_TIED_CANDIDATES)
        r = ranks
        while (cell := _first_tied_cell(r)) is not None:
            r = _refine(mol, _individualize(r, cell[0]))
        best = (leaf_string(r), r)
    return best[1], best[0]


def canonical_mol(mol: MolGraph) -> str:
    frags = [canonical_ranks(mol.subgraph(f))[1] for f in mol.fragments()]
    return ".".join(sorted(frags))


@lru_cache(maxsize=200_000)
def canonicalize(text: str) -> str:
    """Canonical SMILES for ``text``; raises :class:`SmilesError` if it does not parse."""
    return canonical_mol(strip_atom_maps(parse_smiles(text)))


def try_canonicalize(text: str) -> str | None:
    try:
        return canonicalize(text)
    except SmilesError:
        return None


_DEFAULT_VALENCE = {"B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
                    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,)}


def _default_h(mol: MolGraph, i: int) -> int | None:
    atom = mol.atoms[i]
    if atom.element not in _DEFAULT_VALENCE:
        return None
    used = 0
    n_aromatic = 0
    for _, bi in mol.adjacency[i]:
        order = mol.bonds[bi].order
        if order == "aromatic":
            n_aromatic += 1
            used += 1
        else:
            used += BOND_CODE[order]
    if atom.aromatic:
        if n_aromatic < 2:
            return None
        used += 1
    for v in _DEFAULT_VALENCE[atom.element]:
        if v >= used:
            return v - used
    return 0


def strip_atom_maps(mol: MolGraph) -> MolGraph:
    """Demote bracket atoms that only needed brackets for an atom map.

    The parser already drops map numbers; here a bracket atom is written back
    in organic-subset form when its hydrogen count equals the default one, so
    ``[CH3:1]`` and ``C`` canonicalize alike.
    """
    atoms = list(mol.atoms)
    changed = False
    for i, a in enumerate(atoms):
        if (
            a.explicit_h is not None
            and a.element in ORGANIC_SUBSET
            and a.formal_charge == 0
            and a.isotope is None
            and a.chirality == "none"
            and _default_h(mol, i) == a.explicit_h
        ):
            atoms[i] = Atom(a.element, a.aromatic)
            changed = True
    if not changed:
        return mol
    return MolGraph(tuple(atoms), mol.bonds, mol.fragment_ids, mol.stereo_refs)


def largest_fragment(mol: MolGraph) -> MolGraph:
    """Connected component with the most heavy atoms (ties: smallest canonical string)."""
    frags = mol.fragments()
    if not frags:
        raise EmptyMolecule("molecule has no fragments")
    best = None
    for f in frags:
        sub = mol.subgraph(f)
        heavy = sum(1 for a in sub.atoms if a.heavy)
        key = (-heavy, canonical_mol(sub))
        if best is None or key < best[0]:
            best = (key, sub)
    return best[1]


@lru_cache(maxsize=100_000)
def largest_fragment_smiles(text: str) -> str:
    return canonical_mol(largest_fragment(strip_atom_maps(parse_smiles(text))))


def is_isomorphic(a: MolGraph, b: MolGraph) -> bool:
    """Labeled-graph isomorphism via canonical strings."""
    if len(a.atoms) != len(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    return canonical_mol(a) == canonical_mol(b)


# --------------------------------------------------------------------------
# tokens
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def detokenize(self) -> str:
        return detokenize(self.tokens)


def tokenize(text: str) -> TokenSeq:
    """Split ``text`` into SMILES tokens without validating chemistry."""
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            j = text.find("]", i + 1)
            k = text.find("[", i + 1)
            if j < 0 or (0 <= k < j):
                raise TokenError("dangling '['", i)
            out.append(text[i:j + 1])
            i = j + 1
        elif ch == "%":
            digits = text[i + 1:i + 3]
            if len(digits) != 2 or not (digits.isascii() and digits.isdigit()):
                raise TokenError("dangling '%'", i)
            out.append(text[i:i + 3])
            i += 3
        elif text.startswith(("Cl", "Br"), i):
            out.append(text[i:i + 2])
            i += 2
        else:
            out.append(ch)
            i += 1
    return TokenSeq(tuple(out))


def detokenize(tokens: Iterable[str]) -> str:
    return "".join(t for t in tokens if t not in (BOS, EOS, PAD))


@lru_cache(maxsize=1)
def grammar_vocabulary() -> tuple[str, ...]:
    """Fixed token vocabulary enumerated from the supported grammar.

    Bracket atoms are enumerated over a bounded grid (H count 0-3, charge
    -1..+1, tetrahedral marks on C/N/P/S with at most one H); anything else
    maps to ``<unk>``.
    """
    vocab = list(SPECIAL_TOKENS)
    vocab += [".", "(", ")", "-", "=", "#", ":", "/", "\\"]
    vocab += [str(d) for d in range(1, 10)] + [f"%{d}" for d in range(10, 20)]
    vocab += ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "b", "c", "n", "o", "p", "s"]
    symbols = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "b", "c", "n", "o", "p", "s"]
    for sym in symbols:
        for h in range(4):
            for q in (0, 1, -1):
                element = sym.capitalize() if len(sym) == 1 else sym
                atom = Atom(element, sym.islower(), q, h)
                vocab.append(_atom_text(atom, "none"))
    vocab += ["[H]", "[H+]", "[H-]"]
    for sym in ("C", "N", "P", "S"):
        for mark in ("counterclockwise", "clockwise"):
            for h in (0, 1):
                vocab.append(_atom_text(Atom(sym, False, 0, h), mark))
    seen = set()
    out = []
    for t in vocab:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return tuple(out)
