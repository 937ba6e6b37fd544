"""Reaction records: ingestion, splitting, client partitioning, contamination
and a template-based synthetic corpus."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .smiles import SmilesError, canonicalize, detokenize, parse_smiles, tokenize, TokenError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class FileError(OSError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class BadFractions(ValueError):
    pass


class MissingClassLabels(ValueError):
    pass


class UnmappedClass(ValueError):
    pass


@dataclass(frozen=True)
class ReactionRecord:
    id: str
    reaction_class: str | None
    reactants: str
    product: str

    def to_line(self) -> str:
        return f"{self.id}\t{self.reaction_class or ''}\t{self.reactants}>>{self.product}"


@dataclass(frozen=True)
class ReactionDataset:
    records: tuple[ReactionRecord, ...] = ()
    splits: tuple[str, ...] = ()
    diagnostics: Mapping[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.splits:
            object.__setattr__(self, "splits", ("train",) * len(self.records))
        if len(self.splits) != len(self.records):
            raise ValueError("one split tag per record required")
        ids = Counter(r.id for r in self.records)
        dup = [i for i, n in ids.items() if n > 1]
        if dup:
            raise FormatError(f"duplicate record id {dup[0]!r}")

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[ReactionRecord]:
        return [r for r, s in zip(self.records, self.splits) if s == name]

    def split_counts(self) -> dict[str, int]:
        c = Counter(self.splits)
        return {s: c.get(s, 0) for s in SPLITS}

    def classes(self) -> list[str]:
        return sorted({r.reaction_class for r in self.records if r.reaction_class is not None}, key=_class_key)

    def save(self, path) -> None:
        save_reactions(self, path)


def _class_key(c: str):
    return (0, int(c), c) if c.isdigit() else (1, 0, c)


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------

def parse_reaction_line(line: str, lineno: int | None = None) -> tuple[str, str | None, list[str], str]:
    """Split a wire-format line into id, class, reactant-side text and product texts."""
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 3:
        raise FormatError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
    rid, cls, rxn = (f.strip() for f in fields)
    if not rid:
        raise FormatError("empty record id", lineno)
    parts = rxn.split(">")
    if len(parts) != 3:
        raise FormatError("reaction SMILES must look like reactants>reagents>product", lineno)
    reactants, _reagents, products = parts
    if not reactants or not products:
        raise FormatError("missing reactants or product", lineno)
    return rid, (cls or None), reactants, products.split(".")


def load_reactions(path) -> ReactionDataset:
    """Read the TAB-separated wire format.

    Reagents are dropped, multi-product reactions become one record per
    product, and every string is canonicalized. Records whose SMILES do not
    parse are skipped and counted in ``diagnostics``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    records = []
    diag = Counter()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        rid, cls, reactants, products = parse_reaction_line(line, lineno)
        diag["lines"] += 1
        try:
            can_reactants = canonicalize(reactants)
        except SmilesError:
            diag["unparseable_reactants"] += 1
            continue
        for j, prod in enumerate(products):
            try:
                can_prod = canonicalize(prod)
            except SmilesError:
                diag["unparseable_products"] += 1
                continue
            pid = rid if len(products) == 1 else f"{rid}_p{j}"
            records.append(ReactionRecord(pid, cls, can_reactants, can_prod))
        if len(products) > 1:
            diag["multi_product_split"] += 1
    diag["records"] = len(records)
    return ReactionDataset(tuple(records), diagnostics=dict(diag))


def save_reactions(ds: ReactionDataset, path) -> None:
    lines = [r.to_line() for r in ds.records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --------------------------------------------------------------------------
# splitting and partitioning
# --------------------------------------------------------------------------

def split_dataset(ds: ReactionDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> ReactionDataset:
    """Seeded shuffle, then contiguous train/val/test assignment."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise BadFractions(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    tags = ["test"] * n
    for k, i in enumerate(order):
        tags[i] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return ReactionDataset(ds.records, tuple(tags), ds.diagnostics)


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str = "by_class"
    groups: tuple[tuple[str, ...], ...] | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("by_class", "by_class_groups", "random_dirichlet"):
            raise ValueError(f"unknown partition strategy {self.strategy!r}")
        if self.strategy == "by_class_groups" and not self.groups:
            raise ValueError("by_class_groups needs a group map")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def partition_clients(ds: ReactionDataset, spec: PartitionSpec, K: int, seed: int = 0) -> list[ReactionDataset]:
    """Assign every record to exactly one of ``K`` clients; split tags travel along."""
    if any(r.reaction_class is None for r in ds.records) and ds.records:
        raise MissingClassLabels("partitioning needs a class label on every record")
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(ds.records):
        by_class.setdefault(r.reaction_class, []).append(i)
    classes = sorted(by_class, key=_class_key)
    assign = [-1] * len(ds)
    if spec.strategy in ("by_class", "by_class_groups"):
        if spec.groups:
            groups = [tuple(str(c) for c in g) for g in spec.groups]
        else:
            groups = [(c,) for c in classes]
        if len(groups) != K:
            raise ValueError(f"{len(groups)} class groups for {K} clients")
        owner = {}
        for k, g in enumerate(groups):
            for c in g:
                if c in owner:
                    raise ValueError(f"class {c!r} mapped to two clients")
                owner[c] = k
        for c in classes:
            if c not in owner:
                raise UnmappedClass(f"class {c!r} is not assigned to any client")
            for i in by_class[c]:
                assign[i] = owner[c]
    else:
        rng = np.random.default_rng(seed)
        for c in classes:
            idx = np.asarray(by_class[c])
            props = rng.dirichlet(np.full(K, spec.alpha))
            idx = idx[rng.permutation(len(idx))]
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                for i in chunk:
                    assign[int(i)] = k
    out = []
    for k in range(K):
        members = [i for i in range(len(ds)) if assign[i] == k]
        out.append(ReactionDataset(tuple(ds.records[i] for i in members), tuple(ds.splits[i] for i in members)))
    return out


# --------------------------------------------------------------------------
# contamination
# --------------------------------------------------------------------------

def _shuffle_tokens(text: str, rng: np.random.Generator) -> str:
    try:
        toks = list(tokenize(text).tokens)
    except TokenError:
        toks = list(text)
    perm = rng.permutation(len(toks))
    return detokenize(toks[i] for i in perm)


def contaminate(ds: ReactionDataset, fraction: float, seed: int = 0) -> ReactionDataset:
    """Corrupt ``ceil(fraction * |train+val|)`` records: swap sides, shuffle each side's tokens.

    Test records are never touched. Corrupted strings need not parse.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    pool = [i for i, s in enumerate(ds.splits) if s in ("train", "val")]
    n = math.ceil(fraction * len(pool) - 1e-9)
    if n == 0:
        return ds
    rng = np.random.default_rng(seed)
    chosen = sorted(int(pool[j]) for j in rng.choice(len(pool), size=n, replace=False))
    records = list(ds.records)
    for i in chosen:
        r = records[i]
        records[i] = replace(r, reactants=_shuffle_tokens(r.product, rng), product=_shuffle_tokens(r.reactants, rng))
    diag = dict(ds.diagnostics)
    diag["contaminated"] = n
    return ReactionDataset(tuple(records), ds.splits, diag)


# --------------------------------------------------------------------------
# synthetic reactions
# --------------------------------------------------------------------------

def _alkyl_smiles(children: list[list[int]], node: int = 0) -> str:
    kids = children[node]
    out = "C"
    for c in kids[:-1]:
        out += "(" + _alkyl_smiles(children, c) + ")"
    if kids:
        out += _alkyl_smiles(children, kids[-1])
    return out


def alkyl_groups(max_atoms: int = 8) -> list[str]:
    """Every acyclic saturated alkyl group with 1..max_atoms carbons.

    Each string starts at the attachment carbon, so ``"O" + g`` is an alcohol.
    Ordered by size, then by canonical form.
    """
    groups = {1: {canonicalize("BrC"): [[]]}}
    for n in range(2, max_atoms + 1):
        found = {}
        for children in groups[n - 1].values():
            for node in range(n - 1):
                limit = 3  # root carries the attachment bond, others their parent bond
                if len(children[node]) >= limit:
                    continue
                new = [list(c) for c in children] + [[]]
                new[node].append(n - 1)
                key = canonicalize("Br" + _alkyl_smiles(new))
                found.setdefault(key, new)
        groups[n] = found
    out = []
    for n in range(1, max_atoms + 1):
        for key in sorted(groups[n]):
            out.append(_alkyl_smiles(groups[n][key]))
    return out


# family name -> (reactant templates, product template); {R} and {S} are alkyl groups
TEMPLATE_FAMILIES = (
    ("esterification", ("OC(=O){R}", "O{S}"), "O=C({R})O{S}"),
    ("amide_formation", ("OC(=O){R}", "N{S}"), "O=C({R})N{S}"),
    ("halogenation", ("O{R}", "Br"), "Br{R}"),
    ("ether_formation", ("Br{R}", "O{S}"), "O({R}){S}"),
)


def apply_template(family: int, r: str, s: str | None = None) -> tuple[str, str]:
    """Canonical (reactants, product) for one template application."""
    _, reactants, product = TEMPLATE_FAMILIES[family]
    react = ".".join(t.format(R=r, S=s) for t in reactants)
    return canonicalize(react), canonicalize(product.format(R=r, S=s))


def generate_synthetic(n_per_family: int | Sequence[int], families: int = 4, seed: int = 0,
                       max_scaffold_atoms: int = 8) -> ReactionDataset:
    """Exact template applications over random alkyl scaffolds; class label = family index."""
    if not 1 <= families <= len(TEMPLATE_FAMILIES):
        raise ValueError(f"families must be in 1..{len(TEMPLATE_FAMILIES)}")
    counts = [n_per_family] * families if isinstance(n_per_family, int) else list(n_per_family)
    if len(counts) != families:
        raise ValueError("one count per family required")
    groups = alkyl_groups(max_scaffold_atoms)
    rng = np.random.default_rng(seed)
    records = []
    for f, n in enumerate(counts):
        for j in range(n):
            r, s = (groups[int(k)] for k in rng.integers(len(groups), size=2))
            reactants, product = apply_template(f, r, s)
            records.append(ReactionRecord(f"syn{f}_{j:05d}", str(f), reactants, product))
    return ReactionDataset(tuple(records))


def parse_check(ds: ReactionDataset) -> int:
    """Number of records whose product does not parse (0 for clean data)."""
    bad = 0
    for r in ds.records:
        try:
            parse_smiles(r.product)
        except SmilesError:
            bad += 1
    return bad
