"""Top-K, MaxFrag and RoundTrip accuracy plus per-class breakdowns."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fingerprint import folded_smiles
from .learner import ModelConfig, ParamVector, Prediction, decode_batch
from .smiles import SmilesError, largest_fragment_smiles, try_canonicalize

DEFAULT_KS = (1, 3, 5, 10)


class MissingForwardModel(ValueError):
    pass


def _check_k(K: int) -> None:
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")


def _smiles(p) -> str:
    return p.smiles if isinstance(p, Prediction) else str(p)


def _canonical_truth(truth: str) -> str | None:
    return try_canonicalize(truth)


def _exact_hits(predictions: Sequence[Sequence], truths: Sequence[str], K: int) -> np.ndarray:
    _check_k(K)
    if len(predictions) != len(truths):
        raise ValueError("one prediction list per truth required")
    hits = np.zeros(len(truths), dtype=bool)
    for n, (preds, truth) in enumerate(zip(predictions, truths)):
        target = _canonical_truth(truth)
        if target is None:
            continue
        hits[n] = any(try_canonicalize(_smiles(p)) == target for p in list(preds)[:K])
    return hits


def _largest(text: str) -> str | None:
    try:
        return largest_fragment_smiles(text)
    except SmilesError:
        return None


def _maxfrag_hits(predictions: Sequence[Sequence], truths: Sequence[str], K: int) -> np.ndarray:
    _check_k(K)
    if len(predictions) != len(truths):
        raise ValueError("one prediction list per truth required")
    hits = np.zeros(len(truths), dtype=bool)
    for n, (preds, truth) in enumerate(zip(predictions, truths)):
        target = _largest(truth)
        if target is None:
            continue
        seen = 0
        for p in preds:
            frag = _largest(_smiles(p))
            if frag is None:
                continue
            if frag == target:
                hits[n] = True
                break
            seen += 1
            if seen == K:
                break
    return hits


def _rate(hits: np.ndarray) -> float:
    return float(hits.sum()) / len(hits) if len(hits) else 0.0


def topk_accuracy(predictions: Sequence[Sequence], truths: Sequence[str], K: int) -> float:
    """Fraction of records whose truth appears (canonically) among the first ``K`` predictions."""
    return _rate(_exact_hits(predictions, truths, K))


def maxfrag_accuracy(predictions: Sequence[Sequence], truths: Sequence[str], K: int) -> float:
    """Like top-K, but only the largest fragment has to match, over the first ``K`` parseable predictions."""
    return _rate(_maxfrag_hits(predictions, truths, K))


def roundtrip_accuracy(predictions: Sequence[Sequence], products: Sequence[str],
                       forward_model: ParamVector | None, cfg: ModelConfig | None = None,
                       beam_width: int = 5) -> float:
    """Fraction of records whose rank-1 reactants are mapped back to the product by the forward model."""
    if forward_model is None:
        raise MissingForwardModel("round-trip accuracy needs a trained forward model")
    if len(predictions) != len(products):
        raise ValueError("one prediction list per product required")
    cfg = cfg or ModelConfig()
    idx, fps = [], []
    for n, preds in enumerate(predictions):
        if not preds:
            continue
        top = try_canonicalize(_smiles(preds[0]))
        if top is None:
            continue
        idx.append(n)
        fps.append(folded_smiles(top, cfg.fingerprint, cfg.fp_dim))
    hits = np.zeros(len(products), dtype=bool)
    if idx:
        back = decode_batch(forward_model, np.stack(fps), cfg, beam_width, 1)
        for n, out in zip(idx, back):
            target = _canonical_truth(products[n])
            hits[n] = bool(out) and out[0].valid and target is not None and out[0].smiles == target
    return _rate(hits)


def per_class_breakdown(predictions: Sequence[Sequence], truths: Sequence[str], classes: Sequence,
                        K: int) -> dict[str, float]:
    """Top-K accuracy within each class; classes without records do not appear."""
    if len(classes) != len(truths):
        raise ValueError("one class label per truth required")
    hits = _exact_hits(predictions, truths, K)
    groups: dict[str, list[int]] = {}
    for n, c in enumerate(classes):
        groups.setdefault(str(c), []).append(n)
    return {c: _rate(hits[idx]) for c, idx in sorted(groups.items())}


@dataclass(frozen=True)
class EvalResult:
    topk: Mapping[int, float]
    maxfrag_topk: Mapping[int, float]
    n_evaluated: int
    per_class: Mapping[str, Mapping[int, float]] = field(default_factory=dict)
    roundtrip_top1: float | None = None
    roundtrip_provenance: str | None = None

    def __post_init__(self):
        for table in (self.topk, self.maxfrag_topk):
            for v in table.values():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"accuracy {v} outside [0, 1]")

    def to_dict(self) -> dict:
        out = {
            "n_evaluated": self.n_evaluated,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "maxfrag_topk": {str(k): v for k, v in sorted(self.maxfrag_topk.items())},
            "per_class": {c: {str(k): v for k, v in sorted(t.items())} for c, t in sorted(self.per_class.items())},
        }
        if self.roundtrip_top1 is not None:
            out["roundtrip_top1"] = self.roundtrip_top1
            out["roundtrip_provenance"] = self.roundtrip_provenance
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalResult:
        return cls(
            topk={int(k): v for k, v in d["topk"].items()},
            maxfrag_topk={int(k): v for k, v in d["maxfrag_topk"].items()},
            n_evaluated=d["n_evaluated"],
            per_class={c: {int(k): v for k, v in t.items()} for c, t in d.get("per_class", {}).items()},
            roundtrip_top1=d.get("roundtrip_top1"),
            roundtrip_provenance=d.get("roundtrip_provenance"),
        )


def evaluate_predictions(predictions: Sequence[Sequence], truths: Sequence[str], ks: Sequence[int] = DEFAULT_KS,
                         classes: Sequence | None = None, products: Sequence[str] | None = None,
                         forward_model: ParamVector | None = None, forward_label: str | None = None,
                         cfg: ModelConfig | None = None) -> EvalResult:
    ks = sorted(set(int(k) for k in ks))
    for k in ks:
        _check_k(k)
    per_class = {}
    if classes is not None and any(c is not None for c in classes):
        for k in ks:
            for c, acc in per_class_breakdown(predictions, truths, classes, k).items():
                per_class.setdefault(c, {})[k] = acc
    rt = None
    if forward_model is not None:
        rt = roundtrip_accuracy(predictions, products, forward_model, cfg)
    return EvalResult(
        topk={k: topk_accuracy(predictions, truths, k) for k in ks},
        maxfrag_topk={k: maxfrag_accuracy(predictions, truths, k) for k in ks},
        n_evaluated=len(truths),
        per_class=per_class,
        roundtrip_top1=rt,
        roundtrip_provenance=forward_label if rt is not None else None,
    )
