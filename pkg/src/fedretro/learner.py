"""Fingerprint-conditioned token decoder with exact gradients and Adam.

The model scores reactant token ``y_t`` given the folded product fingerprint
``x``, the two previous tokens and the output position::

    h_t      = tanh(A x + B e(y_{t-1}) + C e(y_{t-2}) + P[t] + b)
    logits_t = U h_t + c

All parameters live in one flat float64 :class:`ParamVector`; federation code
only ever sees that vector.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fingerprint import FingerprintConfig, folded_smiles
from .smiles import (BOS, EOS, PAD, UNK, MolGraph, TokenError, detokenize, grammar_vocabulary, tokenize,
                     try_canonicalize, write_smiles)

INIT_SCALE = 0.08
_MAGIC = b"FRPV"
_FORMAT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple[str, ...] = field(default_factory=grammar_vocabulary)
    fp_dim: int = 256
    embed_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 160
    fingerprint: FingerprintConfig = FingerprintConfig()

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.fingerprint.nbits % self.fp_dim:
            raise ValueError("fp_dim must divide the fingerprint length")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocabulary has duplicate tokens")
        for tok in (PAD, BOS, EOS, UNK):
            if tok not in self.vocab:
                raise ValueError(f"vocabulary lacks {tok}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token_id(self, tok: str) -> int:
        return _vocab_index(self.vocab).get(tok, _vocab_index(self.vocab)[UNK])

    def layout(self) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
        V, E, H, F, L = self.vocab_size, self.embed_dim, self.hidden_dim, self.fp_dim, self.max_len
        shapes = [
            ("embedding", (V, E)),
            ("fp_proj", (H, F)),
            ("prev1_proj", (H, E)),
            ("prev2_proj", (H, E)),
            ("position", (L, H)),
            ("hidden_bias", (H,)),
            ("out_proj", (V, H)),
            ("out_bias", (V,)),
        ]
        out, offset = [], 0
        for name, shape in shapes:
            out.append((name, offset, shape))
            offset += int(np.prod(shape))
        return tuple(out)


_VOCAB_CACHE: dict[tuple[str, ...], dict[str, int]] = {}


def _vocab_index(vocab: tuple[str, ...]) -> dict[str, int]:
    idx = _VOCAB_CACHE.get(vocab)
    if idx is None:
        idx = _VOCAB_CACHE[vocab] = {t: i for i, t in enumerate(vocab)}
    return idx


BIAS_BLOCKS = ("hidden_bias", "out_bias")


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(int(np.prod(shape)) for _, _, shape in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise LayoutMismatch(f"vector of length {self.values.size} does not match layout of {total}")

    def __len__(self):
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        for n, off, shape in self.layout:
            if n == name:
                return self.values[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def blocks(self) -> dict[str, np.ndarray]:
        return {n: self.block(n) for n, _, _ in self.layout}

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<II", _FORMAT_VERSION, len(self.layout)))
        for name, off, shape in self.layout:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<QI", off, len(shape)))
            buf.write(struct.pack(f"<{len(shape)}Q", *shape))
        buf.write(struct.pack("<Q", self.values.size))
        buf.write(self.values.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> ParamVector:
        if data[:4] != _MAGIC:
            raise ValueError("not a parameter vector file")
        version, n_seg = struct.unpack_from("<II", data, 4)
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        pos = 12
        layout = []
        for _ in range(n_seg):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            off, ndim = struct.unpack_from("<QI", data, pos)
            pos += 12
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            layout.append((name, off, tuple(int(s) for s in shape)))
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        values = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
        return cls(values, tuple(layout))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParamVector:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_params(cfg: ModelConfig, seed: int, scale: float = INIT_SCALE) -> ParamVector:
    """Uniform(-scale, scale) weights from a Philox stream keyed by ``seed``; zero biases."""
    layout = cfg.layout()
    total = sum(int(np.prod(s)) for _, _, s in layout)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))
    values = rng.uniform(-scale, scale, size=total)
    for name, off, shape in layout:
        if name in BIAS_BLOCKS:
            values[off:off + int(np.prod(shape))] = 0.0
    return ParamVector(values, layout)


# --------------------------------------------------------------------------
# data encoding
# --------------------------------------------------------------------------

def encode_tokens(smiles: str, cfg: ModelConfig) -> np.ndarray:
    """Token ids of ``smiles`` followed by EOS; untokenizable text becomes a single UNK."""
    try:
        toks = tokenize(smiles).tokens
    except TokenError:
        toks = (UNK,)
    ids = [cfg.token_id(t) for t in toks]
    ids.append(cfg.token_id(EOS))
    return np.asarray(ids, dtype=np.int64)


def decode_tokens(ids: Sequence[int], cfg: ModelConfig) -> str:
    return detokenize(cfg.vocab[i] for i in ids)


@dataclass
class EncodedSet:
    """Model-ready pairs: folded source fingerprints and target token ids."""

    fps: np.ndarray
    targets: list[np.ndarray]

    def __len__(self):
        return len(self.targets)

    def subset(self, idx: Sequence[int]) -> EncodedSet:
        idx = list(idx)
        return EncodedSet(self.fps[idx], [self.targets[i] for i in idx])

    @classmethod
    def concat(cls, parts: Sequence[EncodedSet], fp_dim: int) -> EncodedSet:
        if not parts:
            return cls(np.zeros((0, fp_dim)), [])
        return cls(np.concatenate([p.fps for p in parts]), [t for p in parts for t in p.targets])


def encode_pairs(sources: Sequence[str], targets: Sequence[str], cfg: ModelConfig) -> EncodedSet:
    """Encode (source SMILES, target SMILES) pairs, dropping targets longer than ``max_len``."""
    fps, tgts = [], []
    for src, tgt in zip(sources, targets):
        ids = encode_tokens(tgt, cfg)
        if len(ids) > cfg.max_len:
            continue
        fps.append(folded_smiles(src, cfg.fingerprint, cfg.fp_dim))
        tgts.append(ids)
    fps_arr = np.asarray(fps, dtype=np.float64).reshape(len(fps), cfg.fp_dim)
    return EncodedSet(fps_arr, tgts)


def _flatten(fps: np.ndarray, targets: Sequence[np.ndarray], cfg: ModelConfig):
    bos = cfg.token_id(BOS)
    pad = cfg.token_id(PAD)
    rec, p1, p2, pos, tgt = [], [], [], [], []
    for r, ids in enumerate(targets):
        n = len(ids)
        if n > cfg.max_len:
            raise ShapeMismatch(f"sequence of length {n} exceeds max_len {cfg.max_len}")
        prev = np.concatenate([[bos, bos], ids[:-1]])
        rec.append(np.full(n, r))
        p1.append(prev[1:n + 1])
        p2.append(prev[:n])
        pos.append(np.arange(n))
        tgt.append(ids)
    rec, p1, p2, pos, tgt = (np.concatenate(x) if x else np.zeros(0, np.int64) for x in (rec, p1, p2, pos, tgt))
    keep = tgt != pad
    return rec[keep], p1[keep], p2[keep], pos[keep], tgt[keep]


def scale_inputs(fps: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm (all-zero rows stay zero).

    Keeps the fingerprint term of the pre-activation on the same scale as the
    other terms whatever the number of set bits.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", fps, fps))[:, None]
    return fps / np.maximum(norms, 1e-12)


def loss_and_grad(params: ParamVector, fps: np.ndarray, targets: Sequence[np.ndarray],
                  cfg: ModelConfig) -> tuple[float, ParamVector]:
    """Mean over the batch of summed token negative log-likelihood, and its exact gradient."""
    if params.layout != cfg.layout():
        raise ShapeMismatch("parameter layout does not match the model config")
    fps = np.asarray(fps, dtype=np.float64)
    if fps.ndim != 2 or fps.shape[1] != cfg.fp_dim or fps.shape[0] != len(targets):
        raise ShapeMismatch(f"fingerprint batch has shape {fps.shape}")
    for ids in targets:
        if len(ids) and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ShapeMismatch("token id out of vocabulary range")
    n_seq = len(targets)
    rec, p1, p2, pos, tgt = _flatten(fps, targets, cfg)
    w = params.blocks()
    E, A, B, C = w["embedding"], w["fp_proj"], w["prev1_proj"], w["prev2_proj"]
    P, b, U, c = w["position"], w["hidden_bias"], w["out_proj"], w["out_bias"]

    fps = scale_inputs(fps)
    fpA = fps @ A.T
    e1, e2 = E[p1], E[p2]
    pre = fpA[rec] + e1 @ B.T + e2 @ C.T + P[pos] + b
    h = np.tanh(pre)
    logits = h @ U.T + c
    logits -= logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    rows = np.arange(len(tgt))
    nll = logz - logits[rows, tgt]
    loss = float(nll.sum() / max(n_seq, 1))

    prob = np.exp(logits - logz[:, None])
    prob[rows, tgt] -= 1.0
    dlogits = prob / max(n_seq, 1)
    grad = np.zeros_like(params.values)
    g = ParamVector(grad, params.layout).blocks()
    g["out_proj"][:] = dlogits.T @ h
    g["out_bias"][:] = dlogits.sum(axis=0)
    dpre = (dlogits @ U) * (1.0 - h * h)
    g["hidden_bias"][:] = dpre.sum(axis=0)
    np.add.at(g["position"], pos, dpre)
    per_rec = np.zeros((n_seq, dpre.shape[1]))
    np.add.at(per_rec, rec, dpre)
    g["fp_proj"][:] = per_rec.T @ fps
    g["prev1_proj"][:] = dpre.T @ e1
    g["prev2_proj"][:] = dpre.T @ e2
    np.add.at(g["embedding"], p1, dpre @ B)
    np.add.at(g["embedding"], p2, dpre @ C)
    return loss, ParamVector(grad, params.layout)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.998
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, **hyper) -> OptimizerState:
        return cls(np.zeros(n), np.zeros(n), **hyper)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.998
    epsilon: float = 1e-8
    batch_size: int = 64

    def optimizer(self, n: int) -> OptimizerState:
        return OptimizerState.fresh(n, lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


def adam_step(params: ParamVector, grad: ParamVector, opt: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    if len(params) != len(grad) or len(params) != opt.first_moment.size:
        raise LengthMismatch("parameter, gradient and moment lengths disagree")
    g = grad.values
    step = opt.step + 1
    m = opt.beta1 * opt.first_moment + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.second_moment + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1 ** step)
    v_hat = v / (1.0 - opt.beta2 ** step)
    new = params.values - opt.lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    state = OptimizerState(m, v, step, opt.lr, opt.beta1, opt.beta2, opt.epsilon)
    return params.with_values(new), state


def train_local(params: ParamVector, data: EncodedSet, epochs: int, cfg: ModelConfig,
                train: TrainConfig = TrainConfig(), seed: int = 0,
                losses: list | None = None) -> ParamVector:
    """``epochs`` seeded passes of minibatch Adam from a fresh optimizer state.

    Mean per-sequence loss of each epoch is appended to ``losses`` if given.
    """
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if epochs <= 0:
        return params
    rng = np.random.default_rng(seed)
    opt = train.optimizer(len(params))
    for _ in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), train.batch_size):
            idx = order[start:start + train.batch_size]
            loss, grad = loss_and_grad(params, data.fps[idx], [data.targets[i] for i in idx], cfg)
            total += loss * len(idx)
            params, opt = adam_step(params, grad, opt)
        if losses is not None:
            losses.append(total / len(data))
    return params


def mean_loss(params: ParamVector, data: EncodedSet, cfg: ModelConfig, chunk: int = 512) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = range(start, min(start + chunk, len(data)))
        loss, _ = loss_and_grad(params, data.fps[list(idx)], [data.targets[i] for i in idx], cfg)
        total += loss * len(idx)
    return total / max(len(data), 1)


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    smiles: str
    log_prob: float
    rank: int
    valid: bool = True


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def beam_search(params: ParamVector, fps: np.ndarray, cfg: ModelConfig, beam_width: int = 10,
                max_len: int | None = None) -> list[list[tuple[list[int], float]]]:
    """Raw beam search; per source, up to ``beam_width`` (token ids, log prob) hypotheses.

    Length-unnormalized scores; finished hypotheses stay in the beam and
    compete with live ones until every beam slot has emitted EOS or
    ``max_len`` tokens were produced.
    """
    L = min(max_len or cfg.max_len, cfg.max_len)
    W = beam_width
    V = cfg.vocab_size
    bos, eos, pad = cfg.token_id(BOS), cfg.token_id(EOS), cfg.token_id(PAD)
    w = params.blocks()
    E, U, c, P = w["embedding"], w["out_proj"], w["out_bias"], w["position"]
    EB = E @ w["prev1_proj"].T
    EC = E @ w["prev2_proj"].T
    fps = np.asarray(fps, dtype=np.float64).reshape(-1, cfg.fp_dim)
    R = fps.shape[0]
    base = scale_inputs(fps) @ w["fp_proj"].T + w["hidden_bias"]

    tokens = np.full((R, W, L), pad, dtype=np.int64)
    scores = np.full((R, W), -np.inf)
    scores[:, 0] = 0.0
    finished = np.zeros((R, W), dtype=bool)
    lengths = np.zeros((R, W), dtype=np.int64)
    prev1 = np.full((R, W), bos, dtype=np.int64)
    prev2 = np.full((R, W), bos, dtype=np.int64)
    rows = np.arange(R)[:, None]
    for t in range(L):
        live = np.isfinite(scores) & ~finished
        if not live.any():
            break
        h = np.tanh(base[:, None, :] + EB[prev1] + EC[prev2] + P[t])
        logp = _log_softmax(h @ U.T + c)
        logp[:, :, pad] = -np.inf
        logp[:, :, bos] = -np.inf
        logp[finished] = -np.inf
        fr, fw = np.nonzero(finished)
        logp[fr, fw, pad] = 0.0
        cand = (scores[:, :, None] + logp).reshape(R, W * V)
        top = np.argpartition(-cand, W - 1, axis=1)[:, :W]
        top_scores = np.take_along_axis(cand, top, axis=1)
        # deterministic order: score desc, then flat index asc
        order = np.lexsort((top, -top_scores), axis=1)
        top = np.take_along_axis(top, order, axis=1)
        src, tok = top // V, top % V
        was_finished = finished[rows, src]
        tokens = tokens[rows, src]
        tokens[:, :, t] = np.where(was_finished, pad, tok)
        scores = np.take_along_axis(cand, top, axis=1)
        lengths = np.where(was_finished, lengths[rows, src], t + 1)
        finished = was_finished | (tok == eos)
        prev2 = np.where(was_finished, pad, prev1[rows, src])
        prev1 = np.where(was_finished, pad, tok)
    out = []
    for r in range(R):
        hyps = []
        for k in range(W):
            if not np.isfinite(scores[r, k]):
                continue
            seq = tokens[r, k, :lengths[r, k]].tolist()
            if seq and seq[-1] == eos:
                seq = seq[:-1]
            hyps.append((seq, float(scores[r, k])))
        out.append(hyps)
    return out


def rank_hypotheses(hyps: Sequence[tuple[list[int], float]], cfg: ModelConfig, topn: int) -> list[Prediction]:
    """Canonicalize, merge duplicates (keeping the higher log prob) and rank."""
    best: dict[str, tuple[float, bool]] = {}
    for ids, lp in hyps:
        raw = decode_tokens(ids, cfg)  # an <unk> survives detokenization and fails to parse
        can = try_canonicalize(raw) if raw else None
        key, valid = (can, True) if can is not None else (raw, False)
        if key not in best or lp > best[key][0]:
            best[key] = (lp, valid)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:topn]
    return [Prediction(s, lp, i + 1, valid) for i, (s, (lp, valid)) in enumerate(ranked)]


def decode_batch(params: ParamVector, fps: np.ndarray, cfg: ModelConfig, beam_width: int = 10,
                 topn: int = 10, chunk: int = 256) -> list[list[Prediction]]:
    if not 1 <= topn <= beam_width:
        raise ValueError("need beam_width >= topn >= 1")
    fps = np.asarray(fps, dtype=np.float64).reshape(-1, cfg.fp_dim)
    out = []
    for start in range(0, fps.shape[0], chunk):
        for hyps in beam_search(params, fps[start:start + chunk], cfg, beam_width):
            out.append(rank_hypotheses(hyps, cfg, topn))
    return out


def beam_decode(params: ParamVector, product: str | MolGraph, cfg: ModelConfig, beam_width: int = 10,
                topn: int = 10) -> list[Prediction]:
    """Ranked reactant predictions for one product (SMILES or graph)."""
    if isinstance(product, MolGraph):
        product = write_smiles(product)
    fp = folded_smiles(product, cfg.fingerprint, cfg.fp_dim)
    return decode_batch(params, fp[None, :], cfg, beam_width, topn)[0]
