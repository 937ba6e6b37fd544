"""Communication rounds, similarity-informed weighting and the baselines.

Clients live in one process. The only things that cross a client boundary
are ``ParamVector`` objects going in and scalars or metric summaries coming
out; training data stays behind the ``ClientNode`` methods.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import ReactionDataset, ReactionRecord
from .fingerprint import folded_smiles, molecule_similarity, smiles_fingerprint
from .learner import (EmptyDataset, EncodedSet, LayoutMismatch, ModelConfig, ParamVector, TrainConfig,
                      decode_batch, encode_pairs, init_params, train_local)
from .metrics import DEFAULT_KS, EvalResult, evaluate_predictions
from .smiles import SmilesError

log = logging.getLogger(__name__)

MODES = ("ckif", "fedavg", "local", "central")
ROW_TOL = 1e-9

# purpose tags for derived seeds
_INIT, _TRAIN, _PROXY, _CENTRAL = 0, 1, 2, 3


class EmptyProxySet(ValueError):
    pass


class ZeroSize(ValueError):
    pass


class BadWeights(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def derive_seed(master: int, *path: int) -> int:
    """Independent 63-bit seed for a (client, round, purpose) path; schedule-independent."""
    state = np.random.SeedSequence([int(master) & (2**64 - 1), *[int(p) for p in path]]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class FedConfig:
    K: int
    R_T: int = 50
    R_L: int = 5
    R_F: int = 10
    mu: float | None = None
    tau: float = 1.5
    mode: str = "ckif"
    proxy_cap: int | None = None
    eval_beam_width: int = 5
    seed: int = 0
    cache_similarity: bool = False
    track_proxy: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.mu is None:
            object.__setattr__(self, "mu", 1.0 / self.K)
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.R_T < 0 or self.R_L < 0 or self.R_F < 0 or self.R_F > self.R_T:
            raise ValueError("need 0 <= R_F <= R_T and R_L >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.proxy_cap is not None and self.proxy_cap < 1:
            raise ValueError("proxy_cap must be positive")
        if self.eval_beam_width < 1:
            raise ValueError("eval_beam_width must be positive")

    @property
    def aggregation_rounds(self) -> int:
        return self.R_T - self.R_F


# --------------------------------------------------------------------------
# clients
# --------------------------------------------------------------------------

def _parses(smiles: str, model: ModelConfig) -> bool:
    try:
        smiles_fingerprint(smiles, model.fingerprint.radius, model.fingerprint.nbits)
    except SmilesError:
        return False
    return True


class ClientNode:
    """One data island: private splits plus the operations other parties may invoke."""

    def __init__(self, cid: int, data: ReactionDataset, model: ModelConfig = ModelConfig(),
                 train: TrainConfig = TrainConfig(), proxy_cap: int | None = None, seed: int = 0):
        self.id = cid
        self.model = model
        self.train = train
        self._train = data.split("train")
        self._proxy = data.split("val")
        self._test = data.split("test")
        ids = [{r.id for r in s} for s in (self._train, self._proxy, self._test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValueError(f"client {cid}: splits overlap")
        if proxy_cap is not None and len(self._proxy) > proxy_cap:
            pick = np.random.default_rng(derive_seed(seed, cid, 0, _PROXY)).choice(len(self._proxy), proxy_cap, replace=False)
            self._proxy = [self._proxy[int(i)] for i in sorted(pick)]
        self._train_enc = encode_pairs([r.product for r in self._train], [r.reactants for r in self._train], model)
        self._proxy_fps = self._fps(self._proxy)
        # contaminated proxy records may carry reactants with no fingerprint
        self._proxy_scorable = [_parses(r.reactants, model) for r in self._proxy]
        self._test_fps = self._fps(self._test)
        self.params: ParamVector | None = None

    def _fps(self, records: Sequence[ReactionRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, self.model.fp_dim))
        return np.stack([folded_smiles(r.product, self.model.fingerprint, self.model.fp_dim) for r in records])

    @property
    def N(self) -> int:
        return len(self._train_enc)

    @property
    def n_proxy(self) -> int:
        return len(self._proxy)

    @property
    def n_test(self) -> int:
        return len(self._test)

    def data_digest(self) -> str:
        h = hashlib.sha256()
        for name, recs in (("train", self._train), ("val", self._proxy), ("test", self._test)):
            h.update(name.encode())
            for r in recs:
                h.update(r.to_line().encode() + b"\n")
        return h.hexdigest()

    def local_learning(self, params: ParamVector, epochs: int, seed: int) -> tuple[ParamVector, float | None]:
        """Train a copy of ``params`` on the private train split; returns (params, last epoch loss)."""
        if epochs == 0:
            return params, None
        losses: list[float] = []
        out = train_local(params, self._train_enc, epochs, self.model, self.train, seed=seed, losses=losses)
        return out, losses[-1]

    def score_peer(self, params: ParamVector, beam_width: int = 5) -> tuple[float, float]:
        """Mean fingerprint similarity and exact top-1 rate of ``params`` on the proxy split."""
        if not self._proxy:
            raise EmptyProxySet(f"client {self.id} has no proxy records")
        preds = decode_batch(params, self._proxy_fps, self.model, beam_width, 1)
        sims, exact = [], 0
        for p, r, ok in zip(preds, self._proxy, self._proxy_scorable):
            top = p[0] if p else None
            if ok:
                sims.append(molecule_similarity(top.smiles, r.reactants, self.model.fingerprint) if top and top.valid else 0.0)
            exact += bool(top and top.valid and top.smiles == r.reactants)
        return (float(np.mean(sims)) if sims else 0.0), exact / len(self._proxy)

    def predict_test(self, params: ParamVector, beam_width: int = 10, topn: int = 10):
        return decode_batch(params, self._test_fps, self.model, beam_width, topn)

    def evaluate(self, params: ParamVector, ks: Sequence[int] = DEFAULT_KS, beam_width: int = 10,
                 forward_model: ParamVector | None = None, forward_label: str | None = None) -> EvalResult:
        topn = min(beam_width, max(ks))
        preds = self.predict_test(params, beam_width, topn)
        return evaluate_predictions(
            preds, [r.reactants for r in self._test], ks,
            classes=[r.reaction_class for r in self._test],
            products=[r.product for r in self._test],
            forward_model=forward_model, forward_label=forward_label, cfg=self.model)

    def disclose_train_set(self) -> EncodedSet:
        """Raw training data; only the privacy-violating pooled baseline calls this."""
        return self._train_enc

    def disclose_forward_set(self) -> EncodedSet:
        """Forward-direction pairs (reactants -> product) for the round-trip oracle."""
        return encode_pairs([r.reactants for r in self._train], [r.product for r in self._train], self.model)


# --------------------------------------------------------------------------
# weights and aggregation
# --------------------------------------------------------------------------

def _pool(threads: int):
    return ThreadPoolExecutor(max_workers=max(1, threads))


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with _pool(threads) as ex:
        return list(ex.map(fn, items))


def similarity_matrix(clients: Sequence[ClientNode], models: Sequence[ParamVector], cfg: FedConfig,
                      threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``S[i, k]``: model k scored on client i's proxy split. Diagonal left as NaN.

    Also returns the matching exact-top-1 matrix for reporting.
    """
    K = len(clients)
    for c in clients:
        if c.n_proxy == 0:
            raise EmptyProxySet(f"client {c.id} has no proxy records")
    pairs = [(i, k) for i in range(K) for k in range(K) if i != k]
    scores = _map(lambda ik: clients[ik[0]].score_peer(models[ik[1]], cfg.eval_beam_width), pairs, threads)
    S = np.full((K, K), np.nan)
    T = np.full((K, K), np.nan)
    for (i, k), (s, t) in zip(pairs, scores):
        S[i, k], T[i, k] = s, t
    return S, T


def ckiw_weights(S: np.ndarray, mu: float, tau: float) -> np.ndarray:
    """Self weight ``mu``; the rest spread by a softmax of similarity / ``tau`` over the other clients."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    S = np.asarray(S, dtype=np.float64)
    K = S.shape[0]
    if K == 1:
        return np.ones((1, 1))
    W = np.zeros((K, K))
    for i in range(K):
        others = [k for k in range(K) if k != i]
        z = S[i, others] / tau
        e = np.exp(z - z.max())
        W[i, others] = (1.0 - mu) * e / e.sum()
        W[i, i] = mu
    return W


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or (sizes <= 0).any():
        raise ZeroSize("every client needs at least one training record")
    row = sizes / sizes.sum()
    return np.tile(row, (len(sizes), 1))


def check_row_stochastic(W: np.ndarray, tol: float = ROW_TOL) -> None:
    if (W < 0).any() or not np.all(np.abs(W.sum(axis=1) - 1.0) <= tol):
        raise BadWeights("weight matrix is not row-stochastic")


def aggregate(models: Sequence[ParamVector], row: Sequence[float]) -> ParamVector:
    """Weighted sum of parameter vectors, accumulated in client-index order."""
    row = np.asarray(row, dtype=np.float64)
    if len(models) != len(row) or not models:
        raise BadWeights("one weight per model required")
    if (row < 0).any() or abs(row.sum() - 1.0) > ROW_TOL:
        raise BadWeights(f"weights must be non-negative and sum to 1, got sum {row.sum()!r}")
    layout = models[0].layout
    acc = None
    for w, m in zip(row, models):
        if m.layout != layout:
            raise LayoutMismatch("parameter layouts differ between clients")
        if w == 0.0:
            continue
        acc = w * m.values if acc is None else acc + w * m.values
    return ParamVector(acc, layout)


# --------------------------------------------------------------------------
# rounds
# --------------------------------------------------------------------------

@dataclass
class RoundReport:
    round: int
    phase: str
    train_loss: list[float | None]
    weights: list[list[float]] | None = None
    similarity: list[list[float | None]] | None = None
    proxy_top1: list[float] | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


def _matrix(M: np.ndarray) -> list[list[float | None]]:
    return [[None if np.isnan(x) else float(x) for x in row] for row in M]


def shared_init(model: ModelConfig, seed: int) -> ParamVector:
    return init_params(model, derive_seed(seed, 0, 0, _INIT))


def _manifest(cfg: FedConfig, clients: Sequence[ClientNode], model: ModelConfig, train: TrainConfig) -> dict:
    return {
        "fed_config": asdict(cfg),
        "train_config": asdict(train),
        "model": {"fp_dim": model.fp_dim, "embed_dim": model.embed_dim, "hidden_dim": model.hidden_dim,
                  "max_len": model.max_len, "vocab_size": model.vocab_size,
                  "fingerprint": asdict(model.fingerprint)},
        "clients": [{"id": c.id, "N": c.N, "data_sha256": c.data_digest()} for c in clients],
    }


def _save_round(root: Path, r: int, models: Sequence[ParamVector], reports: Sequence[RoundReport], manifest: dict) -> None:
    d = root / f"round_{r:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(models):
        m.save(d / f"client_{k:02d}.fpv")
    (d / "reports.json").write_text(json.dumps([x.to_dict() for x in reports], sort_keys=True))
    # manifest last: its presence marks the round as complete
    (root / "manifest.json").write_text(json.dumps({**manifest, "completed_round": r}, sort_keys=True, indent=1))


def _load_resume(root: Path, manifest: dict, K: int):
    mpath = root / "manifest.json"
    if not mpath.exists():
        return 0, None, []
    saved = json.loads(mpath.read_text())
    r = saved.pop("completed_round")
    if saved != json.loads(json.dumps(manifest, sort_keys=True)):
        raise CheckpointError(f"checkpoint at {root} was written by a different configuration")
    d = root / f"round_{r:03d}"
    models = [ParamVector.load(d / f"client_{k:02d}.fpv") for k in range(K)]
    raw = json.loads((d / "reports.json").read_text())
    return r, models, [RoundReport(**x) for x in raw]


def run_federated(clients: Sequence[ClientNode], cfg: FedConfig, threads: int = 1,
                  checkpoint_dir=None, checkpoint_every: int | None = None,
                  on_round: Callable[[RoundReport], None] | None = None) -> tuple[list[ParamVector], list[RoundReport]]:
    """Run ``cfg.R_T`` rounds; returns each client's final model and one report per round.

    Rounds ``1..R_T-R_F`` train locally then aggregate (ckif, fedavg); the
    remaining rounds only train locally. ``local`` never aggregates.
    With ``checkpoint_dir`` set, an interrupted run resumes from the last
    completed round.
    """
    if not clients:
        raise ValueError("need at least one client")
    if cfg.mode == "central":
        raise ValueError("use run_central for the pooled baseline")
    if len(clients) != cfg.K:
        raise ValueError(f"config says K={cfg.K} but {len(clients)} clients were given")
    model, train = clients[0].model, clients[0].train
    K = len(clients)
    root = Path(checkpoint_dir) if checkpoint_dir is not None else None
    manifest = _manifest(cfg, clients, model, train)
    start, params, reports = 0, None, []
    if root is not None:
        start, params, reports = _load_resume(root, manifest, K)
    if params is None:
        params = [shared_init(model, cfg.seed)] * K
    sizes = [c.N for c in clients]
    cached_S = None
    for r in range(start + 1, cfg.R_T + 1):
        t0 = time.perf_counter()
        results = _map(lambda i: clients[i].local_learning(params[i], cfg.R_L, derive_seed(cfg.seed, i, r, _TRAIN)),
                       range(K), threads)
        trained = [m for m, _ in results]
        losses = [None if l is None else float(l) for _, l in results]
        aggregating = cfg.mode in ("ckif", "fedavg") and r <= cfg.aggregation_rounds
        W = S = None
        if aggregating and cfg.mode == "ckif":
            if K > 1 and cfg.cache_similarity and cached_S is not None:
                S = cached_S
            elif K > 1:
                S, _ = similarity_matrix(clients, trained, cfg, threads)
                cached_S = S
            W = ckiw_weights(S if S is not None else np.zeros((1, 1)), cfg.mu, cfg.tau)
            check_row_stochastic(W)
            params = [aggregate(trained, W[i]) for i in range(K)]
        elif aggregating:
            W = fedavg_weights(sizes)
            check_row_stochastic(W)
            g = aggregate(trained, W[0])
            params = [g] * K
        else:
            params = trained
        for c, p in zip(clients, params):
            c.params = p
        proxy = None
        if cfg.track_proxy:
            proxy = _map(lambda i: clients[i].score_peer(params[i], cfg.eval_beam_width)[1] if clients[i].n_proxy else 0.0,
                         range(K), threads)
        rep = RoundReport(
            round=r,
            phase="aggregate" if aggregating else "local",
            train_loss=losses,
            weights=W.tolist() if W is not None else None,
            similarity=_matrix(S) if S is not None else None,
            proxy_top1=[float(x) for x in proxy] if proxy is not None else None,
            wall_clock=time.perf_counter() - t0,
        )
        reports.append(rep)
        log.info("%s round %d/%d loss %s", cfg.mode, r, cfg.R_T, " ".join("-" if x is None else f"{x:.3f}" for x in losses))
        if on_round is not None:
            on_round(rep)
        if root is not None and (r == cfg.R_T or (checkpoint_every and r % checkpoint_every == 0)):
            _save_round(root, r, params, reports, manifest)
    return list(params), reports


def run_central(clients: Sequence[ClientNode], cfg: FedConfig) -> ParamVector:
    """Pooled baseline: every train split in client order, one model, ``R_T * R_L`` epochs."""
    if not clients:
        raise ValueError("need at least one client")
    pooled = EncodedSet.concat([c.disclose_train_set() for c in clients], clients[0].model.fp_dim)
    if len(pooled) == 0:
        raise EmptyDataset("no training records across clients")
    model, train = clients[0].model, clients[0].train
    return train_local(shared_init(model, cfg.seed), pooled, cfg.R_T * cfg.R_L, model, train,
                       seed=derive_seed(cfg.seed, 0, 0, _CENTRAL))


def pooled_size(clients: Sequence[ClientNode]) -> int:
    return sum(c.N for c in clients)
