"""Instance-level consistency discriminator.

A small pairwise network is trained on labeled instances to tell whether two
max-pooled instance features share an action class. At inference the mean
pair probability against labeled same-class instances becomes a similarity
score used to drop ambiguous positives and promote likely candidates.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .selection import LogEntry, PseudoLabelSet, rank_key

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ICD1"


@dataclass
class InstanceFeature:
    """D x L feature matrix of one action instance."""

    values: np.ndarray
    class_index: int
    video_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] < 1:
            raise ValueError("instance feature needs at least one frame")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class IcdConfig:
    pairs_per_anchor: int = 10
    epochs: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # adam | gd
    hidden_dim: int = 64
    tau_icd: float = 0.3
    sigma_icd: float = 0.7
    max_labeled: int = 0  # 0 = score against every labeled instance
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_icd < self.sigma_icd <= 1.0:
            raise ValueError("need 0 <= tau_icd < sigma_icd <= 1")
        if self.sigma_icd < 0.5:
            raise ValueError("sigma_icd below 0.5 would promote candidates the discriminator rejects")
        if self.pairs_per_anchor < 1 or self.hidden_dim < 1:
            raise ValueError("pairs_per_anchor and hidden_dim must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def max_pool(feat: InstanceFeature | np.ndarray) -> np.ndarray:
    values = feat.values if isinstance(feat, InstanceFeature) else np.atleast_2d(feat)
    return values.max(axis=1)


@dataclass
class DiscriminatorModel:
    w1: np.ndarray  # H x 2D
    b1: np.ndarray  # H
    w2: np.ndarray  # H
    b2: float
    seed: int = 0
    loss_curve: list[float] = field(default_factory=list, compare=False)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1] // 2

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def initialize(cls, dim: int, hidden_dim: int = 64, seed: int = 0) -> "DiscriminatorModel":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, np.sqrt(2.0 / (2 * dim)), size=(hidden_dim, 2 * dim))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=hidden_dim)
        return cls(w1, np.zeros(hidden_dim), w2, 0.0, seed)

    @classmethod
    def zeros(cls, dim: int, hidden_dim: int = 64) -> "DiscriminatorModel":
        return cls(np.zeros((hidden_dim, 2 * dim)), np.zeros(hidden_dim), np.zeros(hidden_dim), 0.0)

    def copy(self) -> "DiscriminatorModel":
        return DiscriminatorModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
                                  self.seed, list(self.loss_curve))

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": np.array(self.b2)}

    def logits(self, x: np.ndarray) -> np.ndarray:
        """x: N x 2D concatenated pair inputs."""
        return _forward(self, x)[2]

    def save(self, path: str | Path) -> None:
        d, h = self.input_dim, self.hidden_dim
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<II", d, h))
            for arr in (self.w1, self.b1, self.w2, np.array([self.b2])):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(struct.pack("<Q", self.seed & 0xFFFFFFFFFFFFFFFF))

    @classmethod
    def load(cls, path: str | Path) -> "DiscriminatorModel":
        raw = Path(path).read_bytes()
        if raw[:4] != MODEL_MAGIC:
            raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
        d, h = struct.unpack_from("<II", raw, 4)
        n_floats = h * 2 * d + h + h + 1
        expected = 12 + 4 * n_floats + 8
        if len(raw) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
        flat = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=12).astype(float)
        w1 = flat[: h * 2 * d].reshape(h, 2 * d)
        b1 = flat[h * 2 * d: h * 2 * d + h]
        w2 = flat[h * 2 * d + h: h * 2 * d + 2 * h]
        b2 = float(flat[-1])
        (seed,) = struct.unpack_from("<Q", raw, 12 + 4 * n_floats)
        return cls(w1.copy(), b1.copy(), w2.copy(), b2, int(seed))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(model: DiscriminatorModel, x: np.ndarray):
    z1 = x @ model.w1.T + model.b1
    h = np.maximum(z1, 0.0)
    s = h @ model.w2 + model.b2
    return z1, h, s


def pair_probability(model: DiscriminatorModel, a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape or a.size != model.input_dim:
        raise ValueError(f"dimension mismatch: {a.size}, {b.size} vs model D={model.input_dim}")
    return float(_sigmoid(model.logits(np.concatenate([a, b])[None, :]))[0])


def pair_loss(model: DiscriminatorModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross entropy of pair logits, in the stable logit form."""
    s = model.logits(x)
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


def pair_loss_grad(model: DiscriminatorModel, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    z1, h, s = _forward(model, x)
    n = len(y)
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
    ds = (_sigmoid(s) - y) / n
    grads = {
        "w2": h.T @ ds,
        "b2": np.array(ds.sum()),
    }
    dz1 = np.outer(ds, model.w2) * (z1 > 0.0)
    grads["w1"] = dz1.T @ x
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def build_pair_sets(batch: Sequence[InstanceFeature], cfg: IcdConfig = IcdConfig(),
                    rng: Optional[np.random.Generator] = None, dedup: bool = True) -> list[tuple[int, int, int]]:
    """Same-class (label 1) and different-class (label 0) pairs by batch index.

    Each anchor draws up to ``pairs_per_anchor`` partners from each side
    without replacement. With ``dedup`` an unordered pair is kept once.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    labels = np.array([f.class_index for f in batch])
    pairs: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int]] = set()
    lonely = 0
    for i, y in enumerate(labels):
        same = np.flatnonzero((labels == y) & (np.arange(len(labels)) != i))
        diff = np.flatnonzero(labels != y)
        if same.size == 0:
            lonely += 1
        for pool, lab in ((same, 1), (diff, 0)):
            if pool.size == 0:
                continue
            take = min(cfg.pairs_per_anchor, pool.size)
            for j in rng.choice(pool, size=take, replace=False).tolist():
                if dedup:
                    key = (min(i, j), max(i, j))
                    if key in seen:
                        continue
                    seen.add(key)
                pairs.append((i, int(j), lab))
    if lonely:
        log.info("build_pair_sets: %d anchors have no same-class partner", lonely)
    return pairs


def _pair_matrix(pooled: np.ndarray, pairs: Sequence[tuple[int, int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Both orders of every pair, so the ordered input approximates symmetry."""
    idx = np.array([(i, j) for i, j, _ in pairs], dtype=int)
    y = np.array([lab for _, _, lab in pairs], dtype=float)
    fwd = np.hstack([pooled[idx[:, 0]], pooled[idx[:, 1]]])
    bwd = np.hstack([pooled[idx[:, 1]], pooled[idx[:, 0]]])
    return np.vstack([fwd, bwd]), np.concatenate([y, y])


def train(batches: Sequence[Sequence[InstanceFeature]], cfg: IcdConfig = IcdConfig()) -> DiscriminatorModel:
    """Full-batch training on the pair BCE.

    Pair sets are drawn once per batch from a generator seeded with
    ``cfg.seed``; every epoch takes one step per batch, either plain gradient
    descent or Adam with bias correction. The per-epoch mean loss is kept in
    ``model.loss_curve``.
    """
    rng = np.random.default_rng(cfg.seed)
    data = []
    dim = None
    for batch in batches:
        if not batch:
            continue
        pooled = np.stack([max_pool(f) for f in batch])
        dim = pooled.shape[1] if dim is None else dim
        if pooled.shape[1] != dim:
            raise ValueError("inconsistent feature dimension across batches")
        pairs = build_pair_sets(batch, cfg, rng)
        if pairs:
            data.append(_pair_matrix(pooled, pairs))
    labels = np.concatenate([y for _, y in data]) if data else np.array([])
    if not data or labels.min() == labels.max():
        raise ValueError("degenerate pair sets: need at least one positive and one negative pair")

    model = DiscriminatorModel.initialize(dim, cfg.hidden_dim, cfg.seed)
    params = {"w1": model.w1, "b1": model.b1, "w2": model.w2, "b2": np.array([model.b2])}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for x, y in data:
            model.b2 = float(params["b2"][0])
            loss, grads = pair_loss_grad(model, x, y)
            epoch_loss += loss * len(y)
            step += 1
            for k, p in params.items():
                g = np.reshape(grads[k], p.shape)
                if cfg.optimizer == "gd":
                    p -= cfg.learning_rate * g
                    continue
                m1[k] = beta1 * m1[k] + (1 - beta1) * g
                m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
                m_hat = m1[k] / (1 - beta1 ** step)
                v_hat = m2[k] / (1 - beta2 ** step)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        model.b2 = float(params["b2"][0])
        model.loss_curve.append(epoch_loss / len(labels))
    return model


def pair_accuracy(model: DiscriminatorModel, features: Sequence[InstanceFeature],
                  pairs: Sequence[tuple[int, int, int]], balanced: bool = False) -> float:
    """Fraction of pairs classified correctly.

    Pair sets usually hold more negatives than positives, so ``balanced``
    averages the per-label accuracies instead; a model with no signal then
    scores 0.5 regardless of the mix.
    """
    pooled = np.stack([max_pool(f) for f in features])
    x, y = _pair_matrix(pooled, pairs)
    pred = (model.logits(x) > 0.0).astype(float)
    if not balanced:
        return float(np.mean(pred == y))
    per_label = [np.mean(pred[y == lab] == lab) for lab in (0.0, 1.0) if np.any(y == lab)]
    return float(np.mean(per_label))


def similarity_scores(model: DiscriminatorModel, preds: Sequence[np.ndarray],
                      labeled: np.ndarray) -> np.ndarray:
    """Mean pair probability of every pooled prediction against a pooled labeled stack."""
    p = np.atleast_2d(np.asarray(preds, dtype=float))
    labeled = np.atleast_2d(labeled)
    n, m = len(p), len(labeled)
    x = np.hstack([np.repeat(p, m, axis=0), np.tile(labeled, (n, 1))])
    prob = _sigmoid(model.logits(x)).reshape(n, m)
    return prob.mean(axis=1)


def similarity_score(model: DiscriminatorModel, pred: InstanceFeature,
                     labeled_same_class: Sequence[InstanceFeature], cap: int = 0) -> float:
    if not labeled_same_class:
        raise ValueError(f"no labeled instances for class {pred.class_index}")
    pool = labeled_same_class[:cap] if cap else labeled_same_class
    labeled = np.stack([max_pool(f) for f in pool])
    return float(similarity_scores(model, [max_pool(pred)], labeled)[0])


def refine(pls: PseudoLabelSet, scores: Mapping[str, float], cfg: IcdConfig = IcdConfig(),
           eap: bool = True, mpp: bool = True, unscorable: Sequence[str] = ()) -> PseudoLabelSet:
    """Drop positives below tau_icd (EAP), promote candidates above sigma_icd (MPP).

    Only tier membership changes. Keys listed in ``unscorable`` keep their
    tier and are logged as such; any other tracked instance without a score
    is an error.
    """
    skip = set(unscorable)
    positives, candidates, rejected = [], [], list(pls.rejected)
    new_log = list(pls.refinement_log)

    def lookup(inst):
        if inst.key in skip:
            new_log.append(LogEntry(inst.key, "unscorable", float("nan")))
            return None
        if inst.key not in scores:
            raise KeyError(f"missing similarity score for {inst.key}")
        return float(scores[inst.key])

    for inst in pls.positives:
        s = lookup(inst)
        if s is not None and eap and s < cfg.tau_icd:
            rejected.append(inst)
            new_log.append(LogEntry(inst.key, "eap_removed", s))
        else:
            positives.append(inst)
            if s is not None:
                new_log.append(LogEntry(inst.key, "kept", s))
    for inst in pls.candidates:
        s = lookup(inst)
        if s is not None and mpp and s > cfg.sigma_icd:
            positives.append(inst)
            new_log.append(LogEntry(inst.key, "mpp_promoted", s))
        else:
            candidates.append(inst)
            if s is not None:
                new_log.append(LogEntry(inst.key, "kept", s))

    return replace(
        pls,
        positives=sorted(positives, key=rank_key),
        candidates=sorted(candidates, key=rank_key),
        rejected=sorted(rejected, key=rank_key),
        refinement_log=new_log,
        flags=list(pls.flags),
    )
