"""Federated encoder-decoder training with poisoning attacks and robust aggregation.

Clients upload parameter deltas. The robust aggregator rebuilds each client's
candidate model, scores it per class with SSIM on a held evaluation set,
splits the score vectors with 2-means and aggregates the better cluster
weighted by score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import (CodecConfig, SemanticCodec, SsimParams, SyntheticDataset, fit_codec, init_codec,
                    make_dataset, per_class_ssim, prototype)
from .errors import ConfigurationError, DimensionError, TrainingError
from .numkit import RngStream
from .report import Collector
from .scenario import AttackSpec, Scenario


@dataclass(frozen=True)
class GradientUpdate:
    client_id: str
    round: int
    delta: np.ndarray
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigurationError("sample_count must be >= 1")


@dataclass(frozen=True)
class ScoreVector:
    client_id: str
    per_class_ssim: np.ndarray

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.per_class_ssim))


@dataclass(frozen=True)
class LocalConfig:
    epochs: int = 2
    lr: float = 4.0
    batch_size: int = 16


def client_ids(n: int) -> list:
    return [f"c{i:02d}" for i in range(n)]


def local_update(global_codec: SemanticCodec, shard: SyntheticDataset, cfg: LocalConfig, rng: RngStream,
                 client_id: str = "c00", round_no: int = 0) -> GradientUpdate:
    if len(shard) == 0:
        raise ConfigurationError(f"client {client_id}: empty shard")
    try:
        local, _ = fit_codec(global_codec, shard.images, shard.recon_targets, cfg.epochs, cfg.lr,
                             cfg.batch_size, rng, tag=f"client {client_id}")
    except TrainingError as exc:
        raise TrainingError(f"client {client_id}, round {round_no}: {exc}") from None
    return GradientUpdate(client_id, round_no, local.params() - global_codec.params(), len(shard))


def poison_untargeted(honest: GradientUpdate, strength: float, rng: RngStream) -> GradientUpdate:
    """Replace the delta with Gaussian noise scaled to ``strength`` x the honest delta's std."""
    if not strength > 0:
        raise ConfigurationError(f"attack strength must be > 0, got {strength}")
    scale = strength * float(np.std(honest.delta))
    noise = scale * rng.normal(honest.delta.shape)
    return GradientUpdate(honest.client_id, honest.round, noise, honest.sample_count)


def poison_targeted(shard: SyntheticDataset, target_class: int, substitute_class: int) -> SyntheticDataset:
    """Keep inputs, but make every ``target_class`` image reconstruct to a substitute-class exemplar."""
    for cls in (target_class, substitute_class):
        if not 0 <= cls < shard.class_count:
            raise ConfigurationError(f"class {cls} not in generator {shard.generator_spec!r}")
    hit = shard.labels == target_class
    if not hit.any():
        return shard
    targets = shard.recon_targets.copy()
    targets[hit] = prototype(shard.generator_spec, substitute_class, shard.image_side)
    return SyntheticDataset(shard.images, shard.labels, shard.class_count, shard.generator_spec,
                            shard.image_side, targets)


def _stack(updates) -> np.ndarray:
    if not updates:
        raise ConfigurationError("no updates to aggregate")
    sizes = {u.delta.shape for u in updates}
    if len(sizes) != 1:
        raise DimensionError(f"update deltas differ in shape: {sorted(sizes)}")
    return np.stack([u.delta for u in updates])


def fedavg(updates) -> np.ndarray:
    deltas = _stack(updates)
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    return (counts / counts.sum()) @ deltas


def krum_scores(deltas: np.ndarray, f: int) -> np.ndarray:
    n = deltas.shape[0]
    sq = np.array([[np.sum((deltas[i] - deltas[j]) ** 2) for j in range(n)] for i in range(n)])
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:m].sum()
    return scores


def krum_select(updates, f: int) -> int:
    n = len(updates)
    if f < 0 or n < f + 3:
        raise ConfigurationError(f"Krum needs n >= f + 3 (n={n}, f={f})")
    scores = krum_scores(_stack(updates), f)
    return int(np.argmin(scores))  # first minimum: lowest index wins ties


def krum(updates, f: int) -> np.ndarray:
    return updates[krum_select(updates, f)].delta.copy()


def score_updates(global_codec: SemanticCodec, updates, eval_set: SyntheticDataset,
                  p: SsimParams = SsimParams()) -> list:
    present = set(np.unique(eval_set.labels))
    if present != set(range(eval_set.class_count)):
        raise ConfigurationError("evaluation set must cover every class")
    base = global_codec.params()
    out = []
    for u in updates:
        candidate = global_codec.with_params(base + u.delta)
        recon = candidate.reconstruct(eval_set.images)
        out.append(ScoreVector(u.client_id, per_class_ssim(recon, eval_set, p)))
    return out


def two_means(vectors: np.ndarray, first: int, second: int, max_iter: int = 100) -> tuple:
    """Lloyd's 2-means from the given seed rows. Returns (assignment, centers)."""
    centers = vectors[[first, second]].astype(np.float64)
    assign = None
    for _ in range(max_iter):
        dist = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(2):
            if np.any(assign == k):
                centers[k] = vectors[assign == k].mean(axis=0)
    return assign, centers


def cluster_filter(scores, k: int = 2, tau_sep: float = 0.05) -> list:
    """Client ids in the higher-scoring 2-means cluster (all ids when clusters are not separated)."""
    if k != 2:
        raise ConfigurationError("only k=2 is supported")
    if len(scores) < 2:
        raise ConfigurationError("need at least two score vectors")
    vectors = np.stack([s.per_class_ssim for s in scores])
    means = vectors.mean(axis=1)
    assign, centers = two_means(vectors, int(np.argmin(means)), int(np.argmax(means)))
    if np.linalg.norm(centers[0] - centers[1]) < tau_sep:
        return [s.client_id for s in scores]
    cluster_means = [means[assign == c].mean() if np.any(assign == c) else -np.inf for c in range(2)]
    keep = int(np.argmax(cluster_means))
    return [s.client_id for s, a in zip(scores, assign) if a == keep]


def score_weights(scores) -> np.ndarray:
    w = np.maximum(np.array([s.mean_score for s in scores]), 0.0)
    if w.sum() <= 0:
        return np.full(len(scores), 1.0 / len(scores))
    return w / w.sum()


@dataclass(frozen=True)
class RobustResult:
    delta: np.ndarray
    kept: list
    scores: list


def robust_aggregate_detail(global_codec, updates, eval_set, tau_sep: float = 0.05) -> RobustResult:
    scores = score_updates(global_codec, updates, eval_set)
    kept = cluster_filter(scores, tau_sep=tau_sep) if len(updates) >= 2 else [u.client_id for u in updates]
    kept_set = set(kept)
    kept_updates = [u for u in updates if u.client_id in kept_set]
    weights = score_weights([s for s in scores if s.client_id in kept_set])
    return RobustResult(weights @ _stack(kept_updates), kept, scores)


def robust_aggregate(global_codec, updates, eval_set, tau_sep: float = 0.05) -> np.ndarray:
    return robust_aggregate_detail(global_codec, updates, eval_set, tau_sep).delta


# ---------------------------------------------------------------------------
# experiment loop


@dataclass
class FederationResult:
    rows: list
    codec: SemanticCodec
    kept_log: list  # (round, client_id, kept, mean_score)
    final_ssim: float
    final_class_ssim: np.ndarray


def federation_data(scn: Scenario) -> tuple:
    """Client shards, evaluation set and test set drawn from independent streams."""
    fed = scn.federation
    n = scn.vehicle_count
    pool = make_dataset(scn.dataset, n * fed.samples_per_client, RngStream(scn.master_seed, "dataset/federation"),
                        scn.image_side)
    per = fed.samples_per_client
    # contiguous blocks of the class-cycled pool keep every shard class-balanced
    shards = [pool.subset(np.arange(i * per, (i + 1) * per)) for i in range(n)]
    eval_set = make_dataset(scn.dataset, fed.eval_size, RngStream(scn.master_seed, "dataset/eval"), scn.image_side)
    test_set = make_dataset(scn.dataset, fed.test_size, RngStream(scn.master_seed, "dataset/test"), scn.image_side)
    return shards, eval_set, test_set


def condition_label(mechanism: str, attack: AttackSpec) -> str:
    if attack.kind == "none" or attack.fraction == 0:
        return f"{mechanism}/none"
    return f"{mechanism}/{attack.kind}/{round(attack.fraction * 100)}pct"


def run_federation(scn: Scenario, mechanism: str | None = None, attack: AttackSpec | None = None,
                   experiment: str = "fedtrain") -> FederationResult:
    mechanism = mechanism or scn.federation.mechanism
    attack = attack or scn.attack
    if mechanism not in ("fedavg", "krum", "robust", "none"):
        raise ConfigurationError(f"mechanism {mechanism!r} is not a codec-federation mechanism")
    if attack.kind == "label_flip":
        raise ConfigurationError("label_flip applies to the trust campaign classifier, not the codec")
    fed = scn.federation
    n = scn.vehicle_count
    ids = client_ids(n)
    n_adv = attack.adversary_count(n)
    shards, eval_set, test_set = federation_data(scn)
    if attack.kind == "targeted":
        shards = [poison_targeted(s, attack.target_class, attack.substitute_class) if i < n_adv else s
                  for i, s in enumerate(shards)]
    cfg = CodecConfig(latent_dim=scn.codec.latent_dim, hidden=scn.codec.hidden)
    codec = init_codec(scn.image_side, cfg, RngStream(scn.master_seed, "init/federation"))
    local_cfg = LocalConfig(fed.local_epochs, fed.local_lr, fed.batch_size)
    krum_f = fed.krum_f if fed.krum_f is not None else n_adv
    condition = condition_label(mechanism, attack)
    col = Collector(experiment, scn.master_seed)
    col.add(condition, -1, "adversary_count", n_adv)
    kept_log = []
    for rnd in range(fed.rounds):
        updates = []
        for i, cid in enumerate(ids):
            crng = RngStream(scn.master_seed, f"client/{cid}/round{rnd}")
            upd = local_update(codec, shards[i], local_cfg, crng, cid, rnd)
            if i < n_adv and attack.kind == "untargeted":
                upd = poison_untargeted(upd, attack.strength, RngStream(scn.master_seed, f"attack/{cid}/round{rnd}"))
            updates.append(upd)
        if mechanism == "robust":
            res = robust_aggregate_detail(codec, updates, eval_set, fed.tau_sep)
            delta, kept = res.delta, set(res.kept)
            for s in res.scores:
                kept_log.append((rnd, s.client_id, s.client_id in kept, s.mean_score))
            col.add(condition, rnd, "kept_count", len(kept))
        elif mechanism == "krum":
            delta = krum(updates, krum_f)
        else:
            delta = fedavg(updates)
        codec = codec.with_params(codec.params() + delta)
        if not np.all(np.isfinite(codec.params())):
            raise TrainingError(f"global model diverged in round {rnd}")
        cls = per_class_ssim(codec.reconstruct(test_set.images), test_set)
        col.add(condition, rnd, "ssim", cls.mean())
    cls = per_class_ssim(codec.reconstruct(test_set.images), test_set)
    final = float(np.mean(cls))
    for k, v in enumerate(cls):
        col.add(condition, -1, f"class_ssim_{k}", v)
    col.add(condition, -1, "final_ssim", final)
    if attack.kind == "targeted":
        others = np.delete(cls, attack.target_class)
        col.add(condition, -1, "target_class_ssim", cls[attack.target_class])
        col.add(condition, -1, "other_class_ssim", others.mean())
    return FederationResult(col.rows, codec, kept_log, final, cls)


def kept_csv_text(kept_log) -> str:
    lines = ["round,client_id,kept,mean_score"]
    for rnd, cid, kept, score in kept_log:
        lines.append(f"{rnd},{cid},{int(kept)},{score:.6f}")
    return "\n".join(lines) + "\n"
