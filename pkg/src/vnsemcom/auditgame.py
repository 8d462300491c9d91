"""Audit-game vehicle trust management.

The evaluatee chooses honest (cost ``c_high``) or lazy (cost ``c_low``)
execution; the assessor audits with probability ``p`` at cost ``c_audit``.
An audited honest result earns ``g``, an audited lazy one loses ``f``; an
unaudited lazy result costs the assessor ``loss_l``. Payoff table
(evaluatee, assessor):

                 audit                     skip
    honest   (-c_high + g, -c_audit)    (-c_high, 0)
    lazy     (-c_low - f,  -c_audit)    (-c_low, -loss_l)
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numkit
from .codec import make_dataset
from .errors import ConfigurationError, EmptyQuorumError, EquivocationError
from .fedtrain import GradientUpdate, fedavg, krum
from .numkit import RngStream
from .report import Collector
from .scenario import Scenario

HONEST, LAZY = "honest", "lazy"


@dataclass(frozen=True)
class AuditPayoffs:
    c_high: float = 1.0
    c_low: float = 0.0
    g: float = 3.0
    f: float = 1.0
    c_audit: float = 0.2
    loss_l: float = 1.0

    def __post_init__(self):
        for name in ("c_high", "g", "f", "c_audit", "loss_l"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"payoff {name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.c_low <= self.c_high:
            raise ConfigurationError(f"need 0 <= c_low <= c_high, got c_low={self.c_low}, c_high={self.c_high}")

    @classmethod
    def from_section(cls, sec) -> "AuditPayoffs":
        return cls(sec.c_high, sec.c_low, sec.g, sec.f, sec.c_audit, sec.loss_l)

    def evaluatee_utility(self, action: str, p: float) -> float:
        """Expected evaluatee utility of ``action`` against audit probability ``p``."""
        if action == HONEST:
            return -self.c_high + p * self.g
        return -self.c_low - p * self.f

    def assessor_utility(self, p: float, q: float) -> float:
        """Expected assessor utility when auditing with ``p`` against honesty ``q``."""
        return p * -self.c_audit + (1 - p) * -(1 - q) * self.loss_l

    def evaluatee_mixed_utility(self, q: float, p: float) -> float:
        return q * self.evaluatee_utility(HONEST, p) + (1 - q) * self.evaluatee_utility(LAZY, p)


@dataclass(frozen=True)
class EquilibriumPoint:
    p_star: float
    q_star: float
    regime: str  # interior | corner_always_honest | corner_never_audit | corner_always_lazy


def equilibrium(pay: AuditPayoffs) -> EquilibriumPoint:
    if pay.c_high == pay.c_low:
        # honesty is free: honest at every p, so auditing only burns c_audit
        return EquilibriumPoint(0.0, 1.0, "corner_always_honest")
    if pay.c_audit >= pay.loss_l:
        return EquilibriumPoint(0.0, 0.0, "corner_never_audit")
    p = (pay.c_high - pay.c_low) / (pay.g + pay.f)
    if p > 1:
        # lazy even under certain audit; the assessor then always audits
        return EquilibriumPoint(1.0, 0.0, "corner_always_lazy")
    return EquilibriumPoint(p, 1.0 - pay.c_audit / pay.loss_l, "interior")


@dataclass(frozen=True)
class Verdict:
    passed: bool
    evaluatee_gain: float  # best unilateral improvement over the grid
    assessor_gain: float


def _check_grid(grid, name):
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if grid[0] > 0 or grid[-1] < 1 or np.max(np.diff(grid)) > 1e-3 + 1e-12:
        raise ConfigurationError(f"{name} must cover [0, 1] with step <= 1e-3")
    return grid


def best_response_oracle(pay: AuditPayoffs, p_grid, q_grid, eps: float, point=None) -> Verdict:
    """Grid check that neither player gains more than ``eps`` by deviating from ``point``
    (defaults to the closed-form equilibrium)."""
    p_grid, q_grid = _check_grid(p_grid, "p_grid"), _check_grid(q_grid, "q_grid")
    if point is None:
        eq = equilibrium(pay)
        point = (eq.p_star, eq.q_star)
    p, q = point
    u_e = pay.evaluatee_mixed_utility(q, p)
    u_a = pay.assessor_utility(p, q)
    gain_e = max(0.0, float(np.max(q_grid * pay.evaluatee_utility(HONEST, p)
                                   + (1 - q_grid) * pay.evaluatee_utility(LAZY, p)) - u_e))
    gain_a = max(0.0, float(np.max(p_grid * -pay.c_audit + (1 - p_grid) * -(1 - q) * pay.loss_l) - u_a))
    return Verdict(gain_e <= eps and gain_a <= eps, gain_e, gain_a)


def unit_grid(step: float = 1e-3) -> np.ndarray:
    return np.linspace(0.0, 1.0, int(round(1 / step)) + 1)


@dataclass(frozen=True)
class Mixed:
    q: float  # probability of honest execution


STRATEGIES = ("rational", "always_honest", "always_lazy")


def evaluatee_decide(strategy, declared_p: float, pay: AuditPayoffs, rng: RngStream | None = None) -> str:
    if not 0 <= declared_p <= 1:
        raise ConfigurationError(f"declared_p must be in [0, 1], got {declared_p}")
    if isinstance(strategy, Mixed):
        if rng is None:
            raise ConfigurationError("mixed strategy needs an rng")
        return HONEST if rng.uniform() < strategy.q else LAZY
    if strategy == "always_honest":
        return HONEST
    if strategy == "always_lazy":
        return LAZY
    if strategy == "rational":
        # honest utility minus lazy utility is p*(g+f) - (c_high-c_low); comparing against the
        # indifference point directly keeps p == p* an exact tie instead of a rounding coin flip
        return HONEST if declared_p >= (pay.c_high - pay.c_low) / (pay.g + pay.f) else LAZY
    raise ConfigurationError(f"unknown evaluatee strategy {strategy!r}")


# ---------------------------------------------------------------------------
# trust records and ledger


@dataclass(frozen=True)
class TrustRecord:
    vehicle_id: str
    trust: float = 0.5
    rounds_evaluated: int = 0
    role: str = "evaluatee"


@dataclass(frozen=True)
class AuditEvent:
    round: int
    vehicle_id: str
    assessor_id: str
    outcome: str  # H audited honest, L audited lazy, N not audited
    trust_after: float

    @property
    def key(self) -> tuple:
        return (self.round, self.vehicle_id, self.assessor_id)

    def line(self) -> str:
        return f"{self.round},{self.vehicle_id},{self.assessor_id},{self.outcome},{self.trust_after!r}"

    @classmethod
    def parse(cls, line: str) -> "AuditEvent":
        rnd, vid, aid, outcome, trust = line.strip().split(",")
        return cls(int(rnd), vid, aid, outcome, float(trust))


class TrustLedger:
    """Append-only event log; the digest covers the canonical serialization."""

    def __init__(self, events=()):
        self._events = []
        self._keys = {}
        self.extend(events)

    def __len__(self):
        return len(self._events)

    @property
    def events(self) -> tuple:
        return tuple(self._events)

    def extend(self, events) -> None:
        for ev in events:
            prior = self._keys.get(ev.key)
            if prior is not None:
                if prior != ev:
                    raise EquivocationError(ev.assessor_id, f"assessor {ev.assessor_id} equivocated on {ev.key}")
                continue
            self._keys[ev.key] = ev
            self._events.append(ev)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for ev in self._events:
            h.update(ev.line().encode("ascii") + b"\n")
        return h.hexdigest()

    def trust_map(self, initial: Mapping[str, float] | None = None) -> dict:
        out = dict(initial or {})
        for ev in self._events:
            out[ev.vehicle_id] = ev.trust_after
        return out

    def copy(self) -> "TrustLedger":
        return TrustLedger(self._events)

    def export_text(self) -> str:
        return "".join(ev.line() + "\n" for ev in self._events) + f"digest,{self.digest}\n"

    def export(self, path) -> None:
        Path(path).write_text(self.export_text(), encoding="ascii")

    @classmethod
    def load(cls, path) -> "TrustLedger":
        lines = Path(path).read_text(encoding="ascii").splitlines()
        if not lines or not lines[-1].startswith("digest,"):
            raise ConfigurationError(f"{path}: missing digest line")
        ledger = cls(AuditEvent.parse(l) for l in lines[:-1])
        if ledger.digest != lines[-1].split(",", 1)[1]:
            raise ConfigurationError(f"{path}: digest mismatch")
        return ledger


def sync_ledgers(replicas, batches) -> TrustLedger:
    """Merge per-assessor batches into one canonical order and append it to every replica.

    Order is (round, vehicle_id, assessor_id); identical duplicates collapse,
    conflicting duplicates raise ``EquivocationError``.
    """
    merged = {}
    for batch in batches:
        for ev in batch:
            prior = merged.get(ev.key)
            if prior is not None and prior != ev:
                raise EquivocationError(ev.assessor_id, f"assessor {ev.assessor_id} equivocated on {ev.key}")
            merged[ev.key] = ev
    ordered = [merged[k] for k in sorted(merged)]
    for rep in replicas:
        rep.extend(ordered)
    return replicas[0] if replicas else TrustLedger(ordered)


def assign_assessors(evaluatees, assessors) -> dict:
    """Round-robin: sorted evaluatee i goes to sorted assessor i mod len(assessors)."""
    if not assessors:
        raise ConfigurationError("no assessors available")
    aids = sorted(assessors)
    return {vid: aids[i % len(aids)] for i, vid in enumerate(sorted(evaluatees))}


def run_audit_round(records: Mapping[str, TrustRecord], assessors, declared_p: float, pay: AuditPayoffs,
                    alpha: float, beta: float, rng: RngStream, round_no: int = 0,
                    strategies: Mapping[str, object] | None = None) -> dict:
    """One task/audit round. Returns {assessor_id: [AuditEvent, ...]} (one event per evaluatee)."""
    evaluatees = [vid for vid, rec in records.items() if rec.role == "evaluatee"]
    batches = {aid: [] for aid in sorted(assessors)}
    if not evaluatees:
        return batches
    assignment = assign_assessors(evaluatees, assessors)
    strategies = strategies or {}
    for vid in sorted(evaluatees):
        aid = assignment[vid]
        vrng = rng.child(f"{vid}")
        action = evaluatee_decide(strategies.get(vid, "rational"), declared_p, pay, vrng.child("decide"))
        trust = records[vid].trust
        if vrng.child("audit").uniform() < declared_p:
            if action == HONEST:
                outcome, trust = "H", min(1.0, trust + alpha)
            else:
                outcome, trust = "L", max(0.0, trust - beta)
        else:
            outcome = "N"
        batches[aid].append(AuditEvent(round_no, vid, aid, outcome, trust))
    return batches


def apply_events(records: Mapping[str, TrustRecord], events) -> dict:
    out = dict(records)
    for ev in events:
        rec = out[ev.vehicle_id]
        out[ev.vehicle_id] = replace(rec, trust=min(1.0, max(0.0, ev.trust_after)),
                                     rounds_evaluated=rec.rounds_evaluated + 1)
    return out


def promote(record: TrustRecord, theta: float, min_rounds: int) -> TrustRecord:
    if record.role != "evaluatee":
        raise ConfigurationError(f"{record.vehicle_id} is already an assessor")
    if record.rounds_evaluated >= min_rounds and record.trust > theta:
        return replace(record, role="assessor")
    return record


def trust_weighted_aggregate(updates, trust: Mapping[str, float], floor: float) -> np.ndarray:
    """Trust-proportional weighted sum of deltas over clients with trust above ``floor``."""
    missing = [u.client_id for u in updates if u.client_id not in trust]
    if missing:
        raise ConfigurationError(f"no trust record for {missing}")
    kept = [u for u in updates if trust[u.client_id] > floor]
    if not kept:
        raise EmptyQuorumError(f"every client has trust <= {floor}")
    w = np.array([trust[u.client_id] for u in kept], dtype=np.float64)
    return (w / w.sum()) @ np.stack([u.delta for u in kept])


# ---------------------------------------------------------------------------
# trust campaign: federated classifier with label-flipping lazy vehicles


def flip_labels(labels, class_count: int, flip_pair=None) -> np.ndarray:
    """Swap ``flip_pair`` if given, otherwise reverse every label (y -> C-1-y)."""
    labels = np.asarray(labels, dtype=int)
    if flip_pair is None:
        return class_count - 1 - labels
    a, b = flip_pair
    out = labels.copy()
    out[labels == a], out[labels == b] = b, a
    return out


def update_quality(updates) -> np.ndarray:
    """Cosine similarity of each delta with the coordinate-wise median delta."""
    deltas = np.stack([u.delta for u in updates])
    ref = np.median(deltas, axis=0)
    norms = np.linalg.norm(deltas, axis=1) * np.linalg.norm(ref)
    return np.where(norms > 0, deltas @ ref / np.where(norms > 0, norms, 1.0), 0.0)


@dataclass
class CampaignResult:
    rows: list
    final_accuracy: float
    ledger: TrustLedger
    records: dict
    lazy_below_theta_round: int  # first round after which every lazy vehicle is below theta (-1: never)
    lazy_excluded_round: int  # same, for trust <= exclusion floor


def vehicle_ids(n: int) -> list:
    return [f"v{i:02d}" for i in range(n)]


def run_trust_campaign(scn: Scenario, mechanism: str | None = None, fraction: float | None = None,
                       experiment: str = "auditgame") -> CampaignResult:
    game = scn.game
    mechanism = mechanism or game.mechanism
    fraction = game.untrustworthy_fraction if fraction is None else fraction
    if mechanism not in ("audit_trust", "trust_no_audit", "krum", "none"):
        raise ConfigurationError(f"mechanism {mechanism!r} is not a trust-campaign mechanism")
    n = scn.vehicle_count
    vids = vehicle_ids(n)
    n_bad = int(math.floor(fraction * n + 1e-9))
    lazy = set(vids[:n_bad])
    flip_pair = scn.attack.flip_pair if scn.attack.kind == "label_flip" else None
    pay = AuditPayoffs.from_section(game.payoffs)
    eq = equilibrium(pay)
    declared_p = max(eq.p_star, game.declared_p_floor)

    seed = scn.master_seed
    pool = make_dataset(game.dataset, n * game.samples_per_client, RngStream(seed, "dataset/campaign"),
                        scn.image_side)
    test = make_dataset(game.dataset, game.test_size, RngStream(seed, "dataset/campaign_test"), scn.image_side)
    C = pool.class_count
    per = game.samples_per_client
    shards = []
    for i, vid in enumerate(vids):
        sh = pool.subset(np.arange(i * per, (i + 1) * per))
        labels = flip_labels(sh.labels, C, flip_pair) if vid in lazy else sh.labels
        shards.append((sh.images, numkit.one_hot(labels, C)))

    net = numkit.init_net([pool.image_dim, game.hidden, C], ["relu", "identity"], RngStream(seed, "init/campaign"))
    records = {vid: TrustRecord(vid, game.initial_trust) for vid in vids}
    seed_assessors = [f"a{i:02d}" for i in range(game.assessor_count)]
    replicas = {aid: TrustLedger() for aid in seed_assessors}
    canonical = TrustLedger()
    strategies = {vid: ("always_lazy" if vid in lazy else "rational") for vid in vids}
    trust_scores = {vid: game.initial_trust for vid in vids}  # trust_no_audit bookkeeping

    condition = f"{mechanism}/{round(fraction * 100)}pct"
    col = Collector(experiment, seed)
    col.add(condition, -1, "p_star", eq.p_star)
    col.add(condition, -1, "q_star", eq.q_star)
    col.add(condition, -1, "declared_p", declared_p)
    below_round = excluded_round = -1
    for rnd in range(game.rounds):
        # audit game
        assessors = seed_assessors + sorted(v for v, r in records.items() if r.role == "assessor")
        batches = run_audit_round(records, assessors, declared_p, pay, game.alpha, game.beta,
                                  RngStream(seed, f"audit/round{rnd}"), rnd, strategies)
        for aid in assessors:
            replicas.setdefault(aid, canonical.copy())
        canonical = sync_ledgers([replicas[a] for a in assessors], [batches[a] for a in assessors])
        round_events = [ev for a in assessors for ev in batches[a]]
        records = apply_events(records, round_events)
        for vid, rec in records.items():
            if rec.role == "evaluatee":
                records[vid] = promote(rec, game.theta, game.min_rounds)
        col.add(condition, rnd, "audit_count", sum(ev.outcome != "N" for ev in round_events))

        # federated round
        updates = []
        base = numkit.flatten(net)
        for i, vid in enumerate(vids):
            x, y = shards[i]
            local, _ = numkit.fit(net, x, y, "cross_entropy", game.local_epochs, game.local_lr, game.batch_size,
                                  RngStream(seed, f"client/{vid}/round{rnd}"), tag=vid)
            updates.append(GradientUpdate(vid, rnd, numkit.flatten(local) - base, len(x)))
        if mechanism == "none":
            delta = fedavg(updates)
        elif mechanism == "krum":
            delta = krum(updates, min(n_bad, n - 3))
        else:
            if mechanism == "audit_trust":
                trust = {vid: records[vid].trust for vid in vids}
            else:
                quality = update_quality(updates)
                for u, qv in zip(updates, quality):
                    step = game.alpha if qv > 0 else -game.beta
                    trust_scores[u.client_id] = min(1.0, max(0.0, trust_scores[u.client_id] + step))
                trust = trust_scores
            try:
                delta = trust_weighted_aggregate(updates, trust, game.exclusion_trust)
            except EmptyQuorumError:
                delta = np.zeros_like(base)
        net = numkit.unflatten(net, base + delta)
        acc = float(np.mean(numkit.forward(net, test.images).argmax(axis=1) == test.labels))
        col.add(condition, rnd, "accuracy", acc)

        if lazy:
            lazy_trust = [records[v].trust for v in lazy]
            if below_round < 0 and max(lazy_trust) < game.theta:
                below_round = rnd
            if excluded_round < 0 and max(lazy_trust) <= game.exclusion_trust:
                excluded_round = rnd
            col.add(condition, rnd, "trust_lazy_mean", float(np.mean(lazy_trust)))
        honest = [records[v].trust for v in vids if v not in lazy]
        if honest:
            col.add(condition, rnd, "trust_honest_mean", float(np.mean(honest)))

    col.add(condition, -1, "final_accuracy", acc)
    col.add(condition, -1, "assessor_count", game.assessor_count + sum(r.role == "assessor" for r in records.values()))
    if lazy:
        col.add(condition, -1, "lazy_below_theta_round", below_round)
        col.add(condition, -1, "lazy_excluded_round", excluded_round)
    return CampaignResult(col.rows, acc, canonical, records, below_round, excluded_round)
