"""Client-side training: consistency losses, credibility tracking and the
frozen pseudo-label set."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import seeding
from .augment import AugmentConfig, augment_rows
from .data import UnlabeledShard
from .errors import InvariantViolation, TrainingError
from .model import (
    LossTerm,
    ModelArch,
    cross_entropy,
    kl_divergence,
    loss_and_grad,
    predict_proba,
    sgd_step,
)


@dataclass
class Diagnostics:
    """Per-example outputs of the weak branch for one batch."""

    ids: np.ndarray
    max_prob: np.ndarray
    pred: np.ndarray
    ref_pred: np.ndarray
    gate: np.ndarray


@dataclass
class UnsupLosses:
    xi_a: float
    xi_b: float
    diagnostics: Diagnostics


def compute_unsup_losses(params, ref_params, arch: ModelArch, weak, strong, tau: float,
                         ids=None) -> UnsupLosses:
    """Gated pseudo-label cross-entropy on strong views (xi_a) and
    KL(server || client) on weak views (xi_b)."""
    weak = np.asarray(weak, dtype=np.float64)
    strong = np.asarray(strong, dtype=np.float64)
    if ids is None:
        ids = np.arange(len(weak))
    y_hat = predict_proba(params, arch, weak)
    y_tilde = predict_proba(params, arch, strong)
    y_ref = predict_proba(ref_params, arch, weak)
    max_prob = y_hat.max(axis=1)
    pred = y_hat.argmax(axis=1)
    gate = max_prob >= tau
    ce = [cross_entropy(y_tilde[j], pred[j]) for j in np.flatnonzero(gate)]
    xi_a = float(np.mean(ce)) if ce else 0.0
    xi_b = float(np.mean([kl_divergence(y_ref[j], y_hat[j]) for j in range(len(weak))])) if len(weak) else 0.0
    diag = Diagnostics(np.asarray(ids), max_prob, pred, y_ref.argmax(axis=1), gate)
    return UnsupLosses(xi_a, xi_b, diag)


def compute_pseudo_loss(params, arch: ModelArch, features, labels) -> float:
    """Mean cross-entropy of current predictions against frozen labels."""
    if len(labels) == 0:
        return 0.0
    probs = predict_proba(params, arch, features)
    return float(np.mean([cross_entropy(p, l) for p, l in zip(probs, labels)]))


class CredibilityTracker:
    """Per-example promotion counters for one client's shard."""

    def __init__(self, ids: Iterable[int]):
        self.ids = np.asarray(list(ids), dtype=np.int64)
        self._row = {int(e): r for r, e in enumerate(self.ids)}
        n = len(self.ids)
        self.consecutive_hits = np.zeros(n, dtype=np.int64)
        self.candidate_label = np.full(n, -1, dtype=np.int64)
        self.agreement_count = np.zeros(n, dtype=np.int64)

    def rows(self, ids) -> np.ndarray:
        return np.fromiter((self._row[int(e)] for e in ids), dtype=np.int64, count=len(ids))

    def state(self, example_id: int) -> dict:
        r = self._row[int(example_id)]
        cand = int(self.candidate_label[r])
        return {
            "consecutive_hits": int(self.consecutive_hits[r]),
            "candidate_label": None if cand < 0 else cand,
            "agreement_count": int(self.agreement_count[r]),
        }

    def to_dict(self) -> dict:
        return {str(int(e)): self.state(e) for e in self.ids}


def update_credibility(tracker: CredibilityTracker, diagnostics: Diagnostics, tau: float,
                       promote_t: float, agreement_t: Optional[float] = None,
                       exclude=()) -> list[tuple[int, int]]:
    """Advance the counters by one participated round.

    An example *qualifies* when it is confident (max prob >= tau), its
    prediction agrees with the server reference, and the predicted class
    matches its running candidate. Qualifying extends the streak; anything
    else resets it. ``agreement_count`` tallies every round in which the
    two argmaxes agree and never resets.

    Returns ``(id, label)`` pairs that satisfy both thresholds.
    """
    if agreement_t is None:
        agreement_t = promote_t
    keep = np.array([int(e) not in exclude for e in diagnostics.ids], dtype=bool)
    ids = np.asarray(diagnostics.ids)[keep]
    if len(ids) == 0:
        return []
    rows = tracker.rows(ids)
    pred = np.asarray(diagnostics.pred)[keep]
    agree = pred == np.asarray(diagnostics.ref_pred)[keep]
    confident = np.asarray(diagnostics.max_prob)[keep] >= tau
    cand = tracker.candidate_label[rows]
    stable = (cand < 0) | (cand == pred)
    qualifies = confident & agree & stable

    tracker.agreement_count[rows] += agree
    tracker.consecutive_hits[rows] = np.where(qualifies, tracker.consecutive_hits[rows] + 1, 0)
    tracker.candidate_label[rows] = np.where(qualifies, pred, -1)

    ready = (tracker.consecutive_hits[rows] >= promote_t) & (tracker.agreement_count[rows] >= agreement_t)
    return [(int(e), int(tracker.candidate_label[r])) for e, r in zip(ids[ready], rows[ready])]


@dataclass
class PseudoLabelSet:
    """Append-only map of promoted example id to its frozen label."""

    labels: dict = field(default_factory=dict)
    created: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, example_id):
        return int(example_id) in self.labels

    def add(self, example_id: int, label: int, round_idx: int):
        example_id = int(example_id)
        if example_id in self.labels:
            raise InvariantViolation(
                f"example {example_id} already frozen with label {self.labels[example_id]} "
                f"(round {self.created[example_id]}); refusing to promote it again"
            )
        self.labels[example_id] = int(label)
        self.created[example_id] = int(round_idx)

    def ids(self) -> np.ndarray:
        return np.fromiter(self.labels.keys(), dtype=np.int64, count=len(self.labels))

    def to_dict(self) -> dict:
        return {str(e): {"label": l, "round": self.created[e]} for e, l in self.labels.items()}


def promote(pseudo_set: PseudoLabelSet, promotions: Sequence[tuple[int, int]], round_idx: int,
            shard: Optional[UnlabeledShard] = None) -> PseudoLabelSet:
    """Freeze promoted examples into ``pseudo_set`` (in place).

    With ``shard`` given, each id is resolved back to its original example,
    which fails loudly for ids the client does not own.
    """
    seen = set()
    for example_id, _ in promotions:
        if int(example_id) in pseudo_set or example_id in seen:
            raise InvariantViolation(f"double promotion of example {example_id} in round {round_idx}")
        seen.add(example_id)
        if shard is not None:
            shard.resolve(example_id)
    for example_id, label in promotions:
        pseudo_set.add(example_id, label, round_idx)
    return pseudo_set


@dataclass
class ClientState:
    client_id: int
    shard: UnlabeledShard
    tracker: CredibilityTracker = None
    pseudo_set: PseudoLabelSet = field(default_factory=PseudoLabelSet)
    seed: int = 0

    def __post_init__(self):
        if self.tracker is None:
            self.tracker = CredibilityTracker(self.shard.ids)

    def unsup_rows(self) -> np.ndarray:
        """Shard rows still in the unlabeled pool (not promoted)."""
        if not len(self.pseudo_set):
            return np.arange(len(self.shard))
        return np.array([r for r, e in enumerate(self.shard.ids) if int(e) not in self.pseudo_set],
                        dtype=np.int64)

    def pseudo_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        ids = self.pseudo_set.ids()
        rows = np.fromiter((self.shard.row_of(e) for e in ids), dtype=np.int64, count=len(ids))
        labels = np.fromiter((self.pseudo_set.labels[int(e)] for e in ids), dtype=np.int64, count=len(ids))
        return self.shard.features[rows], labels

    def to_json(self) -> str:
        return json.dumps({
            "client_id": self.client_id,
            "tracker": self.tracker.to_dict(),
            "pseudo_set": self.pseudo_set.to_dict(),
        }, indent=1)


@dataclass(frozen=True)
class ClientSettings:
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    tau: float = 0.95
    promote_t: float = 7
    agreement_t: Optional[float] = None
    ce_weight: float = 1.0
    kl_weight: float = 1.0
    pseudo_weight: float = 1.0
    credibility: bool = True
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    promoted: list
    steps: int
    gate_rate: float
    pseudo_size: int


def _batch_rows(perm, step, size, cyclic):
    if cyclic:
        return perm[(step * size + np.arange(min(size, len(perm)))) % len(perm)]
    return perm[step * size:(step + 1) * size]


def _local_terms(params, theta0, arch, weak, strong, pseudo_x, pseudo_y, s: ClientSettings):
    terms = []
    n_gated = 0
    if len(weak):
        y_hat = predict_proba(params, arch, weak)
        gate = y_hat.max(axis=1) >= s.tau
        n_gated = int(gate.sum())
        if n_gated and s.ce_weight:
            terms.append(LossTerm(strong[gate], y_hat[gate].argmax(axis=1),
                                  np.full(n_gated, s.ce_weight / n_gated), "ce"))
        if s.kl_weight:
            terms.append(LossTerm(weak, predict_proba(theta0, arch, weak),
                                  np.full(len(weak), s.kl_weight / len(weak)), "kl"))
    if len(pseudo_y) and s.pseudo_weight:
        terms.append(LossTerm(pseudo_x, pseudo_y, np.full(len(pseudo_y), s.pseudo_weight / len(pseudo_y)), "ce"))
    return terms, n_gated


def credibility_diagnostics(state: ClientState, theta_prime, theta0, arch, settings: ClientSettings,
                            round_idx: int) -> Diagnostics:
    """Full-shard weak-view inference with the round's broadcast weights."""
    rows = state.unsup_rows()
    ids = state.shard.ids[rows]
    aug_seed = seeding.derive_seed(settings.seed, seeding.CREDIBILITY, state.client_id, round_idx)
    weak, _ = augment_rows(ids, state.shard.features[rows], settings.augment, aug_seed,
                           state.shard.image_shape, strong=False)
    y_hat = predict_proba(theta_prime, arch, weak)
    y_ref = predict_proba(theta0, arch, weak)
    max_prob = y_hat.max(axis=1)
    return Diagnostics(ids, max_prob, y_hat.argmax(axis=1), y_ref.argmax(axis=1), max_prob >= settings.tau)


def client_round(state: ClientState, theta_prime: np.ndarray, theta0: np.ndarray, arch: ModelArch,
                 settings: ClientSettings, round_idx: int) -> ClientUpdate:
    """One participation: local SGD from the global weights, then one
    credibility update and promotion pass. ``theta_prime``/``theta0`` are
    never modified."""
    s = settings
    params = np.array(theta_prime, dtype=np.float64, copy=True)
    pool_rows = state.unsup_rows()
    pseudo_x, pseudo_y = state.pseudo_arrays()
    n_pool, n_pseudo = len(pool_rows), len(pseudo_y)
    steps_per_epoch = math.ceil(max(n_pool, n_pseudo) / s.batch_size)
    steps = gated = seen = 0
    for epoch in range(s.local_epochs):
        perm_rng = seeding.derive_rng(s.seed, seeding.CLIENT_EPOCH, state.client_id, round_idx, epoch, 0)
        aug_seed = seeding.derive_seed(s.seed, seeding.CLIENT_EPOCH, state.client_id, round_idx, epoch, 1)
        pool_perm = perm_rng.permutation(pool_rows)
        pseudo_perm = perm_rng.permutation(n_pseudo) if n_pseudo else pseudo_y
        weak_all, strong_all = augment_rows(state.shard.ids[pool_perm], state.shard.features[pool_perm],
                                            s.augment, aug_seed, state.shard.image_shape)
        for step in range(steps_per_epoch):
            take = _batch_rows(np.arange(n_pool), step, s.batch_size, n_pool < n_pseudo) if n_pool else []
            ptake = (_batch_rows(pseudo_perm, step, s.batch_size, n_pseudo < n_pool)
                     if n_pseudo else np.empty(0, dtype=np.int64))
            terms, n_gated = _local_terms(params, theta0, arch, weak_all[take], strong_all[take],
                                          pseudo_x[ptake], pseudo_y[ptake], s)
            gated += n_gated
            seen += len(take)
            if not terms:
                continue
            loss, grad = loss_and_grad(params, arch, terms)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"client {state.client_id}: non-finite loss in round {round_idx}",
                                    client_id=state.client_id, round_idx=round_idx)
            params = sgd_step(params, grad, s.lr)
            steps += 1
    promoted = []
    if s.credibility:
        diag = credibility_diagnostics(state, theta_prime, theta0, arch, s, round_idx)
        promoted = update_credibility(state.tracker, diag, s.tau, s.promote_t, s.agreement_t,
                                      exclude=state.pseudo_set)
        promote(state.pseudo_set, promoted, round_idx, state.shard)
    return ClientUpdate(state.client_id, params, promoted, steps,
                        gated / seen if seen else 0.0, len(state.pseudo_set))
