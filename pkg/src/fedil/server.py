"""Server side: supervised refinement, cosine-gated aggregation and client
selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import seeding
from .data import LabeledSet
from .errors import ConfigurationError, ProtocolError, TrainingError
from .model import LossTerm, ModelArch, loss_and_grad, sgd_step


@dataclass
class ServerState:
    arch: ModelArch
    theta_prime: np.ndarray
    theta0: np.ndarray
    labeled: LabeledSet
    seed: int = 0
    round: int = 0

    def advance(self, theta_prime: np.ndarray, theta0: np.ndarray):
        self.theta_prime = theta_prime
        self.theta0 = theta0
        self.round += 1


def server_supervised_update(theta_prime: np.ndarray, arch: ModelArch, labeled: LabeledSet, epochs: int,
                             lr: float, batch_size: int = 32, seed: int = 0) -> np.ndarray:
    """Minibatch SGD on cross-entropy over the labeled set, starting from
    ``theta_prime``. The input vector is left untouched."""
    if len(labeled) == 0:
        raise ConfigurationError("server labeled set is empty")
    params = np.array(theta_prime, dtype=np.float64, copy=True)
    n = len(labeled)
    for epoch in range(epochs):
        order = seeding.derive_rng(seed, seeding.SERVER, epoch).permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            term = LossTerm(labeled.features[rows], labeled.labels[rows], np.full(len(rows), 1.0 / len(rows)))
            loss, grad = loss_and_grad(params, arch, [term])
            if not math.isfinite(loss):
                raise TrainingError("server: non-finite supervised loss")
            params = sgd_step(params, grad, lr)
    return params


def cosine_gate(theta_star: np.ndarray, theta_prime: np.ndarray, theta0: np.ndarray,
                threshold: float = 0.0) -> tuple[float, int]:
    """Cosine between the client's and the server's displacement from the
    global weights, and the resulting inclusion bit.

    A zero server displacement gives no direction to reject against, so the
    gate opens (S reported as 1). A zero client displacement is a harmless
    no-op and is likewise accepted with S = 1.
    """
    u = np.asarray(theta_star) - theta_prime
    v = np.asarray(theta0) - theta_prime
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 1.0, 1
    s = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    return s, int(s >= threshold)


@dataclass
class GateDecision:
    client_id: int
    similarity: float
    gate: int


@dataclass
class AggregationReport:
    decisions: list = field(default_factory=list)
    delta_norm: float = 0.0
    included_count: int = 0

    def rows(self, round_idx: int) -> list[dict]:
        return [{"round": round_idx, "client_id": d.client_id, "S": repr(d.similarity),
                 "gate": d.gate, "delta_norm": repr(self.delta_norm)} for d in self.decisions]


def aggregate(theta_prime: np.ndarray, theta0: np.ndarray, uploads: Mapping[int, np.ndarray],
              threshold: float = 0.0) -> tuple[np.ndarray, AggregationReport, np.ndarray]:
    """Average the gated client displacements and apply them to the global
    weights.

    Returns ``(theta_next, report, delta)``. If every client is rejected the
    global weights are kept (delta = 0).
    """
    if not uploads:
        raise ProtocolError("no client uploads to aggregate")
    report = AggregationReport()
    total = np.zeros_like(theta_prime, dtype=np.float64)
    for client_id, theta_star in uploads.items():
        theta_star = np.asarray(theta_star, dtype=np.float64)
        if theta_star.shape != theta_prime.shape:
            raise ProtocolError(
                f"client {client_id} uploaded {theta_star.shape[0] if theta_star.ndim else 0} "
                f"parameters, expected {theta_prime.shape[0]}", client_id=client_id)
        s, gate = cosine_gate(theta_star, theta_prime, theta0, threshold)
        report.decisions.append(GateDecision(int(client_id), s, gate))
        if gate:
            total += theta_star - theta_prime
            report.included_count += 1
    delta = total / report.included_count if report.included_count else total
    report.delta_norm = float(np.linalg.norm(delta))
    return theta_prime + delta, report, delta


def select_clients(num_clients: int, per_round: int, seed: int, round_idx: int) -> list[int]:
    """``per_round`` distinct client ids drawn uniformly, keyed on
    ``(seed, round_idx)``; returned in ascending order."""
    if per_round > num_clients or per_round < 1:
        raise ConfigurationError(f"cannot select {per_round} of {num_clients} clients")
    rng = seeding.derive_rng(seed, seeding.SELECT, round_idx)
    return sorted(int(c) for c in rng.choice(num_clients, size=per_round, replace=False))
