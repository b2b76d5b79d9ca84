"""Round loop, configuration, evaluation and on-disk artifacts."""

from __future__ import annotations

import contextlib
import contextvars
import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeding
from .augment import AugmentConfig
from .client import ClientSettings, ClientState, client_round
from .convergence import ConvergenceTrace, contraction_verdict
from .data import Dataset, PartitionPlan, gen_synthetic, holdout_split, load_mnist_idx
from .errors import ConfigurationError, FedILError, TrainingError
from .model import ModelArch, accuracy, export_checkpoint_json, init_params, save_checkpoint
from .server import AggregationReport, aggregate, select_clients, server_supervised_update

log = logging.getLogger(__name__)

MODES = ("fedil", "fedavg", "server-only")


@dataclass
class ExperimentConfig:
    mode: str = "fedil"
    seed: int = 0
    # data
    dataset: str = "synthetic"
    num_classes: int = 3
    dim: int = 20
    n_per_class: int = 100
    test_per_class: int = 300
    separation: float = 4.0
    mnist_dir: str = ""
    max_train_examples: int = 0
    gamma: float = 0.1
    num_clients: int = 10
    regime: str = "iid"
    class_fraction: float = 0.2
    # model / optimisation
    hidden: tuple = (32,)
    activation: str = "tanh"
    lr: float = 0.05
    batch_size: int = 32
    local_epochs: int = 5
    server_epochs: int = 1
    # protocol
    clients_per_round: int = 5
    total_rounds: int = 200
    tau: float = 0.95
    promote_t: float = 7
    agreement_t: float = 0
    gate_threshold: float = 0.0
    ce_weight: float = 1.0
    kl_weight: float = 1.0
    pseudo_weight: float = 1.0
    # augmentation
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    mask_fraction: float = 0.2
    shift_pixels: int = 0
    # bookkeeping
    eval_every: int = 5
    window: int = 20
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.hidden, (int, str)):
            self.hidden = _parse_hidden(self.hidden)
        self.hidden = tuple(int(h) for h in self.hidden)
        # canonical numeric types keep the config hash stable across file round trips
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type == "float" and isinstance(value, (int, float)):
                setattr(self, f.name, float(value))
            elif f.type == "int" and isinstance(value, (int, float)) and float(value).is_integer():
                setattr(self, f.name, int(value))
        self.validate()

    def validate(self):
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.dataset in ("synthetic", "mnist"), "dataset must be synthetic or mnist"),
            (self.regime in ("iid", "non-iid"), "regime must be iid or non-iid"),
            (0 < self.gamma < 1, "gamma must be in (0, 1)"),
            (0 < self.class_fraction <= 1, "class_fraction must be in (0, 1]"),
            (self.num_clients >= 1, "num_clients must be >= 1"),
            (1 <= self.clients_per_round <= self.num_clients, "clients_per_round must be in [1, num_clients]"),
            (self.total_rounds >= 0, "total_rounds must be >= 0"),
            (0 < self.tau < 1, "tau must be in (0, 1)"),
            (self.promote_t >= 1, "promote_t must be >= 1"),
            (self.agreement_t >= 0, "agreement_t must be >= 0 (0 means same as promote_t)"),
            (-1 <= self.gate_threshold <= 1 or math.isinf(self.gate_threshold), "gate_threshold must be in [-1, 1]"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.local_epochs >= 0 and self.server_epochs >= 0, "epoch counts must be >= 0"),
            (min(self.ce_weight, self.kl_weight, self.pseudo_weight) >= 0, "loss weights must be >= 0"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.window >= 2, "window must be >= 2"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.num_classes >= 2 and self.dim >= 2, "synthetic data needs >= 2 classes and dims"),
            (self.n_per_class >= 1 and self.test_per_class >= 1, "per-class counts must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        self.augment_config()

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.weak_noise, self.strong_noise, self.mask_fraction, self.shift_pixels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf" if v > 0 else "-inf"
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, value in raw.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = _coerce(key, kinds[key], value)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    def to_file(self, path) -> Path:
        path = Path(path)
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
        path.write_text("\n".join(lines) + "\n")
        return path


def _parse_hidden(value) -> tuple:
    if isinstance(value, int):
        return (value,)
    value = str(value).strip().strip("()[]")
    return tuple(int(v) for v in value.replace(";", ",").split(",") if v.strip())


def _coerce(key, kind, value):
    if not isinstance(value, str):
        return value
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return _parse_hidden(value)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
    return value


# -- test-set access audit ------------------------------------------------

_phase = contextvars.ContextVar("fedil_phase", default="train")


@contextlib.contextmanager
def _evaluation_phase():
    token = _phase.set("eval")
    try:
        yield
    finally:
        _phase.reset(token)


class HoldoutSet:
    """Test data that logs the phase of every access."""

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self.access_log: list[str] = []

    def __len__(self):
        return len(self._dataset)

    @property
    def features(self):
        self.access_log.append(_phase.get())
        return self._dataset.features

    @property
    def labels(self):
        self.access_log.append(_phase.get())
        return self._dataset.labels


def evaluate(params: np.ndarray, arch: ModelArch, test_set) -> float:
    """Fraction of argmax-correct predictions."""
    if len(test_set) == 0:
        raise ConfigurationError("empty test set")
    with _evaluation_phase():
        return accuracy(params, arch, test_set.features, test_set.labels)


# -- data and model construction --------------------------------------------

def build_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training dataset and disjoint test dataset."""
    if config.dataset == "synthetic":
        full = gen_synthetic(config.num_classes, config.n_per_class + config.test_per_class,
                             config.dim, config.separation, config.seed)
        return holdout_split(full, config.test_per_class, config.seed)
    root = Path(config.mnist_dir)
    if not config.mnist_dir or not root.is_dir():
        raise ConfigurationError(f"mnist_dir {config.mnist_dir!r} is not a directory")
    train = load_mnist_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = load_mnist_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    test = Dataset(test.ids + len(train), test.features, test.labels, test.num_classes, test.image_shape)
    if config.max_train_examples and config.max_train_examples < len(train):
        rows = np.sort(seeding.derive_rng(config.seed, seeding.INIT, 1).permutation(len(train))[:config.max_train_examples])
        train = train.subset(rows)
    return train, test


def client_settings(config: ExperimentConfig) -> ClientSettings:
    fedavg = config.mode == "fedavg"
    return ClientSettings(
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        tau=config.tau,
        promote_t=config.promote_t,
        agreement_t=config.agreement_t or None,
        ce_weight=config.ce_weight,
        kl_weight=0.0 if fedavg else config.kl_weight,
        pseudo_weight=config.pseudo_weight,
        credibility=not fedavg,
        augment=config.augment_config(),
        seed=config.seed,
    )


# -- run loop -----------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    selected: list
    report: AggregationReport
    pseudo_sizes: dict
    test_accuracy: Optional[float]
    param_digest: str
    gate_rate: float = 0.0
    wall_ms: float = 0.0

    @property
    def pseudo_total(self) -> int:
        return sum(self.pseudo_sizes.values())


@dataclass
class RunResult:
    config: ExperimentConfig
    arch: ModelArch
    records: list = field(default_factory=list)
    trace: ConvergenceTrace = None
    params: np.ndarray = None
    theta0: np.ndarray = None
    initial_accuracy: float = 0.0
    final_accuracy: float = 0.0
    clients: list = field(default_factory=list)
    pseudo_precision: Optional[float] = None
    history: list = field(default_factory=list)
    holdout: HoldoutSet = None

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def pseudo_growth_rate(self) -> float:
        """Area under the pseudo-set size curve divided by the squared round count.

        Equals the mean over rounds of ``pseudo_total(t) / R``; unlike the final
        size it still separates runs whose pseudo-sets eventually saturate.
        """
        if not self.records:
            return 0.0
        sizes = np.array([r.pseudo_total for r in self.records], dtype=np.float64)
        return float(sizes.mean() / len(sizes))

    def summary(self) -> dict:
        verdict = contraction_verdict(self.trace) if len(self.trace) >= self.trace.window else None
        return {
            "config_hash": self.config_hash,
            "mode": self.config.mode,
            "rounds": len(self.records),
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "pseudo_total": self.records[-1].pseudo_total if self.records else 0,
            "pseudo_growth_rate": self.pseudo_growth_rate(),
            "pseudo_precision": self.pseudo_precision,
            "contracting": None if verdict is None else verdict.contracting,
            "q_max": None if verdict is None else verdict.q_max,
        }


def param_digest(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


def _server_seed(config, round_idx):
    return seeding.derive_seed(config.seed, seeding.SERVER, round_idx)


def train_supervised(theta: np.ndarray, arch: ModelArch, labeled, config: ExperimentConfig,
                     rounds: int) -> np.ndarray:
    """Server-only baseline: ``rounds`` consecutive supervised refinements
    with the same per-round seeds the federated loop uses."""
    for t in range(rounds):
        theta = server_supervised_update(theta, arch, labeled, config.server_epochs, config.lr,
                                         config.batch_size, _server_seed(config, t))
    return theta


def run_experiment(config: ExperimentConfig, out_dir=None, keep_history: bool = False) -> RunResult:
    """Execute ``config.total_rounds`` rounds; write artifacts to ``out_dir``
    when given."""
    train, test = build_data(config)
    holdout = HoldoutSet(test)
    plan = PartitionPlan(config.gamma, config.num_clients, config.regime, config.class_fraction, config.seed)
    labeled, shards = plan.apply(train)
    arch = ModelArch(train.input_dim, config.hidden, train.num_classes, config.activation)
    settings = client_settings(config)
    clients = [ClientState(s.client_id, s, seed=config.seed) for s in shards]
    threshold = -math.inf if config.mode == "fedavg" else config.gate_threshold

    theta_prime = init_params(arch, seeding.derive_seed(config.seed, seeding.INIT))
    theta0 = server_supervised_update(theta_prime, arch, labeled, config.server_epochs, config.lr,
                                      config.batch_size, _server_seed(config, 0))
    result = RunResult(config, arch, trace=ConvergenceTrace(config.window), clients=clients, holdout=holdout)
    result.initial_accuracy = evaluate(theta_prime, arch, holdout)
    acc = result.initial_accuracy
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for t in range(1, config.total_rounds + 1):
            started = time.perf_counter()
            if config.mode == "server-only":
                selected, gate_rate = [], 0.0
                delta = theta0 - theta_prime
                report = AggregationReport(delta_norm=float(np.linalg.norm(delta)))
                theta_next = theta0
            else:
                selected = select_clients(config.num_clients, config.clients_per_round, config.seed, t)
                updates = _train_clients(clients, selected, theta_prime, theta0, arch, settings, t, pool)
                theta_next, report, delta = aggregate(
                    theta_prime, theta0, {u.client_id: u.params for u in updates}, threshold)
                gate_rate = float(np.mean([u.gate_rate for u in updates]))
            result.trace.record(delta)
            theta_prime = theta_next
            theta0 = server_supervised_update(theta_prime, arch, labeled, config.server_epochs, config.lr,
                                              config.batch_size, _server_seed(config, t))
            if t % config.eval_every == 0 or t == config.total_rounds:
                acc = evaluate(theta_prime, arch, holdout)
                test_acc = acc
            else:
                test_acc = None
            result.records.append(RoundRecord(
                t, selected, report, {c.client_id: len(c.pseudo_set) for c in clients}, test_acc,
                param_digest(theta_prime), gate_rate, (time.perf_counter() - started) * 1e3))
            if keep_history:
                result.history.append(theta_prime.copy())
            log.debug("round %d acc=%s delta=%.4g included=%d", t, test_acc, report.delta_norm,
                      report.included_count)
    finally:
        if pool is not None:
            pool.shutdown()
    result.params = theta_prime
    result.theta0 = theta0
    result.final_accuracy = acc
    result.pseudo_precision = _pseudo_precision(clients, train)
    if out_dir is not None:
        persist(result, out_dir)
    return result


def _train_clients(clients, selected, theta_prime, theta0, arch, settings, round_idx, pool):
    def work(cid):
        try:
            return client_round(clients[cid], theta_prime, theta0, arch, settings, round_idx)
        except FedILError as exc:
            raise TrainingError(f"round {round_idx}, client {cid}: {exc}", client_id=cid,
                                round_idx=round_idx) from exc
    # the broadcast weights are shared read-only; freeze them to catch mutation
    theta_prime.setflags(write=False)
    theta0.setflags(write=False)
    try:
        if pool is None:
            return [work(cid) for cid in selected]
        return list(pool.map(work, selected))
    finally:
        theta_prime.setflags(write=True)
        theta0.setflags(write=True)


def _pseudo_precision(clients, train: Dataset) -> Optional[float]:
    """Share of frozen pseudo-labels that match ground truth (reporting only)."""
    truth = dict(zip(train.ids.tolist(), train.labels.tolist()))
    hits = total = 0
    for c in clients:
        for eid, label in c.pseudo_set.labels.items():
            hits += truth[eid] == label
            total += 1
    return hits / total if total else None


# -- persistence --------------------------------------------------------------

METRICS_COLUMNS = ["round", "mode", "selected", "included_count", "delta_norm", "gate_rate",
                   "pseudo_total", "pseudo_sizes", "test_accuracy", "param_digest", "config_hash"]


def persist(result: RunResult, out_dir) -> dict:
    """Write metrics, traces, config and checkpoint; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        h = result.config_hash
        paths = {}

        paths["metrics"] = out / "metrics.csv"
        with open(paths["metrics"], "w", newline="") as fh:
            writer = csv.DictWriter(fh, METRICS_COLUMNS)
            writer.writeheader()
            for r in result.records:
                writer.writerow({
                    "round": r.round,
                    "mode": result.config.mode,
                    "selected": ";".join(map(str, r.selected)),
                    "included_count": r.report.included_count,
                    "delta_norm": repr(r.report.delta_norm),
                    "gate_rate": repr(r.gate_rate),
                    "pseudo_total": r.pseudo_total,
                    "pseudo_sizes": ";".join(f"{k}:{v}" for k, v in sorted(r.pseudo_sizes.items())),
                    "test_accuracy": "" if r.test_accuracy is None else repr(r.test_accuracy),
                    "param_digest": r.param_digest,
                    "config_hash": h,
                })

        paths["aggregation"] = out / "aggregation.csv"
        with open(paths["aggregation"], "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["round", "client_id", "S", "gate", "delta_norm", "config_hash"])
            writer.writeheader()
            for r in result.records:
                for row in r.report.rows(r.round):
                    writer.writerow({**row, "config_hash": h})

        paths["convergence"] = result.trace.to_csv(out / "convergence.csv", {"config_hash": h})

        paths["timing"] = out / "timing.csv"
        with open(paths["timing"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "wall_ms", "config_hash"])
            for r in result.records:
                writer.writerow([r.round, f"{r.wall_ms:.3f}", h])

        paths["config"] = out / "config.json"
        paths["config"].write_text(json.dumps({**result.config.to_dict(), "config_hash": h}, indent=1, sort_keys=True))

        paths["summary"] = out / "summary.json"
        paths["summary"].write_text(json.dumps(result.summary(), indent=1))

        paths["checkpoint"] = save_checkpoint(out / "checkpoint.fdil", result.params)
        paths["checkpoint_json"] = export_checkpoint_json(out / "checkpoint.json", result.params, result.arch,
                                                          config_hash=h)

        client_dir = out / "clients"
        client_dir.mkdir(exist_ok=True)
        for c in result.clients:
            p = client_dir / f"client_{c.client_id:03d}.json"
            p.write_text(c.to_json())

        manifest = {"config_hash": h,
                    "files": {k: {"path": str(p.relative_to(out)), "bytes": p.stat().st_size}
                              for k, p in paths.items()}}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return manifest
    except OSError as exc:
        raise FedILError(f"could not write artifacts under {out}: {exc}") from exc
