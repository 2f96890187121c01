"""Round-based federated training engine.

Each round the server broadcasts the global parameters, every device runs
its local procedure on its own shard, uploads, and the server averages the
uploads. Devices own their state exclusively while training, so rounds
can fan out over a thread pool without changing any result.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding, telemetry
from .data import Dataset, PartitionPlan, load_idx, partition, synthetic_blobs
from .errors import CapacityError, ShapeError
from .models import Batch, MlpSpec, softmax_xent
from .optimizers import (
    OptimizerState,
    done_local_direction,
    fedavg_local_step,
    sophia_local_step,
)

log = logging.getLogger(__name__)


@dataclass
class GlobalModel:
    theta: np.ndarray
    round: int = 0


@dataclass
class Device:
    id: int
    train: Dataset
    test: Dataset
    theta: np.ndarray
    opt: OptimizerState
    batch_rng: np.random.Generator
    gnb_rng: np.random.Generator
    ledger: telemetry.EnergyLedger = field(default_factory=telemetry.EnergyLedger)
    _order: np.ndarray = None
    _cursor: int = 0

    def next_batch(self, size):
        """Sample without replacement within an epoch, reshuffling per epoch."""
        n = len(self.train)
        size = min(size, n)
        if self._order is None or self._cursor + size > n:
            self._order = self.batch_rng.permutation(n)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + size]
        self._cursor += size
        return Batch(self.train.features[idx], self.train.labels[idx])


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    mean_loss: float
    test_loss: float
    e_comp_j: float
    e_tx_j: float
    bits: int
    seconds: float
    wall_seconds: float = 0.0
    # (delta E_c, delta E_t) per device for this round
    device_energy: list = field(default_factory=list)
    # cumulative per-device ledgers after this round
    ledgers: list = field(default_factory=list)


def make_devices(shards, model, theta0, master_seed):
    devices = []
    for i, (train, test) in enumerate(shards):
        devices.append(Device(
            id=i,
            train=train,
            test=test,
            theta=theta0.copy(),
            opt=OptimizerState.zeros(model.dim),
            batch_rng=seeding.stream(master_seed, i, seeding.BATCHES),
            gnb_rng=seeding.stream(master_seed, i, seeding.GNB_LABELS),
        ))
    return devices


def broadcast(global_model, devices, reset_state=False):
    for dev in devices:
        dev.theta = global_model.theta.copy()
        if reset_state:
            dev.opt = OptimizerState.zeros(dev.theta.size)


def local_round(device, model, algorithm, opt_cfg, e_per_iter, done_cfg=None):
    """Run ``opt_cfg.local_iters`` local iterations in place.

    Returns the computation energy charged to the device for this round.
    """
    J = opt_cfg.local_iters
    theta = device.theta
    multiplier = 1.0
    if algorithm == "fed-sophia":
        state = device.opt
        for _ in range(J):
            batch = device.next_batch(opt_cfg.batch_size)
            theta, state = sophia_local_step(model, theta, state, opt_cfg, batch, device.gnb_rng)
        device.opt = state
    elif algorithm == "fedavg":
        for _ in range(J):
            theta = fedavg_local_step(model, theta, opt_cfg.eta, device.next_batch(opt_cfg.batch_size))
    elif algorithm == "done":
        full = device.train.as_batch()
        for _ in range(J):
            # the device's full-shard gradient stands in for the global gradient
            g = model.gradient(theta, full)
            d = done_local_direction(model, theta, g, full, done_cfg.alpha, done_cfg.richardson_iters)
            theta = theta - done_cfg.eta * d
        multiplier = telemetry.full_batch_multiplier(len(device.train), min(opt_cfg.batch_size, len(device.train)))
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    device.theta = theta
    device.ledger = telemetry.charge_computation(device.ledger, J, e_per_iter * multiplier)
    return J * e_per_iter * multiplier


def aggregate(models):
    if len(models) == 0:
        raise CapacityError("cannot aggregate an empty list of models")
    lengths = {np.asarray(m).shape for m in models}
    if len(lengths) != 1:
        raise ShapeError(f"models have differing shapes {sorted(lengths)}")
    return np.mean(np.stack(models), axis=0)


def _union(datasets):
    return Batch(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
    )


def evaluate_batch(model, theta, batch):
    logits = model.forward_logits(theta, batch.features)
    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    return acc, softmax_xent(logits, batch.labels)[0]


def evaluate(global_model, devices, model):
    """Accuracy and mean loss of the global model on the union of test shards."""
    return evaluate_batch(model, global_model.theta, _union([d.test for d in devices]))


def load_dataset(cfg):
    d = cfg.data
    if d.source == "idx":
        ds = load_idx(d.images, d.labels)
        if d.limit:
            ds = ds.subset(np.arange(min(d.limit, len(ds))))
        return ds
    return synthetic_blobs(d.classes, d.per_class, d.dim, d.spread,
                           seed=seeding.derive_seed(cfg.seed, 0, seeding.SERVER), scale=d.scale,
                           layout=d.layout)


def build(cfg):
    """Materialize dataset, model, initial global parameters and devices."""
    ds = load_dataset(cfg)
    model = MlpSpec((ds.features.shape[1], *cfg.model.hidden, ds.class_count))
    p = cfg.partition
    shards = partition(ds, PartitionPlan(p.devices, p.scheme, p.shards_per_device, p.train_fraction, cfg.seed))
    theta0 = model.init_params(seeding.stream(cfg.seed, 0, seeding.INIT))
    devices = make_devices(shards, model, theta0, cfg.seed)
    return model, GlobalModel(theta0, 0), devices


def iteration_energy(cfg, model):
    if cfg.energy.e_per_iter > 0:
        return cfg.energy.e_per_iter
    return telemetry.energy_per_iteration(model, cfg.optimizer.batch_size, cfg.energy.joules_per_flop)


def run_experiment(cfg, workers=None, on_round=None):
    """Train for ``cfg.rounds`` rounds and return one record per evaluation.

    Record 0 evaluates the initial model. ``on_round`` is called with each
    record as soon as it exists, so callers can persist partial progress.
    """
    workers = workers or cfg.workers
    model, glob, devices = build(cfg)
    e_iter = iteration_energy(cfg, model)
    train_union = _union([d.train for d in devices])
    upload_s = telemetry.upload_seconds(model.dim, cfg.channel)
    records = []
    airtime = 0.0

    def record(k, started, deltas):
        acc, test_loss = evaluate(glob, devices, model)
        _, train_loss = evaluate_batch(model, glob.theta, train_union)
        tot = telemetry.total(d.ledger for d in devices)
        rec = RoundRecord(k, acc, train_loss, test_loss, tot.e_comp_j, tot.e_tx_j, tot.bits_sent,
                          airtime, time.perf_counter() - started, deltas, [d.ledger for d in devices])
        records.append(rec)
        log.info("round %d: accuracy=%.4f train_loss=%.4f", k, acc, train_loss)
        if on_round is not None:
            on_round(rec)

    record(0, time.perf_counter(), [])

    e_upload = telemetry.upload_energy(model.dim, cfg.channel)

    def train_one(dev):
        e_comp = local_round(dev, model, cfg.algorithm, cfg.optimizer, e_iter, cfg.done)
        dev.ledger = telemetry.charge_transmission(dev.ledger, model.dim, cfg.channel)
        return (e_comp, e_upload)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for k in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            broadcast(glob, devices, cfg.optimizer.reset_state_each_round)
            if workers > 1:
                deltas = list(pool.map(train_one, devices))
            else:
                deltas = [train_one(d) for d in devices]
            glob = replace(glob, theta=aggregate([d.theta for d in devices]), round=k)
            # uploads happen in parallel on orthogonal channels
            airtime += upload_s
            record(k, started, deltas)
    return records


def rounds_to_fraction(records, fraction=0.9):
    """First round whose accuracy reaches ``fraction`` of the final accuracy."""
    target = fraction * records[-1].accuracy
    for rec in records:
        if rec.accuracy >= target:
            return rec.round
    return records[-1].round
