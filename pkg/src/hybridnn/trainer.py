"""Architectures, minibatch SGD training, evaluation and SNR sweeps."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .network import (AvgPool, CircConvLayer, ConvLayer, DenseLayer, Flatten, MaxPool,
                      ModulusActivation, Network, ReLU, Scale, SoftmaxCrossEntropy)
from .radar_sim import PROFILES, Dataset, RadarParams, derive_rates, generate_dataset
from .sp_layer import MatchedFilterLayer

log = logging.getLogger(__name__)

VARIANTS = ("hybrid", "baseline")
POOLS = {"max": MaxPool, "avg": AvgPool}
HE_GAIN = float(np.sqrt(6.0))

# (kernel size, pooling factor) of the three ordinary conv stages
CONV_STAGES = ((5, 4), (5, 4), (4, 4))
CHANNELS = 8
HIDDEN = 64
N_CLASSES = 3


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 50
    epochs: int = 5
    lr_main: float = 0.05
    lr_sp: float = 0.01
    seed: int = 0
    profile: str = "desk"
    variant: str = "hybrid"
    rho_low: float = 0.8
    rho_high: float = 1.2
    input_gain: float | None = None
    pool: str = "max"
    init_gain: float = HE_GAIN
    eval_train: bool = True
    record_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.lr_main > 0 and self.lr_sp > 0):
            raise ValueError("learning rates must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if not 0 < self.rho_low <= self.rho_high:
            raise ValueError("need 0 < rho_low <= rho_high")
        if self.pool not in POOLS:
            raise ValueError(f"pool must be one of {sorted(POOLS)}, got {self.pool!r}")
        if self.input_gain is not None and not self.input_gain > 0:
            raise ValueError("input_gain must be positive")
        if not self.init_gain > 0:
            raise ValueError("init_gain must be positive")

    @property
    def params(self) -> RadarParams:
        return PROFILES[self.profile]()


def default_input_gain(params: RadarParams) -> float:
    """The MF output of a unit scatterer peaks at filter_size^2; this keeps
    the first ReLU stage near unit scale at any profile."""
    return 2.0 / params.filter_size ** 2


def build_network(variant: str, params: RadarParams, seed: int = 0,
                  rho_range: tuple[float, float] = (0.8, 1.2),
                  lr_main: float = 0.05, lr_sp: float = 0.01, pool: str = "max",
                  init_gain: float = HE_GAIN, input_gain: float | None = None) -> Network:
    """Hybrid (matched-filter first layer) or baseline (free complex kernel) network.

    Both share the downstream stack: three 'same'-padded conv stages with
    ReLU and 4x pooling, then Dense(64) + ReLU and Dense(3). The real
    feature map leaving the first layer is multiplied by the fixed
    ``input_gain`` (default 2 / filter_size^2); ``init_gain`` scales the uniform init bound of every
    weight layer followed by a ReLU. The logit layer keeps the plain bound.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    fs = params.filter_size
    if variant == "hybrid":
        k_r, k_a = derive_rates(params)
        rho = rng.uniform(rho_range[0], rho_range[1], size=2)
        layers = [MatchedFilterLayer(k_r, k_a, fs, params.f_sr, params.prf, rho=rho)]
    elif variant == "baseline":
        layers = [CircConvLayer(fs, rng=rng, init_gain=init_gain), ModulusActivation()]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    layers.append(Scale(default_input_gain(params) if input_gain is None else input_gain))
    side, ch = params.raw_size, 1
    for k, p in CONV_STAGES:
        layers += [ConvLayer(ch, CHANNELS, k, padding="same", rng=rng, init_gain=init_gain),
                   ReLU(), POOLS[pool](p)]
        side //= p
        ch = CHANNELS
    layers += [Flatten(), DenseLayer(ch * side * side, HIDDEN, rng=rng, init_gain=init_gain), ReLU(),
               DenseLayer(HIDDEN, N_CLASSES, rng=rng)]
    return Network(layers, SoftmaxCrossEntropy(N_CLASSES), {"main": lr_main, "sp": lr_sp})


def network_for(config: TrainConfig) -> Network:
    return build_network(config.variant, config.params, config.seed,
                         (config.rho_low, config.rho_high), config.lr_main, config.lr_sp,
                         config.pool, config.init_gain, config.input_gain)


def rho_of(net: Network) -> tuple[float, float] | None:
    first = net.layers[0]
    if isinstance(first, MatchedFilterLayer):
        return first.rho_r, first.rho_a
    return None


@dataclass
class Metrics:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    initial_rho: tuple | None = None

    @property
    def final_rho(self):
        if not self.iterations or self.iterations[-1]["rho_r"] is None:
            return None
        return self.iterations[-1]["rho_r"], self.iterations[-1]["rho_a"]

    def final_train_accuracy(self) -> float:
        rows = [r for r in self.epochs if r["split"] == "train_eval"]
        return rows[-1]["accuracy"]

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.iterations])


ITERATION_COLUMNS = ("iteration", "epoch", "split", "loss", "accuracy", "rho_r", "rho_a", "seconds")
EPOCH_COLUMNS = ("epoch", "split", "loss", "accuracy", "seconds")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns=ITERATION_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _inputs(ds: Dataset, idx) -> np.ndarray:
    x = ds.raw[idx]
    return x.astype(np.complex128 if np.iscomplexobj(x) else np.float64)


def evaluate(net: Network, dataset: Dataset, batch_size: int = 50) -> float:
    """Fraction of argmax-correct predictions; parameters are left untouched."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for sl in _batches(len(dataset), batch_size):
        pred = net.predict(_inputs(dataset, sl))
        correct += int(np.sum(pred == dataset.labels[sl]))
    return correct / len(dataset)


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset | None = None,
          net: Network | None = None, on_epoch=None) -> tuple[Network, Metrics]:
    """Minibatch SGD; each update is the mean of the per-sample gradients.

    ``train_set`` needs ``raw`` and ``labels`` arrays. Without ``net`` the
    network is built from ``config`` and the samples must match its profile.
    ``on_epoch(net, epoch)`` is called after every completed epoch (used for
    checkpointing). Raises :class:`NumericError` on a non-finite loss.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if net is None:
        params = config.params
        if train_set.raw.shape[1:] != (params.raw_size, params.raw_size):
            raise ValueError(f"dataset samples are {train_set.raw.shape[1:]}, profile "
                             f"{config.profile!r} expects {(params.raw_size, params.raw_size)}")
        net = network_for(config)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))
    metrics = Metrics(initial_rho=rho_of(net))
    n = len(train_set)
    it = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        for sl in _batches(n, config.batch_size):
            idx = np.sort(order[sl])
            labels = train_set.labels[idx].astype(np.int64)
            probs = net.forward(_inputs(train_set, idx))
            loss = net.loss(labels)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {it + 1} (epoch {epoch})")
            acc = float(np.mean(np.argmax(probs, axis=1) == labels))
            net.apply(net.backward(labels))
            it += 1
            rho = rho_of(net)
            metrics.iterations.append({
                "iteration": it, "epoch": epoch, "split": "train", "loss": loss,
                "accuracy": acc,
                "rho_r": rho[0] if rho else None, "rho_a": rho[1] if rho else None,
                "seconds": time.perf_counter() - t0 if config.record_time else None,
            })
        elapsed = time.perf_counter() - t0
        rows = [r for r in metrics.iterations if r["epoch"] == epoch]
        mean_loss = float(np.mean([r["loss"] for r in rows]))
        metrics.epochs.append({"epoch": epoch, "split": "train", "loss": mean_loss,
                               "accuracy": float(np.mean([r["accuracy"] for r in rows])),
                               "seconds": elapsed if config.record_time else None})
        log.info("epoch %d: mean loss %.4f, %.1fs", epoch, mean_loss, elapsed)
        if config.eval_train and epoch == config.epochs:
            metrics.epochs.append({"epoch": epoch, "split": "train_eval",
                                   "accuracy": evaluate(net, train_set, config.batch_size)})
        if val_set is not None:
            metrics.epochs.append({"epoch": epoch, "split": "val",
                                   "accuracy": evaluate(net, val_set, config.batch_size)})
        if on_epoch is not None:
            on_epoch(net, epoch)
    return net, metrics


def snr_sweep(net: Network, snr_list, n_per_point: int, params: RadarParams, seed: int,
              threads: int = 1) -> list[tuple[float, float]]:
    """Accuracy on a freshly generated set per SNR, in input order."""
    out = []
    for snr in snr_list:
        ds = generate_dataset(n_per_point, params, snr, seed, threads=threads)
        out.append((snr, evaluate(net, ds)))
    return out
