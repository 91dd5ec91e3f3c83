"""End-to-end mining and learning: U pre-training runs, mining, phase two."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .backbone import MlpModel, TrainConfig, extract_embedding_space, train_classifier
from .datastore import LabeledDataset, RunBundle, align_runs
from .metric import build_metric
from .mining import PrototypeBook, filter_diverse
from .protolearn import LossCurve, ProtoLossConfig, optimize_embedding
from .uncertainty import CandidateSets, RobustnessTable, reference_subsample, robustness, select_candidates

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    train: TrainConfig = TrainConfig()
    # phase two reuses ``train`` with this many epochs and, if set, this decay step
    optimize_epochs: int = 20
    optimize_lr_decay_every: int | None = None
    proto: ProtoLossConfig = ProtoLossConfig()
    runs: int = 2
    epsilon: float = 0.7
    prototypes: int = 10
    normalize_gap: bool = False
    reference_size: int | None = None
    mining_run: int = 0
    threads: int = 1


@dataclass
class MiningResult:
    models: list
    bundle: RunBundle
    table: RobustnessTable
    candidates: CandidateSets
    book: PrototypeBook


@dataclass
class PmalResult:
    mining: MiningResult
    model: MlpModel
    curve: LossCurve = field(default_factory=LossCurve)


def run_seeds(seed: int, runs: int) -> list:
    return [1000 * seed + u + 1 for u in range(runs)]


def pretrain(train: LabeledDataset, cfg: PipelineConfig, seed: int) -> list:
    return [train_classifier(train, replace(cfg.train, rng_seed=s)) for s in run_seeds(seed, cfg.runs)]


def mine(train: LabeledDataset, models: list, cfg: PipelineConfig, seed: int = 0) -> MiningResult:
    spaces = [extract_embedding_space(m, train, run_id=u + 1) for u, m in enumerate(models)]
    bundle = align_runs(spaces)
    metrics = [build_metric(s) for s in spaces]
    reference = None
    if cfg.reference_size is not None:
        reference = reference_subsample(train.n, cfg.reference_size, seed)
    table = robustness(bundle, metrics, reference, train.ids, cfg.normalize_gap, cfg.threads)
    candidates = select_candidates(table, train, cfg.epsilon)
    run = cfg.mining_run
    book = filter_diverse(candidates, spaces[run], metrics[run], cfg.prototypes, cfg.threads)
    return MiningResult(models, bundle, table, candidates, book)


def phase_two_config(cfg: PipelineConfig, seed: int) -> TrainConfig:
    decay = cfg.optimize_lr_decay_every or cfg.train.lr_decay_every
    return replace(cfg.train, epochs=cfg.optimize_epochs, lr_decay_every=decay, rng_seed=run_seeds(seed, 1)[0] + 500)


def optimize(model: MlpModel, train: LabeledDataset, book: PrototypeBook, cfg: PipelineConfig, seed: int, curve=None):
    """Phase two from ``model`` with the configured prototype loss."""
    return optimize_embedding(model, train, book, phase_two_config(cfg, seed), cfg.proto, curve)


def run_pmal(train: LabeledDataset, cfg: PipelineConfig, seed: int = 0) -> PmalResult:
    """Pre-train ``cfg.runs`` classifiers, mine prototypes, then optimise run 1's model."""
    models = pretrain(train, cfg, seed)
    mining = mine(train, models, cfg, seed)
    curve = LossCurve()
    model = optimize(models[0], train, mining.book, cfg, seed, curve)
    return PmalResult(mining, model, curve)


def continue_plain(model: MlpModel, train: LabeledDataset, cfg: PipelineConfig, seed: int, book: PrototypeBook):
    """Same phase-two schedule with the prototype term switched off (softmax baseline)."""
    return optimize(model, train, book, replace(cfg, proto=replace(cfg.proto, weight=0.0)), seed)
