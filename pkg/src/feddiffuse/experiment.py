"""Experiment configuration, end-to-end runs and parameter sweeps."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, PartitionSpec, default_data_dir, find_idx_pair, load_idx, make_partition, synthetic_fashion
from .diffusion import build_schedule
from .errors import ConfigurationError
from .evaluation import ClientScores, FeatureExtractor, FeatureStats, fit_stats, image_grid, score_and_sample, write_pgm
from .federation import FederationConfig, TrainingResult, derive_seed, expected_traffic, run_training
from .model import Denoiser, ModelConfig, save_checkpoint, segment_layout

log = logging.getLogger(__name__)

DEFAULTS = {
    "data": {"images": "", "labels": "", "dir": "", "synthetic": "0", "subset": "0", "reference_size": "2000"},
    "model": {"in_channels": "1", "base_channels": "16", "depth": "3", "emb_dim": "32", "image_size": "28",
              "pad": "2", "groups": "8", "dtype": "float32"},
    "diffusion": {"timesteps": "1000", "beta_start": "0.0001", "beta_end": "0.02"},
    "federation": {"method": "full", "clients": "2", "rounds": "15", "epochs": "5", "batch": "128",
                   "lr": "0.0001", "optimizer": "adam"},
    "partition": {"kind": "iid", "dirichlet_beta": "0.5"},
    "evaluation": {"samples": "512", "max_dim": "256", "extractor_seed": "0", "grid_size": "64"},
    "run": {"seed": "0", "train_seed": "", "out": "runs/experiment", "desk_scale": "false",
            "checkpoint_rounds": "false"},
}
# the smaller batch and larger step make up for ~30x less data per round
DESK_SCALE = {("data", "subset"): "2000", ("federation", "rounds"): "3", ("federation", "epochs"): "1",
              ("federation", "batch"): "32", ("federation", "lr"): "0.001", ("evaluation", "samples"): "128"}
METRICS_COLUMNS = ["round", "method", "mean_loss", "client_losses", "cumulative_n",
                   "score_mean", "score_std", "client_scores"]
COMPARISON_COLUMNS = ["method", "clients", "epochs", "partition", "n", "score_mean", "score_std", "n_seeds"]
SWEEP_AXES = ("clients", "epochs", "method", "partition")

# data/partition and training streams under the master seed
_DATA_STREAM, _TRAIN_STREAM, _EVAL_STREAM = 10, 11, 12


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Path | int | tuple[Path, Path]  # directory, synthetic size, or explicit (images, labels)
    subset: int
    reference_size: int
    model: ModelConfig
    timesteps: int
    beta_start: float
    beta_end: float
    federation: FederationConfig
    partition_kind: str
    dirichlet_beta: float
    samples: int
    max_dim: int
    extractor_seed: int
    grid_size: int
    seed: int
    out: Path
    checkpoint_rounds: bool

    @property
    def data_seed(self) -> int:
        return derive_seed(self.seed, _DATA_STREAM)


def _field(parser, section, key, kind):
    raw = parser.get(section, key).strip()
    try:
        if kind is bool:
            return parser.getboolean(section, key)
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path=None, overrides: dict | None = None, desk_scale: bool = False) -> configparser.ConfigParser:
    """Defaults, then the config file, then the desk-scale preset, then ``overrides``.

    ``overrides`` maps ``(section, key)`` to a value; ``None`` values are ignored.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"config file {path}: {exc}") from exc
    for section in parser.sections():
        unknown = set(parser[section]) - set(DEFAULTS.get(section, {}))
        if section not in DEFAULTS or unknown:
            raise ConfigurationError(f"unknown config entries in [{section}]: {sorted(unknown) or 'whole section'}")
    if desk_scale or parser.getboolean("run", "desk_scale"):
        parser.set("run", "desk_scale", "true")
        for (section, key), value in DESK_SCALE.items():
            parser.set(section, key, value)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            parser.set(section, key, str(value))
    return parser


def resolve(parser: configparser.ConfigParser) -> ExperimentConfig:
    """Typed, validated configuration; raises ConfigurationError naming the offending field."""
    f = lambda s, k, t=str: _field(parser, s, k, t)  # noqa: E731
    images, labels, data_dir, synthetic = f("data", "images"), f("data", "labels"), f("data", "dir"), f("data", "synthetic", int)
    if images or labels:
        if not (images and labels):
            raise ConfigurationError("data.images and data.labels must be given together")
        dataset = (Path(images), Path(labels))
    elif data_dir or default_data_dir():
        dataset = Path(data_dir) if data_dir else default_data_dir()
    elif synthetic > 0:
        dataset = synthetic
    else:
        raise ConfigurationError("data: set images/labels, dir, the FEDDIFFUSE_DATA_DIR variable, or synthetic > 0")

    try:
        model = ModelConfig(**{k: f("model", k, str if k == "dtype" else int) for k in DEFAULTS["model"]})
    except ConfigurationError as exc:
        raise ConfigurationError(f"model: {exc}") from None
    seed = f("run", "seed", int)
    train_seed = f("run", "train_seed")
    try:
        fed = FederationConfig(
            num_clients=f("federation", "clients", int), rounds=f("federation", "rounds", int),
            epochs=f("federation", "epochs", int), batch_size=f("federation", "batch", int),
            lr=f("federation", "lr", float), method=f("federation", "method"),
            optimizer=f("federation", "optimizer"),
            seed=int(train_seed) if train_seed else derive_seed(seed, _TRAIN_STREAM))
    except ConfigurationError as exc:
        raise ConfigurationError(f"federation: {exc}") from None
    kind = f("partition", "kind").replace("-", "_")
    beta = f("partition", "dirichlet_beta", float)
    try:
        PartitionSpec(kind, fed.num_clients, beta)
    except ConfigurationError as exc:
        raise ConfigurationError(f"partition: {exc}") from None
    cfg = ExperimentConfig(
        dataset=dataset, subset=f("data", "subset", int), reference_size=f("data", "reference_size", int),
        model=model, timesteps=f("diffusion", "timesteps", int), beta_start=f("diffusion", "beta_start", float),
        beta_end=f("diffusion", "beta_end", float), federation=fed, partition_kind=kind, dirichlet_beta=beta,
        samples=f("evaluation", "samples", int), max_dim=f("evaluation", "max_dim", int),
        extractor_seed=f("evaluation", "extractor_seed", int), grid_size=f("evaluation", "grid_size", int),
        seed=seed, out=Path(f("run", "out")), checkpoint_rounds=f("run", "checkpoint_rounds", bool))
    try:
        build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    except ConfigurationError as exc:
        raise ConfigurationError(f"diffusion: {exc}") from None
    if cfg.samples < 2:
        raise ConfigurationError(f"evaluation.samples must be >= 2, got {cfg.samples}")
    if cfg.subset < 0 or cfg.reference_size < 2:
        raise ConfigurationError("data.subset must be >= 0 and data.reference_size >= 2")
    return cfg


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if isinstance(cfg.dataset, int):
        ds = synthetic_fashion(cfg.dataset, seed=cfg.data_seed, size=cfg.model.image_size)
    elif isinstance(cfg.dataset, tuple):
        ds = load_idx(*cfg.dataset)
    else:
        pair = find_idx_pair(cfg.dataset)
        if pair is None:
            raise ConfigurationError(f"data.dir: no train-images/train-labels IDX files in {cfg.dataset}")
        ds = load_idx(*pair)
    if cfg.subset and cfg.subset < len(ds):
        ds = ds.subset(np.sort(np.random.default_rng(cfg.data_seed).permutation(len(ds))[:cfg.subset]))
    return ds


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def metrics_csv(result: TrainingResult, scores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in result.metrics:
        w.writerow([m.round, m.method, _fmt(m.mean_loss), ";".join(_fmt(l) for l in m.client_losses),
                    m.cumulative_traffic, "", "", ""])
    if isinstance(scores, ClientScores):
        w.writerow(["eval", result.method, "", "", result.ledger.total, _fmt(scores.mean), _fmt(scores.std),
                    ";".join(_fmt(s) for s in scores.scores)])
    elif scores is not None:
        w.writerow(["eval", result.method, "", "", result.ledger.total, _fmt(scores), "0.0", _fmt(scores)])
    return buf.getvalue()


@dataclass(frozen=True)
class EvaluationSetup:
    extractor: FeatureExtractor
    reference: FeatureStats
    seed: int


def evaluation_setup(cfg: ExperimentConfig, ds: Dataset) -> EvaluationSetup:
    """Extractor, reference statistics and sampling seed used to score every model of a run."""
    fx = FeatureExtractor.default(int(np.prod(cfg.model.image_shape)), cfg.max_dim, cfg.extractor_seed)
    ref_idx = np.random.default_rng(cfg.data_seed).permutation(len(ds))[:cfg.reference_size]
    return EvaluationSetup(fx, fit_stats(ds.as_float(np.sort(ref_idx)), fx), derive_seed(cfg.seed, _EVAL_STREAM))


@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    result: TrainingResult
    scores: float | ClientScores

    @property
    def score_mean(self) -> float:
        return self.scores.mean if isinstance(self.scores, ClientScores) else float(self.scores)


def run_experiment(parser: configparser.ConfigParser) -> ExperimentOutcome:
    """Train, score and write every artifact into the configured output directory."""
    cfg = resolve(parser)
    out = cfg.out
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.ini.tmp", "w") as fh:
        parser.write(fh)
    (out / "resolved_config.ini.tmp").replace(out / "resolved_config.ini")

    ds = load_dataset(cfg)
    sched = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    partition = make_partition(ds, PartitionSpec(cfg.partition_kind, cfg.federation.num_clients,
                                                 cfg.dirichlet_beta, cfg.data_seed))
    partition.write_manifest(out / "partition.json")
    log.info("training %s with %d clients on %d images", cfg.federation.method, cfg.federation.num_clients, len(ds))

    def checkpoint(r, theta, client_params):
        save_checkpoint(Denoiser(cfg.model, np.array(theta), segment_layout(cfg.model)),
                        out / "checkpoints" / f"round{r:03d}.bin")

    result = run_training(cfg.federation, ds, partition, sched, cfg.model,
                          on_round=checkpoint if cfg.checkpoint_rounds else None)
    result.ledger.write_json(out / "ledger.json")

    models = result.scored_models()
    ev = evaluation_setup(cfg, ds)
    scores, images = score_and_sample(models, ev.reference, cfg.samples, ev.extractor, sched, ev.seed)
    _write_text(out / "metrics.csv", metrics_csv(result, scores))

    named = [("global", models)] if not isinstance(models, list) else [(f"client{k}", m) for k, m in enumerate(models)]
    grid_n = max(1, min(cfg.grid_size, cfg.samples))
    for (name, model), imgs in zip(named, images):
        write_pgm(out / "samples" / f"{name}.pgm", image_grid(imgs[:grid_n]))
        save_checkpoint(model, out / "checkpoints" / f"{name}.bin")
    return ExperimentOutcome(cfg, result, scores)


def sweep(parser: configparser.ConfigParser, axis: str, values: list[str], seeds: int = 3) -> list[dict]:
    """Run one experiment per (value, seed) and write ``comparison.csv`` under the output directory.

    The data/partition seed is shared across all runs; training seeds differ
    per repetition.  The comparison table is rewritten after each value so
    partial results survive a failure.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if seeds < 1:
        raise ConfigurationError(f"sweep needs at least one seed, got {seeds}")
    key = {"clients": ("federation", "clients"), "epochs": ("federation", "epochs"),
           "method": ("federation", "method"), "partition": ("partition", "kind")}[axis]
    base = resolve(parser)
    root = base.out
    root.mkdir(parents=True, exist_ok=True)
    # validate every value before spending compute
    for value in values:
        resolve(_with(parser, {key: value}))
    rows = []
    for value in values:
        outcomes = []
        for rep in range(seeds):
            run_parser = _with(parser, {key: value,
                                        ("run", "train_seed"): str(derive_seed(base.seed, _TRAIN_STREAM, rep)),
                                        ("run", "out"): str(root / f"{axis}={value}" / f"seed{rep}")})
            outcomes.append(run_experiment(run_parser))
        c = outcomes[0].config
        traffic = {o.result.ledger.total for o in outcomes}
        score_means = [o.score_mean for o in outcomes]
        rows.append({"method": c.federation.method, "clients": c.federation.num_clients,
                     "epochs": c.federation.epochs, "partition": c.partition_kind,
                     "n": traffic.pop() if len(traffic) == 1 else ";".join(map(str, sorted(traffic))),
                     "score_mean": float(np.mean(score_means)), "score_std": float(np.std(score_means)),
                     "n_seeds": seeds})
        buf = io.StringIO()
        w = csv.DictWriter(buf, COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _write_text(root / "comparison.csv", buf.getvalue())
    return rows


def _with(parser: configparser.ConfigParser, overrides: dict) -> configparser.ConfigParser:
    new = configparser.ConfigParser(interpolation=None)
    new.read_dict({s: dict(parser[s]) for s in parser.sections()})
    for (section, key), value in overrides.items():
        new.set(section, key, str(value))
    return new


def traffic_check(outcome: ExperimentOutcome) -> bool:
    """Whether the run's ledger equals the closed-form traffic for its method."""
    r = outcome.result
    fed = outcome.config.federation
    return r.ledger.total == expected_traffic(fed.method, fed.num_clients, fed.rounds, r.layout,
                                              r.plans if fed.method == "usplit" else None)
