"""Command-line driver: dataset generation, training, rendering, evaluation and reports.

Every subcommand takes ``--config`` (JSON), ``--seed`` and ``--out``; other
flags override individual config fields. Exit codes: 0 success, 2 config
error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import reports
from .consensus import (ConsensusConfig, ExchangeLog, GraphError, TrainingDivergedError, build_graph,
                        cadmm_train, centralized_train, comm_report)
from .field import EncodingConfig, make_arch
from .metrics import psnr, ssim
from .netcore import ContractError, MlpArchitecture, WeightFormatError, deserialize_weights, serialize_weights
from .render import render_image, write_ppm
from .scenes import (DatasetError, PosedDataset, default_scene, generate_dataset, load_dataset, partition_dataset,
                     ring_cameras, save_dataset)

log = logging.getLogger("consensus_nerf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
HEADER_FIELDS = ("hidden_layers", "width", "skip_after_layer", "pos_enc_dim", "dir_enc_dim")


class ConfigError(ValueError):
    """Bad or inconsistent configuration; the message names the field."""


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "multi"
    # data: a saved dataset directory, or the built-in synthetic scene
    dataset: str | None = None
    eval_dataset: str | None = None
    n_views: int = 12
    eval_views: int = 6
    eval_azimuth_offset_deg: float = 15.0
    image_size: int = 64
    fov_deg: float = 45.0
    gt_samples: int = 128
    # model
    pos_freqs: int = 6
    dir_freqs: int = 4
    include_identity: bool = True
    width: int = 64
    hidden_layers: int = 8
    skip_after_layer: int = 5
    density_activation: str = "relu"
    # optimisation
    graph: str = "ring:3"
    partition: str = "contiguous"
    rho: float = 0.5
    B: int = 5
    K: int = 100
    rays_per_batch: int = 256
    samples_per_ray: int = 32
    comm_frequency: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 0.1
    optimizer: str = "adam"
    # evaluation
    render_samples: int = 64
    figures: bool = True
    seed: int = 0

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.pos_freqs, self.dir_freqs, self.include_identity)

    @property
    def arch(self) -> MlpArchitecture:
        return make_arch(self.encoding, self.width, self.hidden_layers, self.skip_after_layer,
                         self.density_activation)

    @property
    def consensus(self) -> ConsensusConfig:
        return ConsensusConfig(rho=self.rho, B=self.B, K=self.K, rays_per_batch=self.rays_per_batch,
                               samples_per_ray=self.samples_per_ray, comm_frequency=self.comm_frequency,
                               seed=self.seed, lr=self.lr, lr_decay=self.lr_decay, optimizer=self.optimizer)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {"int": int, "float": (int, float), "bool": bool, "str": str, "str | None": (str, type(None))}
_POSITIVE = {"n_views", "eval_views", "image_size", "gt_samples", "pos_freqs", "dir_freqs", "width",
             "hidden_layers", "skip_after_layer", "B", "rays_per_batch", "samples_per_ray", "render_samples",
             "fov_deg", "rho", "lr", "lr_decay"}


def _check_field(name, value):
    if name not in _FIELDS:
        raise ConfigError(f"{name}: unknown config field")
    want = _TYPES[_FIELDS[name].type]
    bad_bool = isinstance(value, bool) and _FIELDS[name].type in ("int", "float")
    if bad_bool or not isinstance(value, want):
        raise ConfigError(f"{name}: expected {_FIELDS[name].type}, got {value!r}")
    if name in _POSITIVE and not value > 0:
        raise ConfigError(f"{name}: must be positive, got {value!r}")
    if name in ("K", "seed") and value < 0:
        raise ConfigError(f"{name}: must be >= 0, got {value!r}")


def make_config(values: dict) -> ExperimentConfig:
    """Validate ``values`` field by field; every error message starts with the field name."""
    for name, value in values.items():
        _check_field(name, value)
    cfg = ExperimentConfig(**values)
    checks = {
        "mode": cfg.mode in ("central", "multi"),
        "partition": cfg.partition in ("contiguous", "round_robin"),
        "density_activation": cfg.density_activation in ("relu", "softplus"),
        "optimizer": cfg.optimizer in ("adam", "sgd"),
        "comm_frequency": 0 < cfg.comm_frequency <= 1,
        "skip_after_layer": cfg.skip_after_layer < cfg.hidden_layers,
    }
    for name, ok in checks.items():
        if not ok:
            raise ConfigError(f"{name}: invalid value {getattr(cfg, name)!r}")
    try:
        graph = build_graph(cfg.graph)
    except GraphError as exc:
        raise ConfigError(f"graph: {exc}") from exc
    if cfg.mode == "multi" and cfg.dataset is None and graph.n_agents > cfg.n_views:
        raise ConfigError(f"graph: {graph.n_agents} agents but only {cfg.n_views} views")
    for name in ("dataset", "eval_dataset"):
        path = getattr(cfg, name)
        if path is not None and not Path(path).is_dir():
            raise ConfigError(f"{name}: directory {path!r} does not exist")
    return cfg


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config: file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    return data


# -- data ------------------------------------------------------------------------------------------------------

def synthetic_datasets(cfg: ExperimentConfig) -> tuple[PosedDataset, PosedDataset]:
    scene = default_scene()
    size = cfg.image_size
    train = generate_dataset(scene, ring_cameras(cfg.n_views, width=size, height=size, fov_deg=cfg.fov_deg),
                             cfg.gt_samples, seed=cfg.seed)
    held_out = ring_cameras(cfg.eval_views, azimuth_offset_deg=cfg.eval_azimuth_offset_deg, width=size,
                            height=size, fov_deg=cfg.fov_deg)
    test = generate_dataset(scene, held_out, cfg.gt_samples, seed=cfg.seed + 1, first_id=cfg.n_views)
    return train, test


def datasets_for(cfg: ExperimentConfig) -> tuple[PosedDataset, PosedDataset]:
    if cfg.dataset is None:
        return synthetic_datasets(cfg)
    train = load_dataset(cfg.dataset)
    test = load_dataset(cfg.eval_dataset) if cfg.eval_dataset else train
    return train, test


# -- evaluation ------------------------------------------------------------------------------------------------

def evaluate(weights: list, arch: MlpArchitecture, enc: EncodingConfig, dataset: PosedDataset,
             render_samples: int, seed: int, render_dir=None) -> list[dict]:
    """Per-image and mean PSNR/SSIM for each agent's weights on every frame of ``dataset``."""
    if render_dir is not None:
        Path(render_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for agent, theta in enumerate(weights):
        scores = []
        for frame in dataset.frames:
            img = render_image(theta, arch, enc, dataset.camera(frame), render_samples, seed, dataset.settings)
            if render_dir is not None:
                write_ppm(Path(render_dir) / f"agent_{agent}_view_{frame.id:04d}.ppm", img)
            scores.append((psnr(img, frame.image), ssim(img, frame.image)))
            rows.append({"agent": agent, "image": frame.id, "psnr": scores[-1][0], "ssim": scores[-1][1]})
        mean = np.mean(scores, axis=0)
        rows.append({"agent": agent, "image": "mean", "psnr": float(mean[0]), "ssim": float(mean[1])})
    return rows


def mean_psnr(metric_rows, agent=None) -> float:
    vals = [r["psnr"] for r in metric_rows if r["image"] == "mean" and (agent is None or r["agent"] == agent)]
    return float(np.mean(vals))


def read_weights(path, arch: MlpArchitecture | None = None) -> np.ndarray:
    theta, file_arch = deserialize_weights(Path(path).read_bytes())
    if arch is not None:
        # the header records shapes only; activations come from the config
        got = None if file_arch is None else tuple(getattr(file_arch, f) for f in HEADER_FIELDS)
        want = tuple(getattr(arch, f) for f in HEADER_FIELDS)
        if got != want:
            raise ConfigError(f"arch: weight file {path} has shape fields {got}, config expects {want}")
    return theta


# -- experiment ------------------------------------------------------------------------------------------------

@dataclass
class RunOutcome:
    out_dir: Path
    weights: list
    metrics: list
    trace: list
    comm: list


def _promote(tmp: Path, out: Path, overwrite: bool):
    if out.exists():
        if not overwrite and any(out.iterdir()):
            raise ConfigError(f"out: {out} exists and is not empty (pass --overwrite)")
        shutil.rmtree(out)
    tmp.rename(out)


def run_experiment(cfg: ExperimentConfig, out_dir, parallel: bool = False, overwrite: bool = False) -> RunOutcome:
    """Train, evaluate and write the full artifact tree under ``out_dir``.

    Outputs are assembled in a sibling temporary directory and moved into place
    only when every step succeeded.
    """
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and not overwrite and any(out.iterdir()):
        raise ConfigError(f"out: {out} exists and is not empty (pass --overwrite)")
    arch, enc, ccfg = cfg.arch, cfg.encoding, cfg.consensus
    train, test = datasets_for(cfg)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        if cfg.mode == "central":
            theta, trace = centralized_train(train, arch, enc, ccfg)
            weights, xlog = [theta], ExchangeLog(1)
        else:
            graph = build_graph(cfg.graph)
            shards = partition_dataset(train, graph.n_agents, cfg.partition)
            log.info("training %d agents on %s for %d iterations", graph.n_agents, cfg.graph, cfg.K)
            res = cadmm_train(graph, shards, arch, enc, ccfg, parallel=parallel)
            weights, trace, xlog = res.weights, res.trace, res.log
        comm = comm_report(xlog, ccfg, baseline_bytes=train.raw_bytes())
        (tmp / "weights").mkdir()
        for i, theta in enumerate(weights):
            (tmp / "weights" / f"agent_{i}.nwv").write_bytes(serialize_weights(theta, arch))
        reports.write_trace_csv(tmp / "trace.csv", trace, arch.hidden_layers)
        reports.write_exchange_log_csv(tmp / "exchange_log.csv", xlog)
        reports.write_comm_report_csv(tmp / "comm_report.csv", comm)
        metrics = evaluate(weights, arch, enc, test, cfg.render_samples, cfg.seed, tmp / "renders")
        reports.write_metrics_csv(tmp / "metrics.csv", metrics)
        if cfg.figures:
            reports.plot_trace(trace, tmp / "figures" / "trace.png")
            reports.plot_grad_norms(trace, tmp / "figures" / "grad_norms.png")
            reports.plot_comm_report(comm, tmp / "figures" / "comm_report.png")
        (tmp / "config.json").write_text(cfg.to_json())
        _promote(tmp, out, overwrite)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return RunOutcome(out, weights, metrics, trace, comm)


# -- subcommands -----------------------------------------------------------------------------------------------

def _resolve(args, **forced) -> ExperimentConfig:
    values = load_config(args.config) if args.config else {}
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values.update(forced)
    return make_config(values)


def cmd_gen(args):
    cfg = _resolve(args)
    train, test = synthetic_datasets(cfg)
    out = Path(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "eval")
    print(f"wrote {len(train)} training and {len(test)} held-out views to {out}")


def _cmd_train(args, mode):
    cfg = _resolve(args, mode=mode)
    res = run_experiment(cfg, args.out, parallel=args.parallel, overwrite=args.overwrite)
    for agent in range(len(res.weights)):
        print(f"agent {agent}: mean PSNR {mean_psnr(res.metrics, agent):.2f} dB")
    print(f"artifacts in {res.out_dir}")


def cmd_run(args):
    _cmd_train(args, _resolve(args).mode)


def _eval_dataset(cfg: ExperimentConfig) -> PosedDataset:
    if cfg.eval_dataset or cfg.dataset:
        return load_dataset(cfg.eval_dataset or cfg.dataset)
    return synthetic_datasets(cfg)[1]


def cmd_render(args):
    cfg = _resolve(args)
    ds = _eval_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(args.weights):
        theta = read_weights(path, cfg.arch)
        for frame in ds.frames:
            img = render_image(theta, cfg.arch, cfg.encoding, ds.camera(frame), cfg.render_samples, cfg.seed,
                               ds.settings)
            write_ppm(out / f"agent_{i}_view_{frame.id:04d}.ppm", img)
    print(f"rendered {len(args.weights) * len(ds)} images to {out}")


def cmd_eval(args):
    cfg = _resolve(args)
    ds = _eval_dataset(cfg)
    weights = [read_weights(p, cfg.arch) for p in args.weights]
    rows = evaluate(weights, cfg.arch, cfg.encoding, ds, cfg.render_samples, cfg.seed)
    out = Path(args.out)
    reports.write_metrics_csv(out / "metrics.csv", rows)
    for agent in range(len(weights)):
        print(f"agent {agent}: mean PSNR {mean_psnr(rows, agent):.2f} dB")


def cmd_comm_report(args):
    xlog = reports.read_exchange_log_csv(args.log)
    cfg = _resolve(args)
    baseline = load_dataset(cfg.dataset).raw_bytes() if cfg.dataset else 0
    ccfg = ConsensusConfig(comm_frequency=cfg.comm_frequency)
    rows = comm_report(xlog, ccfg, baseline)
    out = Path(args.out)
    reports.write_comm_report_csv(out / "comm_report.csv", rows)
    reports.plot_comm_report(rows, out / "comm_report.png")
    for r in rows:
        print(f"agent {r['agent']}: {r['total_bytes']} bytes over {r['comm_iterations']} comm iterations")


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--parallel", action="store_true", help="one worker thread per agent")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config overrides")
    parsers = {"int": int, "float": float, "bool": _bool, "str": str, "str | None": str}
    for f in fields(ExperimentConfig):
        if f.name != "seed":
            group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=parsers[f.type])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-nerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen": (cmd_gen, "write the synthetic train and held-out datasets"),
        "train-central": (lambda a: _cmd_train(a, "central"), "single-agent baseline with all images"),
        "train-multi": (lambda a: _cmd_train(a, "multi"), "consensus training over a graph of agents"),
        "run": (cmd_run, "train in the config's mode and write all artifacts"),
        "render": (cmd_render, "render held-out views from weight files"),
        "eval": (cmd_eval, "PSNR and SSIM of weight files on held-out views"),
        "comm-report": (cmd_comm_report, "summarise an exchange_log.csv"),
    }
    for name, (fn, help_) in specs.items():
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name in ("train-central", "train-multi", "run"):
            p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
        if name in ("render", "eval"):
            p.add_argument("--weights", nargs="+", required=True, help="NWV1 weight files, one per agent")
        if name == "comm-report":
            p.add_argument("--log", required=True, help="exchange_log.csv from a run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, GraphError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DatasetError, WeightFormatError, TrainingDivergedError, FloatingPointError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
