"""Command-line driver: generate, train, sample, path, select, eval, oracle-check.

Every command is deterministic given its config, seed and input files. Randomness
comes from one root seed split into named streams (data, train, sample).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import data as dt
from . import evaluation as ev
from .flow import ConditionalMatrixFlow, FlowConfig, FlowError, load_checkpoint
from .target import ConditionError, GGMTarget
from .train import (AdamConfig, AnnealingSchedule, DivergenceError, TrainConfig, train)

log = logging.getLogger("cmflow")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

LAMBDA_NOTE = ("# lambda is the prior's lambda; the matching penalized-likelihood weight is "
               "lambda_freq = lambda / (n / 2) with scatter (S + lambda I) / n")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ run config

@dataclass
class DataSection:
    path: str | None = None
    query_columns: list[str] | None = None
    d: int = 5
    alpha: float = 0.9
    n: int = 50


@dataclass
class FlowSection:
    n_layers: int = 4
    k: int = 8
    s_const: float = 10.0
    hidden: int = 64
    n_hidden: int = 2


@dataclass
class PriorSection:
    lambda_range: list[float] = field(default_factory=lambda: [0.1, 10.0])
    q_range: list[float] = field(default_factory=lambda: [0.25, 1.0])


@dataclass
class TrainSection:
    epochs: int = 3000
    mc_samples: int = 64
    conditions_per_batch: int = 8
    lr: float = 1e-3
    lr_final_fraction: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 100.0
    divergence_threshold: float = 1e6
    divergence_patience: int = 50
    log_every: int = 0


@dataclass
class ScheduleSection:
    T0: float = 5.0
    Tn: float = 0.01
    n_steps: int = 100


@dataclass
class EvalSection:
    gamma: float = 0.9
    n_samples: int = 1000
    n_map: int = 256
    per_decade: int = 20
    evidence_samples: int = 2000


@dataclass
class RunConfig:
    mode: str = "full"
    seed: int = 0
    out: str = "out"
    data: DataSection = field(default_factory=DataSection)
    flow: FlowSection = field(default_factory=FlowSection)
    prior: PriorSection = field(default_factory=PriorSection)
    train: TrainSection = field(default_factory=TrainSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fill(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _fill(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def parse_config(raw: dict | None) -> RunConfig:
    cfg = _fill(RunConfig, raw or {}, "")
    if cfg.mode not in ("full", "block"):
        raise ConfigError("mode must be 'full' or 'block'")
    if cfg.mode == "block" and not cfg.data.query_columns:
        raise ConfigError("block mode needs data.query_columns")
    sch = cfg.schedule
    if not sch.T0 >= 1.0 >= sch.Tn > 0:
        raise ConfigError("schedule must satisfy T0 >= 1 >= Tn > 0 (two checkpoints)")
    if len(cfg.prior.lambda_range) != 2 or len(cfg.prior.q_range) != 2:
        raise ConfigError("lambda_range and q_range take two values")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)


def stream_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for a named stream of the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def build_train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lambda_range=tuple(cfg.prior.lambda_range), q_range=tuple(cfg.prior.q_range),
        mc_samples=t.mc_samples, conditions_per_batch=t.conditions_per_batch, epochs=t.epochs,
        seed=stream_seed(cfg.seed, "train"),
        schedule=AnnealingSchedule(cfg.schedule.T0, cfg.schedule.Tn, cfg.schedule.n_steps),
        adam=AdamConfig(t.lr, t.beta1, t.beta2, t.eps, t.clip_norm),
        lr_final_fraction=t.lr_final_fraction, divergence_threshold=t.divergence_threshold,
        divergence_patience=t.divergence_patience, log_every=t.log_every)


def build_flow(cfg: RunConfig, ds: dt.Dataset) -> ConditionalMatrixFlow:
    f = cfg.flow
    kw = dict(n_layers=f.n_layers, k=f.k, s_const=f.s_const, hidden=f.hidden,
              n_hidden=f.n_hidden, lambda_range=tuple(cfg.prior.lambda_range),
              q_range=tuple(cfg.prior.q_range))
    fc = FlowConfig(d=ds.d, **kw) if cfg.mode == "full" else FlowConfig(block=(ds.s, ds.t), **kw)
    return ConditionalMatrixFlow(fc, seed=stream_seed(cfg.seed, "init"))


# ------------------------------------------------------------------ helpers

def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out or (cfg.out if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _target_from_header(header) -> GGMTarget:
    tgt = header.get("extra", {}).get("target")
    if tgt is None:
        raise ConfigError("checkpoint carries no data statistics; pass --data")
    block = tuple(tgt["block"]) if tgt.get("block") else None
    return GGMTarget(np.array(tgt["S"]), tgt["n"], block)


def _target(args, header) -> GGMTarget:
    if getattr(args, "data", None):
        ds = dt.load_csv(args.data, args.query.split(",") if getattr(args, "query", None) else None)
        return GGMTarget.from_dataset(ds)
    return _target_from_header(header)


def _lambda_grid(args, flow: ConditionalMatrixFlow, per_decade: int):
    lo, hi = flow.config.lambda_range
    if getattr(args, "grid_points", None):
        return np.exp(np.linspace(np.log(lo), np.log(hi), args.grid_points))
    return ev.log_lambda_grid(lo, hi, per_decade)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------ commands

def cmd_generate(args, cfg: RunConfig) -> int:
    d = args.d if args.d is not None else cfg.data.d
    alpha = args.alpha if args.alpha is not None else cfg.data.alpha
    n = args.n if args.n is not None else cfg.data.n
    root = stream_seed(cfg.seed, "data")
    gt = dt.generate_sparse_precision(d, alpha, np.random.SeedSequence([root, 0]))
    ds = dt.sample_gaussian(gt, n, np.random.SeedSequence([root, 1]))
    out = _out_dir(args, cfg)
    ds.to_csv(out / "data.csv")
    dt.write_ground_truth(gt, out / "truth")
    np.linalg.cholesky(gt.omega)
    print(f"wrote {out/'data.csv'} (n={n}, d={d}) and truth files; |E|={len(gt.edges)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    path = args.data or cfg.data.path
    if path is None:
        raise ConfigError("train needs --data or data.path")
    ds = dt.load_csv(path, cfg.data.query_columns if cfg.mode == "block" else None)
    target = GGMTarget.from_dataset(ds)
    flow = build_flow(cfg, ds)
    tcfg = build_train_config(cfg)
    out = _out_dir(args, cfg)
    echo = cfg.to_dict()
    _write_json(out / "config.json", echo)
    log.info("training %s flow with %d parameters", cfg.mode, flow.n_params)
    res = train(tcfg, target, flow)
    meta = {"config": echo,
            "target": {"S": ds.S.tolist(), "n": ds.n, "columns": ds.columns,
                       "block": None if ds.s is None else [ds.s, ds.t]}}
    res.flow_T1.save(out / "checkpoint_T1.cmf", dict(meta, T=res.T1, epoch=res.epoch_T1))
    res.flow_Tn.save(out / "checkpoint_Tn.cmf", dict(meta, T=cfg.schedule.Tn, epoch=tcfg.epochs - 1))
    res.write_trace(out / "loss_trace.csv")
    print(f"wrote checkpoint_T1.cmf (T={res.T1:.4g}), checkpoint_Tn.cmf, loss_trace.csv to {out}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    flow, header = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(stream_seed(cfg.seed, "sample"))
    batch = ev.posterior_samples(flow, args.lam, args.q, args.n, rng)
    out = _out_dir(args, cfg)
    T = header.get("extra", {}).get("T")
    with open(out / "samples.jsonl", "w") as fh:
        for i in range(len(batch)):
            rec = batch[i].to_json()
            rec["T"] = T
            fh.write(json.dumps(rec) + "\n")
    gamma = args.gamma if args.gamma is not None else cfg.eval.gamma
    summ = ev.credible_intervals(batch, gamma, lam=args.lam, q=args.q)
    summ.to_csv(out / "intervals.csv")
    s = flow.config.block[0] if flow.config.block else None
    ev.write_edges(summ, out / "edges.csv", s)
    print(f"wrote {len(batch)} samples, intervals.csv and edges.csv to {out}")
    return EXIT_OK


def cmd_path(args, cfg: RunConfig) -> int:
    flow, header = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(stream_seed(cfg.seed, "sample"))
    grid = _lambda_grid(args, flow, cfg.eval.per_decade)
    n_map = args.n_map or cfg.eval.n_map
    path = ev.solution_path(flow, grid, args.q, n_map, rng, T=header.get("extra", {}).get("T"))
    out = _out_dir(args, cfg)
    path.to_csv(out / "path.csv")
    print(LAMBDA_NOTE)
    print(f"wrote path.csv ({len(grid)} lambda values, q={args.q})")
    if args.reference:
        if flow.config.block is not None:
            raise ConfigError("the reference path is only defined in full mode")
        target = _target(args, header)
        ref = ev.reference_glasso_path(target.S, target.n, grid)
        ref.to_csv(out / "reference_path.csv")
        print(f"reference_path.csv written; path MSE = {ev.path_mse(path, ref):.6g}")
    return EXIT_OK


def cmd_select(args, cfg: RunConfig) -> int:
    flow, header = load_checkpoint(args.checkpoint)
    target = _target(args, header)
    rng = np.random.default_rng(stream_seed(cfg.seed, "sample"))
    grid = _lambda_grid(args, flow, cfg.eval.per_decade)
    M = args.samples or cfg.eval.evidence_samples
    lam_star, est, se = ev.select_lambda(flow, target, grid, args.q, M, rng)
    out = _out_dir(args, cfg)
    with open(out / "evidence.csv", "w") as fh:
        fh.write("lambda,log_evidence,stderr\n")
        for lam, e, s in zip(grid, est, se):
            fh.write(f"{lam!r},{e!r},{s!r}\n")
    print(f"lambda* = {lam_star:.6g} (q={args.q}); curve in {out/'evidence.csv'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    flow, _ = load_checkpoint(args.checkpoint)
    truth = dt.read_edges(args.truth)
    rng = np.random.default_rng(stream_seed(cfg.seed, "sample"))
    N = args.n or cfg.eval.n_samples
    gamma = args.gamma if args.gamma is not None else cfg.eval.gamma
    summ = ev.credible_intervals(ev.posterior_samples(flow, args.lam, args.q, N, rng), gamma)
    s = flow.config.block[0] if flow.config.block else None
    pred = ev.edge_set(summ, s)
    f1 = ev.f1_score(pred, truth)
    print(f"F1 = {f1:.4f} (predicted {len(pred)}, true {len(truth)}, lambda={args.lam}, "
          f"q={args.q}, gamma={gamma})")
    return EXIT_OK


def cmd_oracle_check(args, cfg: RunConfig) -> int:
    flow, header = load_checkpoint(args.checkpoint)
    target = _target(args, header)
    if target.d > 2 or flow.config.block is not None:
        raise ConfigError("oracle-check needs a full-mode flow with d <= 2")
    rng = np.random.default_rng(stream_seed(cfg.seed, "sample"))
    gamma = args.gamma if args.gamma is not None else cfg.eval.gamma
    grid = ev.grid_oracle_posterior(target.S, target.n, args.lam, args.q, n_points=args.points)
    summ = ev.credible_intervals(ev.posterior_samples(flow, args.lam, args.q, args.n, rng), gamma)
    pos = {lab: k for k, lab in enumerate(summ.labels)}
    worst = 0.0
    print("entry,oracle_lower,flow_lower,oracle_upper,flow_upper,max_rel_err")
    for k, lab in enumerate(grid.labels):
        lo, hi = grid.interval(k, gamma)
        j = pos[lab]
        err = max(abs(summ.lower[j] - lo) / abs(lo), abs(summ.upper[j] - hi) / abs(hi))
        worst = max(worst, err)
        print(f"({lab[0]},{lab[1]}),{lo:.6g},{summ.lower[j]:.6g},{hi:.6g},{summ.upper[j]:.6g},"
              f"{err:.4g}")
    print(f"max relative endpoint discrepancy: {worst:.4g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--threads", type=int, help="cap on BLAS / numba worker threads")
    common.add_argument("--out", help="output directory (overrides config)")

    p = argparse.ArgumentParser(prog="cmflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthetic sparse GGM data")
    g.add_argument("--d", type=int)
    g.add_argument("--alpha", type=float, help="sparsity level of the factor")
    g.add_argument("--n", type=int)

    t = sub.add_parser("train", parents=[common], help="anneal a conditional flow")
    t.add_argument("--data", help="CSV with a header row (overrides data.path)")
    t.add_argument("--epochs", type=int)

    for name, helptext in (("sample", "posterior samples and intervals"),
                           ("eval", "F1 of the credible-interval edge set")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--lam", type=float, required=True)
        s.add_argument("--q", type=float, required=True)
        s.add_argument("--n", type=int, default=1000 if name == "sample" else None)
        s.add_argument("--gamma", type=float)
        if name == "eval":
            s.add_argument("--truth", required=True, help="edge CSV (i, j, sign, ...)")

    pa = sub.add_parser("path", parents=[common], help="MAP solution path over lambda")
    pa.add_argument("--checkpoint", required=True)
    pa.add_argument("--q", type=float, default=1.0)
    pa.add_argument("--n-map", type=int, dest="n_map")
    pa.add_argument("--grid-points", type=int, dest="grid_points")
    pa.add_argument("--reference", action="store_true", help="also solve the q=1 reference path")
    pa.add_argument("--data")
    pa.add_argument("--query")

    se = sub.add_parser("select", parents=[common], help="evidence curve and lambda*")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--q", type=float, default=1.0)
    se.add_argument("--samples", type=int)
    se.add_argument("--grid-points", type=int, dest="grid_points")
    se.add_argument("--data")
    se.add_argument("--query")

    o = sub.add_parser("oracle-check", parents=[common], help="compare with the grid posterior")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--lam", type=float, default=1.0)
    o.add_argument("--q", type=float, default=1.0)
    o.add_argument("--n", type=int, default=100000)
    o.add_argument("--points", type=int, default=161)
    o.add_argument("--gamma", type=float)
    o.add_argument("--data")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sample": cmd_sample,
            "path": cmd_path, "select": cmd_select, "eval": cmd_eval,
            "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CMFLOW_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "epochs", None):
            cfg.train.epochs = args.epochs
        if args.threads:
            # the numba kernels are serial; only BLAS pools need capping
            threadpool_limits(args.threads)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ConditionError, FlowError, yaml.YAMLError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, dt.DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
