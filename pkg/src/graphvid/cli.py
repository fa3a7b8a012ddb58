"""Command-line pipeline: gen-data, train-vq, pretrain-vsg, train-prior, synthesize, evaluate.

Stages talk only through files. Every output directory receives the resolved
config (``config.json``) and the run's seed (``run.json``); training commands
stream per-step losses as CSV on stdout. Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import training as tr
from .config import PRESETS, ConfigError, RunConfig
from .evaluation import reports_to_csv
from .numerics import NonFiniteError, tensorio
from .scenegraph import GraphTrack
from .synthdata import (EpisodeConfig, episode_seed, generate_episode, load_dataset, load_frame, save_episode,
                        save_pgm)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config JSON (default: the --preset values)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="built-in config when --config is absent")
    p.add_argument("--seed", type=int, help="override the stage seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphvid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic episode dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--episodes", type=int, help="episode count (default: data.episodes)")
    p.add_argument("--workers", type=int, default=1, help="worker processes; output does not depend on it")

    p = sub.add_parser("train-vq", help="train the VQ autoencoder on every frame of a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override the stage step count")

    p = sub.add_parser("pretrain-vsg", help="contrastive pretraining of the scene-graph and frame encoders")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override the stage step count")
    p.add_argument("--losses", help="comma-separated subset of intra,inter,finegrain")

    p = sub.add_parser("train-prior", help="train the autoregressive prior (frozen VSG, or joint without --vsg)")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--vq", type=Path, required=True, help="train-vq checkpoint")
    p.add_argument("--vsg", type=Path, help="pretrained VSG checkpoint; omitted = train a fresh encoder jointly")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override the stage step count")
    p.add_argument("--order", type=int, choices=(1, 2, 3), help="graph insertion order (default: prior.order)")

    p = sub.add_parser("synthesize", help="synthesize a video from a start frame and a graph track")
    _common(p)
    p.add_argument("--start", type=Path, required=True, help="start frame (.ssgt tensor or 8-bit PGM)")
    p.add_argument("--track", type=Path, required=True, help="graph track JSON")
    p.add_argument("--vq", type=Path, required=True, help="train-vq checkpoint")
    p.add_argument("--prior", type=Path, required=True, help="train-prior checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--temperature", type=float, help="sampling temperature (default: prior.temperature)")
    p.add_argument("--top-k", type=int, help="keep only the k most likely codes (0 = off)")
    p.add_argument("--unconditional", action="store_true", help="ignore the track (zero graph representations)")

    p = sub.add_parser("evaluate", help="fvd_proxy / SSIM / oracle pass rate over a held-out dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--vq", type=Path, required=True, help="train-vq checkpoint")
    p.add_argument("--prior", type=Path, required=True, help="train-prior checkpoint")
    p.add_argument("--evaluator", type=Path, required=True, help="pretrain-vsg checkpoint whose frame encoder "
                                                                 "provides the video features")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--repeats", type=int, help="evaluation repeats (default: eval.repeats)")
    p.add_argument("--unconditional", action="store_true", help="synthesize with zero graph representations")
    return parser


# --- helpers -------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    seed = args.seed
    if args.command == "gen-data":
        if args.episodes is not None:
            cfg.data.episodes = args.episodes
        if seed is not None:
            cfg.data.seed = seed
    elif args.command == "train-vq":
        cfg.vq.steps = cfg.vq.steps if args.steps is None else args.steps
        cfg.vq.seed = cfg.vq.seed if seed is None else seed
    elif args.command == "pretrain-vsg":
        cfg.vsg.steps = cfg.vsg.steps if args.steps is None else args.steps
        cfg.vsg.seed = cfg.vsg.seed if seed is None else seed
        if args.losses is not None:
            cfg.vsg.losses = [s for s in args.losses.split(",") if s]
    elif args.command == "train-prior":
        cfg.prior.steps = cfg.prior.steps if args.steps is None else args.steps
        cfg.prior.seed = cfg.prior.seed if seed is None else seed
        cfg.prior.order = cfg.prior.order if args.order is None else args.order
        cfg.prior.joint_vsg = args.vsg is None
    elif args.command == "synthesize":
        if args.temperature is not None:
            cfg.prior.temperature = args.temperature
        if args.top_k is not None:
            cfg.prior.top_k = args.top_k
    elif args.command == "evaluate":
        if args.repeats is not None:
            cfg.eval.repeats = args.repeats
        if seed is not None:
            cfg.eval.seed = seed
    return cfg.validate()


def _run_files(cfg: RunConfig, command: str, seed: int, **extra) -> dict[str, str]:
    run = {"command": command, "seed": seed, "config_hash": cfg.digest(), **extra}
    return {"config.json": cfg.to_json(), "run.json": json.dumps(run, indent=2, sort_keys=True) + "\n"}


def _write_files(directory: Path, files: dict[str, str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        tensorio._atomic_write_bytes(directory / name, text.encode())


def _check_data_shape(cfg: RunConfig, episodes) -> None:
    shape = episodes[0].video.shape
    expect = (cfg.data.T, cfg.data.H, cfg.data.W, cfg.data.C)
    if shape != expect:
        raise ConfigError(f"dataset videos are {shape}, config expects {expect}")


def _load_vq(path: Path, cfg: RunConfig):
    vq = tr.load_model(path, "vq")[0]["vq"]
    if (vq.K, vq.stride, vq.H, vq.W) != (cfg.vq.K, cfg.vq.stride, cfg.data.H, cfg.data.W):
        raise ConfigError(f"VQ checkpoint {path} does not match the config (K, stride or frame size)")
    return vq


def _gen_one(job):
    cfg_dict, seed, out = job
    ep = generate_episode(EpisodeConfig(**{**cfg_dict, "seed": seed}))
    save_episode(out, ep)


# --- commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    base = tr.episode_config(cfg).to_dict()
    jobs = [(base, episode_seed(cfg.data.seed, i), args.out / "episodes" / f"{i:04d}")
            for i in range(cfg.data.episodes)]
    if args.workers == 1:
        for job in jobs:
            _gen_one(job)
    else:
        with ProcessPoolExecutor(args.workers) as pool:
            list(pool.map(_gen_one, jobs))
    _write_files(args.out, _run_files(cfg, "gen-data", cfg.data.seed, episodes=cfg.data.episodes))


def cmd_train_vq(args, cfg: RunConfig) -> None:
    episodes = load_dataset(args.data)
    _check_data_shape(cfg, episodes)
    log = tr.CsvLog("vq", sys.stdout)
    model = tr.train_vq(tr.videos_of(episodes), cfg, log)
    tr.save_model(args.out, "vq", {"vq": model}, {"seed": cfg.vq.seed},
                  _run_files(cfg, "train-vq", cfg.vq.seed))


def cmd_pretrain_vsg(args, cfg: RunConfig) -> None:
    episodes = load_dataset(args.data)
    _check_data_shape(cfg, episodes)
    log = tr.CsvLog("vsg", sys.stdout)
    vsg, fenc = tr.pretrain_vsg(episodes, cfg, log)
    tr.save_model(args.out, "vsg", {"vsg": vsg, "frame": fenc}, {"seed": cfg.vsg.seed, "losses": cfg.vsg.losses},
                  _run_files(cfg, "pretrain-vsg", cfg.vsg.seed))


def cmd_train_prior(args, cfg: RunConfig) -> None:
    episodes = load_dataset(args.data)
    _check_data_shape(cfg, episodes)
    vq = _load_vq(args.vq, cfg)
    if args.vsg is not None:
        vsg = tr.load_model(args.vsg, "vsg")[0]["vsg"]
    else:
        vsg = tr.build_vsg(cfg, seed=cfg.prior.seed)[0]
    latents = tr.dataset_latents(vq, episodes)
    log = tr.CsvLog("prior", sys.stdout)
    prior = tr.train_prior(latents, [ep.track for ep in episodes], vsg, cfg, log)
    tr.save_model(args.out, "prior", {"prior": prior, "vsg": vsg},
                  {"seed": cfg.prior.seed, "order": cfg.prior.order, "joint_vsg": cfg.prior.joint_vsg},
                  _run_files(cfg, "train-prior", cfg.prior.seed))


def _load_prior(path: Path):
    mods, manifest = tr.load_model(path, "prior")
    return mods["prior"], mods["vsg"], int(manifest["order"])


def cmd_synthesize(args, cfg: RunConfig) -> None:
    vq = _load_vq(args.vq, cfg)
    prior, vsg, order = _load_prior(args.prior)
    start = load_frame(args.start)
    track = GraphTrack.load(args.track, vsg.vocab)
    seed = 0 if args.seed is None else args.seed
    out = tr.synthesize(start[None], [track], vq, vsg, prior, order, [seed], cfg.prior.temperature,
                        cfg.prior.top_k or None, not args.unconditional)
    frames = args.out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(out.video[0]):
        tensorio.save_tensor(frames / f"{t:04d}.ssgt", frame)
        save_pgm(frames / f"{t:04d}.pgm", frame)
    tensorio.save_latents(args.out / "latents.lat", out.latents[0], vq.K)
    _write_files(args.out, _run_files(cfg, "synthesize", seed, order=order,
                                      conditioned=not args.unconditional))


def cmd_evaluate(args, cfg: RunConfig) -> None:
    episodes = load_dataset(args.data)
    _check_data_shape(cfg, episodes)
    vq = _load_vq(args.vq, cfg)
    prior, vsg, order = _load_prior(args.prior)
    evaluator = tr.load_model(args.evaluator, "vsg")[0]["frame"]
    reports = tr.evaluate_synthesis(episodes, vq, vsg, prior, evaluator, cfg, order=order,
                                    conditioned=not args.unconditional)
    text = reports_to_csv(reports.values(), cfg.digest())
    sys.stdout.write(text)
    files = _run_files(cfg, "evaluate", cfg.eval.seed, order=order, conditioned=not args.unconditional)
    _write_files(args.out, {**files, "metrics.csv": text})


COMMANDS = {"gen-data": cmd_gen_data, "train-vq": cmd_train_vq, "pretrain-vsg": cmd_pretrain_vsg,
            "train-prior": cmd_train_prior, "synthesize": cmd_synthesize, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FileNotFoundError, ValueError, IndexError, KeyError, OSError) as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
