"""Command line: ``rmelnet {features,train,sample,plot}``.

Exit codes: 0 success, 2 input or configuration error, 3 every sampled
candidate failed reranking (the report is still written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .features import (AudioConfig, GridFormatError, NormStats, compute_norm_stats,
                       denormalize, downsample_tier1, extract_logmel, frame_count, interpolate_time,
                       load_grid, load_wav, normalize, save_grid)
from .frontend import CheckpointError, FrontendConfig, FrontendModel, load_model
from .plotting import attention_image, grid_image, render_sample_figure, write_pgm
from .reranker import rank
from .sampler import SamplerConfig, generate
from .text import Vocabulary, encode, load_transcripts, mix, save_transcripts, utterance_from_text
from .trainer import Example, TrainConfig, Trainer, fit

log = logging.getLogger("rmelnet")

EXIT_OK, EXIT_INPUT, EXIT_ALL_FAILED = 0, 2, 3


class InputError(Exception):
    """Bad input or configuration; reported on stderr with exit code 2."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, seeds=None, inputs=()) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds) if seeds is not None else None,
        "inputs": {str(p): _sha256(p) for p in sorted(map(str, inputs))},
        "tool_version": __version__,
    }
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _threads() -> int:
    env = os.environ.get("RMELNET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"RMELNET_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# --- features ------------------------------------------------------------------

def cmd_features(args) -> int:
    wav_dir, out = Path(args.wav_dir), Path(args.out)
    wavs = sorted(wav_dir.glob("*.wav")) if wav_dir.is_dir() else []
    if not wavs:
        raise InputError("no input files")
    try:
        utts = {u.id: u for u in load_transcripts(args.transcripts)}
    except OSError as exc:
        raise InputError(f"cannot read transcripts: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    cfg = AudioConfig()

    entries, tier1, valid, errors = [], [], [], []
    for wav in wavs:
        uid = wav.stem
        try:
            if uid not in utts:
                raise ValueError(f"no transcript with id {uid!r}")
            samples = load_wav(wav, cfg.sample_rate)
            full = extract_logmel(samples, cfg)
        except ValueError as exc:
            errors.append({"file": str(wav), "error": str(exc)})
            continue
        low = downsample_tier1(full)
        n_full = min(frame_count(len(samples), cfg), cfg.target_frames)
        n_low = math.ceil(n_full / 4)
        save_grid(out / f"{uid}.full.rmg", full)
        save_grid(out / f"{uid}.tier1.rmg", low)
        tier1.append(low)
        valid.append(n_low)
        entries.append({"id": uid, "full": f"{uid}.full.rmg", "tier1": f"{uid}.tier1.rmg",
                        "frames": n_full, "tier1_frames": n_low})

    summary = {"processed": len(entries), "failed": len(errors), "errors": errors}
    if entries:
        stats = compute_norm_stats(tier1, valid)
        stats_path = Path(args.stats_out) if args.stats_out else out / "stats.json"
        stats.save(stats_path)
        kept = [utts[e["id"]] for e in entries]
        save_transcripts(out / "transcripts.jsonl", kept)
        Vocabulary.from_utterances(kept).save(out / "vocab.json")
        (out / "index.json").write_text(json.dumps({"audio": _audio_dict(cfg), "utterances": entries}, indent=1))
        summary["stats"] = str(stats_path)
    write_manifest(out, "features extract", {"audio": _audio_dict(cfg)}, inputs=[*wavs, args.transcripts])
    print(json.dumps(summary))
    for e in errors:
        print(f"error: {e['file']}: {e['error']}", file=sys.stderr)
    return EXIT_INPUT if errors else EXIT_OK


def _audio_dict(cfg: AudioConfig) -> dict:
    return asdict(cfg)


# --- train ---------------------------------------------------------------------------

def _load_training_set(features: Path, stats: NormStats):
    try:
        index = json.loads((features / "index.json").read_text())
        utts = {u.id: u for u in load_transcripts(features / "transcripts.jsonl")}
        vocab = Vocabulary.load(features / "vocab.json")
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{features}: not a features directory ({exc})") from None
    data = []
    for e in index["utterances"]:
        grid = load_grid(features / e["tier1"])
        if grid.normalized:
            raise InputError(f"{e['tier1']}: expected unnormalized grids in the features directory")
        if grid.bins != stats.n_mels:
            raise InputError(f"{e['tier1']}: grid has {grid.bins} bins but stats cover {stats.n_mels}")
        data.append(Example(normalize(grid, stats), utts[e["id"]], e["tier1_frames"]))
    return data, vocab


def cmd_train(args) -> int:
    stats_path = Path(args.stats)
    if not stats_path.is_file():
        raise InputError(f"stats file not found: {stats_path}")
    try:
        stats = NormStats.load(stats_path)
        config = json.loads(Path(args.config).read_text()) if args.config else {}
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read configuration: {exc}") from None
    data, vocab = _load_training_set(Path(args.features), stats)
    if not data:
        raise InputError("features directory holds no utterances")

    tc = dict(config.get("train", {}))
    for key, val in (("sub_batch", args.sub_batch), ("accum", args.accum), ("steps", args.steps),
                     ("activation_bits", args.precision), ("seed", args.seed)):
        if val is not None:
            tc[key] = val
    tc.setdefault("effective_batch", tc.get("sub_batch", 8) * tc.get("accum", 2))
    if args.sub_batch is not None or args.accum is not None:
        tc["effective_batch"] = tc.get("sub_batch", 8) * tc.get("accum", 2)
    try:
        train_cfg = TrainConfig(**tc)
        frames, bins = data[0].grid.shape
        mc = {"frames": frames, "bins": bins, **config.get("model", {})}
        build = FrontendConfig.desk if mc.pop("preset", None) == "desk" else FrontendConfig
        model_cfg = build(len(vocab), **mc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None
    if model_cfg.bins != stats.n_mels or model_cfg.n_symbols != len(vocab):
        raise InputError(f"model expects {model_cfg.bins} bins / {model_cfg.n_symbols} symbols; "
                         f"data has {stats.n_mels} bins / {len(vocab)} symbols")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    if args.resume:
        trainer = Trainer.resume(args.resume, train_cfg)
    else:
        trainer = Trainer(FrontendModel(model_cfg), train_cfg)
    meta = {"vocab": vocab.to_json(), "stats": stats.to_json()}
    log_path = out / "log.jsonl"
    if not args.resume:
        log_path.write_text("")
    history = fit(data, vocab, trainer, out, meta, log_path)
    write_manifest(out, "train", {"model": asdict(model_cfg), "train": asdict(train_cfg),
                                  "effective_batch": train_cfg.sub_batch * train_cfg.accum},
                   seeds=[train_cfg.seed],
                   inputs=[stats_path, *( [args.config] if args.config else [])])
    last = next((h for h in reversed(history) if not h["skipped"]), None)
    print(json.dumps({"steps": trainer.step_count, "final_loss": last and last["loss"],
                      "checkpoint": str(out / "last.rmck")}))
    return EXIT_OK


# --- sample ------------------------------------------------------------------------------

def parse_seeds(spec: str) -> list[int]:
    seeds = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise InputError(f"no seeds in {spec!r}")
    return seeds


def cmd_sample(args) -> int:
    try:
        model, header, _ = load_model(args.ckpt)
    except (OSError, CheckpointError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load checkpoint: {exc}") from None
    meta = header.get("meta", {})
    if "vocab" not in meta or "stats" not in meta:
        raise InputError("checkpoint carries no vocabulary/statistics")
    vocab, stats = Vocabulary.from_json(meta["vocab"]), NormStats.from_json(meta["stats"])
    try:
        seeds = parse_seeds(args.seeds)
        utt = utterance_from_text(args.text, args.phones)
        prime_utt = utterance_from_text(args.prime_text) if args.prime_text else None
        prime_grid = None
        if args.prime:
            prime_grid = load_grid(args.prime)
            if not prime_grid.normalized:
                prime_grid = normalize(prime_grid, stats)
        SamplerConfig(Q=args.Q, R=args.R)
        # both renderings must encode so per-seed mixing cannot fail later
        for u in (utt, prime_utt):
            for p in (0.0, 1.0):
                if u is not None:
                    encode(mix(u, p, np.random.default_rng(0), vocab), vocab)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(str(exc)) from None
    model.eval()
    max_frames = args.max_frames or model.cfg.frames

    def run(seed: int):
        rng = np.random.default_rng(seed)
        ids = encode(mix(utt, args.p_swap, rng, vocab), vocab)
        prime_with = None
        if prime_grid is not None or prime_utt is not None:
            pids = encode(mix(prime_utt, args.p_swap, rng, vocab), vocab) if prime_utt else []
            prime_with = (prime_grid, pids)
        cfg = SamplerConfig(Q=args.Q, R=args.R, max_frames=max_frames,
                            termination_patience=args.patience, seed=seed)
        return generate(model, ids, cfg, stats, prime_with)

    torch.set_num_threads(1)
    workers = min(len(seeds), _threads())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (seed, r) in enumerate(zip(seeds, results)):
        name = f"sample_{i:02d}_seed{seed}"
        save_grid(out / f"{name}.rmg", r.grid)
        write_pgm(out / f"{name}.attn.pgm", attention_image(r.attention.weights.numpy()))
        names.append(name)
    report = rank(results)
    payload = report.to_json()
    for c in payload["candidates"]:
        c["file"] = names[c["index"]] + ".rmg"
        c["terminated_by"] = results[c["index"]].terminated_by
    Path(out, "rank_report.json").write_text(json.dumps(payload, indent=1) + "\n")

    if report.chosen is not None:
        chosen = results[report.chosen]
        vocoder = interpolate_time(denormalize(chosen.grid, stats))
        save_grid(out / "chosen.vocoder.rmg", vocoder)
        render_sample_figure(out / "chosen.png", chosen.grid.values, chosen.attention.weights.numpy(),
                             title=f"seed {chosen.seed}")
    inputs = [args.ckpt] + ([args.prime] if args.prime else [])
    write_manifest(out, "sample", {"text": args.text, "phones": args.phones, "prime_text": args.prime_text,
                                   "Q": args.Q, "R": args.R, "p_swap": args.p_swap,
                                   "max_frames": max_frames, "patience": args.patience},
                   seeds=seeds, inputs=inputs)
    print(json.dumps({"status": report.status, "chosen": report.chosen,
                      "chosen_seed": None if report.chosen is None else seeds[report.chosen]}))
    if report.chosen is None:
        print("error: every candidate failed attention checks", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


# --- plot ---------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    try:
        grid = load_grid(args.inp)
    except GridFormatError as exc:
        raise InputError(f"{args.inp}: corrupt RMG1 file: {exc}") from None
    except (OSError, ValueError) as exc:
        raise InputError(f"{args.inp}: {exc}") from None
    image, (vmin, vmax) = grid_image(grid.values, args.min, args.max)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, image)
    if args.png:
        render_sample_figure(args.png, grid.values)
    write_manifest(out.parent, "plot", {"out": out.name, "min": vmin, "max": vmax,
                                        "bounds": "explicit" if args.min is not None and args.max is not None
                                        else "data"}, inputs=[args.inp])
    print(json.dumps({"width": image.shape[1], "height": image.shape[0], "min": vmin, "max": vmax}))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmelnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    feat = sub.add_parser("features", help="audio feature extraction")
    fsub = feat.add_subparsers(dest="action", required=True)
    ex = fsub.add_parser("extract", help="WAV -> full and tier1 grids plus statistics")
    ex.add_argument("--wav-dir", required=True)
    ex.add_argument("--transcripts", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--stats-out")
    ex.set_defaults(func=cmd_features)

    tr = sub.add_parser("train", help="teacher-forced training")
    tr.add_argument("--features", required=True)
    tr.add_argument("--stats", required=True)
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--precision", type=int, choices=(16, 32))
    tr.add_argument("--sub-batch", type=int)
    tr.add_argument("--accum", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume")
    tr.set_defaults(func=cmd_train)

    sa = sub.add_parser("sample", help="multi-seed sampling with reranking")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--text", required=True)
    sa.add_argument("--phones")
    sa.add_argument("--prime")
    sa.add_argument("--prime-text")
    sa.add_argument("--seeds", default="1")
    sa.add_argument("--Q", type=int, default=100)
    sa.add_argument("--R", type=float, default=0.33)
    sa.add_argument("--p-swap", type=float, default=0.5)
    sa.add_argument("--max-frames", type=int)
    sa.add_argument("--patience", type=int, default=3)
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=cmd_sample)

    pl = sub.add_parser("plot", help="render an RMG1 grid as PGM")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--min", type=float)
    pl.add_argument("--max", type=float)
    pl.add_argument("--png")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
