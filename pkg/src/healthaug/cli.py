"""Command-line entry point: ``healthaug <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error. Each run prints its
resolved configuration (seed included) as one JSON line before working.
Settings resolve as flags > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _add_config(p):
    p.add_argument("--config", type=Path, help="JSON file of default flag values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="healthaug", description="Health-acoustic augmentation study toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("augment", help="apply an augmentation chain to a WAV file")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--chain", type=Path, help="chain config (default: best two-step chain)")
    p.add_argument("--spec-out", type=Path, help="also write the (SpecAugmented) log-mel dump here")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("features", help="log-mel spectrogram of a WAV file")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="binary dump")
    p.add_argument("--csv", type=Path, help="optional CSV export")
    p.add_argument("--n-mels", type=int)

    p = sub.add_parser("train", help="contrastive training of the reference encoder")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--chain", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    _add_config(p)

    p = sub.add_parser("embed", help="embed manifest clips with a checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--splits", default="probe_train,probe_eval")
    p.add_argument("--sliding", action="store_true", help="crop/pad to --clip-len and mean-pool windows")
    p.add_argument("--clip-len", type=float, default=10.0)
    p.add_argument("--window", type=float, default=2.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("probe", help="linear-probe embeddings against manifest labels")
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True, help="clip manifest TSV")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k-folds", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("grid", help="run one phase of the augmentation study")
    p.add_argument("--corpus", type=Path, required=True, help="clip manifest TSV")
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--allow-repeat", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    _add_config(p)

    p = sub.add_parser("report", help="heatmap CSV from a study manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--phase", type=int, default=2)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    return parser


DEFAULTS = {
    "seed": 0,
    "steps": 5000,
    "batch_size": 32,
    "checkpoint_every": 250,
    "learning_rate": 1.6e-3,
    "temperature": 0.1,
    "k_folds": 5,
    "workers": 1,
    "n_mels": 80,
}
GRID_DEFAULTS = {"steps": 200, "batch_size": 16, "checkpoint_every": 50}


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.command == "grid":
        cfg.update(GRID_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            file_cfg = json.loads(config_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {config_path}: {exc}") from exc
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "verbose"):
            cfg[key] = value
    wanted = set(vars(args)) - {"config", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items() if k in wanted}


# --------------------------------------------------------------------------
# Subcommands


def _chain(path):
    from .augment import BEST_CHAIN, load_chain
    return load_chain(path) if path else BEST_CHAIN


def cmd_augment(cfg):
    from .audio_io import load_wav, save_wav
    from .augment import apply_spec
    from .features import LogMelSpectrogram, save_spectrogram

    chain = _chain(cfg.get("chain"))
    rng = np.random.default_rng(cfg["seed"])
    w = load_wav(cfg["input"])
    for spec in chain.steps:
        if spec.domain == "waveform":
            w = apply_spec(spec, w, rng)
    save_wav(w, cfg["out"])
    if cfg.get("spec_out"):
        s = LogMelSpectrogram()(w)
        if chain.steps[-1].domain == "spectrogram":
            s = apply_spec(chain.steps[-1], s, rng)
        save_spectrogram(s, cfg["spec_out"])


def cmd_features(cfg):
    from .audio_io import load_wav
    from .features import log_mel, save_spectrogram, save_spectrogram_csv

    s = log_mel(load_wav(cfg["input"]), n_mels=cfg["n_mels"])
    save_spectrogram(s, cfg["out"])
    if cfg.get("csv"):
        save_spectrogram_csv(s, cfg["csv"])
    print(f"{s.n_mel_bins} mel bins x {s.n_frames} frames")


def _load_split(manifest_path, splits):
    from .experiments import Corpus

    corpus = Corpus.from_manifest(manifest_path)
    corpus.check_files()
    entries = [e for e in corpus.entries if e.split in splits]
    return corpus, entries


def cmd_train(cfg):
    from .contrastive import TrainConfig, save_checkpoint, select_checkpoint_ema, train

    corpus, entries = _load_split(cfg["manifest"], {"train"})
    if not entries:
        raise ValueError("manifest has no 'train' clips")
    clips = [e.load(corpus.root) for e in entries]
    out = Path(cfg["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], steps=cfg["steps"],
                     checkpoint_every=min(cfg["checkpoint_every"], cfg["steps"]),
                     temperature=cfg["temperature"], seed=cfg["seed"])
    ckpts = train(clips, _chain(cfg.get("chain")), None, tc, log_path=out / "train_log.csv",
                  checkpoint_dir=out / "checkpoints")
    best_step = select_checkpoint_ema([(c.step, c.val_loss) for c in ckpts], tc.ema_weight, "min")
    best = next(c for c in ckpts if c.step == best_step)
    save_checkpoint(best, out / "best.bin")
    print(f"selected checkpoint step {best_step} (val loss {best.val_loss:.4f})")


def cmd_embed(cfg):
    from .audio_io import crop_or_pad, sample_random_clip
    from .contrastive import embed_batch, load_checkpoint
    from .evalkit import EmbeddingMatrix, embed_clip_sliding, export_embeddings

    splits = {s.strip() for s in cfg["splits"].split(",") if s.strip()}
    corpus, entries = _load_split(cfg["manifest"], splits)
    encoder = load_checkpoint(cfg["checkpoint"]).encoder()
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for e in entries:
        w = e.load(corpus.root)
        if cfg["sliding"]:
            rows.append(embed_clip_sliding(crop_or_pad(w, cfg["clip_len"]), encoder, cfg["window"], cfg["step"]))
        else:
            if w.duration_s > cfg["window"]:
                w = sample_random_clip(w, cfg["window"], rng)
            elif w.duration_s < cfg["window"]:
                w = crop_or_pad(w, cfg["window"])
            rows.append(embed_batch(encoder, [w])[0])
    if not rows:
        raise ValueError(f"no clips in splits {sorted(splits)}")
    export_embeddings(EmbeddingMatrix(tuple(e.clip_id for e in entries), np.array(rows)), cfg["out"])


def cmd_probe(cfg):
    from .audio_io import read_manifest
    from .evalkit import evaluate_tasks, import_embeddings, write_report

    emb = import_embeddings(cfg["embeddings"])
    entries, tasks = read_manifest(cfg["labels"])
    report = evaluate_tasks(emb, entries, tasks, k_folds=cfg["k_folds"], seed=cfg["seed"])
    write_report(report, cfg["out"])
    for t in report.tasks:
        print(f"{t.task}\t{t.auroc:.4f}\t[{t.ci_low:.4f}, {t.ci_high:.4f}]")
    if report.tasks:
        print(f"composite\t{report.composite:.4f}")


def cmd_grid(cfg):
    from .experiments import Corpus, DeskEvaluator, ExperimentManifest, export_heatmap, ranking, run_phase

    corpus = Corpus.from_manifest(cfg["corpus"])
    workdir = Path(cfg["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / "experiments.tsv"
    if path.exists():
        manifest = ExperimentManifest.load(path)
        if manifest.top_seed != cfg["seed"]:
            raise ValueError(f"{path} was created with seed {manifest.top_seed}, not {cfg['seed']}")
    else:
        manifest = ExperimentManifest(cfg["seed"], path=path)
    evaluator = DeskEvaluator({"steps": cfg["steps"], "batch_size": cfg["batch_size"],
                               "checkpoint_every": min(cfg["checkpoint_every"], cfg["steps"])})
    run_phase(manifest, corpus, cfg["phase"], evaluator, workdir / "results", cfg["workers"],
              cfg["allow_repeat"])
    manifest.save(path)
    for e in ranking(manifest, cfg["phase"])[:10]:
        print(f"{e.score:.4f}\t{e.id}")
    if cfg["phase"] == 2:
        export_heatmap(manifest, workdir / "heatmap.csv")


def cmd_report(cfg):
    from .experiments import ExperimentManifest, export_heatmap

    hm = export_heatmap(ExperimentManifest.load(cfg["manifest"]), cfg["out"], cfg["phase"])
    print(hm.to_csv(), end="")


def cmd_synth(cfg):
    from .synth import synth_corpus

    entries = synth_corpus(cfg["classes"], cfg["per_class"], cfg["out"], cfg["seed"])
    print(f"wrote {len(entries)} clips and {Path(cfg['out']) / 'manifest.tsv'}")


COMMANDS = {
    "augment": cmd_augment,
    "features": cmd_features,
    "train": cmd_train,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "grid": cmd_grid,
    "report": cmd_report,
    "synth": cmd_synth,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="" if str(exc).endswith("\n") else "\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        print("config: " + json.dumps({"command": args.command, **cfg}, sort_keys=True), flush=True)
        COMMANDS[args.command](cfg)
    except (ValueError, KeyError, OSError) as exc:
        print(f"healthaug {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
