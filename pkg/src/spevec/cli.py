"""Command-line interface: ``spevec {features,trials,train,embed,score,eval}``.

Exit codes: 0 on success, 1 when some items failed or a run aborted, 2 on
usage or configuration errors (reported before any compute starts).
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import formats
from .features import (N_MELS, Utterance, WavFormatError, compute_fbank, generate_synthetic_speakers,
                       load_wav, sliding_mean_normalize)
from .numerics import NonFiniteError, ShapeError
from .pipeline import (ConfigError, TrainConfig, _parse_value, evaluate_scores, extract_embedding, load_checkpoint,
                       make_trials, save_checkpoint, score_trials, train)

log = logging.getLogger("spevec")

MANIFEST = "manifest.txt"
METRICS_LOG = "metrics.log"
METRICS_COLUMNS = ("epoch", "lr", "loss", "train_acc", "R")
RUN_KEYS = ("feature_dir", "output_dir", "trial_file")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict[str, str], TrainConfig]:
    """Parse ``key=value`` lines into run paths and a TrainConfig.

    Blank lines and ``#`` comments are ignored; unknown or duplicate keys and
    malformed lines raise ConfigError naming the line number.
    """
    run: dict[str, str] = {}
    train_pairs: dict[str, str] = {}
    lines: dict[str, int] = {}
    known = set(TrainConfig().to_pairs())
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected key=value, got '{raw.strip()}'")
        if key in lines:
            raise ConfigError(f"{source}:{n}: duplicate key '{key}' (first on line {lines[key]})")
        lines[key] = n
        if key in RUN_KEYS:
            run[key] = value
        elif key in known:
            train_pairs[key] = value
        else:
            raise ConfigError(f"{source}:{n}: unknown key '{key}'")
    for key in ("feature_dir", "output_dir"):
        if key not in run:
            raise ConfigError(f"{source}: missing required key '{key}'")
    defaults = TrainConfig()
    for key, value in train_pairs.items():
        try:
            _parse_value(key, value, getattr(defaults, key))
        except ConfigError as e:
            raise ConfigError(f"{source}:{lines[key]}: {e}") from None
    try:
        return run, TrainConfig.from_pairs(train_pairs)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def config_text(run: dict[str, str], cfg: TrainConfig) -> str:
    pairs = {**run, **cfg.to_pairs()}
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


# ---------------------------------------------------------------------------
# helpers


def load_feature_dir(feature_dir) -> list[Utterance]:
    manifest = Path(feature_dir) / MANIFEST
    if not manifest.is_file():
        raise UsageError(f"no {MANIFEST} in feature directory {feature_dir}")
    return [Utterance(uid, spk, formats.read_fbnk(path))
            for uid, path, spk in formats.read_manifest(manifest)]


def _wav_entry(wav_dir: Path, path: Path) -> tuple[str, str]:
    rel = path.relative_to(wav_dir).with_suffix("")
    if any(c.isspace() for c in str(rel)):
        raise UsageError(f"{path}: whitespace in file names is not supported")
    speaker = rel.parts[0] if len(rel.parts) > 1 else rel.name.split("_")[0]
    return rel.as_posix(), speaker


def format_metrics_row(stats) -> str:
    r = "-" if stats.R is None else repr(float(stats.R))
    return f"{stats.epoch} {stats.lr!r} {stats.loss!r} {stats.accuracy!r} {r}\n"


def read_metrics_log(path) -> list[dict[str, str]]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    return [dict(zip(METRICS_COLUMNS, l.split())) for l in lines]


# ---------------------------------------------------------------------------
# commands


def cmd_features(args) -> int:
    out_dir = Path(args.out_dir)
    if args.synthetic is None and args.wav_dir is None:
        raise UsageError("give --wav-dir or --synthetic N_SPK UTTS SEED")
    if args.wav_dir is not None and not Path(args.wav_dir).is_dir():
        raise UsageError(f"wav directory {args.wav_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)

    entries, written, failures = [], 0, 0

    def emit(uid: str, speaker: str, make) -> None:
        nonlocal written
        rel = f"{uid}.fbnk"
        target = out_dir / rel
        if args.force or not target.exists():
            formats.write_fbnk(target, make())
            written += 1
        entries.append((uid, rel, speaker))

    if args.synthetic is not None:
        n_spk, n_utt, seed = args.synthetic
        for u in generate_synthetic_speakers(n_spk, n_utt, seed, first_utt=args.first_utt):
            emit(u.utt_id, u.speaker, lambda u=u: u.features)
    else:
        wav_dir = Path(args.wav_dir)
        for path in sorted(wav_dir.rglob("*.wav")):
            uid, speaker = _wav_entry(wav_dir, path)
            try:
                feats = sliding_mean_normalize(compute_fbank(load_wav(path)))
            except (WavFormatError, ValueError, OSError) as e:
                log.error("%s: %s", path, e)
                failures += 1
                continue
            emit(uid, speaker, lambda f=feats: f)

    formats.write_manifest(out_dir / MANIFEST, entries)
    print(f"features: {len(entries)} utterances, {written} written, {failures} failed")
    return 1 if failures else 0


def cmd_trials(args) -> int:
    utts = load_feature_dir(args.features)
    trials = make_trials(utts)
    formats.write_trials(args.out, trials)
    n_target = sum(t for t, _, _ in trials)
    print(f"trials: {len(trials)} ({n_target} target, {len(trials) - n_target} nontarget)")
    return 0


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    run, cfg = parse_config_text(path.read_text(), str(path))
    feature_dir, out_dir = Path(run["feature_dir"]), Path(run["output_dir"])
    if not (feature_dir / MANIFEST).is_file():
        raise UsageError(f"feature directory {feature_dir} has no {MANIFEST}")
    if "trial_file" in run and not Path(run["trial_file"]).is_file():
        raise UsageError(f"trial file {run['trial_file']} does not exist")
    if out_dir.exists() and not out_dir.is_dir():
        raise UsageError(f"output path {out_dir} is not a directory")
    utts = load_feature_dir(feature_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(run, cfg))

    metrics = out_dir / METRICS_LOG
    if not metrics.exists():
        metrics.write_text("# " + " ".join(METRICS_COLUMNS) + "\n")
    speakers = sorted({u.speaker for u in utts})

    def on_epoch_end(stats, model):
        with metrics.open("a") as fh:
            fh.write(format_metrics_row(stats))
        ckpt = out_dir / f"epoch{stats.epoch:03d}.spck"
        save_checkpoint(ckpt, model, stats.epoch, speakers, run)
        shutil.copyfile(ckpt, out_dir / "final.spck")
        print(f"epoch {stats.epoch} lr {stats.lr:.4g} loss {stats.loss:.6f} "
              f"acc {stats.accuracy:.4f} ({stats.seconds:.1f}s)", flush=True)

    try:
        result = train(utts, cfg, on_epoch_end)
    except NonFiniteError as e:
        print(f"error: training aborted, non-finite value in {e.name}", file=sys.stderr)
        return 1
    print(f"trained {len(result.history)} epochs; checkpoint {out_dir / 'final.spck'}")
    return 0


def cmd_embed(args) -> int:
    try:
        model, manifest = load_checkpoint(args.checkpoint)
    except ShapeError as e:
        raise UsageError(f"architecture mismatch: {e}") from None
    utts = load_feature_dir(args.features)
    rows = int(manifest.get("input_rows", N_MELS))
    embeddings, failures = {}, 0
    for u in utts:
        if u.features.shape[0] != rows:
            raise UsageError(f"architecture mismatch: checkpoint expects ({rows}, T) features, "
                             f"found {u.features.shape} for '{u.utt_id}'")
        try:
            embeddings[u.utt_id] = extract_embedding(model, u.features)
        except ShapeError as e:
            log.error("%s: %s", u.utt_id, e)
            failures += 1
    formats.write_embeddings(args.out, embeddings)
    print(f"embed: {len(embeddings)} vectors of dim {model.embedding_dim}, {failures} failed")
    return 1 if failures else 0


def cmd_score(args) -> int:
    embeddings = formats.read_embeddings(args.embeddings)
    trials = formats.read_trials(args.trials)
    try:
        rows = score_trials(embeddings, trials)
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return 1
    formats.write_scores(args.out, rows)
    print(f"score: {len(rows)} trials")
    return 0


def _labeled(score_path, trial_labels):
    rows = formats.read_scores(score_path)
    scores, labels = [], []
    for e, t, s, lab in rows:
        if lab is None:
            if trial_labels is None:
                raise UsageError(f"{score_path}: unlabeled scores need --trials")
            if (e, t) not in trial_labels:
                raise UsageError(f"{score_path}: trial '{e} {t}' not in the trial list")
            lab = trial_labels[(e, t)]
        scores.append(s)
        labels.append(lab)
    return np.array(scores), np.array(labels, dtype=bool)


def cmd_eval(args) -> int:
    p_targets = args.p_target or [0.01, 0.001]
    trial_labels = None
    if args.trials:
        trial_labels = {(e, t): lab for lab, e, t in formats.read_trials(args.trials)}
    stems = [Path(p).stem for p in args.scores]
    results = []
    for path in args.scores:
        scores, labels = _labeled(path, trial_labels)
        try:
            name = Path(path).stem if stems.count(Path(path).stem) == 1 else str(path)
            results.append((name, evaluate_scores(scores, labels, p_targets)))
        except ValueError as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            return 1

    header = f"{'system':<20} {'EER(%)':>8}" + "".join(f" {'minDCF@' + format(p, 'g'):>14}"
                                                       for p in p_targets)
    print(header)
    for name, res in results:
        print(f"{name:<20} {100 * res['eer']:>8.2f}"
              + "".join(f" {res[f'mindcf@{p:g}']:>14.4f}" for p in p_targets))
    print()
    for name, res in results:
        prefix = "" if len(results) == 1 else f"{name}."
        print(f"{prefix}eer={res['eer']:.4f}")
        print(f"{prefix}eer_threshold={res['eer_threshold']:.6f}")
        for p in p_targets:
            print(f"{prefix}mindcf@{p:g}={res[f'mindcf@{p:g}']:.4f}")
            print(f"{prefix}mindcf_threshold@{p:g}={res[f'mindcf_threshold@{p:g}']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _p_target(text: str) -> float:
    try:
        p = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: '{text}'") from None
    if not 0.0 < p < 1.0:
        raise argparse.ArgumentTypeError(f"p_target must lie in (0, 1), got {text}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spevec",
                                     description="Speaker embedding training and scoring.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="compute log-mel features from WAVs or a synthetic set")
    p.add_argument("--wav-dir", help="directory searched recursively for .wav files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--synthetic", nargs=3, type=int, metavar=("N_SPK", "UTTS", "SEED"))
    p.add_argument("--first-utt", type=int, default=0,
                   help="index of the first synthetic utterance per speaker (held-out sets)")
    p.add_argument("--force", action="store_true", help="rewrite existing feature files")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("trials", help="write all same/different-speaker pairs of a feature set")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract one embedding per utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature directory with a manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="report EER and minDCF for one or more score files")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--trials", help="trial list supplying labels for unlabeled scores")
    p.add_argument("--p-target", type=_p_target, action="append",
                   help="target prior for minDCF (repeatable; default 0.01 and 0.001)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, formats.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
