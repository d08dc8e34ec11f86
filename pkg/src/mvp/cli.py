"""``mvp`` command-line entry point.

Exit codes: 0 success, 2 bad configuration or input, 3 I/O failure,
4 numeric abort. Failures print one line ``mvp: error: <category>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import build_run_config, keys_help, load_config, run_config_text
from .data import (
    MANIFEST_KEYS,
    Trial,
    au_csv_text,
    load_corpus,
    manifest_line,
    read_manifest,
    read_signal_file,
    signal_csv,
)
from .dsp import RawSignal, preprocess_signal
from .errors import ConfigError, IOFailure, MVPError, NumericError
from .util import atomic_write

log = logging.getLogger("mvp")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvp", description="Video + physiological emotion recognition pipeline.")
    p.add_argument("--version", action="version", version=f"mvp {__version__}")
    p.add_argument("--workdir", default=".", help="directory all relative paths resolve against")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    pre = sub.add_parser("preprocess", help="resample, filter and trim raw physiological signals")
    pre.add_argument("--in", dest="in_dir", required=True, help="directory of raw signal files or a corpus with manifest.jsonl")
    pre.add_argument("--out", dest="out_dir", required=True)
    pre.add_argument("--dataset", choices=("amigos", "deap", "synthetic"), required=True)

    syn = sub.add_parser("synth", help="write a synthetic corpus")
    syn.add_argument("--subjects", type=int, default=20)
    syn.add_argument("--trials", type=int, default=16, help="trials per subject")
    syn.add_argument("--seed", type=int, default=7)
    syn.add_argument("--out", dest="out_dir", default="synthetic")

    fmt = argparse.RawDescriptionHelpFormatter
    for name, text in (("train", "subject-independent cross-validated training"), ("ablate", "cross-validate one modality mode")):
        sp = sub.add_parser(name, help=text, epilog=keys_help(), formatter_class=fmt)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--corpus", help="corpus manifest (sets data.corpus)")
        sp.add_argument("--out", dest="out_dir", help="output directory (sets data.out)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "ablate":
            sp.add_argument("--mode", choices=("video_only", "physio_only", "fused"), required=True)

    ev = sub.add_parser("eval", help="score a checkpoint on a corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", dest="out_file", help="also write the scores JSON here")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny network")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--coords", type=int, default=20, help="sampled coordinates per parameter")
    gc.add_argument("--tol", type=float, default=1e-3)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic

    trials = generate_synthetic(args.subjects, args.trials, args.seed)
    write_corpus(Path(args.out_dir), trials)
    print(f"wrote {len(trials)} trials to {args.out_dir}")
    return 0


def write_corpus(out: Path, trials: Sequence[Trial], cardiac: str = "ECG") -> None:
    lines = []
    for t in trials:
        au_rel = f"au/{t.trial_id}.csv"
        ph_rel = f"physio/{t.trial_id}.csv"
        atomic_write(out / au_rel, au_csv_text(t.video_feats))
        sig = [RawSignal(t.physio[:, 0], 128.0, cardiac), RawSignal(t.physio[:, 1], 128.0, "EDA")]
        atomic_write(out / ph_rel, signal_csv(sig))
        rec = {
            "subject_id": t.subject_id,
            "trial_id": t.trial_id,
            "au_csv_path": au_rel,
            "physio_path": ph_rel,
            "valence_raw": t.valence_raw,
            "arousal_raw": t.arousal_raw,
            "dataset_tag": t.dataset_tag,
        }
        lines.append(manifest_line(rec))
    atomic_write(out / "manifest.jsonl", "\n".join(lines) + "\n")


def cmd_preprocess(args) -> int:
    src, out = Path(args.in_dir), Path(args.out_dir)
    if not src.is_dir():
        raise IOFailure(f"input directory {src} does not exist")
    trace = {}
    manifest = src / "manifest.jsonl"
    if manifest.exists():
        lines = []
        for rec in read_manifest(manifest):
            signals = [preprocess_signal(s, args.dataset) for s in read_signal_file(src / rec["physio_path"])]
            ph_rel = f"physio/{rec['trial_id']}.csv"
            au_rel = f"au/{rec['trial_id']}.csv"
            atomic_write(out / ph_rel, signal_csv(signals))
            atomic_write(out / au_rel, (src / rec["au_csv_path"]).read_bytes())
            trace[rec["trial_id"]] = {s.channel: list(s.trace) for s in signals}
            lines.append(manifest_line({**rec, "physio_path": ph_rel, "au_csv_path": au_rel, "dataset_tag": args.dataset}))
        atomic_write(out / "manifest.jsonl", "\n".join(lines) + "\n")
    else:
        files = sorted(p for p in src.iterdir() if p.suffix in (".csv", ".bin"))
        if not files:
            raise IOFailure(f"no .csv or .bin signal files in {src}")
        for f in files:
            signals = [preprocess_signal(s, args.dataset) for s in read_signal_file(f)]
            atomic_write(out / f"{f.stem}.csv", signal_csv(signals))
            trace[f.name] = {s.channel: list(s.trace) for s in signals}
    atomic_write(out / "trace.json", json.dumps(trace, indent=2, sort_keys=True) + "\n")
    print(f"preprocessed {len(trace)} item(s) into {out}")
    return 0


def _run_config(args, extra: Sequence[str] = ()):
    values = load_config(args.config, list(args.overrides) + list(extra))
    if args.corpus:
        values["data.corpus"] = args.corpus
    if args.out_dir:
        values["data.out"] = args.out_dir
    if not values.get("data.corpus"):
        raise ConfigError("missing key 'data.corpus' (pass --corpus or set it in the config)")
    return values, build_run_config(values)


def _load(path) -> list[Trial]:
    counters: Counter = Counter()
    trials = load_corpus(path, counters)
    if counters:
        log.warning("ingestion counters: %s", dict(counters))
    return trials


def cmd_train(args, mode: Optional[str] = None) -> int:
    from .train import cross_validate

    values, cfg = _run_config(args, [f"run.mode={mode}"] if mode else [])
    trials = _load(values["data.corpus"])
    out = Path(values.get("data.out") or "runs")
    atomic_write(out / "config.txt", run_config_text(cfg))
    summary = cross_validate(trials, cfg, out_dir=out)
    sys.stdout.write(summary.to_text())
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, with_corpus_lengths

    params, norm, cfg = load_model(args.checkpoint)
    trials = [norm.transform(t) for t in _load(args.corpus)]
    cfg = with_corpus_lengths(cfg, trials)
    scores = evaluate(trials, params, cfg)
    text = json.dumps(scores, indent=2, sort_keys=True) + "\n"
    if args.out_file:
        atomic_write(args.out_file, text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_mvp, check_ops

    ops = check_ops(args.seed, args.eps)
    net = check_mvp(args.seed, args.eps, args.coords)
    for name, err in ops.items():
        print(f"op {name:<12} max_rel_error={err:.3e}")
    worst_param = max(net, key=net.get)
    print(f"network params={len(net)} worst={worst_param} max_rel_error={net[worst_param]:.3e}")
    worst = max(max(ops.values()), net[worst_param])
    print(f"max_rel_error={worst:.3e}")
    if worst > args.tol:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} > {args.tol:g}")
    return 0


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    old = os.getcwd()
    try:
        try:
            os.chdir(args.workdir)
        except OSError as exc:
            raise IOFailure(f"cannot enter workdir {args.workdir}: {exc.strerror}") from exc
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "preprocess":
            return cmd_preprocess(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "ablate":
            return cmd_train(args, mode=args.mode)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except MVPError as exc:
        print(f"mvp: error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mvp: error: io: {exc}", file=sys.stderr)
        return 3
    finally:
        os.chdir(old)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
