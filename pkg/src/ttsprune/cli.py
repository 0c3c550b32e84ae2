"""ttsprune command line.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import pitch, stats, sweep, toy
from .params import load_checkpoint, save_checkpoint, ParamStore
from .pruner import apply_mask, save_mask, sparsity_report, ump
from .wav import read_wav

log = logging.getLogger("ttsprune")

OUT_ENV = "TTSPRUNE_OUT"


class UsageError(Exception):
    pass


def default_out_dir():
    return os.environ.get(OUT_ENV, sweep.DEFAULT_OUT_DIR)


def _mask_path(out: Path) -> Path:
    return out.with_name(out.name + ".mask")


# --------------------------------------------------------------------------
# prune
def cmd_prune(args):
    if not 0 <= args.sparsity < 1:
        raise UsageError(f"sparsity must be in [0, 1), got {args.sparsity}")
    store = load_checkpoint(args.checkpoint)
    if args.exclude:
        missing = set(args.exclude) - set(store.names())
        if missing:
            raise UsageError(f"--exclude names not in checkpoint: {sorted(missing)}")
        store = ParamStore(store.entries, store.prunable - set(args.exclude))
    mask = ump(store, args.sparsity)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(apply_mask(store, mask), out)
    mask_out = Path(args.mask_out) if args.mask_out else _mask_path(out)
    save_mask(mask, mask_out)
    print(json.dumps(sparsity_report(mask).to_json(), sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# sweep
def _parse_value(text, default):
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")
    if isinstance(default, list):
        item = type(default[0]) if default else str
        return [item(v) for v in text.split(",") if v]
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _grid_value(text):
    if text in sweep.NAMED_GRIDS:
        return text
    return [float(v) for v in text.split(",") if v]


def _add_sweep_overrides(p):
    defaults = sweep.SweepConfig()
    for f in dataclasses.fields(sweep.SweepConfig):
        default = getattr(defaults, f.name)
        if f.name == "grid":
            conv = _grid_value
            hint = "acoustic | vocoder | comma-separated list"
        else:
            if default is None:
                default = {"out_dir": "", "n_updates": 0, "parp_p_start": 0.0}[f.name]

            def conv(text, default=default):
                return _parse_value(text, default)

            hint = f"default {getattr(defaults, f.name)!r}"
        p.add_argument(f"--{f.name}", type=conv, default=argparse.SUPPRESS, metavar="V", help=hint)


def cmd_sweep(args):
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(sweep.SweepConfig) if hasattr(args, f.name)}
    try:
        base = json.loads(Path(args.config).read_text()) if args.config else {}
        if not isinstance(base, dict):
            raise ValueError("config must be a JSON object")
        cfg = sweep.SweepConfig.from_json({**base, **overrides})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad sweep config: {exc}") from None
    out = cfg.out_dir or default_out_dir()
    rows = sweep.run_sweep(cfg, out)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed; results in {Path(out) / 'results.csv'}")
    return 0


# --------------------------------------------------------------------------
# eval-audio
AUDIO_COLUMNS = (
    "filename",
    "sys_duration_s",
    "sys_mean_f0",
    "sys_std_f0",
    "ref_duration_s",
    "ref_mean_f0",
    "ref_std_f0",
    "d_duration_s",
    "d_mean_f0",
    "d_std_f0",
)
SUMMARY_NAME = "MISMATCH"


def _fmt(v):
    return "" if v is None else repr(float(v))


def _diff(a, b):
    return None if a is None or b is None else a - b


def cmd_eval_audio(args):
    sys_dir, ref_dir = Path(args.system_dir), Path(args.reference_dir)
    for d in (sys_dir, ref_dir):
        if not d.is_dir():
            raise UsageError(f"not a directory: {d}")
    sys_names = {p.name for p in sys_dir.glob("*.wav")}
    ref_names = {p.name for p in ref_dir.glob("*.wav")}
    for name in sorted(sys_names ^ ref_names):
        side = "system" if name in sys_names else "reference"
        print(f"warning: {name} only in {side} directory", file=sys.stderr)
    matched = sorted(sys_names & ref_names)

    yin = dict(frame=args.frame, hop=args.hop, fmin=args.fmin, fmax=args.fmax, threshold=args.threshold)
    pairs = []
    for name in matched:
        try:
            s = pitch.analyse(read_wav(sys_dir / name), **yin)
            r = pitch.analyse(read_wav(ref_dir / name), **yin)
        except (OSError, ValueError) as exc:
            print(f"warning: skipping {name}: {exc}", file=sys.stderr)
            continue
        pairs.append((name, s, r))
    if not pairs:
        print("error: no filename-matched readable WAV pairs", file=sys.stderr)
        return 1

    report = pitch.mismatch([s for _, s, _ in pairs], [r for _, _, r in pairs])
    out = Path(args.out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIO_COLUMNS)
        for name, s, r in pairs:
            w.writerow(
                [name]
                + [_fmt(v) for v in (s.duration_s, s.mean_f0, s.std_f0, r.duration_s, r.mean_f0, r.std_f0)]
                + [
                    _fmt(s.duration_s - r.duration_s),
                    _fmt(_diff(s.mean_f0, r.mean_f0)),
                    _fmt(_diff(s.std_f0, r.std_f0)),
                ]
            )
        w.writerow([SUMMARY_NAME] + [""] * 6 + [_fmt(v) for v in (report.d_duration, report.d_mean_f0, report.d_std_f0)])
    print(
        json.dumps(
            {
                "n_pairs": report.n_pairs,
                "n_f0_excluded": report.n_f0_excluded,
                "d_duration_s": report.d_duration,
                "d_mean_f0": report.d_mean_f0,
                "d_std_f0": report.d_std_f0,
            },
            sort_keys=True,
        )
    )
    return 0


# --------------------------------------------------------------------------
# stats
class InputError(ValueError):
    pass


def _rows(path):
    """Non-blank CSV rows with their 1-based line numbers; a non-numeric header line is skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, row) for i, row in enumerate(csv.reader(fh), start=1) if any(c.strip() for c in row)]
    return rows


def _is_int(text):
    try:
        int(text)
        return True
    except ValueError:
        return False


def read_mos(path) -> List[stats.RatingSet]:
    rows = _rows(path)
    if rows and len(rows[0][1]) >= 2 and not _is_int(rows[0][1][1].strip()):
        rows = rows[1:]
    groups = {}
    for line, row in rows:
        if len(row) != 2 or not row[0].strip():
            raise InputError(f"line {line}: expected 'condition,score', got {row}")
        label, score = row[0].strip(), row[1].strip()
        if not _is_int(score) or not 1 <= int(score) <= 5:
            raise InputError(f"line {line}: score must be an integer 1..5, got {score!r}")
        groups.setdefault(label, []).append(int(score))
    return [stats.RatingSet(k, tuple(v)) for k, v in groups.items()]


def read_ab(path):
    rows = _rows(path)
    if rows and len(rows[0][1]) >= 3 and not _is_int(rows[0][1][2].strip()):
        rows = rows[1:]
    out = []
    for line, row in rows:
        if len(row) != 4:
            raise InputError(f"line {line}: expected 'proposal,baseline,wins,n', got {row}")
        a, b, wins, n = (c.strip() for c in row)
        if not (_is_int(wins) and _is_int(n)):
            raise InputError(f"line {line}: wins and n must be integers")
        try:
            outcome = stats.ABOutcome(int(wins), int(n))
        except ValueError as exc:
            raise InputError(f"line {line}: {exc}") from None
        out.append((a, b, outcome))
    if not out:
        raise InputError("no A/B rows")
    return out


def cmd_stats(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "mos":
        try:
            sets = read_mos(args.input_csv)
        except InputError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        if len(sets) < 2:
            raise UsageError(f"mos mode needs at least two conditions, found {len(sets)}")
        matrix = stats.significance_matrix(sets, args.alpha)
        text = matrix.to_text()
        out.with_suffix(".txt").write_text(text, encoding="utf-8")
        summary = matrix.to_json()
        summary["alpha"] = args.alpha
        summary["mean"] = {s.label: sum(s.scores) / len(s.scores) for s in sets}
        out.with_suffix(".json").write_text(json.dumps(summary, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        sys.stdout.write(text)
        return 0

    try:
        rows = read_ab(args.input_csv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    results = []
    for a, b, outcome in rows:
        z = stats.pairwise_z(outcome, args.alpha, two_sided=args.two_sided)
        results.append(
            {"proposal": a, "baseline": b, "wins": outcome.wins, "n": outcome.n, "z": z.z, "p": z.p, "significant": z.significant}
        )
    cols = ("proposal", "baseline", "wins", "n", "z", "p", "significant")
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in results:
            w.writerow([r["proposal"], r["baseline"], r["wins"], r["n"], repr(r["z"]), repr(r["p"]), str(r["significant"]).lower()])
    out.with_suffix(".json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    for r in results:
        flag = stats.SIGNIFICANT if r["significant"] else stats.NOT_SIGNIFICANT
        print(f"{r['proposal']} vs {r['baseline']}: {r['wins']}/{r['n']} z={r['z']:.3f} p={r['p']:.4f} {flag}")
    return 0


# --------------------------------------------------------------------------
# train-toy
def cmd_train_toy(args):
    ds = toy.gen_dataset(args.seed, args.n_pairs, args.K, args.D, (args.min_len, args.max_len), args.r)
    init = toy.init_model(args.K, args.H, args.D, args.r, seed=args.seed, include_embedding=not args.exclude_embedding)
    model, curve = toy.train(init, ds, toy.TrainOptions(args.lr, args.steps, args.batch_size, args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, out)
    print(json.dumps({"initial_loss": toy.dataset_loss(init, ds), "final_loss": toy.dataset_loss(model, ds)}))
    return 0


# --------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser():
    p = _Parser(prog="ttsprune", description="Magnitude pruning schedules, toy sweeps, prosody and listening-test statistics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pr = sub.add_parser("prune", help="globally magnitude-prune a checkpoint")
    pr.add_argument("checkpoint")
    pr.add_argument("sparsity", type=float)
    pr.add_argument("out", help="pruned checkpoint path; the mask goes to OUT.mask")
    pr.add_argument("--mask-out", help="mask path (default OUT.mask)")
    pr.add_argument("--exclude", action="append", default=[], metavar="NAME", help="leave this tensor unpruned")
    pr.set_defaults(func=cmd_prune)

    sw = sub.add_parser("sweep", help="run every (schedule, sparsity, seed) job on the toy task")
    sw.add_argument("config", nargs="?", help="flat JSON config; flags override its keys")
    _add_sweep_overrides(sw)
    sw.set_defaults(func=cmd_sweep)

    ea = sub.add_parser("eval-audio", help="prosody mismatch between filename-matched WAV directories")
    ea.add_argument("system_dir")
    ea.add_argument("reference_dir")
    ea.add_argument("out_csv")
    ea.add_argument("--frame", type=int, default=2048)
    ea.add_argument("--hop", type=int, default=512)
    ea.add_argument("--fmin", type=float, default=65.0)
    ea.add_argument("--fmax", type=float, default=1000.0)
    ea.add_argument("--threshold", type=float, default=0.15)
    ea.set_defaults(func=cmd_eval_audio)

    st = sub.add_parser("stats", help="MOS significance matrix or A/B z-tests")
    st.add_argument("input_csv")
    st.add_argument("--mode", choices=("mos", "ab"), required=True)
    st.add_argument("--out", required=True, help="output path stem (.txt/.json for mos, .csv/.json for ab)")
    st.add_argument("--alpha", type=float, default=0.05)
    st.add_argument("--two-sided", action="store_true", help="two-sided z-test p-values (ab mode)")
    st.set_defaults(func=cmd_stats)

    tt = sub.add_parser("train-toy", help="train a dense toy model and save its checkpoint")
    tt.add_argument("out")
    tt.add_argument("--seed", type=int, default=0)
    tt.add_argument("--K", type=int, default=16)
    tt.add_argument("--H", type=int, default=32)
    tt.add_argument("--D", type=int, default=8)
    tt.add_argument("--r", type=int, default=2)
    tt.add_argument("--n-pairs", type=int, default=512)
    tt.add_argument("--min-len", type=int, default=4)
    tt.add_argument("--max-len", type=int, default=12)
    tt.add_argument("--lr", type=float, default=0.1)
    tt.add_argument("--steps", type=int, default=2000)
    tt.add_argument("--batch-size", type=int, default=32)
    tt.add_argument("--exclude-embedding", action="store_true", help="keep the embedding out of the prunable set")
    tt.set_defaults(func=cmd_train_toy)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ttsprune: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ttsprune: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
