"""``simreg-lab`` command line: train, sweep, gradcheck, theory, analyze, freq.

Exit status is 0 on success, 1 for usage or validation errors and 2 when a
command fails at run time (including a theory suite with violations).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import gradcheck as gc
from . import model as model_mod
from . import theory
from . import trainer
from .config import ConfigError, load_config

log = logging.getLogger("simreg_lab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for run-time failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _config(args):
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# heatmap / analysis
# ---------------------------------------------------------------------------

def cosine_matrix(E: np.ndarray) -> np.ndarray:
    """Symmetric cosine matrix with an exact unit diagonal (zero rows give 0 off-diagonal)."""
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    A = np.where(norms > 0, E / np.where(norms > 0, norms, 1.0), 0.0)
    C = A @ A.T
    C = np.clip(0.5 * (C + C.T), -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return C


def load_model(checkpoint) -> tuple[model_mod.ModelConfig, dict[str, np.ndarray]]:
    cfg, tensors, _ = model_mod.load_checkpoint(checkpoint)
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    return cfg, params


def export_similarity_heatmap(checkpoint, tokens, path) -> tuple[np.ndarray, float, float]:
    """Write the final-layer cosine matrix of ``tokens`` as CSV.

    The last line is ``# mean_offdiag_cosine=<c> angle_deg=<a>``.  Returns the
    matrix, the mean off-diagonal cosine and its angle.
    """
    cfg, params = load_model(checkpoint)
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size < 2:
        raise ValueError("need at least two tokens")
    if tokens.size > cfg.max_seq_len:
        raise ValueError(f"input of {tokens.size} tokens exceeds max_seq_len {cfg.max_seq_len}")
    E, _ = model_mod.model_forward(tokens, params, cfg, cfg.n_layers)
    C = cosine_matrix(E[0])
    n = len(C)
    mean = float(C[~np.eye(n, dtype=bool)].mean())
    angle = theory.average_angle_from_similarity(float(np.clip(mean, -1.0, 1.0)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in C:
            writer.writerow([repr(float(v)) for v in row])
        fh.write(f"# mean_offdiag_cosine={mean!r} angle_deg={angle!r}\n")
    return C, mean, angle


def read_heatmap(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def _tokens_from_args(args) -> np.ndarray:
    if (args.text is None) == (args.tokens is None):
        raise UsageError("give exactly one of --text or --tokens")
    if args.text is not None:
        return data_mod.tokenize(args.text, "byte")
    try:
        return np.array([int(t) for t in args.tokens.split(",") if t.strip()], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"--tokens expects comma-separated ids, got {args.tokens!r}") from exc


def write_margin_report(entries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "margin", "lower_bound", "upper_bound", "dist_pos", "dist_neg", "holds"])
        for e in entries:
            writer.writerow([e.token, repr(e.margin), repr(e.lower),
                             "" if e.upper is None else repr(e.upper), repr(e.dist_pos),
                             "" if e.dist_neg is None else repr(e.dist_neg), int(e.holds())])


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "runs/train")

    def show(rec):
        print(f"step {rec.step:5d}  ce {rec.ce_loss:.4f}  sr {rec.sr_loss:.4f}  cos {rec.mean_pairwise_cosine:.4f}",
              flush=True)

    res = trainer.train_run(cfg, out, on_record=None if args.quiet else show)
    print(json.dumps(res.final, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = list(itertools.product(_float_list(args.taus), _float_list(args.lambdas)))
    rows = trainer.sweep(grid, cfg, Path(args.out or "runs/sweep"))
    for r in rows:
        print(",".join(f"{k}={r[k]:g}" for k in trainer.SWEEP_FIELDS))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for tau in _float_list(args.taus):
        for label, res in (("model", gc.model_gradcheck(args.seed or 0, tau)),
                           ("loss", gc.loss_gradcheck(args.seed or 0, tau))):
            ok &= res.passed
            print(f"{label} tau={tau:g} max_rel_error={res.max_rel_error:.3e} rtol={res.rtol:g} "
                  f"{'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_theory(args) -> int:
    names = list(theory.SUITES) if args.suite == "all" else [args.suite]
    bad = 0
    for name in names:
        kwargs = {}
        if args.cases is not None and name not in ("moments", "density"):
            kwargs["cases"] = args.cases
        if args.seed is not None and name != "density":
            kwargs["seed"] = args.seed
        res = theory.SUITES[name](**kwargs)
        bad += res.violations
        print(f"{name}: cases={res.cases} violations={res.violations} worst={res.worst:.3e}")
    return EXIT_OK if bad == 0 else EXIT_RUNTIME


def cmd_analyze(args) -> int:
    tokens = _tokens_from_args(args)
    if tokens.size < 3:
        raise UsageError("analyze needs at least three tokens (inputs plus next-token labels)")
    cfg, params = load_model(args.checkpoint)
    out = Path(args.out or "runs/analyze")
    out.mkdir(parents=True, exist_ok=True)
    inputs, labels = tokens[:-1], tokens[1:]
    _, mean, angle = export_similarity_heatmap(args.checkpoint, inputs, out / "heatmap.csv")
    E, _ = model_mod.model_forward(inputs, params, cfg, cfg.n_layers)
    # logits are E @ lm_head, so the head is exactly linear with W = lm_head^T
    entries = theory.margin_report(E[0], labels, params["lm_head"].T)
    write_margin_report(entries, out / "margins.csv")
    held = sum(e.holds() for e in entries)
    summary = (f"tokens={len(inputs)} mean_offdiag_cosine={mean:.6f} angle_deg={angle:.3f} "
               f"margin_bounds_hold={held}/{len(entries)}")
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_freq(args) -> int:
    if args.corpus:
        ids, _ = data_mod.read_corpus(args.corpus, args.mode, args.vocab)
    else:
        cfg = _config(args)
        ids, _ = trainer.load_corpus(cfg)
    report = data_mod.token_frequency_report(ids, args.head_fraction)
    out = Path(args.out or "runs/freq")
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "frequency.csv")
    print(f"types={len(report.token_ids)} tokens={int(report.counts.sum())} "
          f"head_types={report.head_types} head_share={report.head_share:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simreg-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("train", help="train one model"))
    p.add_argument("--quiet", action="store_true", help="do not print metric records")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sweep", help="grid over tau x lambda"))
    p.add_argument("--taus", default="0.01", help="comma-separated temperatures")
    p.add_argument("--lambdas", default="0,1", help="comma-separated regularizer weights")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("gradcheck", help="reverse mode vs central differences"))
    p.add_argument("--taus", default="1,0.1,0.01")
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("theory", help="seeded property runs"))
    p.add_argument("--suite", default="all", choices=["all", *theory.SUITES])
    p.add_argument("--cases", type=int)
    p.set_defaults(func=cmd_theory)

    p = common(sub.add_parser("analyze", help="heatmap, margin report and angle summary"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", help="input text (byte tokenized)")
    p.add_argument("--tokens", help="comma-separated token ids")
    p.set_defaults(func=cmd_analyze)

    p = common(sub.add_parser("freq", help="token frequency report"))
    p.add_argument("--corpus", help="text file; defaults to the configured corpus")
    p.add_argument("--mode", default="byte", choices=["byte", "word"])
    p.add_argument("--vocab", help="vocabulary file for word mode")
    p.add_argument("--head-fraction", type=float, default=0.02)
    p.set_defaults(func=cmd_freq)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a run-time failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
