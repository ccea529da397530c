"""Command-line interface.

Every subcommand takes its options from flags, from a flat ``key = value``
config file (``--config``), or both; flags win.  Randomized subcommands
require ``--seed``.  Outputs are written atomically and each run appends one
JSON line (config hash, seed, wall time, outputs) to a run log.

Exit codes: 0 success, 1 invalid arguments, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import FORMATS, __version__
from .data import (SynthConfig, gaussian_mixture_2d, make_trials, read_scores, read_trials,
                   read_vectors, split_open_set, synth_generate, write_scores, write_trials,
                   write_vectors)
from .dnf import TrainConfig, train, write_checkpoint
from .errors import DataError, NumericError, TrainingDivergedError
from .flow import FLOW_MAGIC, FlowStack
from .linear import (LDA_LAMBDA_COSINE, LDA_LAMBDA_PLDA, LIN_MAGIC, LinearTransform, Pipeline,
                     apply, lda_fit, ldan_fit, load_stage, pca_fit, read_manifest, whiten_fit,
                     write_manifest, write_transform)
from .metrics import (cosine_score, regulation_report, report_csv, report_text, score_trials,
                      subgroup_csv, subgroup_report, trial_eer)
from .plda import PLDA_MAGIC, PldaScorer, plda_fit, read_plda, write_plda

log = logging.getLogger("dnfnorm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# option tables

def _int_list(text):
    text = str(text).strip()
    if not text:
        return None
    return tuple(int(t) for t in text.replace(",", " ").split())


def _str_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: object = str
    default: object = None
    required: bool = False
    help: str = ""
    # "in" paths must exist before the command runs; "out" paths are outputs
    path: str = ""
    repeat: bool = False

    @property
    def dest(self):
        return self.name.replace("-", "_")


def _seed():
    return Opt("seed", int, required=True, help="RNG seed (required)")


def _train_opts():
    d = TrainConfig()
    return [
        Opt("in", required=True, path="in", help="training vectors"),
        Opt("out", required=True, path="out", help="output checkpoint (DNF1)"),
        Opt("epochs", int, d.epochs),
        Opt("batch-size", int, d.batch_size),
        Opt("lr", float, d.lr),
        Opt("n-blocks", int, d.n_blocks),
        Opt("hidden", _int_list, None, help="hidden widths, e.g. 32,32,32 (default: 3 x dim)"),
        Opt("grad-clip", float, d.grad_clip, help="gradient-norm cap per batch (0 disables)"),
        Opt("early-stop-tol", float, d.early_stop_tol),
        Opt("early-stop-patience", int, d.early_stop_patience),
        Opt("probe-classes", int, d.probe_classes),
        Opt("probe-samples", int, d.probe_samples),
        Opt("diag-k", int, d.diag_k),
        Opt("diag-min-class-samples", int, d.diag_min_class_samples),
        Opt("diagnostics", _bool, d.diagnostics),
        Opt("trace", path="out", help="per-epoch diagnostics CSV"),
        Opt("figure", path="out", help="training curves image"),
        _seed(),
    ]


def _synth_opts():
    d = SynthConfig()
    return [
        Opt("out", required=True, path="out", help="output vectors (.txt for text format)"),
        Opt("kind", str, "irregular", help="irregular | mixture2d"),
        Opt("classes", int, d.classes),
        Opt("samples-per-class", int, d.samples_per_class),
        Opt("dim", int, d.dim),
        Opt("mean-spread", float, d.mean_spread),
        Opt("cov-scale-lo", float, d.cov_scale_range[0]),
        Opt("cov-scale-hi", float, d.cov_scale_range[1]),
        Opt("skew-strength", float, d.skew_strength),
        Opt("tail-strength", float, d.tail_strength),
        Opt("orientation-spread", float, None),
        Opt("global-warp", float, d.global_warp),
        Opt("count", int, 10000, help="sample count for mixture2d"),
        _seed(),
    ]


COMMANDS = {
    "synth": ("generate synthetic labeled vectors", _synth_opts()),
    "split": ("class-disjoint train/test split", [
        Opt("in", required=True, path="in"),
        Opt("train-out", required=True, path="out"),
        Opt("test-out", required=True, path="out"),
        Opt("train-fraction", float, 0.5),
        _seed(),
    ]),
    "make-trials": ("build a verification trial list", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
        Opt("max-imposters", int, 0, help="imposters per target trial (0 = all pairs)"),
        _seed(),
    ]),
    "stats": ("homogeneity and Gaussianality report", [
        Opt("in", required=True, path="in", repeat=True, help="vectors (repeatable)"),
        Opt("names", _str_list, None, help="comma-separated column names"),
        Opt("out", required=True, path="out", help="CSV report"),
        Opt("k", int, 10),
        Opt("min-class-samples", int, 100),
        Opt("figure", path="out"),
    ]),
    "subgroup-stats": ("statistics of discriminant-ordered dimension groups", [
        Opt("in", required=True, path="in"),
        Opt("transform", path="in", help="LIN1 transform (default: fitted full-rank LDA)"),
        Opt("group-size", int, 10),
        Opt("k", int, 10),
        Opt("min-class-samples", int, 100),
        Opt("out", required=True, path="out"),
        Opt("figure", path="out"),
    ]),
    "train-nf": ("train a flow with a single N(0, I) prior", _train_opts()),
    "train-dnf": ("train a discriminative normalization flow",
                  _train_opts() + [Opt("mean-update", str, "gradient",
                                       help="gradient | reestimate")]),
    "fit-lda": ("fit LDA on the (S_b, lam*S_b + S_w) pencil", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
        Opt("dim", int, required=True),
        Opt("lam", float, LDA_LAMBDA_PLDA),
    ]),
    "fit-ldan": ("fit within-class whitening only", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
    ]),
    "fit-whiten": ("fit PCA whitening of the total covariance", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
    ]),
    "fit-pca": ("fit a PCA projection", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
        Opt("dim", int, required=True),
    ]),
    "fit-plda": ("fit a two-covariance PLDA model", [
        Opt("in", required=True, path="in"),
        Opt("out", required=True, path="out"),
        Opt("iters", int, 10),
        Opt("tol", float, 1e-6),
    ]),
    "transform": ("apply a transform, flow or manifest", [
        Opt("in", required=True, path="in"),
        Opt("model", required=True, help="LIN1/DNF1 file, manifest, or 'lengthnorm'"),
        Opt("out", required=True, path="out"),
    ]),
    "score": ("score a trial list", [
        Opt("in", required=True, path="in", help="vectors holding enroll and test ids"),
        Opt("trials", required=True, path="in"),
        Opt("method", str, "cosine", help="cosine | plda"),
        Opt("model", path="in", help="PLDA model (method plda)"),
        Opt("out", required=True, path="out"),
    ]),
    "eval": ("equal error rate of a score file", [
        Opt("scores", required=True, path="in"),
        Opt("trials", required=True, path="in"),
        Opt("out", path="out", help="optional text result"),
        Opt("figure", path="out", help="score histogram"),
    ]),
    "pipeline run": ("fit stages on train, score test trials, report EER", [
        Opt("train", required=True, path="in"),
        Opt("test", required=True, path="in"),
        Opt("trials", required=True, path="in"),
        Opt("workdir", required=True, help="directory for stage files and results"),
        Opt("stages", _str_list, ["lengthnorm", "whiten", "dnf"],
            help="comma list of lengthnorm, whiten, ldan, lda, pca, dnf, nf"),
        Opt("backend", str, "plda", help="plda | cosine"),
        Opt("lda-dim", int, None, help="LDA/PCA output dim (default: input dim)"),
        Opt("lda-lambda", float, None, help="default 0.1 for cosine, 0.0 for plda"),
        Opt("epochs", int, TrainConfig.epochs),
        Opt("batch-size", int, TrainConfig.batch_size),
        Opt("lr", float, TrainConfig.lr),
        Opt("n-blocks", int, TrainConfig.n_blocks),
        Opt("hidden", _int_list, None),
        Opt("mean-update", str, "gradient"),
        Opt("grad-clip", float, TrainConfig.grad_clip, help="0 disables"),
        Opt("diagnostics", _bool, False),
        Opt("plda-iters", int, 10),
        _seed(),
    ]),
}

COMMON = [
    Opt("config", help="flat key = value config file"),
    Opt("run-log", help="JSON-lines run log (default: dnfnorm-runs.jsonl next to the output)"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="dnfnorm", description="Discriminative normalization flows and back-ends.")
    p.add_argument("--version", action="store_true", help="print version and format magics")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    pipe = None
    for name, (help_text, opts) in COMMANDS.items():
        if name.startswith("pipeline "):
            if pipe is None:
                pp = sub.add_parser("pipeline", help="end-to-end pipelines")
                pipe = pp.add_subparsers(dest="pipeline_command", parser_class=_Parser)
            sp = pipe.add_parser(name.split()[1], help=help_text)
        else:
            sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(_cmd=name)
        for o in opts + COMMON:
            flag = f"--{o.name}"
            if o.type is _bool:
                sp.add_argument(flag, dest=o.dest, action=argparse.BooleanOptionalAction,
                                default=None, help=o.help)
            elif o.repeat:
                sp.add_argument(flag, dest=o.dest, action="append", default=None, help=o.help)
            else:
                sp.add_argument(flag, dest=o.dest, default=None, help=o.help)
    return p


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _convert(opt, value):
    if value is None:
        return None
    if opt.repeat:
        items = value if isinstance(value, list) else _str_list(value)
        return [opt.type(v) for v in items]
    if opt.type is str:
        return str(value)
    try:
        return opt.type(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"--{opt.name}: {e}") from None


def resolve(command, args):
    """Merge defaults, config file and flags into one dict of typed values."""
    opts = COMMANDS[command][1]
    known = {o.dest: o for o in opts}
    file_cfg = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file {args.config!r} not found")
        file_cfg = read_config(args.config)
        unknown = sorted(set(file_cfg) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for dest, o in known.items():
        flag = getattr(args, dest, None)
        raw = flag if flag is not None else file_cfg.get(dest)
        val = _convert(o, raw) if raw is not None else o.default
        if o.required and val is None:
            raise UsageError(f"--{o.name} is required")
        cfg[dest] = val
    for dest, o in known.items():
        if o.path == "in" and cfg[dest] is not None:
            for p in (cfg[dest] if o.repeat else [cfg[dest]]):
                if not os.path.exists(p):
                    raise DataError(f"input file {p!r} does not exist")
    return cfg


# output helpers

@contextmanager
def atomic_path(path):
    """Yield a temporary path in the target directory; rename on success."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix="." + os.path.basename(path) + ".",
                               suffix=os.path.splitext(path)[1])
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path, text):
    with atomic_path(path) as tmp:
        with open(tmp, "w") as f:
            f.write(text)


def _write_stream(path, writer, *objs):
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            writer(f, *objs)


def _save_vectors(path, X):
    with atomic_path(path) as tmp:
        write_vectors(tmp, X, binary=not str(path).endswith(".txt"))


def _save_figure(path, plot, *args):
    with atomic_path(path) as tmp:
        plot(*args, tmp)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# model loading

def _load_plda(path):
    with open(path, "rb") as f:
        return read_plda(f, path)


def _load_model(name, dim):
    """A stage file, a manifest, or the word ``lengthnorm``."""
    if name == "lengthnorm":
        return LinearTransform.lengthnorm(dim)
    if not os.path.exists(name):
        raise DataError(f"model {name!r} does not exist")
    with open(name, "rb") as f:
        magic = f.read(4)
    if magic in (LIN_MAGIC, FLOW_MAGIC):
        return load_stage(name)
    if magic == PLDA_MAGIC:
        raise DataError(f"{name} is a PLDA model, not a transform")
    return read_manifest(name, dim=dim)


# subcommands; each returns (outputs, summary dict)

def cmd_synth(c):
    if c["kind"] == "mixture2d":
        X = gaussian_mixture_2d(c["count"], c["seed"])
    elif c["kind"] == "irregular":
        X = synth_generate(SynthConfig(
            classes=c["classes"], samples_per_class=c["samples_per_class"], dim=c["dim"],
            mean_spread=c["mean_spread"], cov_scale_range=(c["cov_scale_lo"], c["cov_scale_hi"]),
            skew_strength=c["skew_strength"], tail_strength=c["tail_strength"],
            orientation_spread=c["orientation_spread"], global_warp=c["global_warp"],
            seed=c["seed"]))
    else:
        raise UsageError(f"unknown synth kind {c['kind']!r}")
    _save_vectors(c["out"], X)
    return [c["out"]], {"vectors": len(X), "classes": len(X.classes()), "dim": X.dim}


def cmd_split(c):
    X = read_vectors(c["in"])
    tr, te = split_open_set(X, c["train_fraction"], c["seed"])
    _save_vectors(c["train_out"], tr)
    _save_vectors(c["test_out"], te)
    return [c["train_out"], c["test_out"]], {"train": len(tr), "test": len(te)}


def cmd_make_trials(c):
    X = read_vectors(c["in"])
    T = make_trials(X, c["max_imposters"], c["seed"])
    with atomic_path(c["out"]) as tmp:
        write_trials(tmp, T)
    return [c["out"]], {"targets": T.n_target, "nontargets": T.n_nontarget}


def cmd_stats(c):
    paths = c["in"]
    names = c["names"] or [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(names) != len(paths):
        raise UsageError("--names must give one name per --in")
    if len(set(names)) != len(names):
        raise UsageError("column names must be unique")
    reports = {n: regulation_report(read_vectors(p), c["k"], c["min_class_samples"])
               for n, p in zip(names, paths)}
    _write_text(c["out"], report_csv(reports))
    sys.stdout.write(report_text(reports))
    outs = [c["out"]]
    if c["figure"]:
        from .plots import plot_report_bars
        _save_figure(c["figure"], plot_report_bars, reports)
        outs.append(c["figure"])
    return outs, {n: r.avg_pc_dir_var for n, r in reports.items()}


def cmd_subgroup_stats(c):
    X = read_vectors(c["in"])
    T = load_stage(c["transform"]) if c["transform"] else lda_fit(X, X.dim)
    if isinstance(T, FlowStack):
        raise DataError("subgroup statistics need a linear transform")
    groups = subgroup_report(X, T, c["group_size"], c["k"], c["min_class_samples"])
    _write_text(c["out"], subgroup_csv(groups))
    outs = [c["out"]]
    if c["figure"]:
        from .plots import plot_subgroups
        name = os.path.splitext(os.path.basename(c["in"]))[0]
        _save_figure(c["figure"], plot_subgroups, {name: groups})
        outs.append(c["figure"])
    return outs, {"groups": len(groups)}


def _train_config(c, mode):
    return TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], seed=c["seed"],
                       mode=mode, n_blocks=c["n_blocks"], hidden_sizes=c["hidden"],
                       mean_update=c.get("mean_update") or "gradient",
                       early_stop_tol=c.get("early_stop_tol", TrainConfig.early_stop_tol),
                       early_stop_patience=c.get("early_stop_patience",
                                                 TrainConfig.early_stop_patience),
                       probe_classes=c.get("probe_classes", TrainConfig.probe_classes),
                       probe_samples=c.get("probe_samples", TrainConfig.probe_samples),
                       diag_k=c.get("diag_k", TrainConfig.diag_k),
                       diag_min_class_samples=c.get("diag_min_class_samples",
                                                    TrainConfig.diag_min_class_samples),
                       grad_clip=c.get("grad_clip", TrainConfig.grad_clip) or None,
                       diagnostics=c["diagnostics"])


def _run_training(X, cfg, out):
    try:
        return train(X, cfg)
    except TrainingDivergedError as e:
        stack, priors = e.checkpoint
        saved = out + ".last-good"
        _write_stream(saved, write_checkpoint, stack, priors)
        log.error("last good checkpoint written to %s", saved)
        raise


def _cmd_train(c, mode):
    X = read_vectors(c["in"])
    try:
        cfg = _train_config(c, mode)
    except ValueError as e:
        raise UsageError(str(e)) from None
    res = _run_training(X, cfg, c["out"])
    _write_stream(c["out"], write_checkpoint, res.stack, res.priors)
    outs = [c["out"]]
    if c["trace"]:
        _write_text(c["trace"], res.trace.to_csv())
        outs.append(c["trace"])
    if c["figure"]:
        from .plots import plot_trace
        _save_figure(c["figure"], plot_trace, res.trace)
        outs.append(c["figure"])
    return outs, {"epochs_run": res.epochs_run, "final_nll": float(res.trace.column("nll")[-1])}


def cmd_train_nf(c):
    return _cmd_train(c, "vanilla_nf")


def cmd_train_dnf(c):
    return _cmd_train(c, "dnf")


def _fit_linear(c, fit):
    X = read_vectors(c["in"])
    T = fit(X)
    _write_stream(c["out"], write_transform, T)
    return [c["out"]], {"in_dim": T.in_dim, "out_dim": T.out_dim}


def cmd_fit_lda(c):
    if c["lam"] < 0:
        raise UsageError("--lam must be non-negative")
    return _fit_linear(c, lambda X: lda_fit(X, c["dim"], c["lam"]))


def cmd_fit_ldan(c):
    return _fit_linear(c, ldan_fit)


def cmd_fit_whiten(c):
    return _fit_linear(c, whiten_fit)


def cmd_fit_pca(c):
    return _fit_linear(c, lambda X: pca_fit(X, c["dim"]))


def cmd_fit_plda(c):
    X = read_vectors(c["in"])
    model, hist = plda_fit(X, iters=c["iters"], tol=c["tol"], return_history=True)
    _write_stream(c["out"], write_plda, model)
    return [c["out"]], {"loglik": hist[-1] if hist else None}


def cmd_transform(c):
    X = read_vectors(c["in"])
    T = _load_model(c["model"], X.dim)
    Y = apply(T, X)
    _save_vectors(c["out"], Y)
    return [c["out"]], {"dim": Y.dim}


def _scorer(method, model_path):
    if method == "cosine":
        return cosine_score
    if method == "plda":
        if not model_path:
            raise UsageError("--model is required for plda scoring")
        return PldaScorer(_load_plda(model_path)).score
    raise UsageError(f"unknown scoring method {method!r}")


def cmd_score(c):
    scorer = _scorer(c["method"], c["model"])
    X = read_vectors(c["in"])
    T = read_trials(c["trials"])
    s = score_trials(X, T, scorer)
    with atomic_path(c["out"]) as tmp:
        write_scores(tmp, T, s)
    return [c["out"]], {"trials": len(T)}


def _eval_scores(scores_path, trials_path):
    T = read_trials(trials_path)
    table = read_scores(scores_path)
    try:
        s = np.array([table[(e, t)] for e, t in zip(T.enroll, T.test)])
    except KeyError as e:
        raise DataError(f"no score for trial {e.args[0]}") from None
    rate, thr = trial_eer(s, T.is_target)
    return rate, thr, s, T


def cmd_eval(c):
    rate, thr, s, T = _eval_scores(c["scores"], c["trials"])
    line = f"EER {rate:.4f}"
    print(line)
    outs = []
    if c["out"]:
        _write_text(c["out"], f"{line}\neer {rate!r}\nthreshold {thr!r}\n")
        outs.append(c["out"])
    if c["figure"]:
        from .plots import plot_score_hist
        _save_figure(c["figure"], plot_score_hist, s, T.is_target)
        outs.append(c["figure"])
    return outs, {"eer": rate, "threshold": thr}


PIPELINE_STAGES = ("lengthnorm", "whiten", "ldan", "lda", "pca", "dnf", "nf")


def cmd_pipeline_run(c):
    """Fit each stage on the (transformed) training set, apply it to both sets,
    then fit the back-end and score the test trials.

    Stage files, a manifest, the PLDA model, scores and the EER land in
    ``workdir``; the result equals running the matching subcommands by hand.
    """
    stages = c["stages"]
    bad = [s for s in stages if s not in PIPELINE_STAGES]
    if bad:
        raise UsageError(f"unknown pipeline stage(s): {', '.join(bad)}")
    if c["backend"] not in ("plda", "cosine"):
        raise UsageError(f"unknown backend {c['backend']!r}")
    lam = c["lda_lambda"]
    if lam is None:
        lam = LDA_LAMBDA_PLDA if c["backend"] == "plda" else LDA_LAMBDA_COSINE
    wd = c["workdir"]
    os.makedirs(wd, exist_ok=True)
    tr = read_vectors(c["train"])
    te = read_vectors(c["test"])
    trials = read_trials(c["trials"])
    outs, manifest, fitted = [], [], []
    for i, name in enumerate(stages):
        if name == "lengthnorm":
            T = LinearTransform.lengthnorm(tr.dim)
            manifest.append("lengthnorm")
        elif name in ("dnf", "nf"):
            cfg = _train_config(c, "dnf" if name == "dnf" else "vanilla_nf")
            path = os.path.join(wd, f"{i:02d}_{name}.dnf")
            res = _run_training(tr, cfg, path)
            T = res.stack
            _write_stream(path, write_checkpoint, res.stack, res.priors)
            manifest.append(os.path.basename(path))
            outs.append(path)
        else:
            dim = c["lda_dim"] or tr.dim
            fit = {"whiten": whiten_fit, "ldan": ldan_fit,
                   "lda": lambda X: lda_fit(X, dim, lam),
                   "pca": lambda X: pca_fit(X, dim)}[name]
            T = fit(tr)
            path = os.path.join(wd, f"{i:02d}_{name}.lin")
            _write_stream(path, write_transform, T)
            manifest.append(os.path.basename(path))
            outs.append(path)
        fitted.append(T)
        tr = apply(T, tr)
        te = apply(T, te)
    man_path = os.path.join(wd, "manifest.txt")
    with atomic_path(man_path) as tmp:
        write_manifest(tmp, manifest)
    outs.append(man_path)
    if fitted:
        Pipeline(fitted)  # dimension check of the whole chain
    if c["backend"] == "plda":
        model = plda_fit(tr, iters=c["plda_iters"])
        mpath = os.path.join(wd, "plda.pld")
        _write_stream(mpath, write_plda, model)
        outs.append(mpath)
        scorer = PldaScorer(model).score
    else:
        scorer = cosine_score
    s = score_trials(te, trials, scorer)
    spath = os.path.join(wd, "scores.txt")
    with atomic_path(spath) as tmp:
        write_scores(tmp, trials, s)
    rate, thr, _, _ = _eval_scores(spath, c["trials"])
    line = f"EER {rate:.4f}"
    print(line)
    epath = os.path.join(wd, "eer.txt")
    _write_text(epath, f"{line}\neer {rate!r}\nthreshold {thr!r}\n")
    outs += [spath, epath]
    return outs, {"eer": rate, "threshold": thr}


HANDLERS = {
    "synth": cmd_synth, "split": cmd_split, "make-trials": cmd_make_trials,
    "stats": cmd_stats, "subgroup-stats": cmd_subgroup_stats,
    "train-nf": cmd_train_nf, "train-dnf": cmd_train_dnf,
    "fit-lda": cmd_fit_lda, "fit-ldan": cmd_fit_ldan, "fit-whiten": cmd_fit_whiten,
    "fit-pca": cmd_fit_pca, "fit-plda": cmd_fit_plda, "transform": cmd_transform,
    "score": cmd_score, "eval": cmd_eval, "pipeline run": cmd_pipeline_run,
}


def _run_log_path(args, command, cfg, outputs):
    if args.run_log:
        return args.run_log
    # next to the first output, else next to the first input
    inputs = [cfg[o.dest] for o in COMMANDS[command][1] if o.path == "in" and cfg.get(o.dest)]
    anchor = outputs[0] if outputs else (inputs[0] if inputs else None)
    if isinstance(anchor, list):
        anchor = anchor[0]
    base = os.path.dirname(os.path.abspath(anchor)) if anchor else os.getcwd()
    return os.path.join(base, "dnfnorm-runs.jsonl")


def _append_run_log(path, record):
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def version_string():
    magics = ", ".join(f"{k} v{v}" for k, v in FORMATS.items())
    return f"dnfnorm {__version__} ({magics})"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"dnfnorm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.version:
        print(version_string())
        return EXIT_OK
    command = getattr(args, "_cmd", None)
    if command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve(command, args)
        start = time.perf_counter()
        outputs, summary = HANDLERS[command](cfg)
        wall = time.perf_counter() - start
    except UsageError as e:
        print(f"dnfnorm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"dnfnorm: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"dnfnorm: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"dnfnorm: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"dnfnorm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    record = {"command": command, "version": __version__, "config": cfg,
              "config_hash": config_hash(cfg), "seed": cfg.get("seed"),
              "wall_time_s": round(wall, 6), "outputs": outputs, "summary": summary}
    _append_run_log(_run_log_path(args, command, cfg, outputs), record)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
