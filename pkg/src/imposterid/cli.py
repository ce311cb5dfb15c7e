"""Command-line entry point: ``imposterid {gen,train,calibrate,eval,eer}``.

Settings come from built-in defaults, then the JSON file given by ``--config``,
then command-line flags (later sources win). One top-level ``--seed`` is expanded
into named sub-streams so each command can be rerun on its own and still
reproduce the same numbers.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import os
import sys
from typing import Optional

import numpy as np

from .errors import ConfigError, ImposterIdError
from .evaluation import (
    FixedCosine,
    FixedRelNet,
    IdnRelNet,
    ScoreNorm,
    SstCosine,
    SstRelNet,
    calibrate_threshold,
    evaluate_method,
    make_trials,
    results_tsv,
)
from .io import (
    atomic_write,
    read_checkpoint,
    read_corpus,
    read_json,
    read_trials,
    write_checkpoint,
    write_corpus,
    write_json,
)
from .synthdata import ShiftConfig, SynthConfig, apply_domain_shift, generate_corpus, separability, split_corpus
from .thresholding import ThresholdTable, compute_eer
from .training import EpisodeConfig, TrainConfig, run_training

EXIT_CODES = {"config": 2, "data": 3, "format": 4, "io": 5}
STREAMS = {"gen": 0, "shift": 1, "train": 2, "calibrate": 3, "eval": 4}
METHODS = ("fixed", "fixed_relnet", "score_norm", "sst", "sst_relnet", "idn")
NEEDS_CHECKPOINT = {"fixed_relnet", "sst_relnet", "idn"}
NEEDS_TAU = {"fixed", "fixed_relnet", "score_norm"}

DEFAULTS = {
    "seed": 0,
    "synth": {"dim": 16, "n_speakers": 100, "utterances_per_speaker": 20, "intra_spread": 0.1,
              "train_speakers": 60},
    "shift": None,
    "train": {},
    "eval": {"n_speakers": 5, "n_sets": 1000, "methods": ["fixed", "sst"], "tau": {},
             "cohort_size": 10, "idn_threshold": 0.5,
             "cosine_grid": [-1.0, 1.0, 2001], "relnet_grid": [0.0, 1.0, 1001],
             "snorm_grid": [-5.0, 15.0, 2001]},
}


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named sub-stream of the top-level seed."""
    return int(np.random.SeedSequence([int(seed), STREAMS[stream]]).generate_state(1)[0])


# --- configuration -----------------------------------------------------------------

def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{where}{key}", "unknown key")
        out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError("--config", f"file {path} does not exist")
    user = read_json(path)
    if not isinstance(user, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key, value in user.items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")
        if key in ("synth", "eval"):
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            cfg[key] = _merge(cfg[key], value, f"{key}.")
        else:
            cfg[key] = value
    _train_config(cfg["train"])
    if cfg["shift"] is not None:
        _build(ShiftConfig, cfg["shift"], "shift")
    return cfg


def _build(cls, values: dict, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{where}.{key}", "unknown key")
    try:
        return cls(**values, **extra)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from exc


def _train_config(values: dict) -> TrainConfig:
    values = dict(values or {})
    if "episode" in values:
        values["episode"] = _build(EpisodeConfig, values["episode"], "train.episode")
    for key in ("relnet_hidden", "idn_hidden"):
        if key in values:
            values[key] = tuple(int(h) for h in values[key])
    cfg = _build(TrainConfig, values, "train")
    for key in ("epochs_a", "episodes_b", "episodes_c", "batch_size_a"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"train.{key}", "must be >= 0")
    if cfg.lam < 0:
        raise ConfigError("train.lam", "must be >= 0")
    return cfg


def _grid(bounds, name: str) -> np.ndarray:
    try:
        lo, hi, n = bounds
        return np.linspace(float(lo), float(hi), int(n))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"eval.{name}", "expected [low, high, count]") from exc


# --- commands ----------------------------------------------------------------------

def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_gen(args, cfg) -> int:
    syn = dict(cfg["synth"])
    n_train = syn.pop("train_speakers")
    synth = _build(SynthConfig, syn, "synth", seed=derive_seed(cfg["seed"], "gen"))
    corpus = generate_corpus(synth)
    train, test = split_corpus(corpus, n_train)
    shift_values = cfg["shift"]
    if args.shift and shift_values is None:
        shift_values = {}
    if shift_values is not None:
        shift = _build(ShiftConfig, shift_values, "shift", seed=derive_seed(cfg["seed"], "shift"))
        test = apply_domain_shift(test, shift)
    out = _out_dir(args)
    write_corpus(os.path.join(out, "train.spk"), train)
    write_corpus(os.path.join(out, "test.spk"), test)
    for name, part in (("train", train), ("test", test)):
        intra, inter, gap = separability(part)
        print(f"{name}: {len(part.speakers)} speakers, {part.n_utterances} utterances, "
              f"intra {intra:.4f}, inter {inter:.4f}, gap {gap:.4f}")
    return 0


def cmd_train(args, cfg) -> int:
    tcfg = _train_config(cfg["train"])
    if args.frozen:
        tcfg = dataclasses.replace(tcfg, end_to_end=False)
    if args.episodes is not None:
        key = {"a": "epochs_a", "b": "episodes_b", "c": "episodes_c"}[args.stage]
        tcfg = dataclasses.replace(tcfg, **{key: args.episodes})
    out = _out_dir(args)
    corpus = read_corpus(args.corpus)
    assembly = None
    if args.stage != "a":
        previous = "abc"["abc".index(args.stage) - 1]
        path = args.checkpoint or os.path.join(out, f"stage_{previous}.ckpt")
        if not os.path.exists(path):
            raise ConfigError("--checkpoint", f"resuming at stage {args.stage} needs {path}")
        assembly = read_checkpoint(path)
        if assembly.dim != corpus.dim:
            raise ConfigError("--checkpoint", f"checkpoint dimension {assembly.dim} != corpus {corpus.dim}")

    def save(stage, asm):
        path = os.path.join(out, f"stage_{stage}.ckpt")
        write_checkpoint(path, asm)
        print(f"stage {stage}: wrote {path}")
        return read_checkpoint(path)

    _, report = run_training(corpus, tcfg, derive_seed(cfg["seed"], "train"), args.stage,
                             assembly, after_stage=save)
    atomic_write(os.path.join(out, "train_report.tsv"), report.to_tsv())
    return 0


def _checkpoint(args, corpus):
    if not args.checkpoint:
        return None
    asm = read_checkpoint(args.checkpoint)
    if asm.dim != corpus.dim:
        raise ConfigError("--checkpoint", f"checkpoint dimension {asm.dim} != corpus {corpus.dim}")
    return asm


def cmd_calibrate(args, cfg) -> int:
    ev = cfg["eval"]
    out = _out_dir(args)
    result = {}
    if args.corpus:
        corpus = read_corpus(args.corpus)
        asm = _checkpoint(args, corpus)
        trials = make_trials(corpus, ev["n_speakers"], ev["n_sets"], derive_seed(cfg["seed"], "calibrate"))
        candidates = [(FixedCosine(0.0), "cosine_grid"), (ScoreNorm(0.0, ev["cohort_size"]), "snorm_grid")]
        if asm is not None:
            candidates.append((FixedRelNet(0.0, asm), "relnet_grid"))
        for method, grid in candidates:
            tau = calibrate_threshold(method, trials, _grid(ev[grid], grid))
            tuned = dataclasses.replace(method, tau=tau)
            acc = evaluate_method(tuned, trials).overall_acc_mean
            result[method.name] = dict(ThresholdTable.fixed(tau).to_dict(), calibration_accuracy=acc)
            print(f"{method.name}: tau {tau!r}, calibration accuracy {acc:.4f}")
    if args.trials:
        eer = compute_eer(read_trials(args.trials))
        result["eer"] = {"eer": eer.eer, "threshold": eer.threshold}
        print(f"eer {eer.eer!r} at threshold {eer.threshold!r}")
    if not result:
        raise ConfigError("--corpus", "calibrate needs --corpus and/or --trials")
    write_json(os.path.join(out, "thresholds.json"), result)
    return 0


def _thresholds(args, cfg) -> dict:
    taus = {k: float(v) for k, v in (cfg["eval"].get("tau") or {}).items()}
    if args.thresholds:
        for name, entry in read_json(args.thresholds).items():
            if isinstance(entry, dict) and entry.get("mode") == "fixed":
                taus[name] = ThresholdTable.from_dict(entry).tau
    return taus


def build_method(name: str, taus: dict, assembly, ev: dict):
    if name not in METHODS:
        raise ConfigError("--methods", f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    if name in NEEDS_CHECKPOINT and assembly is None:
        raise ConfigError("--checkpoint", f"method {name!r} needs a checkpoint")
    if name in NEEDS_TAU and name not in taus:
        raise ConfigError("eval.tau", f"no threshold for {name!r}; run calibrate or set eval.tau")
    if name == "fixed":
        return FixedCosine(taus[name])
    if name == "fixed_relnet":
        return FixedRelNet(taus[name], assembly)
    if name == "score_norm":
        return ScoreNorm(taus[name], ev["cohort_size"])
    if name == "sst":
        return SstCosine()
    if name == "sst_relnet":
        return SstRelNet(assembly)
    return IdnRelNet(assembly, ev["idn_threshold"])


def cmd_eval(args, cfg) -> int:
    ev = cfg["eval"]
    methods = args.methods.split(",") if args.methods else list(ev["methods"])
    corpus = read_corpus(args.corpus)
    asm = _checkpoint(args, corpus)
    taus = _thresholds(args, cfg)
    specs = [build_method(m.strip(), taus, asm, ev) for m in methods]
    trials = make_trials(corpus, ev["n_speakers"], ev["n_sets"], derive_seed(cfg["seed"], "eval"))
    results = [evaluate_method(m, trials) for m in specs]
    out = _out_dir(args)
    write_json(os.path.join(out, "eval.json"), {"results": [r.to_dict() for r in results]})
    table = results_tsv(results)
    atomic_write(os.path.join(out, "eval.tsv"), table)
    sys.stdout.write(table)
    return 0


def cmd_eer(args, cfg) -> int:
    result = compute_eer(read_trials(args.trials))
    out = _out_dir(args)
    write_json(os.path.join(out, "eer.json"), result.to_dict())
    print(f"eer {result.eer!r} at threshold {result.threshold!r}")
    return 0


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imposterid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("gen", help="generate synthetic train/test corpora")
    common(p)
    p.add_argument("--shift", action="store_true", help="apply the domain shift to the test corpus")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the staged training")
    common(p)
    p.add_argument("--corpus", required=True, help="training corpus file")
    p.add_argument("--stage", choices=("a", "b", "c"), default="a", help="first stage to run")
    p.add_argument("--checkpoint", help="checkpoint of the previous stage when resuming")
    p.add_argument("--frozen", action="store_true", help="stage C updates the IDN only")
    p.add_argument("--episodes", type=int, help="episodes (epochs for stage a) of the first stage run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit fixed thresholds and the EER threshold")
    common(p)
    p.add_argument("--corpus", help="calibration corpus file")
    p.add_argument("--checkpoint", help="checkpoint for the relation-net threshold")
    p.add_argument("--trials", help="trial-pair TSV for the EER")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate methods over random speaker sets")
    common(p)
    p.add_argument("--corpus", required=True, help="test corpus file")
    p.add_argument("--checkpoint", help="trained checkpoint (relation net / IDN methods)")
    p.add_argument("--thresholds", help="thresholds.json written by calibrate")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eer", help="equal error rate of a trial-pair file")
    common(p)
    p.add_argument("--trials", required=True, help="trial-pair TSV (score<TAB>target|nontarget)")
    p.set_defaults(func=cmd_eer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        return args.func(args, cfg)
    except ImposterIdError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
