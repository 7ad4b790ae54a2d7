"""``odecorrect`` command line: gen / train / eval / bench.

Settings resolve as built-in defaults < ``--config`` JSON file < flags, and
every command writes the resolved settings to ``<out>/resolved_config.json``
so ``odecorrect <cmd> --config <out>/resolved_config.json`` reruns it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import baselines, evaluation
from .dataset import Corpus, generate_corpus, read_corpus, split_corpus, variation_records, write_corpus
from .integrators import Grid, IntegrationConfig, Trajectory
from .model import (PRESETS, CorrectorTransformer, ModelConfig, TrainConfig, Trainer, load_model,
                    model_corrector, predict_corrections, resume_trainer, save_model)
from .systems import RegistryError, load_registry, sample_initial_condition, sample_params
from .tokenizer import Normalizer

log = logging.getLogger("odecorrect")

DEFAULTS = {
    "common": {"system": "damped_oscillator", "registry": None, "seed": 0, "out": "runs/out", "threads": None},
    "gen": {"range": "pretrain", "regime": None, "variations": 20, "trajectories": 20, "n_coarse": 100,
            "stride_scale": 1.0, "test_fraction": 0.0},
    "train": {"corpus": None, "val_corpus": None, "model": "transformer", "preset": "desk", "epochs": 200,
              "batch_size": 8, "lr": None, "demos": 5, "resume": None, "n_layers": None, "d_model": None,
              "prompt_scale": None, "positional": None, "neurvec_target": "labels", "stop_after": None},
    "eval": {"corpus": None, "checkpoint": None, "neurvec": None, "neuralode": None, "demos": 5, "mode": "teacher",
             "oracle_labels": False, "regime": None, "stride_scale": 1.0, "plots": 2, "variations": 4,
             "trajectories": 10},
    "bench": {"checkpoint": None, "n_eqs": 500, "n_coarse": 100, "stride": None, "repeats": 5, "demos": 5},
}


class CliError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    # Every flag defaults to None so config-file values are only overridden when given.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (flags override it)")
    common.add_argument("--system")
    common.add_argument("--registry", help="system registry JSON (bundled file by default)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="odecorrect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="simulate a corpus")
    g.add_argument("--range", choices=["pretrain", "test"])
    g.add_argument("--regime")
    g.add_argument("--variations", type=int)
    g.add_argument("--trajectories", type=int)
    g.add_argument("--n-coarse", type=int)
    g.add_argument("--stride-scale", type=float)
    g.add_argument("--test-fraction", type=float, help="also write a variation-level train/test split")

    t = sub.add_parser("train", parents=[common], help="train the corrector or a baseline")
    t.add_argument("--corpus")
    t.add_argument("--val-corpus")
    t.add_argument("--model", choices=["transformer", "neurvec", "neuralode"])
    t.add_argument("--preset", choices=["desk", "paper"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--demos", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="save and stop once this epoch is reached")
    t.add_argument("--n-layers", type=int)
    t.add_argument("--d-model", type=int)
    t.add_argument("--prompt-scale", type=lambda s: s.lower() in ("1", "true", "yes"))
    t.add_argument("--positional", choices=["category", "category_position"])
    t.add_argument("--neurvec-target", choices=["labels", "residual"],
                   help="corpus labels (teacher-forced use) or one-step residuals (rollout use)")

    e = sub.add_parser("eval", parents=[common], help="metrics and plots on a corpus")
    e.add_argument("--corpus")
    e.add_argument("--checkpoint")
    e.add_argument("--neurvec")
    e.add_argument("--neuralode")
    e.add_argument("--demos", type=int)
    e.add_argument("--mode", choices=["teacher", "rollout"])
    e.add_argument("--oracle-labels", action="store_const", const=True)
    e.add_argument("--regime", help="evaluate on a fresh corpus from this regime")
    e.add_argument("--stride-scale", type=float, help="rebuild the corpus at stride * alpha")
    e.add_argument("--plots", type=int)
    e.add_argument("--variations", type=int)
    e.add_argument("--trajectories", type=int)

    b = sub.add_parser("bench", parents=[common], help="fine vs coarse+correction wall time")
    b.add_argument("--checkpoint")
    b.add_argument("--n-eqs", type=int)
    b.add_argument("--n-coarse", type=int)
    b.add_argument("--stride", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--demos", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = {**DEFAULTS["common"], **DEFAULTS[args.command]}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(doc) - set(cfg) - {"command"}
        if unknown:
            raise CliError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update({k: v for k, v in doc.items() if k != "command"})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["threads"] is None:
        cfg["threads"] = 1 if args.command == "bench" else (os.cpu_count() or 1)
    cfg["command"] = args.command
    return cfg


def _write_resolved(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path


def _system(cfg):
    reg = load_registry(cfg["registry"])
    if cfg["system"] not in reg:
        raise CliError(f"unknown system {cfg['system']!r}; known: {', '.join(sorted(reg))}")
    return reg[cfg["system"]]


def _load_corpus(path, what="corpus") -> Corpus:
    if not path:
        raise CliError(f"--{what.replace('_', '-')} is required")
    try:
        return read_corpus(path)
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}") from None


def _scaled_config(sys_, n_coarse: int, alpha: float) -> IntegrationConfig:
    base = IntegrationConfig.for_system(sys_, n_coarse=n_coarse)
    return evaluation.stride_config(base, alpha) if alpha != 1.0 else base


# --- gen --------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    sys_ = _system(cfg)
    if cfg["regime"] and cfg["regime"] not in sys_.regimes:
        raise CliError(f"{sys_.name} has no regime {cfg['regime']!r}; known: {sorted(sys_.regimes) or 'none'}")
    config = _scaled_config(sys_, cfg["n_coarse"], cfg["stride_scale"])
    corpus = generate_corpus(sys_, cfg["range"], cfg["variations"], cfg["trajectories"], config, cfg["seed"],
                             regime=cfg["regime"], threads=cfg["threads"])
    out = Path(cfg["out"])
    write_corpus(corpus, out / "corpus.bin")
    written = ["corpus.bin"]
    if cfg["test_fraction"]:
        train, test = split_corpus(corpus, cfg["test_fraction"], cfg["seed"])
        write_corpus(train, out / "train.bin")
        write_corpus(test, out / "test.bin")
        written += ["train.bin", "test.bin"]
    man = corpus.manifest()
    print(f"{sys_.name}: {man['counts']['records']} trajectories over {man['counts']['variations']} variations "
          f"({man['counts']['excluded']} excluded), source={man['source']}, k={config.stride}, "
          f"n={config.n_coarse_steps}")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return 0


# --- train ------------------------------------------------------------------

def _model_config(cfg) -> ModelConfig:
    mc = PRESETS[cfg["preset"]]
    over = {k: cfg[k] for k in ("n_layers", "d_model", "prompt_scale", "positional") if cfg[k] is not None}
    if "d_model" in over and mc.head_dim is None:
        over["d_ff"] = 4 * over["d_model"]
    return replace(mc, **over) if over else mc


def _write_losses(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse", "lr"])
        for h in history:
            w.writerow([h["epoch"], h["train_mse"], "" if h.get("val_mse") is None else h["val_mse"], h["lr"]])


def cmd_train(cfg: dict) -> int:
    corpus = _load_corpus(cfg["corpus"])
    val = _load_corpus(cfg["val_corpus"], "val_corpus") if cfg["val_corpus"] else None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg["threads"])
    if cfg["model"] != "transformer":
        return _train_baseline(cfg, corpus, out)

    if cfg["resume"]:
        trainer = resume_trainer(cfg["resume"], corpus, val)
        if cfg["epochs"] < trainer.epoch:
            raise CliError(f"checkpoint is already at epoch {trainer.epoch}")
        if cfg["epochs"] != trainer.cfg.epochs:
            # a longer run stretches the remaining schedule
            trainer.cfg = replace(trainer.cfg, epochs=cfg["epochs"])
            trainer.total_steps = trainer.steps_per_epoch * cfg["epochs"]
        model, norm = trainer.model, trainer.normalizer
    else:
        mc = _model_config(cfg)
        lr = cfg["lr"] if cfg["lr"] is not None else TrainConfig.peak_lr
        tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], peak_lr=lr, d=cfg["demos"],
                         seed=cfg["seed"])
        model = CorrectorTransformer(mc, seed=cfg["seed"])
        norm = Normalizer.fit(corpus.records)
        trainer = Trainer(model, norm, corpus, tc, val)
        save_model(out / "init.ckpt", model, norm, trainer)
    print(f"model: {model.cfg.n_layers} layers, {model.cfg.n_heads} heads, d_model {model.cfg.d_model}, "
          f"d_ff {model.cfg.d_ff}, {model.n_parameters()} parameters")
    every = max(1, cfg["epochs"] // 10)
    stop = min(cfg["epochs"], cfg["stop_after"] or cfg["epochs"])
    while trainer.epoch < stop:
        rec = trainer.train_epoch()
        if rec["epoch"] % every == 0:
            print(f"epoch {rec['epoch']:5d}  train {rec['train_mse']:.4g}  val {rec['val_mse']}")
    save_model(out / "model.ckpt", model, norm, trainer)
    _write_losses(out / "losses.csv", trainer.history)
    print(f"wrote {out / 'model.ckpt'} and {out / 'losses.csv'}")
    return 0


def _train_baseline(cfg, corpus: Corpus, out: Path) -> int:
    lr = cfg["lr"] if cfg["lr"] is not None else baselines.BaselineTrainConfig.lr
    bc = baselines.BaselineTrainConfig(lr=lr, epochs=cfg["epochs"], seed=cfg["seed"])
    if cfg["model"] == "neurvec":
        model, history = baselines.train_neurvec(corpus, cfg=bc, target=cfg["neurvec_target"])
    else:
        sys_ = _system({**cfg, "system": corpus.system})
        recs = corpus.records
        cfgi = corpus.config or IntegrationConfig.for_system(sys_)
        x, y = baselines.transition_pairs(sys_, [r.params for r in recs], [r.ic for r in recs], cfgi.dt,
                                          cfgi.n_fine_steps, cfgi.scheme)
        model, history = baselines.train_neuralode(x, y, cfgi.dt, bc, cfgi.scheme)
    path = out / f"{cfg['model']}.ckpt"
    baselines.save_baseline(path, model, {"system": corpus.system, "history": history})
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse"])
        w.writerows((i + 1, v) for i, v in enumerate(history))
    print(f"{cfg['model']}: final train MSE {history[-1]:.4g}; wrote {path}")
    return 0


# --- eval -------------------------------------------------------------------

def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    d = cfg["demos"]
    if cfg["regime"] or cfg["stride_scale"] != 1.0:
        base = _load_corpus(cfg["corpus"]) if cfg["corpus"] else None
        sys_ = _system({**cfg, "system": base.system if base else cfg["system"]})
        n = base.config.n_coarse_steps if base and base.config else DEFAULTS["gen"]["n_coarse"]
        config = _scaled_config(sys_, n, cfg["stride_scale"])
        corpus = generate_corpus(sys_, "test", cfg["variations"], cfg["trajectories"], config, cfg["seed"],
                                 regime=cfg["regime"])
    else:
        corpus = _load_corpus(cfg["corpus"])

    correctors, live = {}, {}
    if cfg["oracle_labels"]:
        correctors["oracle"] = evaluation.oracle_corrector
    if cfg["checkpoint"]:
        model, norm, _, _ = load_model(cfg["checkpoint"])
        correctors["transformer"] = evaluation.transformer_corrector(model, norm)
        live["transformer"] = lambda demos, q, m=model, nz=norm: model_corrector(m, nz, [r.demo() for r in demos],
                                                                               q.trajectory())
    if cfg["neurvec"]:
        nv, _ = baselines.load_baseline(cfg["neurvec"])
        correctors["neurvec"] = baselines.neurvec_corrector(nv)
        live["neurvec"] = lambda demos, q, m=nv: (lambda hist, j: m.correction(hist[-1]))
    if cfg["neuralode"]:
        node, _ = baselines.load_baseline(cfg["neuralode"])
        correctors["neural_ode"] = baselines.neuralode_evaluator(node)
    if not correctors:
        raise CliError("nothing to evaluate: pass --checkpoint, --neurvec, --neuralode or --oracle-labels")

    torch.set_num_threads(cfg["threads"])
    rollout = live if cfg["mode"] == "rollout" else None
    report = evaluation.evaluate_methods(corpus, correctors, d, cfg["mode"], cfg["regime"] or "", rollout)
    path = report.write_csv(out / "metrics.csv")
    for r in report.rows:
        print(f"{r.method:12s} MAE {r.mae:.4e}  RMSE {r.rmse:.4e}  (component RMSE {r.rmse_componentwise:.4e}, "
              f"n={r.n})")
    if cfg["plots"]:
        name = next(iter(correctors))
        res = evaluation.evaluate_corrections(corpus, correctors[name], d, cfg["mode"],
                                              (rollout or {}).get(name), max_queries=1)
        for i, (rec, fine, corr) in enumerate(zip(res.records, res.reference, res.corrected)):
            if i >= cfg["plots"]:
                break
            times = rec.trajectory().times
            evaluation.plot_trajectories(out / f"trajectory_{i}.svg", times, fine, rec.coarse, corr,
                                         f"{corpus.system} variation {rec.variation}",
                                         ("fine", "coarse", name))
    print(f"wrote {path}")
    return 0


# --- bench ------------------------------------------------------------------

def cmd_bench(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise CliError("--checkpoint is required")
    sys_ = _system(cfg)
    model, norm, _, _ = load_model(cfg["checkpoint"])
    config = IntegrationConfig.for_system(sys_, n_coarse=cfg["n_coarse"], stride=cfg["stride"])
    report = benchmark(sys_, model, norm, config, cfg["n_eqs"], cfg["demos"], cfg["repeats"], cfg["seed"])
    path = report.write_csv(Path(cfg["out"]) / "runtime.csv")
    norm_t = report.normalized
    print(f"{sys_.name}, {report.n_eqs} equations, k={report.stride}: fine {report.fine:.3f}s "
          f"({norm_t['fine']:.1f}x coarse), coarse {report.coarse:.3f}s, coarse+model {report.corrected:.3f}s "
          f"({norm_t['corrected']:.1f}x coarse); fine/corrected = {report.speedup:.2f}")
    print(f"wrote {path}")
    return 0


def benchmark(sys_, model, norm, config: IntegrationConfig, n_eqs: int, d: int = 5, repeats: int = 5,
              seed: int = 0) -> evaluation.RuntimeReport:
    """Time fine RK4 against coarse RK4 plus teacher-forced model correction.

    All equations share one parameter draw; its ``d`` demos are simulated up
    front (they are prompt context, like a stored dataset) and not timed.
    """
    params = sample_params(sys_, "test", [seed, 0])
    ics = np.stack([sample_initial_condition(sys_, [seed, 0, i]) for i in range(n_eqs + d)])
    recs, _ = variation_records(sys_, 0, params, d, config, seed)
    demos = [r.demo() for r in recs]

    def correct(states: np.ndarray) -> np.ndarray:
        queries = [Trajectory(sys_.name, params, s[0], config.dt, config.stride, s, config.scheme, Grid.COARSE)
                   for s in states]
        preds = predict_corrections(model, norm, demos, queries, chunk=len(queries))
        # teacher-forced: û[j] + S(û[j]) is the stored û[j+1]
        return states[:, 1:] + np.stack(preds)

    return evaluation.runtime_bench(sys_, params, ics[d:], config, correct, repeats)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        _write_resolved(cfg)
        return COMMANDS[args.command](cfg)
    except (CliError, RegistryError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"odecorrect {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
