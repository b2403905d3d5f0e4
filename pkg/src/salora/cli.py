"""``salora`` command line: gen-world, finetune, infer, analyze, selftest.

Every failure prints one line ``error[<category>]: <message>`` to stderr and
exits with status 1 (2 for usage errors, from argparse).
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import mtx
from .adapters import assemble_for_inference, export_record, load_adapters, save_adapters
from .errors import ConfigurationError, FormatError, SaloraError, ShapeError
from .model import forward, load_model, save_model
from .probe import (
    build_world,
    drift_report,
    load_world,
    model_with_layers,
    proposition1_check,
    save_world,
    write_drift_csv,
    write_prop1_csv,
)
from .trainer import Method, collect_contexts, fine_tune, write_loss_csv


def _resolve_config(path, method=None, seed=None):
    cfg = config_mod.load(path) if path else config_mod.ExperimentConfig()
    return cfg.with_overrides(method=method, seed=seed)


def cmd_gen_world(cfg, out):
    """Generate the seeded world for ``cfg`` into ``out``; returns the world."""
    world = build_world(seed=cfg.seed, **cfg.world.build_kwargs())
    out = Path(out)
    save_world(out, world)
    config_mod.dump(cfg, out / "config.ini")
    return world


def cmd_finetune(cfg, world_dir, out):
    """Fine-tune the world's model with ``cfg.method``.

    Writes ``adapters/`` (the checkpoint), ``loss.csv``, ``snapshot/`` (the
    training-time effective weights as a model checkpoint) and ``config.ini``.
    """
    world = load_world(world_dir)
    contexts = None
    if cfg.method in (Method.SALORA, Method.SALORA_NO_TASK_INIT):
        contexts = collect_contexts(world.model, world.protected_inputs, world.benign_inputs,
                                    r_s=cfg.r_s, r_t=cfg.r_t)
    result = fine_tune(world.model, (world.benign_inputs, world.benign_targets), cfg.method,
                       cfg.train, contexts, r=cfg.r)
    out = Path(out)
    records = {i: export_record(result.model.layers[i].adapter) for i in result.model.adapted()}
    save_adapters(out / "adapters", records)
    write_loss_csv(out / "loss.csv", result.loss_curve)
    save_model(out / "snapshot", model_with_layers(world.model, result.model.effective_weights()))
    config_mod.dump(cfg, out / "config.ini")
    return result


def _apply_adapters(model, adapter_dir):
    records = load_adapters(adapter_dir)
    weights = list(model.weights)
    for i, rec in records.items():
        if not 0 <= i < len(weights):
            raise ShapeError(f"adapter for layer {i} but the model has {len(weights)} layers")
        weights[i] = assemble_for_inference(weights[i], rec)
    return model_with_layers(model, weights)


def _resolve_model(path, base_model=None):
    """Model checkpoint directory, or an adapter checkpoint applied to ``base_model``."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"no manifest in {path}")
    fmt = mtx.read_manifest(manifest).get("format", "")
    if fmt == "salora-model-1":
        return load_model(path)
    if fmt == "salora-adapters-1":
        if base_model is None:
            raise ConfigurationError(f"{path} holds adapters but no base model was given")
        return _apply_adapters(base_model, path)
    if fmt == "salora-world-1":
        return load_model(path / "model")
    raise FormatError(f"{path}: unrecognized checkpoint format {fmt!r}")


def cmd_infer(model_path, adapter_path, inputs_path, out_path):
    model = load_model(model_path)
    if adapter_path:
        model = _apply_adapters(model, adapter_path)
    x = mtx.load(inputs_path)
    if x.shape[0] != model.in_dim:
        raise ShapeError(f"inputs have {x.shape[0]} rows but the model expects {model.in_dim}")
    y, _ = forward(model, x)
    mtx.save(out_path, y)
    return y


def cmd_analyze(world_dir, after, out, before=None, probe_iters=500, probe_lr=0.1):
    """Drift and gradient-overlap-bound reports; returns ``(drift_rows, prop1_rows)``.

    ``before`` defaults to the world's pre-trained model. The overlap-bound
    batch is the first ``out_dim`` benign samples of the world, with the
    mse gradient of the ``before`` model against the benign targets.
    """
    world = load_world(world_dir)
    model_before = world.model if before is None else _resolve_model(before, world.model)
    model_after = _resolve_model(after, world.model)
    rows = drift_report(world, model_before, model_after, probe_iters, probe_lr)
    n = min(model_before.out_dim, world.benign_inputs.shape[1])
    prop1 = proposition1_check(world, model_before, world.benign_inputs[:, :n],
                               world.benign_targets[:, :n])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_drift_csv(out / "drift.csv", rows)
    write_prop1_csv(out / "prop1.csv", prop1)
    return rows, prop1


def format_summary(rows, prop1):
    lines = [f"{'layer':>5} {'acc_before':>10} {'acc_after':>10} {'drop':>8} {'drift':>10} {'perturb':>10}"]
    for r in rows:
        lines.append(f"{r.layer:>5} {r.acc_before:>10.4f} {r.acc_after:>10.4f} {r.drop:>8.4f} "
                     f"{r.output_drift:>10.4g} {r.subspace_perturbation:>10.4g}")
    mean_drop = float(np.mean([r.drop for r in rows])) if rows else 0.0
    lines.append(f"mean probe drop: {mean_drop:.4f}")
    checked = [p for p in prop1 if not p.vacuous]
    lines.append(f"overlap bound: {sum(p.passed for p in checked)}/{len(checked)} checked instances hold, "
                 f"{len(prop1) - len(checked)} vacuous")
    return "\n".join(lines)


def _selftest(seed):
    from . import selftest
    return selftest.run(seed)


def build_parser():
    parser = argparse.ArgumentParser(prog="salora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=False):
        p.add_argument("--config", help="experiment config (INI key = value)")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        if method:
            p.add_argument("--method", choices=[m.value for m in Method], help="override [experiment] method")

    p = sub.add_parser("gen-world", help="generate a seeded synthetic world")
    common(p)
    p.add_argument("--out", help="output directory (default [paths] world)")

    p = sub.add_parser("finetune", help="train adapters on a world's benign task")
    common(p, method=True)
    p.add_argument("--world", help="world directory (default [paths] world)")
    p.add_argument("--out", help="output directory (default [paths] out)")

    p = sub.add_parser("infer", help="run a model (plus optional adapters) on an MTX1 batch")
    p.add_argument("--model", required=True, help="model checkpoint directory")
    p.add_argument("--adapters", help="adapter checkpoint directory")
    p.add_argument("--inputs", required=True, help="MTX1 file, one sample per column")
    p.add_argument("--out", required=True, help="output MTX1 file")

    p = sub.add_parser("analyze", help="probe drift and gradient-overlap-bound reports")
    common(p)
    p.add_argument("--world", help="world directory (default [paths] world)")
    p.add_argument("--before", help="model or adapter checkpoint (default: the world's model)")
    p.add_argument("--after", required=True, help="model or adapter checkpoint to compare")
    p.add_argument("--out", help="output directory for drift.csv and prop1.csv")

    p = sub.add_parser("selftest", help="quick numerical self-checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _need(value, what):
    if not value:
        raise ConfigurationError(f"no {what} given (flag or [paths] entry)")
    return value


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return 0 if _selftest(args.seed) else 1
    if args.command == "infer":
        cmd_infer(args.model, args.adapters, args.inputs, args.out)
        return 0
    cfg = _resolve_config(args.config, getattr(args, "method", None), args.seed)
    if args.command == "gen-world":
        cmd_gen_world(cfg, _need(args.out or cfg.paths.world, "output directory"))
    elif args.command == "finetune":
        cmd_finetune(cfg, _need(args.world or cfg.paths.world, "world directory"),
                     _need(args.out or cfg.paths.out, "output directory"))
    elif args.command == "analyze":
        rows, prop1 = cmd_analyze(_need(args.world or cfg.paths.world, "world directory"), args.after,
                                  _need(args.out or cfg.paths.out, "output directory"), args.before,
                                  cfg.probe.iters, cfg.probe.lr)
        print(format_summary(rows, prop1))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except SaloraError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"error[io]: {exc.strerror or exc}{where}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
