"""Command-line interface.

Subcommands: train, infer, predict-landmarks, eval, ablate, make-data.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import torch

from .. import landmarks as lm3d
from ..errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    TrainingDivergedError,
    UsageError,
)
from .config import TrainConfig, load_config, with_overrides, _parse_value
from .data import SynthRanges, load_dataset, synthesize_dataset, synthesize_eval_set
from .imaging import latent_preview, load_png, save_png, write_latent
from .inference import (
    ABLATION_PRESETS,
    evaluate,
    infer,
    mixer_vs_id_direction,
    run_ablation_matrix,
)
from .training import (
    init_state,
    prepare_samples,
    restore_train_state,
    run_training,
    save_train_state,
)


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.resume:
        state = restore_train_state(args.resume)
        merged = with_overrides(state.config, steps=config.steps,
                                data_root=config.data_root)
        if merged != config:
            raise ConfigError(
                "--config disagrees with the checkpoint's embedded config "
                "(only steps and data_root may change on resume)")
        state.config = merged
        config = merged
    else:
        state = init_state(config)
    if not config.data_root:
        raise ConfigError("config [train] data_root is empty; run 'facesnap make-data' first")
    samples = load_dataset(config.data_root, config)
    prep = prepare_samples(state, samples)
    remaining = config.steps - state.step
    if remaining <= 0:
        print(f"checkpoint already at step {state.step} >= configured steps {config.steps}")
    else:
        history = run_training(state, prep, remaining, log_every=args.log_every)
        print(f"trained {remaining} steps: l_diff {history[0].l_diff:.4f} -> "
              f"{history[-1].l_diff:.4f}")
    save_train_state(state, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def _load_source_params(args) -> lm3d.FaceParams:
    if args.source_params:
        return lm3d.load_params(args.source_params)
    sidecar = Path(args.ref).with_suffix(".json")
    if sidecar.is_file():
        return lm3d.load_params(sidecar)
    raise UsageError(
        f"no --source-params given and no sidecar {sidecar} next to the reference image")


def _cmd_infer(args) -> int:
    state = restore_train_state(args.ckpt)
    ref = load_png(args.ref)
    source = _load_source_params(args)
    drive = lm3d.load_params(args.drive_params)
    report = infer(state, ref, source, drive, args.prompt, args.seed)
    out = Path(args.out)
    save_png(latent_preview(report.latent[0]), out)
    write_latent(report.latent, out.with_suffix(".lat"))
    print(f"face_sim={report.face_sim:.6f} clip_face={report.clip_face_sim:.6f}")
    print(f"wrote {out} and {out.with_suffix('.lat')}")
    return 0


def _cmd_predict_landmarks(args) -> int:
    source = lm3d.load_params(args.source)
    drive = lm3d.load_params(args.drive)
    basis = lm3d.default_basis(source.shape.shape[0], source.expression.shape[0],
                               seed=args.basis_seed)
    lm, image = lm3d.predict_landmarks(source, drive, basis, args.size, args.size)
    out = Path(args.out)
    save_png(image, out)
    sidecar = out.with_suffix("").with_name(out.stem + ".landmarks.txt")
    lines = [f"{x:.6f} {y:.6f} {int(v)}" for (x, y), v in zip(lm.points, lm.visibility)]
    sidecar.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} and {sidecar}")
    return 0


def _cmd_eval(args) -> int:
    state = restore_train_state(args.ckpt)
    rows, mean_fs, mean_cf = evaluate(state, args.ids, args.poses, prompt=args.prompt,
                                      seed=args.seed, out_path=args.out)
    print(f"{len(rows)} generations: mean face_sim={mean_fs:.6f} "
          f"mean clip_face={mean_cf:.6f}")
    if args.out:
        print(f"report written to {args.out}")
    return 0


def _parse_matrix(path: Path):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"malformed ablation matrix {path}: {exc}") from exc
    if "run" not in parser:
        raise ConfigError(f"ablation matrix {path} needs a [run] section")
    run = dict(parser.items("run"))
    unknown = set(run) - {"config", "data", "steps", "direction"}
    if unknown:
        raise ConfigError(f"unknown [run] keys in {path}: {sorted(unknown)}")
    if "data" not in run:
        raise ConfigError(f"[run] section in {path} must set data = <dataset root>")
    entries = []
    ablation_keys = {"feature_mode", "use_ffrnet", "control_mode", "base_id_attention"}
    for section in parser.sections():
        if section == "run":
            continue
        overrides = {}
        for key, raw in parser.items(section):
            if key == "preset":
                if raw not in ABLATION_PRESETS:
                    raise ConfigError(
                        f"unknown preset {raw!r}; choose from {sorted(ABLATION_PRESETS)}")
                overrides.update(ABLATION_PRESETS[raw])
            elif key in ablation_keys:
                overrides[key] = _parse_value(key, raw)
            else:
                raise ConfigError(f"unknown key {key!r} in matrix section [{section}]")
        entries.append((section, overrides))
    return run, entries


def _cmd_ablate(args) -> int:
    run, entries = _parse_matrix(Path(args.matrix))
    base = load_config(run["config"]) if "config" in run else TrainConfig()
    steps = int(run.get("steps", "20"))
    results = run_ablation_matrix(base, run["data"], entries, steps)
    if run.get("direction", "false").lower() in ("true", "1", "yes"):
        mixer_vs_id_direction(base, run["data"])
    print(f"completed {len(results)} ablation runs")
    return 0


def _cmd_make_data(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    ranges = SynthRanges()
    ids = synthesize_dataset(args.out, args.count, config, seed=args.seed, ranges=ranges)
    print(f"wrote {len(ids)} items to {args.out}")
    if args.eval_ids or args.eval_poses:
        synthesize_eval_set(args.out, args.eval_ids, args.eval_poses, config,
                            seed=args.seed, ranges=ranges)
        print(f"wrote eval set: {args.eval_ids} ids, {args.eval_poses} poses")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facesnap",
        description="identity-preserving toy portrait generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train mixer + control branch against the frozen base")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="facesnap.ckpt")
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="generate one image latent from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True, help="reference identity image (PNG)")
    p.add_argument("--drive-params", required=True)
    p.add_argument("--source-params", default=None)
    p.add_argument("--prompt", default="portrait photo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG (raw latent lands next to it)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("predict-landmarks",
                       help="source-identity landmarks under a driving pose")
    p.add_argument("--source", required=True)
    p.add_argument("--drive", required=True)
    p.add_argument("--out", required=True, help="output PNG control image")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--basis-seed", type=int, default=0)
    p.set_defaults(func=_cmd_predict_landmarks)

    p = sub.add_parser("eval", help="sweep (identity, pose template) pairs and report metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--prompt", default="portrait photo")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the configuration matrix end to end")
    p.add_argument("--matrix", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("make-data", help="write a synthetic dataset (and optional eval set)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-ids", type=int, default=0)
    p.add_argument("--eval-poses", type=int, default=0)
    p.set_defaults(func=_cmd_make_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
