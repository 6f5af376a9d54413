"""Command-line entry point.

Informational output goes to stderr; machine-readable results go to stdout.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import load_run_config
from .errors import ConfigError, DataError, EchoError, NumericError, ValidationError
from .mae import clip_seed, mae_forward, make_mask_plan, write_panels
from .metrics import compute_report, export_scatter
from .model import ViViT, dry_run, token_grid
from .tensor import no_grad
from .train import ClipDataset, check_labels, finetune, predict, pretrain, preprocess, write_loss_log
from .video import (LabelRow, load_label_table, load_raw_video, save_raw_video, synthetic_corpus,
                    write_label_table)

log = logging.getLogger("echoai")


def _echo(*args):
    print(*args, file=sys.stderr)


def _config(args):
    rc = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc = type(rc)(rc.model, rc.train.replace(seed=args.seed))
    return rc


def _rows(data_dir: Path, split: str | None):
    labels = data_dir / "labels.csv"
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    if labels.exists():
        rows = load_label_table(labels)
        return [r for r in rows if split is None or r.split == split]
    if split is not None:
        raise ValidationError(f"{data_dir} has no labels.csv")
    # unlabelled directory: self-supervised use only
    return [LabelRow(p.name, 50.0, "TRAIN") for p in sorted(data_dir.glob("*.eaiv"))]


def _out_sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} is not empty; pass --force to overwrite")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    items = synthetic_corpus(args.count, args.seed, args.frames, args.size, args.fps)
    for item in items:
        save_raw_video(item.clip, out / item.file_name)
    write_label_table([LabelRow(i.file_name, i.ef, i.split) for i in items], out / "labels.csv")
    _echo(f"wrote {len(items)} clips and labels.csv to {out}")
    print(f"clips={len(items)}")
    return 0


def cmd_pretrain(args) -> int:
    rc = _config(args)
    data = Path(args.data)
    rows = _rows(data, "TRAIN" if (data / "labels.csv").exists() else None)
    ds = ClipDataset(data, rows, rc.model)
    out = Path(args.out)
    result = pretrain(ds, rc.model, rc.train, checkpoint_path=out, max_iterations=args.max_iterations)
    checkpoint.save_checkpoint(result.model.state_dict(), out)
    write_loss_log(result.log, _out_sibling(out, ".loss.csv"))
    _echo(f"pretrained {len(result.log)} iterations ({result.optimizer_steps} optimizer steps) -> {out}")
    print(f"iterations={len(result.log)}\noptimizer_steps={result.optimizer_steps}\n"
          f"final_loss={result.log[-1].loss:.6f}")
    return 0


def cmd_finetune(args) -> int:
    rc = _config(args)
    data = Path(args.data)
    all_rows = _rows(data, None)
    check_labels(data, all_rows)
    train_rows = [r for r in all_rows if r.split == "TRAIN"]
    val_rows = [r for r in all_rows if r.split == "VAL"]
    init = None
    if args.init:
        init = checkpoint.load_checkpoint(args.init)
    ds = ClipDataset(data, train_rows, rc.model)
    val = ClipDataset(data, val_rows, rc.model) if val_rows else None
    out = Path(args.out)
    result = finetune(ds, rc.model, rc.train, init_state=init, val_dataset=val, checkpoint_path=out,
                      max_iterations=args.max_iterations)
    checkpoint.save_checkpoint(result.model.state_dict(), out)
    if result.best_state is not None:
        checkpoint.save_checkpoint(result.best_state, _out_sibling(out, ".best" + out.suffix))
    write_loss_log(result.log, _out_sibling(out, ".loss.csv"))
    mode = "pretrained" if init is not None else "vanilla"
    _echo(f"fine-tuned ({mode} init) {len(result.log)} iterations -> {out}")
    lines = [f"init={mode}", f"iterations={len(result.log)}", f"final_loss={result.log[-1].loss:.6f}"]
    if result.best_val_mae is not None:
        lines.append(f"best_val_mae={result.best_val_mae:.6f}")
    print("\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    rc = _config(args)
    data = Path(args.data)
    rows = _rows(data, args.split)
    if not rows:
        raise ValidationError(f"split {args.split} is empty in {data}")
    state = checkpoint.load_checkpoint(args.ckpt)
    state = {k: v for k, v in state.items() if not k.startswith("dec.")}
    model = ViViT(rc.model, head=True)
    model.load_state(state)
    pairs = predict(ClipDataset(data, rows, rc.model), rc.model, model.params)
    report = compute_report(pairs)
    if args.scatter:
        export_scatter(pairs, args.scatter, args.svg)
    _echo(report.table())
    print(report.key_values())
    return 0


def cmd_reconstruct(args) -> int:
    rc = _config(args)
    cfg = rc.model
    state = checkpoint.load_checkpoint(args.ckpt)
    state = {k: v for k, v in state.items() if not k.startswith("head.")}
    model = ViViT(cfg, head=False, decoder=True)
    model.load_state(state)
    clip = load_raw_video(args.input)
    video = preprocess(clip, cfg, 0)
    plan = make_mask_plan(token_grid(cfg)[3], cfg.mask_ratio, clip_seed(rc.train.seed, 0))
    with no_grad():
        pred = mae_forward(video, model.params, cfg, plan)
    written = write_panels(video, pred, plan, cfg, args.out, Path(args.input).stem)
    _echo(f"wrote {len(written)} panel frames to {args.out}")
    print(f"panels=4\nframes_per_panel={cfg.recon_frames}\nfiles={len(written)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    if args.scale != "toy":
        raise ConfigError("only --scale toy is supported")
    reports = run_all(per_tensor=args.per_tensor, seed=args.seed or 0)
    for r in reports:
        _echo(str(r))
        for failure in r.failures[:5]:
            _echo("    " + failure)
    failed = [r.name for r in reports if not r.ok]
    print(f"checks={len(reports)}\nfailed={len(failed)}")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_dryrun(args) -> int:
    rc = _config(args)
    info = dry_run(rc.model)
    _echo(f"{args.config}: grid {info['grid']} -> {info['n_tokens']} tokens, "
          f"encoder {info['encoder_params']:,} params, decoder {info['decoder_params']:,} params")
    print("\n".join(f"{k}={v}" for k, v in info.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echoai", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pulsating-ventricle corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--fps", type=float, default=50.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="EF regression fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--init", help="pretrained checkpoint")
    src.add_argument("--from-scratch", action="store_true", help="vanilla (random) initialisation")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="TEST", choices=["TRAIN", "VAL", "TEST"])
    p.add_argument("--scatter")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="write original/masked/reconstructed panels")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scale", default="toy")
    p.add_argument("--per-tensor", type=int, default=6)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dryrun", help="validate a config and its shapes without training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_dryrun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except EchoError as exc:
        _echo(f"error: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _echo(f"error: {exc}")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
