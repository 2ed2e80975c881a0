"""Command-line entry point: ``mgvit <subcommand> [options]``.

Exit status is 0 on success, 1 on bad input or usage, 2 on internal error.
Progress goes to stderr; results are written only under ``--output-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (generate_classification, generate_detection, load_dataset, save_dataset,
                   spec_from_pairs, spec_to_dict)
from .detection import detection_salience_loss, detection_targets, evaluate_detection
from .errors import InputError, MGViTError, UsageError
from .maskgen import (classification_loss, compute_salience, make_mask, write_mask_csv,
                      write_salience_pgm)
from .selection import FewShotTask
from .trainer import (DETECTION, TrainConfig, ablation_configs, choose_shots,
                      evaluate_classification, finetune_and_evaluate, load_config, load_run,
                      prepare_stage1, run_experiment, save_run, strip_wall_clock)

log = logging.getLogger("mgvit")

COMMANDS = ("gen-data", "pretrain", "select-shots", "finetune", "evaluate", "salience", "ablate")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")
    common.add_argument("--output-dir", default="mgvit-out", help="where outputs go (default: %(default)s)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, applied after --config; repeatable")
    common.add_argument("--data", help="directory written by gen-data (sets base_path/novel_path)")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")

    parser = _Parser(prog="mgvit", description="Mask-guided ViT few-shot pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic base/novel dataset")
    p = sub.add_parser("pretrain", parents=[common], help="stage 1: vanilla training on the base set")
    p.add_argument("--resume", action="store_true",
                   help="continue from <output-dir>/stage1.ckpt if present")
    p = sub.add_parser("select-shots", parents=[common], help="choose the few-shot samples")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("finetune", parents=[common], help="stage 2 fine-tuning and evaluation")
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--task-file", help="few-shot task JSON from select-shots")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a task's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task-file", help="few-shot task JSON; default: the whole novel set")
    p = sub.add_parser("salience", parents=[common], help="export salience map and mask of one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, required=True, action="append", help="sample id; repeatable")
    p.add_argument("--split", choices=("base", "novel"), default="base")
    sub.add_parser("ablate", parents=[common], help="run the ablation grid, one report per row")
    return parser


# ----------------------------------------------------------------------
# helpers


def _resolve(args) -> tuple[TrainConfig, dict]:
    overrides = list(args.set)
    if args.data:
        root = Path(args.data)
        overrides += [f"base_path = {root / 'base'}", f"novel_path = {root / 'novel'}"]
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    cfg, data = load_config(args.config, overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg, data


def _out(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)


def _load_data(cfg: TrainConfig):
    for p in (cfg.base_path, cfg.novel_path):
        if not p:
            raise InputError("no dataset given: use --data DIR or set base_path/novel_path")
    return load_dataset(cfg.base_path), load_dataset(cfg.novel_path)


def _stamp(cfg: TrainConfig, **extra) -> dict:
    d = {"config": cfg.to_dict(), "seed": cfg.seed}
    d.update(extra)
    return d


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: TrainConfig, data: dict) -> None:
    spec = spec_from_pairs(data, seed=cfg.seed)
    gen = generate_detection if cfg.task == DETECTION else generate_classification
    base, novel = gen(spec)
    out = _out(args)
    meta = _stamp(cfg, task=cfg.task, spec=spec_to_dict(spec))
    for name, records in (("base", base), ("novel", novel)):
        save_dataset(out / name, records, dict(meta, split=name))
        log.info("wrote %d %s samples to %s", len(records), name, out / name)


def cmd_pretrain(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    out = _out(args)
    path = out / "stage1.ckpt"
    model = state = None
    if args.resume and path.exists():
        model, state, meta = load_run(path)
        if meta.get("config") != cfg.to_dict():
            raise InputError(f"{path} was written with a different config")
        log.info("resuming stage 1 at epoch %d", state.epoch)

    if model is None:
        model = prepare_stage1(cfg, base, novel, train=False).model
    res = prepare_stage1(cfg, base, novel, model, state,
                         lambda st: save_run(path, model, st, _stamp(cfg)))
    save_run(path, res.model, res.state, _stamp(cfg, base_test_metric=res.base_test_metric))
    _write_json(out / "stage1.json", _stamp(cfg, loss_trace=res.state.loss_trace,
                                            base_test_metric=res.base_test_metric))


def _stage1_from(args, cfg, base, novel):
    model, _meta, _extra = load_checkpoint(args.checkpoint)
    model.mg_flow = False
    return prepare_stage1(cfg, base, novel, model, train=False)


def cmd_select_shots(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    s1 = _stage1_from(args, cfg, base, novel)
    task = choose_shots(cfg, s1.model, novel, s1.novel_labels)
    task.config = _stamp(cfg)
    task.save(_out(args) / "task.json")


def _load_task(path) -> FewShotTask:
    task = FewShotTask.load(path)
    task.validate()
    return task


def cmd_finetune(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    s1 = _stage1_from(args, cfg, base, novel)
    task = _load_task(args.task_file) if args.task_file else None
    t0 = time.time()
    report = finetune_and_evaluate(cfg, s1, novel, task)
    model = report.pop("model")
    out = _out(args)
    save_checkpoint(out / "finetuned.ckpt", model, _stamp(cfg, metrics=report["metrics"]))
    report["wall_clock"] = {"seconds": time.time() - t0}
    _write_json(out / "report.json", report)


def cmd_evaluate(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    model, meta, _ = load_checkpoint(args.checkpoint)
    by_id = {r.id: r for r in novel}
    if args.task_file:
        task = _load_task(args.task_file)
        missing = [i for i in task.test_ids if i not in by_id]
        if missing:
            raise InputError(f"task test ids not in the novel set, e.g. {missing[0]}")
        test = [by_id[i] for i in task.test_ids]
        columns = sorted(task.shot_ids)
    else:
        test = list(novel)
        columns = sorted({r.label for r in novel})
    if cfg.task == DETECTION:
        metrics = {"AP": evaluate_detection(model, test)}
    else:
        metrics = {"ACC": evaluate_classification(model, test, columns)}
    _write_json(_out(args) / "eval.json",
                _stamp(cfg, metrics=metrics, checkpoint=str(args.checkpoint),
                       mg_flow=model.mg_flow, num_test=len(test)))


def cmd_salience(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    model, _meta, _ = load_checkpoint(args.checkpoint)
    by_id = {r.id: r for r in (base if args.split == "base" else novel)}
    c = model.config
    k = min(cfg.topk, c.num_patches)
    out = _out(args)
    header = json.dumps(_stamp(cfg, checkpoint=str(args.checkpoint)), sort_keys=True)
    for sid in args.sample:
        if sid not in by_id:
            raise InputError(f"sample {sid} is not in the {args.split} split")
        r = by_id[sid]
        if cfg.task == DETECTION:
            target = detection_targets([r], c.image_width, c.image_height)[0]
            sal = compute_salience(model, r.image, target,
                                   detection_salience_loss(cfg.det_loss), sample_id=sid)
        else:
            sal = compute_salience(model, r.image, r.label, classification_loss(cfg.label_smoothing),
                                   sample_id=sid)
        mask = make_mask(sal, k, cfg.mask_kind, c.grid)
        note = f"sample {sid} k {k} kind {cfg.mask_kind}\n{header}"
        write_salience_pgm(out / f"{sid}.salience.pgm", sal, c.grid, note)
        write_mask_csv(out / f"{sid}.mask.csv", mask, c.grid, note)
        log.info("wrote salience and mask for sample %d", sid)


def cmd_ablate(args, cfg: TrainConfig, data: dict) -> None:
    base, novel = _load_data(cfg)
    out = _out(args)
    s1 = prepare_stage1(cfg, base, novel)
    summary = {}
    for name, row in ablation_configs(cfg).items():
        log.info("ablation row %s", name)
        report = run_experiment(row, base, novel, s1)
        _write_json(out / f"{name}.report.json", report)
        summary[name] = strip_wall_clock(report)["metrics"]
    _write_json(out / "ablation.json", _stamp(cfg, rows=summary))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "select-shots": cmd_select_shots,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "salience": cmd_salience,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, data = _resolve(args)
        if data and args.command != "gen-data":
            log.info("ignoring data.* keys outside gen-data: %s", sorted(data))
        HANDLERS[args.command](args, cfg, data)
    except InputError as exc:
        print(f"mgvit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (MGViTError, Exception) as exc:
        print(f"mgvit {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
