"""``mcva`` command line: data generation, training, evaluation, ablations and leakage."""
import argparse
import os
import re
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .errors import ConfigError, MCVAError
from .masking import generate_block_sharing_masks, generate_random_masks, leakage_oracle_mse, partition_blocks
from .model import FlowModel
from .synthdata import Dataset, write_dataset
from .trainer import STRIDE, cost_volume_batch, evaluate, run_finetuning, run_pretraining

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text):
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m or int(m.group(1)) <= 0 or int(m.group(2)) <= 0:
        raise argparse.ArgumentTypeError(f"expected HxW with positive integers, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _ratio(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def build_parser():
    p = _Parser(prog="mcva", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic frame-pair dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", required=True, type=_positive)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--size", required=True, type=_size, help="HxW image size")
    g.add_argument("--labeled", action="store_true", help="also write flow.flo ground truth")
    g.add_argument("--static", action="store_true", help="identical frames (zero motion)")
    g.add_argument("--noise", type=float, default=0.01, help="Gaussian noise std on frame 2")

    t = sub.add_parser("pretrain", help="masked cost-volume pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    f = sub.add_parser("finetune", help="supervised flow finetuning")
    f.add_argument("--config", required=True)
    f.add_argument("--init")
    f.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="AEPE / F1-all of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")

    a = sub.add_parser("ablate-mask", help="masking strategy / ratio / query sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)

    lk = sub.add_parser("leakage-report", help="copy-oracle MSE of block vs random masks")
    lk.add_argument("--data", required=True)
    lk.add_argument("--ratio", required=True, type=_ratio)
    lk.add_argument("--seeds", required=True, type=_positive)
    return p


def _write_kv(path, record):
    with open(path, "w") as f:
        for k, v in record.items():
            f.write(f"{k}={v}\n")


def cmd_gen_data(args):
    h, w = args.size
    m = write_dataset(args.out, args.count, args.seed, h, w, labeled=args.labeled,
                      noise=args.noise, static=args.static)
    print(f"wrote {m['count']} pairs ({h}x{w}) to {args.out}")


def cmd_pretrain(args):
    cfg = load_config(args.config, phase="pretrain")
    ckpt = run_pretraining(cfg)
    save_checkpoint(args.out, ckpt)
    losses = ckpt.history.get("loss", [])
    tail = f" final_loss={losses[-1]:.6g}" if losses else ""
    print(f"pretrain steps={cfg.steps}{tail} -> {args.out}")


def cmd_finetune(args):
    cfg = load_config(args.config, phase="finetune")
    init = load_checkpoint(args.init) if args.init else None
    ckpt = run_finetuning(cfg, init)
    save_checkpoint(args.out, ckpt)
    print(f"finetune steps={cfg.steps} init={args.init or 'scratch'} -> {args.out}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    m = evaluate(ckpt, args.data)
    record = {"ckpt": args.ckpt, "data": args.data, "count": m["count"],
              "aepe": f"{m['aepe']:.6f}", "f1_all": f"{m['f1_all']:.4f}"}
    for k, v in record.items():
        print(f"{k}={v}")
    if args.report:
        _write_kv(args.report, record)


# (axis, label, overrides) of the masking sweep
ABLATION_GRID = [
    ("strategy", "block", {"mask_strategy": "block", "mask_ratio": 0.5}),
    ("strategy", "random", {"mask_strategy": "random", "mask_ratio": 0.5}),
    ("ratio", "20%", {"mask_strategy": "block", "mask_ratio": 0.2}),
    ("ratio", "50%", {"mask_strategy": "block", "mask_ratio": 0.5}),
    ("ratio", "80%", {"mask_strategy": "block", "mask_ratio": 0.8}),
    ("query", "fixed+PE", {"location_mode": "fixed", "query_mode": "pe_only"}),
    ("query", "random+PE", {"location_mode": "random", "query_mode": "pe_only"}),
    ("query", "random+PE+patch", {"location_mode": "random", "query_mode": "pe_plus_patch"}),
]


def tail_mean(losses, frac=0.25):
    if not losses:
        return float("nan")
    k = max(1, int(round(len(losses) * frac)))
    return float(np.mean(losses[-k:]))


def run_ablation(cfg, out_dir):
    """Pretrain once per distinct sweep setting; returns table rows."""
    os.makedirs(out_dir, exist_ok=True)
    done = {}
    rows = []
    for axis, label, over in ABLATION_GRID:
        run_cfg = cfg.replace(phase="pretrain", **over)
        key = run_cfg.to_text()
        if key not in done:
            name = f"run{len(done):02d}"
            run_cfg = run_cfg.replace(log=os.path.join(out_dir, f"{name}.log"))
            if os.path.exists(run_cfg.log):
                os.remove(run_cfg.log)
            ckpt = run_pretraining(run_cfg)
            save_checkpoint(os.path.join(out_dir, f"{name}.ckpt"), ckpt)
            done[key] = (name, tail_mean(ckpt.history["loss"]))
        name, loss = done[key]
        rows.append((axis, label, run_cfg.mask_strategy, run_cfg.mask_ratio, run_cfg.location_mode,
                     run_cfg.query_mode, loss, name))
    return rows


def format_ablation(rows):
    head = f"{'axis':<9}{'setting':<17}{'strategy':<9}{'ratio':>6}  {'location':<8} {'query':<14}{'pretext_loss':>13}  run"
    lines = [head, "-" * len(head)]
    for axis, label, strat, ratio, loc, query, loss, name in rows:
        lines.append(f"{axis:<9}{label:<17}{strat:<9}{ratio:>6.2f}  {loc:<8} {query:<14}{loss:>13.6f}  {name}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = load_config(args.config, phase="pretrain")
    rows = run_ablation(cfg, args.out)
    table = format_ablation(rows)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table)
    sys.stdout.write(table)


def leakage_report(dataset, ratio, seeds, model_cfg=None):
    """Per seed, mean copy-oracle MSE over the dataset for block and random masks."""
    model = FlowModel(model_cfg or TrainConfig())
    h, w = dataset.height // STRIDE, dataset.width // STRIDE
    if dataset.height % STRIDE or dataset.width % STRIDE or h % 8 or w % 8:
        raise ConfigError(f"{dataset.root}: feature grid {h}x{w} must be divisible by 8 for masking")
    cvs = []
    for i in range(len(dataset)):
        pair = dataset[i]
        cvs.append(cost_volume_batch(model, pair.frame1[None], pair.frame2[None]).data[0])
    rows = []
    for seed in range(seeds):
        block, rand = [], []
        for i, cv in enumerate(cvs):
            rng = np.random.default_rng([seed, i, 0])
            part = partition_blocks(h, w, None, rng)
            block.append(leakage_oracle_mse(cv, generate_block_sharing_masks(part, h, w, ratio, rng)))
            rng = np.random.default_rng([seed, i, 1])
            rand.append(leakage_oracle_mse(cv, generate_random_masks(h, w, h, w, ratio, rng)))
        rows.append((seed, float(np.mean(block)), float(np.mean(rand))))
    return rows


def cmd_leakage(args):
    ds = Dataset(args.data)
    rows = leakage_report(ds, args.ratio, args.seeds)
    print(f"pairs={len(ds)} ratio={args.ratio}")
    for seed, b, r in rows:
        print(f"seed={seed} block_mse={b:.6g} random_mse={r:.6g} block_gt_random={int(b > r)}")
    print(f"mean block_mse={np.mean([r[1] for r in rows]):.6g} "
          f"random_mse={np.mean([r[2] for r in rows]):.6g}")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate-mask": cmd_ablate, "leakage-report": cmd_leakage}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MCVAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
