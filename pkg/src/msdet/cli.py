"""Command-line front end.

Subcommands: gen-data, train-proposal, train-joint, propose, detect,
eval-recall, eval-ap, plot, grad-check. Exit codes: 0 success, 1 usage,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunConfig, build_head, build_network, config_hash, default_config,
    parse_config, serialize_config,
)
from .boxes import BBox
from .data import DataError, generate_synthetic, load_dataset, write_dataset
from .evaluation import (
    curve_csv, recall_table, recall_table_csv, recall_vs_budget, recall_vs_iou,
    average_precision,
)
from .network import (
    Proposal, checkpoint_params, collect_proposals, verify_arch,
)
from .plotting import svg_line_chart
from .profiles import PROFILE_NAMES, profile_classes
from .tensor import NumericError, assign_params, load_checkpoint, save_checkpoint
from .training import TrainingDiverged, train_joint, train_proposal

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):     # argparse default exits 2; we reserve 2 for data
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="msdet", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name in ("gen-data", "train-proposal", "train-joint", "propose",
                 "detect", "eval-recall", "eval-ap", "plot", "grad-check"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--profile", type=str, choices=PROFILE_NAMES, default=None)
    return parser


def _load_config(args) -> RunConfig:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    else:
        cfg = default_config(args.profile or "synthetic")
    if args.profile is not None and args.profile != cfg.profile:
        cfg = default_config(args.profile, seed=cfg.seed)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _val_split(cfg: RunConfig) -> list:
    path = Path(cfg.data_dir) / "val"
    if not path.exists():
        raise DataError(f"validation split not found: {path} (run gen-data first)")
    return load_dataset(path, cfg.class_map())


def _train_split(cfg: RunConfig) -> list:
    path = Path(cfg.data_dir) / "train"
    if not path.exists():
        raise DataError(f"training split not found: {path} (run gen-data first)")
    return load_dataset(path, cfg.class_map())


def cmd_gen_data(cfg: RunConfig) -> int:
    d = cfg.data
    root = Path(cfg.data_dir)
    train = generate_synthetic(d.n_images, d.size, d.octaves, cfg.seed,
                               min_height=d.min_height, height_bias=d.height_bias)
    val = generate_synthetic(d.n_val, d.size, d.octaves, cfg.seed + 1,
                             min_height=d.min_height, height_bias=d.height_bias)
    write_dataset(train, root / "train")
    write_dataset(val, root / "val")
    (root / "config.txt").write_text(serialize_config(cfg))
    print(f"wrote {len(train)} train / {len(val)} val images under {root}")
    return 0


def cmd_train_proposal(cfg: RunConfig) -> int:
    dataset = _train_split(cfg)
    out = _out_dir(cfg)
    net = build_network(cfg)
    stamp = config_hash(cfg)
    snapshots = out / "snapshots" if cfg.train.checkpoint_every > 0 else None
    if snapshots:
        snapshots.mkdir(parents=True, exist_ok=True)

    def snapshot(stage_name, model):
        # joint training initializes from the stage-1 model
        if stage_name == "stage1":
            save_checkpoint(out / "proposal_stage1.ckpt", checkpoint_params(model))

    rows = train_proposal(net, dataset, cfg.train,
                          log_path=out / "train_proposal.csv", config_hash=stamp,
                          checkpoint_dir=snapshots, stage_callback=snapshot)
    save_checkpoint(out / "proposal.ckpt", checkpoint_params(net))
    print(f"trained {len(rows)} iterations; final loss {rows[-1].report.total:.4f}")
    print(f"checkpoints: {out / 'proposal_stage1.ckpt'}, {out / 'proposal.ckpt'}")
    return 0


def cmd_train_joint(cfg: RunConfig, checkpoint: str | None) -> int:
    dataset = _train_split(cfg)
    out = _out_dir(cfg)
    net = build_network(cfg)
    head = build_head(cfg, net)
    if checkpoint is not None:
        state = load_checkpoint(checkpoint)
        assign_params(net.params(), state)
    snapshots = out / "snapshots" if cfg.train.checkpoint_every > 0 else None
    if snapshots:
        snapshots.mkdir(parents=True, exist_ok=True)
    rows = train_joint(net, head, dataset, cfg.train,
                       log_path=out / "train_joint.csv",
                       config_hash=config_hash(cfg), checkpoint_dir=snapshots)
    save_checkpoint(out / "joint.ckpt", checkpoint_params(net, head))
    print(f"trained {len(rows)} joint iterations; final loss {rows[-1].report.total:.4f}")
    print(f"checkpoint: {out / 'joint.ckpt'}")
    return 0


def _restore_network(cfg: RunConfig, checkpoint: str, with_head: bool = False):
    state = load_checkpoint(checkpoint)
    net = build_network(cfg)
    assign_params(net.params(), state)
    if not with_head:
        return net, None
    head = build_head(cfg, net)
    try:
        assign_params(head.params(), state)
    except KeyError as exc:
        raise DataError(f"{checkpoint} has no region-head parameters: {exc}") from exc
    verify_arch(state, net, head)
    return net, head


def _branch_proposals(net, image, budget: int, nms_iou: float):
    """Per-branch ranked lists plus the pooled cross-branch list."""
    outputs = net.forward(image[None])
    w, h = image.shape[2], image.shape[1]
    grids = net.anchor_grids(w, h)
    per_branch = [collect_proposals([o], [g], w, h, top_n=budget, nms_iou=nms_iou)
                  for o, g in zip(outputs, grids)]
    pooled = collect_proposals(outputs, grids, w, h, top_n=budget, nms_iou=nms_iou)
    return per_branch, pooled


def cmd_propose(cfg: RunConfig, checkpoint: str | None) -> int:
    if checkpoint is None:
        raise _UsageError("propose requires --checkpoint")
    dataset = _val_split(cfg)
    out = _out_dir(cfg)
    net, _ = _restore_network(cfg, checkpoint)
    budget = max(cfg.eval_spec.proposal_budgets)
    names = [b.name for b in cfg.branch_configs()]
    lines = [f"# config_hash={config_hash(cfg)}",
             "image,source,rank,score,cx,cy,w,h"]
    for i, sample in enumerate(dataset):
        per_branch, pooled = _branch_proposals(net, sample.image, budget,
                                               cfg.proposal_nms_iou)
        for name, props in list(zip(names, per_branch)) + [("combined", pooled)]:
            for rank, p in enumerate(props):
                b = p.box
                lines.append(f"{i},{name},{rank},{p.score:.6f},"
                             f"{b.cx:.2f},{b.cy:.2f},{b.w:.2f},{b.h:.2f}")
    (out / "proposals.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'proposals.csv'}")
    return 0


def _read_proposals_csv(path: Path) -> dict:
    """image index -> source name -> ranked [Proposal]."""
    table: dict[int, dict[str, list]] = {}
    for line in path.read_text().splitlines():
        if line.startswith("#") or line.startswith("image,") or not line.strip():
            continue
        img, source, rank, score, cx, cy, w, h = line.split(",")
        box = BBox(float(cx), float(cy), float(w), float(h))
        table.setdefault(int(img), {}).setdefault(source, []).append(
            Proposal(box, float(score), -1))
    return table


def cmd_eval_recall(cfg: RunConfig, checkpoint: str | None) -> int:
    dataset = _val_split(cfg)
    out = _out_dir(cfg)
    spec = cfg.eval_spec
    names = [b.name for b in cfg.branch_configs()]
    budget = max(spec.proposal_budgets)

    if checkpoint is not None:
        net, _ = _restore_network(cfg, checkpoint)
        per_image_branches, pooled = [], []
        for sample in dataset:
            per_branch, combined = _branch_proposals(net, sample.image, budget,
                                                     cfg.proposal_nms_iou)
            per_image_branches.append(per_branch)
            pooled.append(combined)
    else:
        path = out / "proposals.csv"
        if not path.exists():
            raise DataError(f"no --checkpoint and no {path}; run propose first")
        table = _read_proposals_csv(path)
        per_image_branches, pooled = [], []
        for i in range(len(dataset)):
            sources = table.get(i, {})
            per_image_branches.append([sources.get(n, []) for n in names])
            pooled.append(sources.get("combined", []))

    gts = [s.annotation.boxes() for s in dataset]
    stamp = config_hash(cfg)
    tag = f"iou{int(round(spec.iou_threshold * 100))}"
    table_res = recall_table(gts, per_image_branches, spec.height_bins,
                             spec.iou_threshold, 100, branch_names=names)
    (out / f"recall_table_{tag}_top100.csv").write_text(
        recall_table_csv(table_res, spec.iou_threshold, 100, stamp))
    budget_curve = recall_vs_budget(gts, pooled, spec.proposal_budgets,
                                    spec.iou_threshold)
    (out / f"recall_vs_budget_{tag}.csv").write_text(
        curve_csv(spec.proposal_budgets, budget_curve, "budget", "recall", stamp))
    grid = np.round(np.arange(0.05, 0.96, 0.05), 2)
    iou_curve = recall_vs_iou(gts, pooled, grid, budget=100)
    (out / "recall_vs_iou_top100.csv").write_text(
        curve_csv(grid, iou_curve, "iou", "recall", stamp))
    at_100 = budget_curve[list(spec.proposal_budgets).index(100)] \
        if 100 in spec.proposal_budgets else budget_curve[-1]
    print(f"recall@100={float(at_100):.4f} (iou>={spec.iou_threshold})")
    print(f"wrote recall_table_{tag}_top100.csv, recall_vs_budget_{tag}.csv, "
          f"recall_vs_iou_top100.csv in {out}")
    return 0


def cmd_detect(cfg: RunConfig, checkpoint: str | None) -> int:
    if checkpoint is None:
        raise _UsageError("detect requires --checkpoint")
    dataset = _val_split(cfg)
    out = _out_dir(cfg)
    net, head = _restore_network(cfg, checkpoint, with_head=True)
    from .detector import detect_image
    lines = [f"# config_hash={config_hash(cfg)}", "image,class,score,cx,cy,w,h"]
    for i, sample in enumerate(dataset):
        dets = detect_image(net, head, sample.image,
                            rois=cfg.train.joint.rois_per_image,
                            nms_iou=cfg.proposal_nms_iou)
        for d in dets:
            b = d.box
            lines.append(f"{i},{d.class_id},{d.score:.6f},"
                         f"{b.cx:.2f},{b.cy:.2f},{b.w:.2f},{b.h:.2f}")
    (out / "detections.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'detections.csv'}")
    return 0


def cmd_eval_ap(cfg: RunConfig, checkpoint: str | None) -> int:
    dataset = _val_split(cfg)
    out = _out_dir(cfg)
    if checkpoint is not None:
        rc = cmd_detect(cfg, checkpoint)
        if rc != 0:
            return rc
    path = out / "detections.csv"
    if not path.exists():
        raise DataError(f"no detections at {path}; run detect first")
    dets_by_class: dict[int, list] = {}
    for line in path.read_text().splitlines():
        if line.startswith("#") or line.startswith("image,") or not line.strip():
            continue
        img, cls, score, cx, cy, w, h = line.split(",")
        dets_by_class.setdefault(int(cls), []).append(
            (int(img), float(score), BBox(float(cx), float(cy), float(w), float(h))))
    stamp = config_hash(cfg)
    lines = [f"# config_hash={stamp}", "class,ap"]
    aps = []
    class_names = profile_classes(cfg.profile)
    for cls_id, name in enumerate(class_names, start=1):
        gts = {i: [o.box for o in s.annotation.objects if o.class_id == cls_id]
               for i, s in enumerate(dataset)}
        ap = average_precision(dets_by_class.get(cls_id, []), gts,
                               cfg.eval_spec.iou_threshold)
        aps.append(ap)
        lines.append(f"{name},{ap:.4f}")
    lines.append(f"mean,{np.mean(aps):.4f}")
    (out / "ap.csv").write_text("\n".join(lines) + "\n")
    print(f"mean AP = {np.mean(aps):.4f}; wrote {out / 'ap.csv'}")
    return 0


def _read_curve_csv(path: Path) -> tuple:
    xs, ys = [], []
    for line in path.read_text().splitlines()[2:]:
        if not line.strip():
            continue
        x, y = line.split(",")
        xs.append(float(x))
        ys.append(float(y))
    return xs, ys


def cmd_plot(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    made = []
    for pattern, x_label in (("recall_vs_budget_*.csv", "proposal budget"),
                             ("recall_vs_iou_*.csv", "overlap threshold")):
        for path in sorted(out.glob(pattern)):
            xs, ys = _read_curve_csv(path)
            stem = path.stem
            svg = svg_line_chart({stem: (xs, ys)}, x_label, "recall", title=stem)
            (out / f"{stem}.svg").write_text(svg)
            made.append(f"{stem}.svg")
    if not made:
        raise DataError(f"no curve CSVs found in {out}; run eval-recall first")
    print(f"wrote {', '.join(made)} in {out}")
    return 0


def cmd_grad_check(cfg: RunConfig) -> int:
    from .diagnostics import run_gradient_suite
    results = run_gradient_suite(seed=cfg.seed)
    worst = 0.0
    for name, err, tol in results:
        status = "PASS" if err < tol else "FAIL"
        print(f"{status} {name}: max relative error {err:.3e} (tolerance {tol:g})")
        worst = max(worst, err / tol)
    if worst >= 1.0:
        raise NumericError("gradient checks failed")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return USAGE_EXIT
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-proposal":
            return cmd_train_proposal(cfg)
        if args.command == "train-joint":
            return cmd_train_joint(cfg, args.checkpoint)
        if args.command == "propose":
            return cmd_propose(cfg, args.checkpoint)
        if args.command == "detect":
            return cmd_detect(cfg, args.checkpoint)
        if args.command == "eval-recall":
            return cmd_eval_recall(cfg, args.checkpoint)
        if args.command == "eval-ap":
            return cmd_eval_ap(cfg, args.checkpoint)
        if args.command == "plot":
            return cmd_plot(cfg)
        if args.command == "grad-check":
            return cmd_grad_check(cfg)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
