"""Run configuration: a flat sectioned key=value text format.

Unknown sections or keys are rejected on load; serialization is canonical,
so parse followed by serialize is idempotent and the serialized text hashes
stably (the hash stamps every output file).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .anchors import BranchConfig
from .data import DataError
from .evaluation import RecallSpec
from .network import DetectionHead, ProposalNetwork, TrunkSpec
from .profiles import (
    PROFILE_NAMES, profile_branches, profile_classes, profile_fc,
    profile_height_bins, profile_recall_iou, profile_roi,
)
from .training import JointConfig, StageConfig, TrainConfig

import numpy as np


@dataclass
class DataGenConfig:
    size: int = 256
    n_images: int = 80
    n_val: int = 20
    octaves: int = 3
    min_height: float = 25.0
    height_bias: float = 0.0


@dataclass
class RunConfig:
    profile: str = "synthetic"
    seed: int = 0
    trunk_channels: tuple = (16, 32, 64, 64, 128, 128)
    fc_width: int = 0               # 0 = take the profile's value
    use_deconv: bool = True
    gamma: float = 3.0
    train: TrainConfig = None
    eval_spec: RecallSpec = None
    proposal_nms_iou: float = 0.7
    data: DataGenConfig = None
    data_dir: str = "data"
    out_dir: str = "out"
    branches: list = field(default_factory=list)    # [] = profile rows

    def branch_configs(self) -> list:
        return list(self.branches) if self.branches else profile_branches(self.profile)

    def n_classes(self) -> int:
        return len(profile_classes(self.profile))

    def class_map(self) -> dict:
        return {name: i + 1 for i, name in enumerate(profile_classes(self.profile))}

    def head_fc_width(self) -> int:
        return self.fc_width or profile_fc(self.profile)


def default_config(profile: str = "synthetic", seed: int = 0) -> RunConfig:
    if profile not in PROFILE_NAMES:
        raise DataError(f"unknown profile {profile!r}; choose from {PROFILE_NAMES}")
    cfg = RunConfig(profile=profile, seed=seed)
    cfg.train = TrainConfig(
        stage1=StageConfig("random", 0.05, iters=60, lr=0.015),
        stage2=StageConfig("bootstrapping", 1.0, iters=360, lr=0.015,
                           decay_every=240, decay_factor=0.1),
        joint=JointConfig(iters=120, lr=0.015, decay_every=80, decay_factor=0.1),
        crop_size=224, resize_scales=(0.7, 1.0, 1.4), batch_size=4,
        momentum=0.9, gamma=3.0, seed=seed)
    cfg.eval_spec = RecallSpec(
        iou_threshold=profile_recall_iou(profile),
        proposal_budgets=(1, 5, 10, 25, 50, 100),
        height_bins=profile_height_bins(profile))
    cfg.data = DataGenConfig(min_height=27.0)
    return cfg


# ---------------------------------------------------------------------------
# Text format: [section] headers, key = value lines, # comments.
# ---------------------------------------------------------------------------

def _fmt_floats(values) -> str:
    return ",".join(f"{v:g}" for v in values)

def _fmt_ints(values) -> str:
    return ",".join(str(int(v)) for v in values)

def _fmt_bins(bins) -> str:
    return ",".join(f"{lo:g}:{hi:g}" for lo, hi in bins)

def _fmt_pairs(pairs) -> str:
    return ",".join(f"{int(a)}x{int(b)}" for a, b in pairs)


def serialize_config(cfg: RunConfig) -> str:
    t = cfg.train
    lines = [
        "[run]",
        f"profile = {cfg.profile}",
        f"seed = {cfg.seed}",
        f"checkpoint_every = {t.checkpoint_every}",
        "[model]",
        f"trunk_channels = {_fmt_ints(cfg.trunk_channels)}",
        f"fc_width = {cfg.fc_width}",
        f"use_deconv = {'true' if cfg.use_deconv else 'false'}",
        "[sampling]",
        f"gamma = {cfg.gamma:g}",
        "[augment]",
        f"crop_size = {t.crop_size}",
        f"resize_scales = {_fmt_floats(t.resize_scales)}",
        f"batch_size = {t.batch_size}",
        f"momentum = {t.momentum:g}",
    ]
    for name, st in (("stage1", t.stage1), ("stage2", t.stage2)):
        lines += [
            f"[train.{name}]",
            f"strategy = {st.strategy}",
            f"lambda = {st.lam:g}",
            f"iters = {st.iters}",
            f"lr = {st.lr:g}",
            f"decay_every = {st.decay_every}",
            f"decay_factor = {st.decay_factor:g}",
        ]
    j = t.joint
    lines += [
        "[train.joint]",
        f"strategy = {j.strategy}",
        f"lambda = {j.lam:g}",
        f"iters = {j.iters}",
        f"lr = {j.lr:g}",
        f"decay_every = {j.decay_every}",
        f"decay_factor = {j.decay_factor:g}",
        f"frozen_stages = {j.frozen_stages}",
        f"alpha_det = {j.alpha_det:g}",
        f"rois_per_image = {j.rois_per_image}",
        f"train_deconv = {'true' if j.train_deconv else 'false'}",
        "[eval]",
        f"iou_threshold = {cfg.eval_spec.iou_threshold:g}",
        f"budgets = {_fmt_ints(cfg.eval_spec.proposal_budgets)}",
        f"height_bins = {_fmt_bins(cfg.eval_spec.height_bins)}",
        f"proposal_nms_iou = {cfg.proposal_nms_iou:g}",
        "[data]",
        f"size = {cfg.data.size}",
        f"n_images = {cfg.data.n_images}",
        f"n_val = {cfg.data.n_val}",
        f"octaves = {cfg.data.octaves}",
        f"min_height = {cfg.data.min_height:g}",
        f"height_bias = {cfg.data.height_bias:g}",
        "[paths]",
        f"data_dir = {cfg.data_dir}",
        f"out_dir = {cfg.out_dir}",
    ]
    if cfg.branches:
        lines.append("[branches]")
        for b in cfg.branches:
            lines.append(
                f"{b.name} = stride={b.stride} filters={_fmt_pairs(b.filter_sizes)} "
                f"anchors={_fmt_pairs(b.anchor_sizes)} alpha={b.alpha:g}")
    return "\n".join(lines) + "\n"


_SECTION_KEYS = {
    "run": {"profile", "seed", "checkpoint_every"},
    "model": {"trunk_channels", "fc_width", "use_deconv"},
    "sampling": {"gamma"},
    "augment": {"crop_size", "resize_scales", "batch_size", "momentum"},
    "train.stage1": {"strategy", "lambda", "iters", "lr", "decay_every", "decay_factor"},
    "train.stage2": {"strategy", "lambda", "iters", "lr", "decay_every", "decay_factor"},
    "train.joint": {"strategy", "lambda", "iters", "lr", "decay_every",
                    "decay_factor", "frozen_stages", "alpha_det",
                    "rois_per_image", "train_deconv"},
    "eval": {"iou_threshold", "budgets", "height_bins", "proposal_nms_iou"},
    "data": {"size", "n_images", "n_val", "octaves", "min_height", "height_bias"},
    "paths": {"data_dir", "out_dir"},
    "branches": None,       # free-form branch names
}


def _parse_pairs(text: str) -> tuple:
    return tuple(tuple(int(v) for v in item.split("x")) for item in text.split(","))


def _parse_branch_row(name: str, text: str) -> BranchConfig:
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise DataError(f"branch {name}: bad token {token!r}")
        k, v = token.split("=", 1)
        fields[k] = v
    try:
        return BranchConfig(
            name, int(fields["stride"]),
            _parse_pairs(fields["filters"]),
            _parse_pairs(fields["anchors"]),
            float(fields.get("alpha", 1.0)))
    except (KeyError, ValueError) as exc:
        raise DataError(f"branch {name}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTION_KEYS:
                raise DataError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if current is None or "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value' inside a section")
        key, value = (part.strip() for part in line.split("=", 1))
        allowed = _SECTION_KEYS[current]
        if allowed is not None and key not in allowed:
            raise DataError(f"line {lineno}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise DataError(f"line {lineno}: duplicate key {key!r}")
        sections[current][key] = value

    run = sections.get("run", {})
    profile = run.get("profile", "synthetic")
    cfg = default_config(profile, seed=int(run.get("seed", 0)))

    def take(section, key, cast, default):
        if section in sections and key in sections[section]:
            return cast(sections[section][key])
        return default

    bool_cast = lambda v: v.lower() in ("true", "1", "yes")
    cfg.trunk_channels = take("model", "trunk_channels",
                              lambda v: tuple(int(x) for x in v.split(",")),
                              cfg.trunk_channels)
    cfg.fc_width = take("model", "fc_width", int, cfg.fc_width)
    cfg.use_deconv = take("model", "use_deconv", bool_cast, cfg.use_deconv)
    cfg.gamma = take("sampling", "gamma", float, cfg.gamma)

    t = cfg.train
    t.crop_size = take("augment", "crop_size", int, t.crop_size)
    t.resize_scales = take("augment", "resize_scales",
                           lambda v: tuple(float(x) for x in v.split(",")),
                           t.resize_scales)
    t.batch_size = take("augment", "batch_size", int, t.batch_size)
    t.momentum = take("augment", "momentum", float, t.momentum)
    t.gamma = cfg.gamma
    t.seed = cfg.seed
    t.checkpoint_every = take("run", "checkpoint_every", int, t.checkpoint_every)

    for name, st in (("train.stage1", t.stage1), ("train.stage2", t.stage2)):
        st.strategy = take(name, "strategy", str, st.strategy)
        st.lam = take(name, "lambda", float, st.lam)
        st.iters = take(name, "iters", int, st.iters)
        st.lr = take(name, "lr", float, st.lr)
        st.decay_every = take(name, "decay_every", int, st.decay_every)
        st.decay_factor = take(name, "decay_factor", float, st.decay_factor)
    j = t.joint
    j.strategy = take("train.joint", "strategy", str, j.strategy)
    j.lam = take("train.joint", "lambda", float, j.lam)
    j.iters = take("train.joint", "iters", int, j.iters)
    j.lr = take("train.joint", "lr", float, j.lr)
    j.decay_every = take("train.joint", "decay_every", int, j.decay_every)
    j.decay_factor = take("train.joint", "decay_factor", float, j.decay_factor)
    j.frozen_stages = take("train.joint", "frozen_stages", int, j.frozen_stages)
    j.alpha_det = take("train.joint", "alpha_det", float, j.alpha_det)
    j.rois_per_image = take("train.joint", "rois_per_image", int, j.rois_per_image)
    j.train_deconv = take("train.joint", "train_deconv", bool_cast, j.train_deconv)

    bins_cast = lambda v: tuple(tuple(float(x) for x in pair.split(":"))
                                for pair in v.split(","))
    cfg.eval_spec = RecallSpec(
        iou_threshold=take("eval", "iou_threshold", float, cfg.eval_spec.iou_threshold),
        proposal_budgets=take("eval", "budgets",
                              lambda v: tuple(int(x) for x in v.split(",")),
                              cfg.eval_spec.proposal_budgets),
        height_bins=take("eval", "height_bins", bins_cast, cfg.eval_spec.height_bins))
    cfg.proposal_nms_iou = take("eval", "proposal_nms_iou", float, cfg.proposal_nms_iou)

    d = cfg.data
    d.size = take("data", "size", int, d.size)
    d.n_images = take("data", "n_images", int, d.n_images)
    d.n_val = take("data", "n_val", int, d.n_val)
    d.octaves = take("data", "octaves", int, d.octaves)
    d.min_height = take("data", "min_height", float, d.min_height)
    d.height_bias = take("data", "height_bias", float, d.height_bias)

    cfg.data_dir = take("paths", "data_dir", str, cfg.data_dir)
    cfg.out_dir = take("paths", "out_dir", str, cfg.out_dir)

    if "branches" in sections:
        cfg.branches = [_parse_branch_row(name, value)
                        for name, value in sections["branches"].items()]

    for st in (t.stage1, t.stage2, j):
        if st.lr <= 0:
            raise DataError("learning rates must be positive")
    if t.crop_size < 64:
        raise DataError("crop_size must cover the largest stride (>= 64)")
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Hash of the experiment-defining settings; filesystem paths excluded so
    the same run in a different directory stamps its outputs identically."""
    text = serialize_config(cfg)
    head, _, tail = text.partition("[paths]")
    tail_lines = tail.splitlines()[3:]      # drop data_dir and out_dir lines
    canon = head + "\n".join(tail_lines)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Builders from a RunConfig.
# ---------------------------------------------------------------------------

def build_network(cfg: RunConfig) -> ProposalNetwork:
    spec = TrunkSpec(in_channels=3, stage_channels=tuple(cfg.trunk_channels))
    return ProposalNetwork(cfg.branch_configs(), cfg.n_classes(),
                           trunk_spec=spec, seed=cfg.seed)


def build_head(cfg: RunConfig, net: ProposalNetwork) -> DetectionHead:
    rng = np.random.default_rng(cfg.seed + 1000)
    return DetectionHead(net.spec.tap_channels(8), cfg.n_classes(),
                         profile_roi(cfg.profile), cfg.head_fc_width(), rng,
                         use_deconv=cfg.use_deconv)
