"""Built-in model profiles: branch layouts, ROI pooling sizes, head widths.

The car, ped-cyc, and caltech profiles carry the full-scale filter and anchor
configurations (anchors listed in the source material as height x width and
stored here as (w, h)). The synthetic profile compresses the anchor ladder
into the octave range of the built-in synthetic scene generator so every
branch has a populated scale band on 256 px images.
"""

from __future__ import annotations

from .anchors import BranchConfig

# each entry: (stride, filter sizes (h, w), anchor sizes (w, h), alpha)
_PROFILE_TABLE = {
    "car": {
        "branches": [
            ("det-8", 8, ((5, 5), (7, 7)), ((40, 40), (56, 56)), 0.9),
            ("det-16", 16, ((5, 5), (7, 7)), ((80, 80), (112, 112)), 1.0),
            ("det-32", 32, ((5, 5), (7, 7)), ((160, 160), (224, 224)), 1.0),
            ("det-64", 64, ((5, 5),), ((320, 320),), 1.0),
        ],
        "roi": (7, 7),
        "fc": 4096,
        "classes": ("car",),
        "recall_iou": 0.7,
    },
    "ped-cyc": {
        "branches": [
            ("det-8", 8, ((5, 3), (7, 5)), ((28, 40), (36, 56)), 0.9),
            ("det-16", 16, ((5, 3), (7, 5)), ((56, 80), (72, 112)), 1.0),
            ("det-32", 32, ((5, 3), (7, 5)), ((112, 160), (144, 224)), 1.0),
            ("det-64", 64, ((5, 3),), ((224, 320),), 1.0),
        ],
        "roi": (7, 5),
        "fc": 2048,
        "classes": ("pedestrian", "cyclist"),
        "recall_iou": 0.5,
    },
    "caltech": {
        "branches": [
            ("det-8", 8, ((5, 3), (7, 5)), ((20, 40), (28, 56)), 0.9),
            ("det-16", 16, ((5, 3), (7, 5)), ((40, 80), (56, 112)), 1.0),
            ("det-32", 32, ((5, 3), (7, 5)), ((80, 160), (112, 224)), 1.0),
            ("det-64", 64, ((5, 3),), ((160, 320),), 1.0),
        ],
        "roi": (8, 4),
        "fc": 2048,
        "classes": ("pedestrian",),
        "recall_iou": 0.5,
    },
    "synthetic": {
        "branches": [
            ("det-8", 8, ((5, 5), (7, 7)), ((31, 31), (40, 40)), 0.9),
            ("det-16", 16, ((5, 5), (7, 7)), ((51, 51), (67, 67)), 1.0),
            ("det-32", 32, ((5, 5), (7, 7)), ((90, 90), (120, 120)), 1.0),
            ("det-64", 64, ((5, 5), (7, 7)), ((160, 160), (200, 200)), 1.0),
        ],
        "roi": (7, 7),
        "fc": 128,
        "classes": ("disk", "block", "wedge"),
        "recall_iou": 0.5,
    },
}

PROFILE_NAMES = tuple(_PROFILE_TABLE)

# log-size band edges between consecutive branches, used as the default
# height bins when evaluating per-branch recall on synthetic scenes
SYNTHETIC_HEIGHT_BINS = ((25, 45), (45, 78), (78, 139), (139, 10_000))

FULL_SCALE_HEIGHT_BINS = ((25, 50), (50, 100), (100, 200), (200, 10_000))


def profile_branches(name: str) -> list[BranchConfig]:
    entry = _profile(name)
    return [BranchConfig(n, s, f, a, alpha)
            for n, s, f, a, alpha in entry["branches"]]


def profile_roi(name: str) -> tuple[int, int]:
    return _profile(name)["roi"]


def profile_fc(name: str) -> int:
    return _profile(name)["fc"]


def profile_classes(name: str) -> tuple[str, ...]:
    return _profile(name)["classes"]


def profile_recall_iou(name: str) -> float:
    return _profile(name)["recall_iou"]


def profile_height_bins(name: str):
    return SYNTHETIC_HEIGHT_BINS if name == "synthetic" else FULL_SCALE_HEIGHT_BINS


def _profile(name: str) -> dict:
    if name not in _PROFILE_TABLE:
        raise KeyError(f"unknown profile {name!r}; choose from {PROFILE_NAMES}")
    return _PROFILE_TABLE[name]
