"""Class vocabulary for abdominal multi-organ segmentation.

Label ids follow the widely used preprocessed Synapse layout
(0 = background, 1..8 = organs) so imported slices need no remapping.
"""

from __future__ import annotations

from typing import Iterable

ORGANS: tuple[str, ...] = (
    "aorta",
    "gallbladder",
    "kidney_left",
    "kidney_right",
    "liver",
    "pancreas",
    "spleen",
    "stomach",
)
BACKGROUND = "background"
CLASS_NAMES: tuple[str, ...] = (BACKGROUND,) + ORGANS
NUM_CLASSES = len(CLASS_NAMES)

# column order of the usual results table
TABLE_ORDER: tuple[str, ...] = (
    "spleen",
    "kidney_right",
    "kidney_left",
    "gallbladder",
    "liver",
    "stomach",
    "aorta",
    "pancreas",
)
DISPLAY_NAMES = {
    "spleen": "Spleen",
    "kidney_right": "Kidney(R)",
    "kidney_left": "Kidney(L)",
    "gallbladder": "Gallbladder",
    "liver": "Liver",
    "stomach": "Stomach",
    "aorta": "Aorta",
    "pancreas": "Pancreas",
}


class VocabularyError(ValueError):
    """An organ name outside the configured class vocabulary."""


def check_organs(organs: Iterable[str], vocabulary: Iterable[str] = ORGANS) -> list[str]:
    vocab = set(vocabulary)
    organs = list(organs)
    unknown = [o for o in organs if o not in vocab]
    if unknown:
        raise VocabularyError(f"unknown organ(s) {unknown}; vocabulary is {sorted(vocab)}")
    return organs


def class_id(organ: str) -> int:
    check_organs([organ])
    return CLASS_NAMES.index(organ)
