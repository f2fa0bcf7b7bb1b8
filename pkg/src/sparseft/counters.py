"""Multiply-accumulate accounting.

Convention: one unit = one multiply-accumulate (MAC). Thresholding and
comparisons are not counted; the sequence-dimension reduction in MLP mask
prediction is counted as s units, matching the analytic cost formulas.
"""

from __future__ import annotations


class MacCounter:
    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def reset(self) -> None:
        self.total = 0
