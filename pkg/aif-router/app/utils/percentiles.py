"""Nearest-rank 百分位數"""

from typing import Sequence

import numpy as np


def nearest_rank(values: Sequence[float], pct: int) -> float:
    """
    第 ceil(pct/100 · n) 小的樣本（1-based），以整數運算求 rank 避免浮點誤差。
    空集合回傳 0.0。
    """
    n = len(values)
    if n == 0:
        return 0.0
    if not 0 < pct <= 100:
        raise ValueError(f"pct 必須在 (0, 100]: {pct}")
    rank = -(-pct * n // 100)
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[rank - 1])
