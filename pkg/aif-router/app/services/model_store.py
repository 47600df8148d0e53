"""
生成模型序列化

單一 .npz 檔：
  header    JSON（format_version、radix 順序、bin 基數、狀態 / 動作數、策略表、位元組序）
  A_<k>     觀測因子 pseudo-count，'<f8'
  B         轉移 pseudo-count (n_actions, n_states, n_states)，'<f8'
  policies  策略權重 (n_actions, 3)，'<f8'

偏好 C 不屬於學習結果，不寫入檔案。
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..models.errors import ModelFormatError
from .generative_model import (
    DEFAULT_POLICIES,
    N_STATES,
    OBS_BINS,
    OBS_FACTORS,
    STATE_DIMENSIONS,
    STATE_RADIX,
    GenerativeModel,
    ObservationModel,
    Policy,
    PreferenceModel,
    TransitionModel,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LE_F8 = np.dtype("<f8")


def save_model(model: GenerativeModel, path) -> Path:
    """寫入模型檔（先寫暫存檔再 rename）"""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "radix_order": list(STATE_DIMENSIONS),
        "state_radix": list(STATE_RADIX),
        "observation_factors": list(OBS_FACTORS),
        "bin_cardinalities": list(model.A.bins),
        "n_states": model.A.n_states,
        "n_actions": model.B.n_actions,
        "policy_labels": [p.label for p in model.policies],
        "dtype": "float64",
        "byte_order": "little",
    }
    arrays = {f"A_{k}": c.astype(_LE_F8) for k, c in enumerate(model.A.counts)}
    arrays["B"] = model.B.counts.astype(_LE_F8)
    arrays["policies"] = np.array([p.weights for p in model.policies], dtype=_LE_F8)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"💾 模型已儲存: {path}")
    return path


def load_model(path, expected_bins: Sequence[int] = OBS_BINS,
               expected_states: int = N_STATES,
               expected_actions: int = len(DEFAULT_POLICIES),
               preferences: Optional[PreferenceModel] = None) -> GenerativeModel:
    """讀取模型檔；任何維度不符都拒絕載入"""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format_version") != FORMAT_VERSION:
                raise ModelFormatError(f"不支援的格式版本: {header.get('format_version')}")
            if header.get("byte_order") != "little" or header.get("dtype") != "float64":
                raise ModelFormatError("模型檔必須是 little-endian float64")
            if header.get("radix_order") != list(STATE_DIMENSIONS):
                raise ModelFormatError(f"狀態 radix 順序不符: {header.get('radix_order')}")
            if list(header.get("bin_cardinalities", [])) != list(expected_bins):
                raise ModelFormatError(
                    f"bin 基數不符: {header.get('bin_cardinalities')} != {list(expected_bins)}")
            if header.get("n_states") != expected_states or header.get("n_actions") != expected_actions:
                raise ModelFormatError(
                    f"維度不符: states={header.get('n_states')} actions={header.get('n_actions')}")

            a_counts = tuple(np.asarray(data[f"A_{k}"]) for k in range(len(expected_bins)))
            b_counts = np.asarray(data["B"])
            weights = np.asarray(data["policies"])
            labels = list(header["policy_labels"])
    except ModelFormatError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"無法讀取模型檔 {path}: {e}") from e

    for k, (c, bins) in enumerate(zip(a_counts, expected_bins)):
        if c.shape != (bins, expected_states):
            raise ModelFormatError(f"A_{k} 形狀不符: {c.shape}")
    if b_counts.shape != (expected_actions, expected_states, expected_states):
        raise ModelFormatError(f"B 形狀不符: {b_counts.shape}")
    if weights.shape != (expected_actions, 3):
        raise ModelFormatError(f"策略表形狀不符: {weights.shape}")
    if len(labels) != expected_actions:
        raise ModelFormatError(f"策略標籤數不符: {len(labels)}")

    policies = tuple(
        Policy(id=i, weights=tuple(float(x) for x in w), label=label)
        for i, (w, label) in enumerate(zip(weights, labels))
    )
    logger.info(f"📂 模型已載入: {path}")
    return GenerativeModel(
        A=ObservationModel(a_counts),
        B=TransitionModel(b_counts),
        C=preferences or PreferenceModel(),
        policies=policies,
    )
