"""
Utility functions for config reads, seeds and formatting
"""

from pathlib import Path
from typing import Tuple

import chardet
import numpy as np

from .constants import ENCODING_DETECTION_ORDER, MAX_CONFIG_SIZE


def decode_config_bytes(raw: bytes) -> Tuple[str, str]:
    """Text and encoding of a config file: UTF-8 first, then chardet's guess, then the fallback order"""
    candidates = ['utf-8']
    guess = chardet.detect(raw)
    if guess['encoding'] and guess['confidence'] > 0.8:
        candidates.append(guess['encoding'])
    candidates.extend(ENCODING_DETECTION_ORDER)
    for encoding in candidates:
        try:
            return raw.decode(encoding).lstrip('\ufeff'), encoding
        except (UnicodeDecodeError, LookupError):
            continue
    raise ValueError("no known encoding decodes the file")


def read_config_text(file_path: Path, max_size: int = MAX_CONFIG_SIZE) -> Tuple[str, str]:
    """Size-checked read of a config file"""
    file_path = Path(file_path)
    try:
        raw = file_path.read_bytes()
    except OSError as e:
        raise ValueError(f"cannot read {file_path}: {e.strerror}")
    if len(raw) > max_size:
        raise ValueError(f"{file_path} holds {len(raw)} bytes, the limit is {max_size}")
    return decode_config_bytes(raw)


def step_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for a (seed, stream...) key"""
    return np.random.default_rng([int(seed) % 2**64, *[int(s) for s in stream]])


def format_float(value: float) -> str:
    """Round-trip exact float text for CSV and reports"""
    return repr(float(value))
