"""Character vocabulary and name-field tokenization.

Vocabulary: PAD=0, UNK=1, SEP=2, 'a'..'z'=3..28, apostrophe=29, hyphen=30,
space=31. With prefix-token geo integration, 60 extra ids (6 geo features x
10 quantile bins) extend the table at 32..91.
"""

from __future__ import annotations

import numpy as np

from ..core import normalize_name
from ..errors import EmptyLastName

PAD = 0
UNK = 1
SEP = 2
APOSTROPHE = 29
HYPHEN = 30
SPACE = 31

BASE_VOCAB_SIZE = 32
GEO_FEATURES = 6
GEO_BINS = 10
PREFIX_VOCAB_SIZE = BASE_VOCAB_SIZE + GEO_FEATURES * GEO_BINS

DEFAULT_MAX_LEN = 60


def vocab_size(geo_mode: str) -> int:
    return PREFIX_VOCAB_SIZE if geo_mode == "prefix" else BASE_VOCAB_SIZE


def char_to_id(ch: str) -> int:
    if "a" <= ch <= "z":
        return 3 + ord(ch) - ord("a")
    if ch == "'":
        return APOSTROPHE
    if ch == "-":
        return HYPHEN
    if ch == " ":
        return SPACE
    return UNK


def tokenize(
    first: str,
    middle: str | None,
    last: str,
    max_len: int = DEFAULT_MAX_LEN,
    use_middle: bool = True,
) -> list[int]:
    """Encode name fields as [first, SEP, middle, SEP, last] character ids.

    The middle field and its separator are omitted when absent. Truncation
    keeps the tail so the end of the surname always survives.
    """
    last_norm = normalize_name(last)
    if not last_norm:
        raise EmptyLastName(f"last name {last!r} empty after normalization")
    ids = [char_to_id(c) for c in normalize_name(first)]
    ids.append(SEP)
    if use_middle and middle:
        mid_norm = normalize_name(middle)
        if mid_norm:
            ids.extend(char_to_id(c) for c in mid_norm)
            ids.append(SEP)
    ids.extend(char_to_id(c) for c in last_norm)
    return ids[-max_len:]


def geo_prefix_tokens(geo: np.ndarray) -> list[int]:
    """Quantize each geo feature (values in [0,1]) to 10 bins -> 6 token ids."""
    out = []
    for f in range(GEO_FEATURES):
        b = min(int(geo[f] * GEO_BINS), GEO_BINS - 1)
        out.append(BASE_VOCAB_SIZE + f * GEO_BINS + max(b, 0))
    return out
