"""Text normalization shared by answer extraction and mention detection."""

from __future__ import annotations

import re
import string

_WS = re.compile(r"\s+")
_TRAILING_PUNCT = string.punctuation.replace(")", "").replace("]", "").replace("}", "")


def normalize_attr(s: str) -> str:
    return s.strip().casefold()


def normalize_title(s: str) -> str:
    """Casefold, trim, collapse internal whitespace, strip trailing punctuation.

    Closing brackets are kept so titles such as ``Go (1999)`` survive.
    """
    s = _WS.sub(" ", s.casefold()).strip()
    return s.rstrip(_TRAILING_PUNCT).rstrip()
