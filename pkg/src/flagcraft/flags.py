"""Flag grammar: `flag{` + 16-32 lowercase hex chars (even count) + `}`."""

from __future__ import annotations

import random
import re

FLAG_RE = re.compile(r"flag\{([0-9a-f]{16,32})\}")

MIN_PAYLOAD_BYTES = 8
MAX_PAYLOAD_BYTES = 16


def gen_flag(rng: random.Random) -> str:
    """Draw a fresh flag: uniform payload length 8-16 bytes, then uniform bytes."""
    n = rng.randint(MIN_PAYLOAD_BYTES, MAX_PAYLOAD_BYTES)
    return "flag{" + rng.randbytes(n).hex() + "}"


def is_flag(value: str) -> bool:
    m = FLAG_RE.fullmatch(value)
    return m is not None and len(m.group(1)) % 2 == 0


def find_flag(text: str) -> str | None:
    """First well-formed flag substring in ``text``, or None."""
    for m in FLAG_RE.finditer(text):
        if len(m.group(1)) % 2 == 0:
            return m.group(0)
    return None


def redact(text: str) -> str:
    """Replace every flag payload in ``text`` for log-safe output."""
    return FLAG_RE.sub("flag{[redacted]}", text)
