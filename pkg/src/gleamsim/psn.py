"""24-bit packet sequence number arithmetic.

PSNs occupy [0, 2^24) and wrap around. Two orderings are provided:

* ``psn_newer_exact`` is the modular comparison every correctness-critical
  path in this package relies on. It is defined only when the two values
  sit within the in-flight budget (2^22 - 1) of each other.
* ``psn_newer`` is the relaxed three-term form that a single match-action
  stage can evaluate. Inside the forward window (``a`` at most 2^22 - 1
  ahead of ``b``) it agrees with the exact order; outside that window it
  has false-positive corners, which is why it is exposed for modelling a
  hardware target but never used internally.
"""

PSN_BITS = 24
PSN_MOD = 1 << PSN_BITS
PSN_MASK = PSN_MOD - 1

# Largest allowed spread between any two live PSNs (in-flight budget).
MAX_INFLIGHT = (1 << 22) - 1

# Relaxed comparison boundaries: "a just wrapped" / "b about to wrap".
WRAP_LOW = 0x3FFFFF
WRAP_HIGH = 0x600000


class PsnError(Exception):
    """Base class for PSN arithmetic errors."""


class OutOfWindowError(PsnError):
    """Neither directed distance between the operands is below 2^22."""


class EmptyInputError(PsnError):
    """psn_min was called with no entries."""


def psn_add(a: int, n: int = 1) -> int:
    return (a + n) & PSN_MASK


def psn_sub(a: int, n: int = 1) -> int:
    return (a - n) & PSN_MASK


def psn_distance(a: int, b: int) -> int:
    """Directed distance from ``b`` forward to ``a``, modulo 2^24."""
    return (a - b) & PSN_MASK


def psn_newer(a: int, b: int) -> bool:
    """Relaxed wrap-aware "a is newer than b".

    True iff ``a > b`` or (``a <= 0x3FFFFF`` and ``b >= 0x600000``). This
    is the single-stage form a switch pipeline evaluates; it is reliable
    only when ``a`` is at most 2^22 - 1 ahead of ``b``.
    """
    return a > b or (a <= WRAP_LOW and b >= WRAP_HIGH)


def psn_newer_exact(a: int, b: int) -> bool:
    """Exact wrap-aware "a is newer than b".

    True iff the directed distance from ``b`` to ``a`` lies in
    [1, 2^22 - 1]. Raises OutOfWindowError when neither directed distance
    is below 2^22, since the order is then undefined.
    """
    d = (a - b) & PSN_MASK
    if d == 0:
        return False
    if d <= MAX_INFLIGHT:
        return True
    if (PSN_MOD - d) <= MAX_INFLIGHT:
        return False
    raise OutOfWindowError(f"psn pair 0x{a:06X}/0x{b:06X} spans more than 2^22-1")


def psn_newer_or_equal(a: int, b: int) -> bool:
    return a == b or psn_newer_exact(a, b)


def psn_min(values):
    """Wrap-aware minimum of ``(index, psn)`` pairs.

    Returns the pair whose PSN every other pair is newer than or equal
    to. Ties on the PSN break toward the smallest index, so the result
    does not depend on input order. All PSNs must be pairwise within the
    2^22 window.
    """
    it = iter(values)
    try:
        best_i, best_p = next(it)
    except StopIteration:
        raise EmptyInputError("psn_min over empty input") from None
    for i, p in it:
        if p == best_p:
            if i < best_i:
                best_i = i
        elif psn_newer_exact(best_p, p):
            best_i, best_p = i, p
    return best_i, best_p
