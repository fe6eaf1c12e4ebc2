"""Per-criterion PASS/FAIL bookkeeping for the acceptance suite."""

import contextlib

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record ``CRITERION n: PASS|FAIL`` for the enclosed block; details go in ``notes``."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0]])
        RESULTS[n] = f"CRITERION {n}: FAIL {title} ({detail})"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"CRITERION {n}: PASS {title}" + (f" ({'; '.join(notes)})" if notes else "")
    print(RESULTS[n])
