from typing import Optional

import numpy as np


class BufferLedger:
    """Explicit byte accounting for buffers held by a backward pass.

    Callers register arrays as they are allocated (or retained for later use)
    and release them when they are dropped; `peak` is the high-water mark.
    """

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def alloc(self, *arrays: Optional[np.ndarray]) -> None:
        self.current += sum(a.nbytes for a in arrays if a is not None)
        self.peak = max(self.peak, self.current)

    def free(self, *arrays: Optional[np.ndarray]) -> None:
        self.current -= sum(a.nbytes for a in arrays if a is not None)

    def reset(self) -> None:
        self.current = 0
        self.peak = 0


def track(ledger: Optional[BufferLedger], *arrays: Optional[np.ndarray]) -> None:
    if ledger is not None:
        ledger.alloc(*arrays)


def release(ledger: Optional[BufferLedger], *arrays: Optional[np.ndarray]) -> None:
    if ledger is not None:
        ledger.free(*arrays)
