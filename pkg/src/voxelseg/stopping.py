"""Validation-driven early stopping with a doubling termination horizon."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class EarlyStopping:
    """Stop once the iteration count reaches the termination iteration.

    The horizon starts at one validation period. The score before any training
    is the initial best; afterwards a validation score counts as an improvement
    only if it is below ``(1 - threshold) * best``, and each improvement moves
    the termination iteration to twice the current iteration.
    """

    period: int
    threshold: float = 0.01
    best: float | None = None
    termination: int = 0
    accepted: list = field(default_factory=list)

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("validation period must be >= 1 iteration")
        if not self.threshold > 0:
            raise ValueError("improvement threshold must be > 0")
        if self.termination < self.period:
            self.termination = self.period

    def start(self, score: float) -> None:
        self.best = float(score)

    def update(self, iteration: int, score: float) -> bool:
        """Record a validation score; True if it was accepted as an improvement."""
        if self.best is None:
            self.best = float(score)
            self.accepted.append(iteration)
            self.termination = max(self.termination, 2 * iteration)
            return True
        if score < (1.0 - self.threshold) * self.best:
            self.best = float(score)
            self.termination = 2 * iteration
            self.accepted.append(iteration)
            return True
        return False

    def done(self, iteration: int) -> bool:
        return iteration >= self.termination


def satisfies_stopping_law(history, period: int) -> bool:
    """True if no improvement was accepted during the final half of the run.

    ``history`` rows need ``iteration`` and ``accepted`` keys. A run that ended
    within its first validation period trivially satisfies the law.
    """
    rows = list(history)
    if not rows:
        return True
    final = max(r["iteration"] for r in rows)
    if final <= period:
        return True
    accepted = [r["iteration"] for r in rows if r.get("accepted") and r["iteration"] > 0]
    if not accepted:
        return True
    return final >= 2 * max(accepted)
