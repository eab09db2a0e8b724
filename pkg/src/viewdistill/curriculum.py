"""Curriculum phases over training epochs.

Training is split into ``P`` phases. The last phase gets a fixed share of the
epochs; the rest are spread evenly over the earlier phases, with any
remainder going to the earliest ones. In phase ``p`` an exo source at rank
``r`` is distilled from the view at rank ``max(0, r - p)``; the ego source
always uses the top-ranked exo view.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class CurriculumSchedule:
    total_epochs: int
    phases: int
    final_phase_epochs: int
    lengths: tuple

    @property
    def boundaries(self) -> list[int]:
        """Start epoch of each phase."""
        out, acc = [], 0
        for n in self.lengths:
            out.append(acc)
            acc += n
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "total_epochs": self.total_epochs,
                "phases": self.phases,
                "final_phase_epochs": self.final_phase_epochs,
                "lengths": list(self.lengths),
                "boundaries": self.boundaries,
            },
            indent=2,
        )


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def build_schedule(total_epochs: int, phases: int, final_fraction: float = 0.5) -> CurriculumSchedule:
    M, P = int(total_epochs), int(phases)
    if P < 1:
        raise ConfigurationError(f"need at least one phase, got {P}")
    if M < P:
        raise ConfigurationError(f"{M} epochs cannot cover {P} phases")
    if P == 1:
        return CurriculumSchedule(M, 1, M, (M,))
    if not 0 < final_fraction < 1:
        raise ConfigurationError(f"final_fraction must lie in (0, 1), got {final_fraction}")
    l_final = round_half_away(final_fraction * M)
    if l_final < 1:
        raise ConfigurationError(f"final phase would be empty ({final_fraction} x {M})")
    rest = M - l_final
    if rest < P - 1:
        raise ConfigurationError(
            f"{rest} epochs left for {P - 1} earlier phases; lower final_fraction or raise epochs"
        )
    base, extra = divmod(rest, P - 1)
    lengths = tuple(base + (1 if i < extra else 0) for i in range(P - 1)) + (l_final,)
    return CurriculumSchedule(M, P, l_final, lengths)


def phase_at(schedule: CurriculumSchedule, epoch: int) -> int:
    """1-based phase index for a 0-based epoch."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    return bisect.bisect_right(schedule.boundaries, epoch)


def positive_rank(source_rank: int, phase: int, n_views: int) -> int:
    if source_rank == 0:
        return 1 if n_views > 1 else 0
    return max(0, source_rank - phase)


def phases_for(takes: Iterable) -> int:
    """Number of phases for a training set: the largest view count (ego + exo) of any take."""
    counts = [len(t.view_ids) for t in takes]
    if not counts:
        raise ConfigurationError("no takes given")
    return max(counts)
