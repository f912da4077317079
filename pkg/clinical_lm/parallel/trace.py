"""Per-worker record of issued collectives, dumpable as CSV."""
import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Tuple

from clinical_lm.utils import atomic_write_text

TRACE_COLUMNS = ("step", "layer", "collective", "phase", "bytes")

PHASE_SETUP = "setup"
PHASE_FORWARD = "forward"
PHASE_BACKWARD = "backward"
PHASE_GRAD_SYNC = "grad_sync"
PHASE_CHECK = "check"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    layer: int
    collective: str
    phase: str
    bytes: int


class CollectiveTrace:
    def __init__(self):
        self.records: List[TraceRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, step: int, layer: int, collective: str, phase: str, nbytes: int) -> None:
        self.records.append(TraceRecord(step, layer, collective, phase, nbytes))

    def count(
        self,
        collective: Optional[str] = None,
        phase: Optional[str] = None,
        layer: Optional[int] = None,
        step: Optional[int] = None,
    ) -> int:
        return sum(
            1
            for r in self.records
            if (collective is None or r.collective == collective)
            and (phase is None or r.phase == phase)
            and (layer is None or r.layer == layer)
            and (step is None or r.step == step)
        )

    def schedule(self) -> List[Tuple[int, int, str, str]]:
        """Order of collectives without sizes, for diffing across workers."""
        return [(r.step, r.layer, r.collective, r.phase) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow([r.step, r.layer, r.collective, r.phase, r.bytes])
        return buf.getvalue()

    def write_csv(self, path: str) -> None:
        atomic_write_text(path, self.to_csv())
