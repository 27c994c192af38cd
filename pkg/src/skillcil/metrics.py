"""Transfer metrics over a (task, stage) score matrix.

FWT averages each task's score at its training stages.  BWT averages the
score change at later stages relative to each training stage, and AUC
averages retained score from each training stage to the task's last
available stage.  The BWT inner divisor is (p - i - 1) even though the sum
has (p - i) terms; that is taken verbatim from the metric definition this
implements.  When p = i + 1 the divisor vanishes, so the raw single
difference is used and the row is flagged with a warning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

from .errors import IncompleteScoreMatrixError


@dataclass
class ScoreMatrix:
    scores: dict = field(default_factory=dict)        # (task, stage) -> GC
    trained: dict = field(default_factory=dict)       # task -> sorted stages
    first_stage: dict = field(default_factory=dict)   # task -> first stage seen
    final_stage: dict = field(default_factory=dict)   # task -> p

    def record(self, task: str, stage: int, score: float):
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        self.scores[(task, stage)] = score
        self.first_stage[task] = min(self.first_stage.get(task, stage), stage)
        self.final_stage[task] = max(self.final_stage.get(task, stage), stage)

    def mark_trained(self, task: str, stage: int):
        stages = self.trained.setdefault(task, [])
        if stage not in stages:
            stages.append(stage)
            stages.sort()

    def tasks(self):
        return list(self.trained.keys())

    def score(self, task: str, stage: int) -> float:
        try:
            return self.scores[(task, stage)]
        except KeyError:
            raise IncompleteScoreMatrixError(
                f"missing score for task {task!r} at stage {stage}") from None


def fwt(matrix: ScoreMatrix):
    """Per-task mean score at training stages; returns (per_task, mean)."""
    per_task = {}
    for task, stages in matrix.trained.items():
        if not stages:
            raise IncompleteScoreMatrixError(f"task {task!r} has empty I_tau")
        per_task[task] = sum(matrix.score(task, i) for i in stages) / len(stages)
    return per_task, _mean(per_task)


def bwt(matrix: ScoreMatrix):
    per_task = {}
    for task, stages in matrix.trained.items():
        if not stages:
            raise IncompleteScoreMatrixError(f"task {task!r} has empty I_tau")
        p = matrix.final_stage[task]
        terms = []
        for i in stages:
            if p == i:
                terms.append(0.0)
                continue
            diffs = [matrix.score(task, j) - matrix.score(task, i)
                     for j in range(i + 1, p + 1)]
            if p == i + 1:
                warnings.warn(
                    f"BWT divisor (p-i-1) is zero for task {task!r} "
                    f"(i={i}, p={p}); using the raw single difference",
                    stacklevel=2)
                terms.append(diffs[0])
            else:
                terms.append(sum(diffs) / (p - i - 1))
        per_task[task] = sum(terms) / len(stages)
    return per_task, _mean(per_task)


def auc(matrix: ScoreMatrix):
    per_task = {}
    for task, stages in matrix.trained.items():
        if not stages:
            raise IncompleteScoreMatrixError(f"task {task!r} has empty I_tau")
        p = matrix.final_stage[task]
        terms = []
        for i in stages:
            if p == i:
                terms.append(matrix.score(task, i))  # reduces to the FWT term
            else:
                vals = [matrix.score(task, j) for j in range(i, p + 1)]
                terms.append(sum(vals) / (p - i))
        per_task[task] = sum(terms) / len(stages)
    return per_task, _mean(per_task)


def _mean(per_task: dict) -> float:
    return sum(per_task.values()) / len(per_task) if per_task else 0.0


def adaptation_matrix(matrix: ScoreMatrix) -> ScoreMatrix:
    """View of the never-trained (unseen) tasks only.

    Each such task's first evaluated stage stands in for a training stage,
    so the same FWT/BWT/AUC formulas yield the "-A" adaptation variants.
    """
    out = ScoreMatrix()
    for (task, stage), score in matrix.scores.items():
        if task not in matrix.trained:
            out.record(task, stage, score)
    for task in out.first_stage:
        out.mark_trained(task, out.first_stage[task])
    return out


# --- CSV persistence ---

def save_matrix(matrix: ScoreMatrix, path):
    """Rows = tasks, columns = stages, plus I_tau and p sidecar columns."""
    all_stages = sorted({s for (_, s) in matrix.scores})
    tasks = sorted({t for (t, _) in matrix.scores})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"stage_{s}" for s in all_stages]
                   + ["trained_stages", "final_stage"])
        for task in tasks:
            row = [task]
            for s in all_stages:
                row.append(repr(matrix.scores[(task, s)])
                           if (task, s) in matrix.scores else "")
            row.append(";".join(str(i) for i in matrix.trained.get(task, [])))
            row.append(str(matrix.final_stage.get(task, "")))
            w.writerow(row)


def load_matrix(path) -> ScoreMatrix:
    matrix = ScoreMatrix()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        stage_cols = [(idx, int(name.removeprefix("stage_")))
                      for idx, name in enumerate(header)
                      if name.startswith("stage_")]
        for row in reader:
            task = row[0]
            for idx, stage in stage_cols:
                if row[idx]:
                    matrix.record(task, stage, float(row[idx]))
            trained = row[-2]
            if trained:
                for i in trained.split(";"):
                    matrix.mark_trained(task, int(i))
            if row[-1]:
                matrix.final_stage[task] = int(row[-1])
    return matrix
