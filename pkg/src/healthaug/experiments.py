"""Augmentation study: parameter grids, chain enumeration, phased runs, heatmaps.

Phase 1 grid-searches each augmentation on its own. Phase 2 runs every
single and two-step chain built from the phase-1 winners. Phase 3 re-scores
the winning chain with the long-clip sliding-window protocol. Every
experiment is recorded in a TSV manifest that is rewritten after each
result, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._fileio import atomic_write_text
from .audio_io import ClipManifestEntry, crop_or_pad, read_manifest, sample_random_clip
from .augment import (
    KINDS,
    PARAM_NAMES,
    TIME_DOMAIN_KINDS,
    AugmentationChain,
    AugmentationSpec,
)
from .evalkit import EmbeddingMatrix, EvalReport, embed_clip_sliding, evaluate_tasks, write_report

logger = logging.getLogger(__name__)

PROBABILITIES = (0.8, 1.0)

# Grid-search lists per augmentation; the Cartesian product is filtered by
# "max > min" where the kind has bounds.
PARAM_GRID: dict[str, dict[str, tuple]] = {
    "CropAndPad": {"min_fraction": (0.1, 0.3, 0.5), "max_fraction": (0.3, 0.5, 0.7)},
    "Noising": {"mean": (-0.2, 0.0, 0.2), "stddev": (0.2, 0.4, 0.6)},
    "BrownianTapeSpeed": {"magnitude": (2.0, 10.0, 20.0)},
    "Scaling": {"min_factor": (0.25, 0.75, 1.25), "max_factor": (0.75, 1.25, 1.75)},
    "PitchShift": {"min_factor": (0.25, 0.75, 1.25), "max_factor": (0.75, 1.25, 1.75)},
    "TimeStretch": {"min_stretch": (0.25, 0.75, 1.25), "max_stretch": (0.75, 1.25, 1.75)},
    "CircularTimeShift": {},
    "SpecAugment": {"time_mask_max_frames": (24, 36), "time_mask_count": (10, 20),
                    "freq_mask_max_bins": (10, 20), "freq_mask_count": (3, 5)},
}

_BOUNDED = {
    "CropAndPad": ("min_fraction", "max_fraction"),
    "Scaling": ("min_factor", "max_factor"),
    "PitchShift": ("min_factor", "max_factor"),
    "TimeStretch": ("min_stretch", "max_stretch"),
}


def enumerate_param_grid(kind: str) -> list[AugmentationSpec]:
    """All valid grid configurations of ``kind``, sorted by parameters."""
    if kind not in PARAM_GRID:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    names = PARAM_NAMES[kind]
    lists = [PARAM_GRID[kind][n] for n in names]
    specs = []
    for probability in PROBABILITIES:
        for values in itertools.product(*lists):
            params = dict(zip(names, values))
            if kind in _BOUNDED:
                lo, hi = _BOUNDED[kind]
                if not params[hi] > params[lo]:
                    continue
            specs.append(AugmentationSpec(kind, probability, params))
    return sorted(specs, key=AugmentationSpec.sort_key)


def enumerate_chains(allow_repeat: bool = False, specs: Mapping[str, AugmentationSpec] | None = None,
                     include_singles: bool = True) -> list[AugmentationChain]:
    """Single-step chains for all 8 kinds, then ordered pairs.

    The first step of a pair is one of the 7 time-domain kinds and the second
    any of the 8; a kind follows itself only when ``allow_repeat``. That gives
    49 pairs without repeats and 56 with.
    """
    specs = dict(specs or {})
    for kind in KINDS:
        specs.setdefault(kind, AugmentationSpec.best(kind))
    chains = [AugmentationChain((specs[k],)) for k in KINDS] if include_singles else []
    for first in TIME_DOMAIN_KINDS:
        for second in KINDS:
            if first == second and not allow_repeat:
                continue
            chains.append(AugmentationChain((specs[first], specs[second])))
    return chains


# --------------------------------------------------------------------------
# Chain <-> JSON cell


def chain_to_json(chain: AugmentationChain) -> str:
    return json.dumps([{"kind": s.kind, "probability": s.probability, "params": dict(s.params)}
                       for s in chain.steps], separators=(",", ":"))


def chain_from_json(text: str) -> AugmentationChain:
    return AugmentationChain(tuple(AugmentationSpec(d["kind"], d["probability"], d["params"])
                                   for d in json.loads(text)))


# --------------------------------------------------------------------------
# Experiment manifest


@dataclass
class Experiment:
    id: str
    phase: int
    chain: AugmentationChain
    seed: int
    status: str = "pending"
    score: float = float("nan")

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.status not in ("pending", "done"):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == "done" and not math.isfinite(self.score):
            raise ValueError(f"experiment {self.id} is done but has no finite score")


_MANIFEST_COLUMNS = ("id", "phase", "chain", "seed", "status", "score")


def experiment_seed(top_seed: int, experiment_id: str) -> int:
    """Per-experiment seed; independent of run order and worker assignment."""
    ss = np.random.SeedSequence([int(top_seed), zlib.crc32(experiment_id.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentManifest:
    top_seed: int = 0
    experiments: list[Experiment] = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.experiments]
        if len(ids) != len(set(ids)):
            raise ValueError("experiment ids are not unique")

    def __iter__(self):
        return iter(self.experiments)

    def __len__(self):
        return len(self.experiments)

    def get(self, experiment_id: str) -> Experiment | None:
        return next((e for e in self.experiments if e.id == experiment_id), None)

    def phase(self, phase: int) -> list[Experiment]:
        return [e for e in self.experiments if e.phase == phase]

    def add(self, experiment_id: str, phase: int, chain: AugmentationChain) -> Experiment:
        existing = self.get(experiment_id)
        if existing is not None:
            if chain_to_json(existing.chain) != chain_to_json(chain):
                raise ValueError(f"experiment {experiment_id} already exists with a different chain")
            return existing
        e = Experiment(experiment_id, phase, chain, experiment_seed(self.top_seed, experiment_id))
        self.experiments.append(e)
        return e

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# top_seed={self.top_seed}\n")
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        writer.writerow(_MANIFEST_COLUMNS)
        for e in self.experiments:
            writer.writerow([e.id, e.phase, chain_to_json(e.chain), e.seed, e.status,
                             repr(e.score) if math.isfinite(e.score) else ""])
        return buf.getvalue()

    def save(self, path=None) -> None:
        path = Path(path or self.path)
        atomic_write_text(path, self.to_tsv())
        self.path = path

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            first = fh.readline()
            if not first.startswith("# top_seed="):
                raise ValueError(f"{path}: missing '# top_seed=' line")
            top_seed = int(first.split("=", 1)[1])
            reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\")
            header = next(reader)
            if tuple(header) != _MANIFEST_COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            experiments = [Experiment(r[0], int(r[1]), chain_from_json(r[2]), int(r[3]), r[4],
                                      float(r[5]) if r[5] else float("nan")) for r in reader if r]
        return cls(top_seed, experiments, path)


# --------------------------------------------------------------------------
# Planning


def _spec_id(spec: AugmentationSpec) -> str:
    values = [f"{spec.probability:g}", *(f"{spec.params[n]:g}" for n in PARAM_NAMES[spec.kind])]
    return "_".join(values)


def plan_phase1(manifest: ExperimentManifest, kinds: Iterable[str] = KINDS) -> list[Experiment]:
    return [manifest.add(f"p1-{spec.kind}-{_spec_id(spec)}", 1, AugmentationChain((spec,)))
            for kind in kinds for spec in enumerate_param_grid(kind)]


def best_phase1_specs(manifest: ExperimentManifest, kinds: Iterable[str] = KINDS) -> dict[str, AugmentationSpec]:
    """Highest-scoring phase-1 configuration per kind (first in grid order on ties)."""
    best = {}
    for kind in kinds:
        done = [e for e in manifest.phase(1) if e.chain.kinds == (kind,) and e.status == "done"]
        if not done:
            raise ValueError(f"phase 1 has no completed results for {kind}; run phase 1 first")
        planned = [e for e in manifest.phase(1) if e.chain.kinds == (kind,)]
        if len(done) != len(planned):
            raise ValueError(f"phase 1 for {kind} is incomplete ({len(done)}/{len(planned)} done)")
        best[kind] = max(done, key=lambda e: e.score).chain.steps[0]
    return best


def plan_phase2(manifest: ExperimentManifest, allow_repeat: bool = False,
                specs: Mapping[str, AugmentationSpec] | None = None) -> list[Experiment]:
    if specs is None:
        specs = best_phase1_specs(manifest)
    return [manifest.add(f"p2-{chain.name}", 2, chain)
            for chain in enumerate_chains(allow_repeat, specs)]


def best_experiment(manifest: ExperimentManifest, phase: int) -> Experiment:
    done = [e for e in manifest.phase(phase) if e.status == "done"]
    if not done:
        raise ValueError(f"phase {phase} has no completed experiments")
    return max(done, key=lambda e: e.score)


def plan_phase3(manifest: ExperimentManifest) -> list[Experiment]:
    winner = best_experiment(manifest, 2)
    return [manifest.add(f"p3-{winner.chain.name}", 3, winner.chain)]


def ranking(manifest: ExperimentManifest, phase: int) -> list[Experiment]:
    """Completed experiments of ``phase``, best composite score first."""
    done = [e for e in manifest.phase(phase) if e.status == "done"]
    return sorted(done, key=lambda e: (-e.score, e.id))


# --------------------------------------------------------------------------
# Corpus and the default evaluator


@dataclass
class Corpus:
    entries: list[ClipManifestEntry]
    tasks: list[str]
    root: Path | None = None

    @classmethod
    def from_manifest(cls, path) -> "Corpus":
        entries, tasks = read_manifest(path)
        return cls(entries, tasks, Path(path).parent)

    def split(self, name: str) -> list[ClipManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def check_files(self) -> None:
        for e in self.entries:
            p = Path(e.source_path)
            if self.root is not None and not p.is_absolute():
                p = self.root / p
            if not p.exists():
                raise FileNotFoundError(f"corpus file missing: {p}")


@dataclass
class DeskEvaluator:
    """Train a reference encoder with the experiment's chain, then probe it.

    Phases 1-2 embed one random ``clip_len_s`` clip per probe recording;
    phase 3 crops/pads to ``long_clip_s`` and mean-pools sliding windows.
    """

    train_kwargs: dict = field(default_factory=lambda: {"steps": 200, "batch_size": 16, "checkpoint_every": 50})
    clip_len_s: float = 2.0
    long_clip_s: float = 10.0
    window_s: float = 2.0
    window_step_s: float = 1.0
    k_folds: int = 5

    def __call__(self, experiment: Experiment, corpus: Corpus) -> EvalReport:
        from .contrastive import ContrastiveEncoder

        rng = np.random.default_rng(experiment.seed)
        train_clips = [self._short_clip(e, corpus, rng) for e in corpus.split("train")]
        model = ContrastiveEncoder(chain=experiment.chain, random_state=experiment.seed, **self.train_kwargs)
        model.fit(train_clips)

        probe_entries = corpus.split("probe_train") + corpus.split("probe_eval")
        rows = []
        for e in probe_entries:
            if experiment.phase == 3:
                w = crop_or_pad(e.load(corpus.root), self.long_clip_s)
                rows.append(embed_clip_sliding(w, model.encoder_, self.window_s, self.window_step_s,
                                               model.feature_fn_))
            else:
                rows.append(model.transform([self._short_clip(e, corpus, rng)])[0])
        emb = EmbeddingMatrix(tuple(e.clip_id for e in probe_entries), np.array(rows))
        return evaluate_tasks(emb, corpus.entries, corpus.tasks, k_folds=self.k_folds, seed=experiment.seed)

    def _short_clip(self, entry, corpus, rng):
        w = entry.load(corpus.root)
        if w.duration_s > self.clip_len_s:
            w = sample_random_clip(w, self.clip_len_s, rng)
        elif w.duration_s < self.clip_len_s:
            w = crop_or_pad(w, self.clip_len_s)
        return w


def _evaluate(evaluator, experiment, corpus):
    return experiment.id, evaluator(experiment, corpus)


def run_phase(manifest: ExperimentManifest, corpus: Corpus | None, phase: int,
              evaluator: Callable[[Experiment, Corpus], EvalReport] | None = None,
              results_dir=None, workers: int = 1, allow_repeat: bool = False,
              experiments: Sequence[Experiment] | None = None) -> dict[str, EvalReport]:
    """Plan (if needed) and run every pending experiment of ``phase``.

    Each finished experiment writes ``<results_dir>/<id>.csv`` and then the
    manifest (when it has a path), so a rerun skips completed work. Returns
    the reports produced by this call.
    """
    if experiments is None:
        planner = {1: plan_phase1, 2: lambda m: plan_phase2(m, allow_repeat), 3: plan_phase3}[phase]
        experiments = planner(manifest)
    pending = [e for e in experiments if e.status != "done"]
    if not pending:
        return {}
    if corpus is not None:
        corpus.check_files()
    evaluator = evaluator or DeskEvaluator()
    results_dir = Path(results_dir) if results_dir is not None else (
        manifest.path.parent / "results" if manifest.path is not None else None)
    if results_dir is not None:
        results_dir.mkdir(parents=True, exist_ok=True)

    reports = {}

    def record(exp_id, report):
        exp = manifest.get(exp_id)
        exp.score = report.composite
        exp.status = "done"
        reports[exp_id] = report
        if results_dir is not None:
            write_report(report, results_dir / f"{exp_id}.csv")
        if manifest.path is not None:
            manifest.save()
        logger.info("%s composite %.4f", exp_id, exp.score)

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for exp_id, report in pool.map(_evaluate, itertools.repeat(evaluator), pending,
                                           itertools.repeat(corpus)):
                record(exp_id, report)
    else:
        for exp in pending:
            record(*_evaluate(evaluator, exp, corpus))
    return reports


# --------------------------------------------------------------------------
# Heatmap export


@dataclass
class Heatmap:
    """Phase-2 scores: ``matrix[first, second]`` for pairs, ``singles[kind]``."""

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    matrix: np.ndarray
    singles: np.ndarray

    def to_csv(self) -> str:
        def cell(v):
            return "" if not math.isfinite(v) else repr(float(v))

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["first\\second", *self.cols])
        for name, row in zip(self.rows, self.matrix):
            writer.writerow([name, *map(cell, row)])
        writer.writerow(["single", *map(cell, self.singles)])
        return buf.getvalue()


def heatmap(manifest: ExperimentManifest | Sequence[Experiment], phase: int = 2) -> Heatmap:
    experiments = manifest.phase(phase) if isinstance(manifest, ExperimentManifest) else list(manifest)
    rows, cols = TIME_DOMAIN_KINDS, KINDS
    matrix = np.full((len(rows), len(cols)), np.nan)
    singles = np.full(len(cols), np.nan)
    for e in experiments:
        if e.status != "done":
            continue
        kinds = e.chain.kinds
        if len(kinds) == 1:
            singles[cols.index(kinds[0])] = e.score
        else:
            matrix[rows.index(kinds[0]), cols.index(kinds[1])] = e.score
    return Heatmap(rows, cols, matrix, singles)


def export_heatmap(manifest, path=None, phase: int = 2) -> Heatmap:
    """Build the first-by-second score matrix and single-augmentation row; write CSV if ``path``."""
    hm = heatmap(manifest, phase)
    if path is not None:
        atomic_write_text(path, hm.to_csv())
    return hm


def read_heatmap(path) -> Heatmap:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    cols = tuple(rows[0][1:])
    body = rows[1:-1]
    values = lambda r: [float(v) if v else np.nan for v in r[1:]]  # noqa: E731
    return Heatmap(tuple(r[0] for r in body), cols, np.array([values(r) for r in body]),
                   np.array(values(rows[-1])))
