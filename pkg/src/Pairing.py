import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.Errors import NoNegativesPossible, NotEnoughIndividuals, ShapeMismatch
from src.SignalPipeline import (AlignedWindow, EEGRecording, FMRIVolumeSeries,
                                PipelineConfig, preprocess_recording)

logger = logging.getLogger(__name__)


# All aligned windows of one individual's recording session, ordered by start time.
@dataclass
class RecordingSession:
    individual_id: str
    windows: List[AlignedWindow] = field(default_factory=list)
    session_id: str = "run-1"

    def __post_init__(self):
        self.windows = sorted(self.windows, key=lambda w: w.t_eeg)
        if self.windows:
            eeg_shape = self.windows[0].eeg.values.shape
            fmri_shape = self.windows[0].fmri.volumes.shape
            for window in self.windows[1:]:
                if window.eeg.values.shape != eeg_shape or window.fmri.volumes.shape != fmri_shape:
                    raise ShapeMismatch(f"windows of {self.individual_id} do not share shapes")

    @classmethod
    def from_recordings(cls, individual_id: str, eeg: EEGRecording, fmri: FMRIVolumeSeries,
                        cfg: PipelineConfig, session_id: str = "run-1") -> "RecordingSession":
        windows = preprocess_recording(eeg, fmri, cfg)
        logger.info("individual %s: %d aligned windows", individual_id, len(windows))
        return cls(individual_id, windows, session_id)


# One EEG window, one fMRI window and whether they belong together (label 1).
@dataclass
class PairedInstance:
    eeg: np.ndarray
    fmri: np.ndarray
    label: int
    eeg_individual: str
    fmri_individual: str
    t_eeg: float
    t_fmri: float


def make_positive_pairs(sessions: Sequence[RecordingSession]) -> List[PairedInstance]:
    pairs = []
    for session in sessions:
        for window in session.windows:
            pairs.append(PairedInstance(window.eeg.values, window.fmri.volumes, 1,
                                        session.individual_id, session.individual_id,
                                        window.t_eeg, window.t_fmri))
    return pairs


def _negative_candidates(sessions: Sequence[RecordingSession],
                         same_individual: bool) -> List[Tuple[int, int, int, int]]:
    # (eeg session, eeg window, fmri session, fmri window) index tuples.
    candidates = []
    for a, eeg_session in enumerate(sessions):
        for i, eeg_window in enumerate(eeg_session.windows):
            for b, fmri_session in enumerate(sessions):
                same = (eeg_session.individual_id == fmri_session.individual_id)
                for j, fmri_window in enumerate(fmri_session.windows):
                    aligned = abs(fmri_window.t_fmri - eeg_window.t_fmri) < 1e-9
                    if same_individual:
                        if same and eeg_session.session_id == fmri_session.session_id and aligned:
                            continue
                    elif same or aligned:
                        continue
                    candidates.append((a, i, b, j))
    return candidates


def make_negative_pairs(sessions: Sequence[RecordingSession], limit: Optional[int] = None,
                        rng_seed: int = 0, same_individual: bool = False) -> List[PairedInstance]:
    # Cross-individual, time-misaligned pairs sampled without replacement.
    # same_individual also admits misaligned windows of the same individual.
    individuals = {s.individual_id for s in sessions}
    if len(individuals) < 2 and not same_individual:
        raise NoNegativesPossible("negative pairs need at least two individuals")
    candidates = _negative_candidates(sessions, same_individual)
    if not candidates:
        raise NoNegativesPossible("no window combination violates the alignment")

    if limit is not None and limit < len(candidates):
        rng = np.random.default_rng(rng_seed)
        chosen = np.sort(rng.choice(len(candidates), size=max(int(limit), 0), replace=False))
        candidates = [candidates[k] for k in chosen]

    pairs = []
    for a, i, b, j in candidates:
        eeg_window = sessions[a].windows[i]
        fmri_window = sessions[b].windows[j]
        pairs.append(PairedInstance(eeg_window.eeg.values, fmri_window.fmri.volumes, 0,
                                    sessions[a].individual_id, sessions[b].individual_id,
                                    eeg_window.t_eeg, fmri_window.t_fmri))
    return pairs


def split_by_individual(sessions: Sequence[RecordingSession], n_test: int, n_val: int = 1,
                        rng_seed: int = 0) -> Tuple[List[RecordingSession], List[RecordingSession],
                                                    List[RecordingSession]]:
    if n_test < 0 or n_val < 0:
        raise ValueError("split sizes must be non-negative")
    individuals = sorted({s.individual_id for s in sessions})
    if n_test + n_val >= len(individuals):
        raise NotEnoughIndividuals(
            f"{n_test} test + {n_val} validation leaves no training individual out of {len(individuals)}")
    order = np.random.default_rng(rng_seed).permutation(len(individuals))
    test_ids = {individuals[k] for k in order[:n_test]}
    val_ids = {individuals[k] for k in order[n_test:n_test + n_val]}

    train, val, test = [], [], []
    for session in sessions:
        if session.individual_id in test_ids:
            test.append(session)
        elif session.individual_id in val_ids:
            val.append(session)
        else:
            train.append(session)
    logger.info("split: train=%s val=%s test=%s",
                sorted({s.individual_id for s in train}), sorted(val_ids), sorted(test_ids))
    return train, val, test
