"""Keyframe selection by thresholded normalized cumulative optical flow.

Frame 0 is always the first keyframe. Candidates are scored by the mean
flow magnitude against the current reference keyframe; a candidate that
reaches the threshold becomes the new reference. If `fallback_window`
consecutive candidates all fall short, the best-scoring one of that window
(earliest on ties) is promoted and scanning resumes after the window.
"""

from dataclasses import dataclass, field

from .flow import FlowParams, farneback_flow, mean_flow_magnitude
from .imgcore import to_grayscale


@dataclass
class KeyframeSelection:
    indices: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def __post_init__(self):
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("keyframe indices must be strictly increasing")


def select_keyframes(frames, threshold=20.0, fallback_window=15,
                     params=None, score_fn=None):
    """Scan a frame sequence and return the selected keyframe indices.

    `score_fn(ref_frame, candidate_frame) -> pixels` defaults to the mean
    Farneback flow magnitude and is injectable for testing.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame sequence")
    if threshold <= 0 or fallback_window < 1:
        raise ValueError("threshold and fallback window must be positive")
    if score_fn is None:
        params = params or FlowParams()

        def score_fn(ref, cand):
            return mean_flow_magnitude(
                farneback_flow(to_grayscale(ref), to_grayscale(cand), params))

    selection = KeyframeSelection([0], [0.0])
    ref = frames[0]
    window = []        # (score, index) of consecutive below-threshold candidates
    i = 1
    while i < len(frames):
        score = float(score_fn(ref, frames[i]))
        if score >= threshold:
            selection.indices.append(i)
            selection.scores.append(score)
            ref = frames[i]
            window = []
            i += 1
            continue
        window.append((score, i))
        if len(window) >= fallback_window:
            best_score, best_idx = max(window, key=lambda si: (si[0], -si[1]))
            selection.indices.append(best_idx)
            selection.scores.append(best_score)
            ref = frames[best_idx]
            window = []
        i += 1
    return selection
