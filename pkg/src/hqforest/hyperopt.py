"""Random hyperparameter search with a sliding-window stopping rule.

A trial's combined score is the mean of macro precision and macro recall
over the foreground classes. The search stops after the first completed
trial whose score does not strictly exceed the best score among the
previous ``min(window, completed)`` completed trials, or at ``max_trials``.
Failed trials are logged and never trigger a stop.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import BadConfig, HQForestError, NoForegroundClasses
from .forest import Hyperparams

WINDOW = 20
MAX_TRIALS = 200


def default_grids(n_lay=5) -> Dict[str, list]:
    return {
        "d1": list(range(1, 11)),
        "g_tree": [10.0 ** e for e in range(-6, 0)],
        "lambda": [round(0.01 * k, 2) for k in range(1, 100)],
        "n_lay": n_lay,
    }


def validate_grids(grids):
    for key in ("d1", "g_tree", "lambda"):
        if key not in grids or len(grids[key]) == 0:
            raise BadConfig(f"grid {key!r} missing or empty")
    return grids


def precision_recall_macro(predicted, reference, foreground: Sequence[int]):
    """One-vs-rest precision and recall averaged over ``foreground`` classes.

    A class present in the references but never predicted has precision 0;
    a class absent from both has precision and recall 1.
    """
    pred = np.asarray(predicted).ravel()
    ref = np.asarray(reference).ravel()
    if pred.shape != ref.shape:
        raise ValueError("predicted and reference labels are not aligned")
    fg = list(foreground)
    if not fg:
        raise NoForegroundClasses("no foreground classes to average over")
    precisions, recalls = [], []
    for c in fg:
        p_c, r_c = pred == c, ref == c
        tp = np.count_nonzero(p_c & r_c)
        n_pred, n_ref = np.count_nonzero(p_c), np.count_nonzero(r_c)
        if n_pred:
            precisions.append(tp / n_pred)
        else:
            precisions.append(1.0 if n_ref == 0 else 0.0)
        recalls.append(tp / n_ref if n_ref else 1.0)
    return float(np.mean(precisions)), float(np.mean(recalls))


@dataclass
class TrialRecord:
    index: int
    hyperparams: dict
    macro_precision: Optional[float]
    macro_recall: Optional[float]
    seconds: float
    seed: int
    error: Optional[str] = None

    @property
    def failed(self):
        return self.error is not None

    @property
    def score(self):
        if self.failed:
            return None
        return (self.macro_precision + self.macro_recall) / 2.0

    def to_dict(self):
        return {"index": self.index, "hyperparams": self.hyperparams,
                "macro_precision": self.macro_precision, "macro_recall": self.macro_recall,
                "score": self.score, "seconds": self.seconds, "seed": self.seed,
                "error": self.error}


def should_stop(scores: Sequence[float], window=WINDOW) -> bool:
    """Whether the newest score fails to beat the best of the preceding window."""
    if len(scores) < 2:
        return False
    prev = scores[max(0, len(scores) - 1 - window):-1]
    return not scores[-1] > max(prev)


def sample_hyperparams(grids, rng, seed) -> Hyperparams:
    n_lay = int(grids.get("n_lay", 5))
    d1 = int(rng.choice(grids["d1"]))
    g = float(rng.choice(grids["g_tree"]))
    lams = [float(rng.choice(grids["lambda"])) for _ in range(n_lay)]
    return Hyperparams(d1=d1, g_tree=g, lambdas=lams, n_lay=n_lay, seed=seed)


@dataclass
class SearchResult:
    best_model: object
    best_trial: Optional[TrialRecord]
    trials: List[TrialRecord] = field(default_factory=list)
    stopped_early: bool = False


def random_search(train_fn: Callable, evaluate_fn: Callable, grids, rng,
                  max_trials=MAX_TRIALS, window=WINDOW, on_trial=None) -> SearchResult:
    """Sample, train and score hyperparameters until the stopping rule fires.

    ``train_fn(hyperparams)`` returns a model and ``evaluate_fn(model)``
    returns ``(macro_precision, macro_recall)`` on the validation split.
    Package errors raised by either mark the trial failed.
    """
    validate_grids(grids)
    if max_trials < 1:
        raise BadConfig("max_trials must be >= 1")
    trials: List[TrialRecord] = []
    scores: List[float] = []
    best_model, best_trial = None, None
    stopped = False
    for i in range(max_trials):
        seed = int(rng.integers(0, 2 ** 31 - 1))
        hp = sample_hyperparams(grids, rng, seed)
        t0 = time.perf_counter()
        try:
            model = train_fn(hp)
            p, r = evaluate_fn(model)
            rec = TrialRecord(i, hp.to_dict(), float(p), float(r),
                              time.perf_counter() - t0, seed)
        except HQForestError as exc:
            rec = TrialRecord(i, hp.to_dict(), None, None, time.perf_counter() - t0, seed,
                              f"{type(exc).__name__}: {exc}")
            model = None
        trials.append(rec)
        if on_trial is not None:
            on_trial(rec)
        if rec.failed:
            continue
        if best_trial is None or rec.score > best_trial.score:
            best_model, best_trial = model, rec
        scores.append(rec.score)
        if should_stop(scores, window):
            stopped = True
            break
    return SearchResult(best_model, best_trial, trials, stopped)
