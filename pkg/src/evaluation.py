"""
Held-out evaluation: per-step predictions for every video, accuracy after each
number of processed frames, and policy quality against the planted truth.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from conditional_exit import EvalRecord
from data_generator import SynthDataset
from model import AdaFocusModel
from processing.policy_analytics import policy_quality

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ('eval_accuracy', 'center_error', 'iou', 'recall')


@dataclass
class EvalResult:
    records: List[EvalRecord]
    local_specs: np.ndarray     # (N, T_L, 4)
    selected: np.ndarray        # (N, T_L)

    @property
    def probs(self) -> np.ndarray:
        return np.stack([r.probs for r in self.records])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])

    def step_accuracies(self) -> np.ndarray:
        """Accuracy of the prediction after t = 1..T_L steps"""
        return (self.probs.argmax(axis=2) == self.labels[:, None]).mean(axis=0)

    def step_table(self) -> pd.DataFrame:
        acc = self.step_accuracies()
        return pd.DataFrame({'frames': np.arange(1, acc.size + 1), 'accuracy': acc})


class Evaluator:
    def __init__(self, dataset: SynthDataset, threads: int = 1):
        self.dataset = dataset
        self.threads = max(1, threads)
        self.logger = logging.getLogger("Evaluator")

    def run(self, model: AdaFocusModel) -> EvalResult:
        videos = self.dataset.videos

        def predict_one(index: int):
            trace = model.predict(videos[index].frames[None])
            return trace.probs[0], trace.local_specs[0], trace.selected[0]

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                outputs = list(pool.map(predict_one, range(len(videos))))
        else:
            outputs = [predict_one(i) for i in range(len(videos))]
        records = [EvalRecord.from_probs(probs, video.label) for (probs, _, _), video in zip(outputs, videos)]
        return EvalResult(records,
                          np.stack([o[1] for o in outputs]),
                          np.stack([o[2] for o in outputs]))

    def scores(self, model: AdaFocusModel) -> Dict[str, float]:
        result = self.run(model)
        quality = policy_quality(result.local_specs, result.selected, self.dataset.videos)
        return {'eval_accuracy': float(result.step_accuracies()[-1]), **quality}

    def as_callback(self) -> Callable[[AdaFocusModel], Dict[str, float]]:
        return self.scores


def summarize(result: EvalResult, quality: Dict[str, float]) -> Dict[str, float]:
    summary = {f'accuracy_t{t + 1}': float(a) for t, a in enumerate(result.step_accuracies())}
    summary['videos'] = len(result.records)
    summary.update(quality)
    return summary
