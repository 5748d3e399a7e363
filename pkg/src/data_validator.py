# src/data_validator.py
import logging
from datetime import datetime

import numpy as np
import pandas as pd

from config import SynthConfig


class VideoValidator:
    def __init__(self, config: SynthConfig, drift_tolerance: float = 1e-4):
        self.config = config
        self.drift_tolerance = drift_tolerance
        self.validation_errors = []
        self.checked = 0
        self.logger = logging.getLogger(__name__)

    def validate_video(self, video, index: int = None):
        """Check one SynthVideo against the generator's invariants"""
        c = self.config
        self.checked += 1
        mask = np.asarray(video.informative_mask, dtype=bool)
        track = np.asarray(video.truth_track, dtype=np.float64)
        present = ~np.isnan(track).any(axis=1)
        checks = {
            'frame_shape': video.frames.shape == (c.T0, c.C, c.H, c.W),
            'frames_finite': bool(np.all(np.isfinite(video.frames))),
            'label_in_range': 0 <= int(video.label) < c.num_classes,
            'mask_length': mask.shape == (c.T0,),
            'informative_count': int(mask.sum()) == c.informative_frames,
            'truth_matches_mask': mask.shape == present.shape and bool(np.array_equal(mask, present)),
            'glyph_inside_frame': self._inside(track[present]),
            'drift_smooth': self._smooth(track, mask),
            'signal_floor': c.glyph_intensity >= 3 * c.noise_std,
        }
        if not c.scattered and mask.any():
            run = np.flatnonzero(mask)
            checks['informative_contiguous'] = bool(run[-1] - run[0] + 1 == run.size)

        if not all(checks.values()):
            failed_checks = [k for k, v in checks.items() if not v]
            self.validation_errors.append({
                'video': index,
                'failed_checks': failed_checks,
                'timestamp': datetime.now().isoformat()
            })
            self.logger.warning(f"Video {index} failed validation: {failed_checks}")
            return False
        return True

    def _inside(self, rows: np.ndarray) -> bool:
        if rows.size == 0:
            return True
        cx, cy, h, w = rows.T
        eps = 1e-4
        return bool(np.all(cx - w / 2 >= -eps) and np.all(cx + w / 2 <= self.config.W + eps)
                    and np.all(cy - h / 2 >= -eps) and np.all(cy + h / 2 <= self.config.H + eps))

    def _smooth(self, track: np.ndarray, mask: np.ndarray) -> bool:
        idx = np.flatnonzero(mask)
        for a, b in zip(idx[:-1], idx[1:]):
            if b != a + 1:
                continue
            step = np.linalg.norm(track[b, :2] - track[a, :2])
            if step > self.config.drift + self.drift_tolerance:
                return False
        return True

    def validate_dataset(self, dataset):
        valid_count = sum(1 for i, video in enumerate(dataset.videos) if self.validate_video(video, i))
        total = len(dataset.videos)
        labels = pd.Series(dataset.labels)
        counts = labels.value_counts().reindex(range(self.config.num_classes), fill_value=0)
        expected = total / self.config.num_classes
        bound = 3 * np.sqrt(total / self.config.num_classes)
        return {
            'valid_count': valid_count,
            'invalid_count': total - valid_count,
            'total_processed': total,
            'validity_rate': valid_count / total if total else 0,
            'label_counts': {int(k): int(v) for k, v in counts.items()},
            'label_balance_ok': bool((counts - expected).abs().max() <= bound) if total else True,
        }

    def get_validation_report(self):
        error_patterns = {}
        for error in self.validation_errors:
            for check in error['failed_checks']:
                error_patterns[check] = error_patterns.get(check, 0) + 1
        errors = len(self.validation_errors)
        return {
            'summary': {
                'total_checked': self.checked,
                'errors_count': errors,
                'error_rate': errors / self.checked if self.checked else 0,
            },
            'error_breakdown': error_patterns,
            'sample_errors': self.validation_errors[:5]
        }
