import csv
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from src.models.data_models import AteReport, CameraPose, ProcessingError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
METRIC_INTERVAL = 5


def associate(first: Sequence[float], second: Sequence[float], tolerance: float = 0.02) -> List[Tuple[int, int]]:
    """Greedy one-to-one timestamp matching, closest pairs first.

    Returns (index_in_first, index_in_second) pairs sorted by the first index.
    """
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if len(first) == 0 or len(second) == 0:
        return []
    order = np.argsort(second, kind="stable")
    sorted_second = second[order]
    lo = np.searchsorted(sorted_second, first - tolerance, side="left")
    hi = np.searchsorted(sorted_second, first + tolerance, side="right")

    candidates = []
    for i in range(len(first)):
        for k in range(lo[i], hi[i]):
            j = int(order[k])
            diff = abs(first[i] - second[j])
            if diff <= tolerance + 1e-12:
                candidates.append((diff, i, j))
    candidates.sort()

    used_first, used_second, matches = set(), set(), []
    for _, i, j in candidates:
        if i in used_first or j in used_second:
            continue
        used_first.add(i)
        used_second.add(j)
        matches.append((i, j))
    return sorted(matches)


class Evaluator:
    """Trajectory and image quality metrics."""

    def __init__(self, association_tolerance: float = 0.02, with_scale: bool = False):
        self.association_tolerance = association_tolerance
        self.with_scale = with_scale

    # -------------------------------------------------------------- trajectory

    @staticmethod
    def rigid_alignment(model: np.ndarray, data: np.ndarray,
                        with_scale: bool = False) -> Tuple[np.ndarray, np.ndarray, float]:
        """Least-squares (R, t, s) with model ≈ s R data + t."""
        model = np.asarray(model, dtype=np.float64)
        data = np.asarray(data, dtype=np.float64)
        mu_model, mu_data = model.mean(axis=0), data.mean(axis=0)
        model_c, data_c = model - mu_model, data - mu_data

        correlation = model_c.T @ data_c / len(model)
        u, d, vt = np.linalg.svd(correlation)
        s = np.eye(3)
        if np.linalg.det(u) * np.linalg.det(vt) < 0:
            s[2, 2] = -1.0
        rotation = u @ s @ vt
        scale = 1.0
        if with_scale:
            variance = np.mean(np.sum(data_c ** 2, axis=1))
            scale = float(np.trace(np.diag(d) @ s) / variance) if variance > 0 else 1.0
        translation = mu_model - scale * rotation @ mu_data
        return rotation, translation, scale

    @staticmethod
    def error_statistics(errors: np.ndarray) -> Tuple[float, float, float]:
        """(rmse, std, mean) of per-frame errors."""
        errors = np.asarray(errors, dtype=np.float64)
        return float(np.sqrt(np.mean(errors ** 2))), float(np.std(errors)), float(np.mean(errors))

    def align_and_ate(self, estimated: Sequence[Tuple[float, CameraPose]],
                      groundtruth: Sequence[Tuple[float, CameraPose]]) -> AteReport:
        """ATE of camera centres after rigid alignment of the estimate onto the ground truth."""
        matches = associate([t for t, _ in estimated], [t for t, _ in groundtruth], self.association_tolerance)
        if len(matches) < 2:
            raise ProcessingError(f"ATE needs at least 2 matched poses, found {len(matches)}", "InputError")

        est = np.array([estimated[i][1].camera_center for i, _ in matches])
        ref = np.array([groundtruth[j][1].camera_center for _, j in matches])
        rotation, translation, scale = self.rigid_alignment(ref, est, self.with_scale)
        aligned = scale * est @ rotation.T + translation
        errors = np.linalg.norm(ref - aligned, axis=1)
        if not np.all(np.isfinite(errors)):
            raise ProcessingError("Non-finite trajectory errors", "NumericsError")

        rmse, std, mean = self.error_statistics(errors)
        logger.info("ATE over %d poses: rmse %.4f m, std %.4f m", len(matches), rmse, std)
        return AteReport(rmse=rmse, std=std, mean=mean, errors=errors,
                         timestamps=np.array([estimated[i][0] for i, _ in matches]),
                         alignment=CameraPose(rotation, translation), scale=scale)

    # ------------------------------------------------------------------ images

    @staticmethod
    def psnr(rendered: np.ndarray, reference: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> float:
        rendered = np.asarray(rendered, dtype=np.float64)
        reference = np.asarray(reference, dtype=np.float64)
        if rendered.shape != reference.shape:
            raise ProcessingError(f"Image shapes differ: {rendered.shape} vs {reference.shape}", "InputError")
        if valid_mask is None:
            valid_mask = np.ones(rendered.shape[:2], dtype=bool)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if not valid_mask.any():
            raise ProcessingError("PSNR over an empty mask", "InputError")
        mse = float(np.mean((rendered[valid_mask] - reference[valid_mask]) ** 2))
        if mse <= 0.0:
            return PSNR_CAP_DB
        return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))

    @staticmethod
    def _grayscale(image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        return image.mean(axis=2) if image.ndim == 3 else image

    def ssim_map(self, rendered: np.ndarray, reference: np.ndarray) -> np.ndarray:
        """SSIM at every window centre whose 11 x 11 window lies inside the image."""
        a, b = self._grayscale(rendered), self._grayscale(reference)
        if a.shape != b.shape:
            raise ProcessingError(f"Image shapes differ: {a.shape} vs {b.shape}", "InputError")
        if min(a.shape) < SSIM_WINDOW:
            raise ProcessingError(f"Image {a.shape} is smaller than the {SSIM_WINDOW}px SSIM window", "InputError")

        def blur(image):
            return cv2.GaussianBlur(image, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA,
                                    borderType=cv2.BORDER_REFLECT)

        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a ** 2
        var_b = blur(b * b) - mu_b ** 2
        cov = blur(a * b) - mu_a * mu_b
        score = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                 / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))
        r = SSIM_WINDOW // 2
        return score[r:-r, r:-r]

    def ssim(self, rendered: np.ndarray, reference: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> float:
        score = self.ssim_map(rendered, reference)
        if valid_mask is None:
            return float(np.mean(score))
        r = SSIM_WINDOW // 2
        inner = np.asarray(valid_mask, dtype=bool)[r:-r, r:-r]
        if not inner.any():
            raise ProcessingError("SSIM over an empty mask", "InputError")
        return float(np.mean(score[inner]))

    @staticmethod
    def metric_schedule(frame_index: int) -> bool:
        return frame_index % METRIC_INTERVAL == 0

    @staticmethod
    def load_lpips_scores(path: str) -> Dict[int, float]:
        """Reads externally computed LPIPS values from a (frame, lpips) CSV."""
        if not os.path.exists(path):
            raise ProcessingError(f"LPIPS score file not found: {path}", "IOError")
        scores = {}
        with open(path, newline="") as handle:
            for line_number, row in enumerate(csv.DictReader(handle), start=2):
                try:
                    scores[int(row["frame"])] = float(row["lpips"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProcessingError(f"{path}:{line_number}: malformed LPIPS row ({exc})", "ParseError")
        return scores
